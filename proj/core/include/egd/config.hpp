#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "egd/model.hpp"

namespace egd {

// Flat key=value run configuration. Keys use the CLI flag spelling without
// the leading dashes ("batch-size", "max-len", ...). Lines starting with '#'
// are comments.
class RunConfig {
 public:
  // Every known key with its default value.
  static RunConfig defaults();
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& file);

  static bool is_known_key(const std::string& key);

  // Throws on unknown keys.
  void set(const std::string& key, const std::string& value);
  // Values from `other` win.
  void merge(const RunConfig& other);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const;

  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  // Comma-separated list of seeds.
  std::vector<std::uint64_t> get_seeds(const std::string& key) const;

  HyperParams hyperparams() const;
  Ablation ablation() const;

  // Sorted "key=value" lines.
  std::string serialize() const;
  // FNV-1a over the serialized non-path entries, as 16 hex digits.
  std::string digest() const;
  // Writes serialize() to <dir>/config.txt.
  void write_to(const std::filesystem::path& dir) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace egd
