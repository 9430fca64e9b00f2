#include "egd/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "egd/error.hpp"

namespace egd {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("cli", msg); }

struct KeyDefault {
  const char* key;
  const char* value;
  bool path;
};

// Defaults mirror HyperParams; path keys do not enter the digest.
constexpr KeyDefault kKeys[] = {
    {"channels", "5", false},     {"dim", "100", false},       {"channel-dim", "20", false},
    {"window", "4", false},       {"max-len", "200", false},   {"beta", "0.1", false},
    {"dropout", "0.5", false},    {"lr", "0.002", false},      {"batch-size", "128", false},
    {"epochs", "10", false},      {"seed", "1", false},        {"ablation", "full", false},
    {"activation", "tanh", false}, {"format", "tsv", false},   {"min-count", "", false},
    {"eval-every", "1", false},   {"patience", "0", false},    {"clip-norm", "0", false},
    {"max-degree", "0", false},   {"seeds", "1", false},       {"split", "test", false},
    {"baseline", "", false},      {"input", "", true},         {"data", "", true},
    {"graph", "", true},          {"checkpoint", "", true},    {"out", "", true},
    {"config", "", true},
};

bool is_path_key(const std::string& key) {
  for (const KeyDefault& k : kKeys)
    if (key == k.key) return k.path;
  return false;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  for (const KeyDefault& k : kKeys) c.values_[k.key] = k.value;
  return c;
}

bool RunConfig::is_known_key(const std::string& key) {
  for (const KeyDefault& k : kKeys)
    if (key == k.key) return true;
  return false;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail(origin + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (!is_known_key(key)) fail(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    c.values_[key] = trim(t.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), file.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known_key(key)) fail("unknown config key '" + key + "'");
  values_[key] = value;
}

void RunConfig::merge(const RunConfig& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("missing config key '" + key + "'");
  return it->second;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) fail("'" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const { return get_size(key); }

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  fail("'" + key + "' expects a number, got '" + v + "'");
}

std::vector<std::uint64_t> RunConfig::get_seeds(const std::string& key) const {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(get(key));
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    std::uint64_t s = 0;
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), s);
    if (part.empty() || ec != std::errc() || p != part.data() + part.size())
      fail("'" + key + "' expects comma-separated integers, got '" + get(key) + "'");
    seeds.push_back(s);
  }
  if (seeds.empty()) fail("'" + key + "' is empty");
  return seeds;
}

HyperParams RunConfig::hyperparams() const {
  HyperParams hp;
  hp.channels = get_size("channels");
  hp.d_in = get_size("dim");
  hp.d_channel = get_size("channel-dim");
  hp.window = get_size("window");
  hp.max_len = get_size("max-len");
  hp.beta = get_double("beta");
  hp.dropout = get_double("dropout");
  hp.lr = get_double("lr");
  hp.batch_size = get_size("batch-size");
  hp.epochs = get_size("epochs");
  hp.seed = get_u64("seed");
  hp.activation = parse_activation(get("activation"));
  hp.validate();
  return hp;
}

Ablation RunConfig::ablation() const { return parse_ablation(get("ablation")); }

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string RunConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : values_) {
    if (is_path_key(k)) continue;
    for (char c : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void RunConfig::write_to(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.txt");
  if (!out) fail("cannot write " + (dir / "config.txt").string());
  out << serialize();
}

}  // namespace egd
