#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace egd {

// Dense item index; 0 is reserved for padding, real items live in [1, N].
using ItemIndex = std::size_t;
// Dense user index in [0, M).
using UserIndex = std::size_t;

inline constexpr ItemIndex kPadItem = 0;

enum class InputFormat { MovieLensDat, AmazonJsonl, Tsv };

InputFormat parse_input_format(const std::string& name);
std::string to_string(InputFormat format);

struct Interaction {
  ItemIndex item = kPadItem;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// One parsed input row before indexing.
struct RawEvent {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct LoadOptions {
  // Iterative k-core threshold; 0 disables filtering.
  std::size_t min_count = 0;
  // Skip the first line of a tsv file.
  bool tsv_header = false;
};

// Users, items and their chronologically ordered interaction sequences.
class InteractionCorpus {
 public:
  InteractionCorpus() = default;

  // Indexes raw events: ids get dense indices in order of first appearance,
  // each user's events are stably sorted by timestamp.
  static InteractionCorpus from_events(std::span<const RawEvent> events);

  std::size_t n_users() const noexcept { return user_ids_.size(); }
  std::size_t n_items() const noexcept { return item_ids_.size() - 1; }
  std::size_t n_interactions() const noexcept;

  const std::vector<Interaction>& sequence(UserIndex u) const { return sequences_.at(u); }
  std::vector<ItemIndex> item_sequence(UserIndex u) const;
  const std::vector<std::vector<Interaction>>& sequences() const noexcept { return sequences_; }

  const std::string& user_id(UserIndex u) const { return user_ids_.at(u); }
  const std::string& item_id(ItemIndex i) const { return item_ids_.at(i); }
  // Throws if the raw id is unknown.
  UserIndex user_index(const std::string& raw) const;
  ItemIndex item_index(const std::string& raw) const;
  bool has_item(const std::string& raw) const { return item_lookup_.count(raw) != 0; }

  // Adds an item with no interactions (used when reloading prepared data).
  ItemIndex add_item(const std::string& raw);
  UserIndex add_user(const std::string& raw);
  void append(UserIndex u, Interaction event);

 private:
  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_{std::string()};
  std::unordered_map<std::string, UserIndex> user_lookup_;
  std::unordered_map<std::string, ItemIndex> item_lookup_;
  std::vector<std::vector<Interaction>> sequences_;
};

std::vector<RawEvent> parse_events(std::istream& in, InputFormat format, const LoadOptions& options,
                                   const std::string& source = "<stream>");

// Iteratively drops users and items with fewer than `min_count` events until
// every remaining user and item meets the threshold.
std::vector<RawEvent> k_core_filter(std::vector<RawEvent> events, std::size_t min_count);

InteractionCorpus load_interactions(const std::filesystem::path& path, InputFormat format,
                                    const LoadOptions& options = {});

struct SplitView {
  std::vector<ItemIndex> train;
  ItemIndex valid_target = kPadItem;
  ItemIndex test_target = kPadItem;

  friend bool operator==(const SplitView&, const SplitView&) = default;
};

struct LeaveOneOut {
  std::map<UserIndex, SplitView> splits;
  std::size_t dropped_users = 0;
};

// Last item -> test, second-to-last -> validation, the rest -> train. Users
// with fewer than three interactions are dropped and counted.
LeaveOneOut leave_one_out_split(const InteractionCorpus& corpus);

// Left-padded fixed-length input. positions[t] is the position-embedding
// slot of indices[t]: slots count from the first non-pad entry, pads get 0.
struct PaddedWindow {
  std::vector<ItemIndex> indices;
  std::vector<std::size_t> positions;
  ItemIndex target = kPadItem;

  std::size_t pad_count() const;
  std::span<const ItemIndex> items() const;  // the non-pad suffix
  friend bool operator==(const PaddedWindow&, const PaddedWindow&) = default;
};

// Window over the most recent min(|history|, length) items of `history`.
PaddedWindow make_window(std::span<const ItemIndex> history, std::size_t length, ItemIndex target);

// One window per proper prefix of the training sequence, each targeting the
// next item. Empty when the training sequence has fewer than two items.
std::vector<PaddedWindow> make_windows(const SplitView& split, std::size_t length);
std::vector<PaddedWindow> make_windows(std::span<const ItemIndex> sequence, std::size_t length);

struct NegativeSample {
  std::vector<ItemIndex> candidates;  // positive first, then negatives
  std::size_t positive_position = 0;
};

// Draws n distinct negatives uniformly from items outside the user's full
// history (and different from the positive). Deterministic in `seed`.
NegativeSample sample_negatives(const InteractionCorpus& corpus, UserIndex user, ItemIndex positive, std::size_t n,
                                std::uint64_t seed);

struct CorpusStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double mean_sequence_length = 0.0;
  double sparsity = 0.0;
};

CorpusStats corpus_stats(const InteractionCorpus& corpus);

// Prepared corpus directory: items.tsv, train.tsv, valid.tsv, test.tsv.
struct PreparedData {
  InteractionCorpus corpus;  // retained users only
  LeaveOneOut split;
};

PreparedData prepare(const InteractionCorpus& corpus);
void write_prepared(const std::filesystem::path& dir, const PreparedData& data);
PreparedData read_prepared(const std::filesystem::path& dir);

}  // namespace egd
