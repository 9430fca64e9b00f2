#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "egd/corpus.hpp"

namespace egd {

// Undirected simple graph over items 1..N linking items that appear next to
// each other in some training sequence. Neighbor lists are sorted ascending.
class GlobalGraph {
 public:
  GlobalGraph() = default;
  // Builds from an explicit undirected edge list; duplicates and self-loops
  // are dropped.
  GlobalGraph(std::size_t n_items, std::span<const std::pair<ItemIndex, ItemIndex>> edges);

  std::size_t n_items() const noexcept { return n_items_; }
  std::size_t edge_count() const noexcept { return edge_count_; }

  // Canonical sorted neighbor list; throws for items outside [1, N].
  std::span<const ItemIndex> neighbors_of(ItemIndex item) const;
  const std::vector<std::vector<ItemIndex>>& adjacency() const noexcept { return adjacency_; }

  // Undirected edges as (i, j) with i < j, sorted.
  std::vector<std::pair<ItemIndex, ItemIndex>> edges() const;

  friend bool operator==(const GlobalGraph&, const GlobalGraph&) = default;

 private:
  std::size_t n_items_ = 0;
  std::size_t edge_count_ = 0;
  std::vector<std::vector<ItemIndex>> adjacency_;  // index 0 unused
};

GlobalGraph build_global_graph(std::span<const std::vector<ItemIndex>> sequences, std::size_t n_items);

// Training sequences of every retained user, in user order.
std::vector<std::vector<ItemIndex>> training_sequences(const LeaveOneOut& split);

// Keeps at most `max_degree` neighbors per item by seeded uniform subsampling
// of each list; an edge survives only if both endpoints keep it.
GlobalGraph cap_degree(const GlobalGraph& graph, std::size_t max_degree, std::uint64_t seed);

// graph.tsv: header "#items=N #edges=E" then "i<TAB>j" per edge with i < j.
void write_graph(const std::filesystem::path& file, const GlobalGraph& graph);
GlobalGraph read_graph(const std::filesystem::path& file);

}  // namespace egd
