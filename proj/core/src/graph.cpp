#include "egd/graph.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>

#include "egd/error.hpp"
#include "egd/rng.hpp"

namespace egd {

GlobalGraph::GlobalGraph(std::size_t n_items, std::span<const std::pair<ItemIndex, ItemIndex>> edges)
    : n_items_(n_items), adjacency_(n_items + 1) {
  for (auto [a, b] : edges) {
    if (a < 1 || a > n_items || b < 1 || b > n_items) {
      throw Error("graph", "edge (" + std::to_string(a) + ", " + std::to_string(b) + ") outside item range [1, " +
                               std::to_string(n_items) + "]");
    }
    if (a == b) continue;
    adjacency_[a].push_back(b);
    adjacency_[b].push_back(a);
  }
  std::size_t degree_sum = 0;
  for (auto& list : adjacency_) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
    degree_sum += list.size();
  }
  edge_count_ = degree_sum / 2;
}

std::span<const ItemIndex> GlobalGraph::neighbors_of(ItemIndex item) const {
  if (item < 1 || item > n_items_) {
    throw Error("graph", "item " + std::to_string(item) + " outside [1, " + std::to_string(n_items_) + "]");
  }
  return adjacency_[item];
}

std::vector<std::pair<ItemIndex, ItemIndex>> GlobalGraph::edges() const {
  std::vector<std::pair<ItemIndex, ItemIndex>> out;
  out.reserve(edge_count_);
  for (ItemIndex i = 1; i <= n_items_; ++i)
    for (ItemIndex j : adjacency_[i])
      if (i < j) out.emplace_back(i, j);
  return out;
}

GlobalGraph build_global_graph(std::span<const std::vector<ItemIndex>> sequences, std::size_t n_items) {
  std::vector<std::pair<ItemIndex, ItemIndex>> pairs;
  for (const auto& seq : sequences) {
    for (ItemIndex i : seq) {
      if (i < 1 || i > n_items) {
        throw Error("graph", "item index " + std::to_string(i) + " outside [1, " + std::to_string(n_items) + "]");
      }
    }
    for (std::size_t t = 1; t < seq.size(); ++t) pairs.emplace_back(seq[t - 1], seq[t]);
  }
  return GlobalGraph(n_items, pairs);
}

std::vector<std::vector<ItemIndex>> training_sequences(const LeaveOneOut& split) {
  std::vector<std::vector<ItemIndex>> out;
  out.reserve(split.splits.size());
  for (const auto& [u, view] : split.splits) out.push_back(view.train);
  return out;
}

GlobalGraph cap_degree(const GlobalGraph& graph, std::size_t max_degree, std::uint64_t seed) {
  std::vector<std::vector<ItemIndex>> kept(graph.n_items() + 1);
  for (ItemIndex i = 1; i <= graph.n_items(); ++i) {
    std::vector<ItemIndex> list(graph.neighbors_of(i).begin(), graph.neighbors_of(i).end());
    if (list.size() > max_degree) {
      Rng rng = make_rng(seed, i);
      seeded_shuffle(list, rng);
      list.resize(max_degree);
      std::sort(list.begin(), list.end());
    }
    kept[i] = std::move(list);
  }
  std::vector<std::pair<ItemIndex, ItemIndex>> edges;
  for (ItemIndex i = 1; i <= graph.n_items(); ++i)
    for (ItemIndex j : kept[i])
      if (i < j && std::binary_search(kept[j].begin(), kept[j].end(), i)) edges.emplace_back(i, j);
  return GlobalGraph(graph.n_items(), edges);
}

void write_graph(const std::filesystem::path& file, const GlobalGraph& graph) {
  std::ofstream out(file);
  if (!out) throw Error("graph", "cannot write " + file.string());
  out << "#items=" << graph.n_items() << " #edges=" << graph.edge_count() << '\n';
  for (auto [i, j] : graph.edges()) out << i << '\t' << j << '\n';
}

GlobalGraph read_graph(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("graph", "cannot open " + file.string());
  std::string header;
  std::getline(in, header);
  std::size_t n_items = 0, n_edges = 0;
  if (std::sscanf(header.c_str(), "#items=%zu #edges=%zu", &n_items, &n_edges) != 2) {
    throw Error("graph", file.string() + ":1: expected header '#items=N #edges=E'");
  }
  std::vector<std::pair<ItemIndex, ItemIndex>> edges;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ItemIndex i = 0, j = 0;
    if (!(ss >> i >> j) || i >= j) throw Error("graph", file.string() + ":" + std::to_string(lineno) + ": expected 'i<TAB>j' with i < j");
    edges.emplace_back(i, j);
  }
  GlobalGraph g(n_items, edges);
  if (g.edge_count() != n_edges) {
    throw Error("graph", file.string() + ": header declares " + std::to_string(n_edges) + " edges, found " +
                             std::to_string(g.edge_count()));
  }
  return g;
}

}  // namespace egd
