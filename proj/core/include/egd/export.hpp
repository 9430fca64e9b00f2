#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "egd/graph.hpp"
#include "egd/model.hpp"
#include "egd/tensor.hpp"

namespace egd {

// argmax_k of the l2 norm of each row's channel-k block, taken before the
// per-channel normalization. `raw` holds one rows x d_channel tensor per
// channel. Ties go to the lower channel.
std::vector<std::size_t> channel_assignment(const std::vector<Tensor>& raw);

// Mean-centered projection onto the top-2 covariance eigenvectors. Each
// eigenvector's sign is fixed so its largest-magnitude component is positive.
struct Projection {
  Tensor coords;      // rows x 2
  Tensor components;  // 2 x cols
  std::vector<double> variances;
};
Projection pca_2d(const Tensor& x);

struct ItemExport {
  Tensor embeddings;                 // N x (K * d_channel), global rows of items 1..N
  std::vector<std::size_t> channel;  // N
  Projection projection;
};

ItemExport export_items(const ModelParams& params, const HyperParams& hp, const GlobalGraph& graph);

// embeddings.tsv, channels.tsv, pca2d.tsv; `item_ids[i]` labels item i
// (index 0 unused).
void write_item_export(const std::filesystem::path& dir, const ItemExport& ex,
                       const std::vector<std::string>& item_ids);

}  // namespace egd
