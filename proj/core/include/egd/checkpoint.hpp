#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include "egd/model.hpp"

namespace egd {

struct CheckpointMeta {
  HyperParams hp;
  Ablation ablation = Ablation::Full;
  std::size_t epoch = 0;
  std::string config_digest;
};

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
};

// Directory layout: manifest.json (hyperparameters, ablation, shapes) plus one
// raw little-endian float64 file per parameter. The channel matrices are
// stored together as a K x d_in x d_channel array.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace egd
