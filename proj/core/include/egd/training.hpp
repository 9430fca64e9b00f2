#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "egd/autodiff.hpp"
#include "egd/corpus.hpp"
#include "egd/gradcheck.hpp"
#include "egd/graph.hpp"
#include "egd/model.hpp"

namespace egd {

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ModelParams m, v;
  std::size_t step = 0;

  static AdamState zeros_like(const ModelParams& params);
};

// One bias-corrected Adam update. Throws naming the parameter when a gradient
// entry is not finite (parameters are left untouched in that case). The
// padding embedding row is zero afterwards.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg);

double gradient_norm(const ModelParams& grads);
// Rescales to a global l2 norm of at most `max_norm`; no-op when max_norm <= 0.
void clip_gradients(ModelParams& grads, double max_norm);

// ---- training loop -----------------------------------------------------------

// Causal windows over every user's training prefix, in user order.
std::vector<TrainingWindow> collect_training_windows(const LeaveOneOut& split, std::size_t max_len);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  std::size_t batches = 0;
  double seconds = 0.0;
  std::optional<double> valid_ndcg10;
  std::optional<double> valid_recall10;
};

struct TrainConfig {
  HyperParams hp;
  Ablation ablation = Ablation::Full;
  // Receives checkpoint/ and train_log.jsonl when non-empty.
  std::filesystem::path out_dir;
  std::size_t eval_every = 0;  // epochs between validation runs; 0 disables
  std::size_t patience = 0;    // validation runs without improvement; 0 disables
  double clip_norm = 0.0;
  std::uint64_t eval_seed = 1;
  std::string config_digest;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ModelParams params;  // best validation epoch when validation ran, else last
  std::vector<EpochRecord> history;
  std::optional<std::size_t> best_epoch;
  bool stopped_early = false;
};

struct StepResult {
  double loss = 0.0, recon = 0.0, kl = 0.0;
  std::size_t positions = 0;
};

// Forward, backward and one Adam update on a batch of windows.
StepResult train_step(ModelParams& params, AdamState& state, const HyperParams& hp, Ablation ablation,
                      const GlobalGraph& graph, std::span<const TrainingWindow> batch, const BatchNoise& noise,
                      double clip_norm = 0.0);

TrainResult train(const PreparedData& data, const GlobalGraph& graph, const TrainConfig& cfg,
                  const ModelParams* init = nullptr);

// ---- gradient verification ---------------------------------------------------

struct GradientCheckConfig {
  HyperParams hp = tiny_hyperparams();
  std::size_t n_items = 20;
  std::size_t n_users = 3;
  std::size_t sequence_length = 10;
  std::uint64_t seed = 7;
  Ablation ablation = Ablation::Full;
  // Larger than the checker's default: at h = 1e-5 roundoff in the loss is
  // comparable to 1e-5 of the smallest gradient entries on this instance.
  double h = 3e-5;
  double embed_scale = 0.5;  // embeddings are drawn at this scale for the check
  BackwardHook hook;         // installed on the analytic pass only

  static HyperParams tiny_hyperparams();
};

struct TinyInstance {
  HyperParams hp;
  GlobalGraph graph;
  std::vector<TrainingWindow> windows;
  ModelParams params;
};

TinyInstance make_tiny_instance(const GradientCheckConfig& cfg);

// Analytic gradients of the full batch loss (dropout off, latent noise
// frozen) against central differences on every parameter entry.
GradCheckReport check_model_gradients(const GradientCheckConfig& cfg);

}  // namespace egd
