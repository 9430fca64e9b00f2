#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egd/autodiff.hpp"
#include "egd/corpus.hpp"
#include "egd/graph.hpp"
#include "egd/rng.hpp"
#include "egd/tensor.hpp"

namespace egd {

enum class Activation { Tanh, Sigmoid };

// Which parts of the network take part in the forward pass.
enum class Ablation {
  Full,        // global layer + SA-VAE + sliding window
  GlobalOnly,  // global layer only
  LocalOnly,   // SA-VAE + sliding window, no global layer
  SaVaeOnly,   // global layer + SA-VAE, no window aggregation
  SliWinOnly,  // global layer + sliding window over raw embeddings
};

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);

bool uses_global(Ablation a);
bool uses_local(Ablation a);
bool uses_sa_vae(Ablation a);

struct HyperParams {
  std::size_t channels = 5;     // K
  std::size_t d_in = 100;
  std::size_t d_channel = 20;
  std::size_t max_len = 200;    // T
  std::size_t window = 4;       // L
  double beta = 0.1;
  double dropout = 0.5;
  double lr = 0.002;
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  Activation activation = Activation::Tanh;

  std::size_t concat_dim() const { return channels * d_channel; }
  void validate() const;
};

// Every learnable array. Weight matrices act on row vectors (x * W).
struct ModelParams {
  Tensor item_embed;              // (N + 1) x d_in, row 0 is padding
  Tensor pos_embed;               // T x d_in
  std::vector<Tensor> channel_W;  // K of d_in x d_channel
  Tensor attn_WQ, attn_WK, attn_WV;        // d_in x d_in
  Tensor vae_mu_W, vae_mu_b;               // d_in x d_in, 1 x d_in
  Tensor vae_logvar_W, vae_logvar_b;       // d_in x d_in, 1 x d_in
  Tensor ln_gain, ln_bias;                 // 1 x d_in
  Tensor combine_Wg, combine_Wl;           // (K * d_channel) x d_in

  static ModelParams zeros(const HyperParams& hp, std::size_t n_items);
  // Xavier-uniform weights, N(0, 0.01^2) embeddings, log-variance bias -2.
  static ModelParams initialize(const HyperParams& hp, std::size_t n_items, std::uint64_t seed);

  std::size_t n_items() const { return item_embed.rows() - 1; }

  // Visits (name, tensor) for every parameter in a fixed order. Channel
  // matrices are named "channel_W.<k>".
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;

  void zero_padding_row();
  void set_zero();
  bool all_finite() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Parameters placed on a tape, either as differentiable leaves feeding a
// gradient structure or as constants.
struct ParamVars {
  Var item_embed, pos_embed;
  std::vector<Var> channel_W;
  Var attn_WQ, attn_WK, attn_WV;
  Var vae_mu_W, vae_mu_b, vae_logvar_W, vae_logvar_b;
  Var ln_gain, ln_bias;
  Var combine_Wg, combine_Wl;

  static ParamVars bind(Tape& tape, const ModelParams& params, ModelParams* grads);
};

// ---- channel-aware aggregation --------------------------------------------

struct ChannelAggregation {
  Var z;                  // rows x (K * d_channel), every channel block l2-normalized
  std::vector<Var> raw;   // per channel, rows x d_channel, before normalization
  Var alpha;              // pairs x K channel probabilities
};

// For every (target, source) pair, channel probabilities are a softmax over k
// of <act(x_t W_k), act(x_s W_k)>; each target row accumulates
// act(x_t W_k) + sum_pairs alpha_k * act(x_s W_k) and is normalized per
// channel.
ChannelAggregation channel_aggregate(Var x, const std::vector<Var>& channel_W, std::span<const std::size_t> targets,
                                     std::span<const std::size_t> sources, Activation act);

// Directed pair lists for the two aggregation variants.
struct PairList {
  std::vector<std::size_t> targets;
  std::vector<std::size_t> sources;
};
// Both directions of every graph edge.
PairList graph_pairs(const GlobalGraph& graph);
// (i, j) for max(0, i - L + 1) <= j < i over a compact sequence of n rows.
PairList window_pairs(std::size_t n, std::size_t window);

// ---- per-window forward ----------------------------------------------------

struct DropoutConfig {
  double rate = 0.0;
  Rng* rng = nullptr;  // null or rate 0 disables dropout
  bool active() const { return rng != nullptr && rate > 0.0; }
};

struct SequenceForward {
  Var h;          // n x d_in embedding + position (after dropout)
  Var h_s;        // n x d_in self-attention block output
  Var mu, log_var;
  Var z_v;        // n x d_in latent sample (equals h in sliwin-only)
  Var z_l;        // n x (K * d_channel) local representation
  Tensor attention;  // n x n attention weights (empty when SA-VAE is off)
  bool has_vae = false;
};

// Local path over the non-pad items of one window, in time order. `epsilon`
// is n x d_in.
SequenceForward sequence_forward(const ParamVars& p, const HyperParams& hp, Ablation ablation,
                                 std::span<const ItemIndex> items, const Tensor& epsilon, DropoutConfig dropout);

// Sequential representation z (n x d_in) per position, from the global rows
// of each position's item and the local rows.
Var combine(const ParamVars& p, Ablation ablation, const std::optional<Var>& global_rows,
            const std::optional<Var>& local_rows);

// ---- loss over a batch of causal windows ----------------------------------

// Input items (compact, time order) and the next item for every position.
struct TrainingWindow {
  UserIndex user = 0;
  std::vector<ItemIndex> items;
  std::vector<ItemIndex> targets;
};

// Splits a training sequence into causal windows of at most `max_len`
// inputs, walking back from the most recent item.
std::vector<TrainingWindow> make_training_windows(UserIndex user, std::span<const ItemIndex> sequence,
                                                  std::size_t max_len);

struct BatchLoss {
  Var loss;          // recon + beta * kl, averaged over positions
  Var recon;         // averaged over positions
  Var kl;            // averaged over positions
  std::size_t positions = 0;
};

struct BatchNoise {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  bool sample_latent = true;   // false uses epsilon = 0
  DropoutConfig dropout;
};

BatchLoss batch_loss(const ParamVars& p, const HyperParams& hp, Ablation ablation, const GlobalGraph& graph,
                     std::span<const TrainingWindow> windows, const BatchNoise& noise);

// ---- plain-tensor entry points --------------------------------------------

// K channel probabilities for one item pair.
std::vector<double> edge_channel_probs(const Tensor& h_i, const Tensor& h_j, const std::vector<Tensor>& channel_W,
                                       Activation act = Activation::Tanh);

struct GlobalRepresentation {
  Tensor z;                      // (N + 1) x (K * d_channel)
  std::vector<Tensor> raw;       // per channel, before normalization
};

GlobalRepresentation global_aggregate(const GlobalGraph& graph, const Tensor& item_embed,
                                      const std::vector<Tensor>& channel_W, Activation act = Activation::Tanh);

struct SaVaeOutput {
  Tensor h_s, mu, sigma, z_v;  // n x d_in over the non-pad positions
  Tensor attention;            // T x T, zero at pad rows and columns
  std::size_t pad = 0;
};

SaVaeOutput sa_vae_forward(const PaddedWindow& window, const ModelParams& params, const HyperParams& hp,
                           const GaussianSample& sample, DropoutConfig dropout = {});

Tensor local_window_aggregate(const Tensor& z_v, const std::vector<Tensor>& channel_W, std::size_t window,
                              Activation act = Activation::Tanh);

// y_hat over items 1..N (1 x N) from one position's global and local rows.
Tensor combine_and_score(const Tensor& z_g, const Tensor& z_l, const Tensor& combine_Wg, const Tensor& combine_Wl,
                         const Tensor& item_embed);

struct ElboTerms {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// target is an item index in [1, N]; y_hat is 1 x N over items 1..N.
ElboTerms elbo_loss(const Tensor& y_hat, ItemIndex target, const Tensor& mu, const Tensor& sigma, double beta);

// Full forward for one window with every intermediate, dropout off.
struct ForwardTrace {
  Tensor z_g;       // global row of the last input item
  Tensor h_s, mu_v, sigma_v, z_v;
  Tensor z_l;       // local rows, n x (K * d_channel)
  Tensor z;         // final position, 1 x d_in
  Tensor y_hat;     // 1 x N
};

ForwardTrace trace_window(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                          const GlobalGraph& graph, std::span<const ItemIndex> items, const GaussianSample& sample);

// Scores for every position of a sequence (n x N), recomputing the whole
// forward pass on each prefix and keeping only its last row. Used to check
// that the single-pass path never lets a position see later items.
Tensor prefix_scores_slow(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                          const GlobalGraph& graph, std::span<const ItemIndex> items, const Tensor& epsilon);
// Same scores from one masked pass.
Tensor causal_scores(const ModelParams& params, const HyperParams& hp, Ablation ablation, const GlobalGraph& graph,
                     std::span<const ItemIndex> items, const Tensor& epsilon);

}  // namespace egd
