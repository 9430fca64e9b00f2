#include "egd/model.hpp"

#include <algorithm>
#include <cmath>

#include "egd/error.hpp"
#include "egd/ops.hpp"

namespace egd {

namespace {

[[noreturn]] void fail(const std::string& message) { throw Error("model", message); }

Var activate(Var x, Activation act) { return act == Activation::Tanh ? ad::tanh(x) : ad::sigmoid(x); }

Tensor dropout_mask(std::size_t rows, std::size_t cols, const DropoutConfig& cfg) {
  Tensor mask = Tensor::matrix(rows, cols);
  std::bernoulli_distribution keep(1.0 - cfg.rate);
  const double scale = 1.0 / (1.0 - cfg.rate);
  for (double& m : mask.storage()) m = keep(*cfg.rng) ? scale : 0.0;
  return mask;
}

Var apply_dropout(Var x, const DropoutConfig& cfg) {
  if (!cfg.active()) return x;
  return ad::mul(x, x.tape()->constant(dropout_mask(x.rows(), x.cols(), cfg)));
}

std::vector<std::size_t> to_indices(std::span<const ItemIndex> items) { return {items.begin(), items.end()}; }

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  fail("unknown activation '" + name + "' (expected tanh or sigmoid)");
}

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "sigmoid"; }

Ablation parse_ablation(const std::string& name) {
  if (name == "full") return Ablation::Full;
  if (name == "global-only") return Ablation::GlobalOnly;
  if (name == "local-only") return Ablation::LocalOnly;
  if (name == "sa-vae-only") return Ablation::SaVaeOnly;
  if (name == "sliwin-only") return Ablation::SliWinOnly;
  fail("unknown ablation '" + name + "' (expected full, global-only, local-only, sa-vae-only, sliwin-only)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::GlobalOnly: return "global-only";
    case Ablation::LocalOnly: return "local-only";
    case Ablation::SaVaeOnly: return "sa-vae-only";
    case Ablation::SliWinOnly: return "sliwin-only";
  }
  return "full";
}

bool uses_global(Ablation a) { return a != Ablation::LocalOnly; }
bool uses_local(Ablation a) { return a != Ablation::GlobalOnly; }
bool uses_sa_vae(Ablation a) { return uses_local(a) && a != Ablation::SliWinOnly; }

void HyperParams::validate() const {
  if (channels < 1) fail("channel count K must be at least 1");
  if (d_in < 2) fail("d_in must be at least 2 (layer normalization)");
  if (d_channel < 1) fail("d_channel must be at least 1");
  if (max_len < 1) fail("max sequence length T must be at least 1");
  if (window < 2) fail("sliding window length L must be at least 2");
  if (!(beta >= 0.0)) fail("beta must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(lr > 0.0)) fail("learning rate must be positive");
  if (batch_size < 1) fail("batch size must be at least 1");
}

// ---- parameters -------------------------------------------------------------

ModelParams ModelParams::zeros(const HyperParams& hp, std::size_t n_items) {
  ModelParams p;
  const std::size_t d = hp.d_in;
  p.item_embed = Tensor::matrix(n_items + 1, d);
  p.pos_embed = Tensor::matrix(hp.max_len, d);
  p.channel_W.assign(hp.channels, Tensor::matrix(d, hp.d_channel));
  p.attn_WQ = p.attn_WK = p.attn_WV = Tensor::matrix(d, d);
  p.vae_mu_W = p.vae_logvar_W = Tensor::matrix(d, d);
  p.vae_mu_b = p.vae_logvar_b = Tensor::matrix(1, d);
  p.ln_gain = p.ln_bias = Tensor::matrix(1, d);
  p.combine_Wg = p.combine_Wl = Tensor::matrix(hp.concat_dim(), d);
  return p;
}

ModelParams ModelParams::initialize(const HyperParams& hp, std::size_t n_items, std::uint64_t seed) {
  hp.validate();
  ModelParams p = zeros(hp, n_items);
  Rng rng = make_rng(seed, 0x1417);
  auto xavier = [&rng](Tensor& w) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& x : w.storage()) x = u(rng);
  };
  auto normal = [&rng](Tensor& w, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    for (double& x : w.storage()) x = n(rng);
  };
  normal(p.item_embed, 0.01);
  normal(p.pos_embed, 0.01);
  for (Tensor& w : p.channel_W) xavier(w);
  xavier(p.attn_WQ);
  xavier(p.attn_WK);
  xavier(p.attn_WV);
  xavier(p.vae_mu_W);
  xavier(p.vae_logvar_W);
  p.vae_logvar_b.fill(-2.0);
  p.ln_gain.fill(1.0);
  xavier(p.combine_Wg);
  xavier(p.combine_Wl);
  p.zero_padding_row();
  return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("item_embed", item_embed);
  fn("pos_embed", pos_embed);
  for (std::size_t k = 0; k < channel_W.size(); ++k) fn("channel_W." + std::to_string(k), channel_W[k]);
  fn("attn_WQ", attn_WQ);
  fn("attn_WK", attn_WK);
  fn("attn_WV", attn_WV);
  fn("vae_mu_W", vae_mu_W);
  fn("vae_mu_b", vae_mu_b);
  fn("vae_logvar_W", vae_logvar_W);
  fn("vae_logvar_b", vae_logvar_b);
  fn("ln_gain", ln_gain);
  fn("ln_bias", ln_bias);
  fn("combine_Wg", combine_Wg);
  fn("combine_Wl", combine_Wl);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ModelParams*>(this)->for_each([&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  for_each([&out](const std::string& name, const Tensor&) { out.push_back(name); });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void ModelParams::zero_padding_row() {
  for (double& x : item_embed.row_span(kPadItem)) x = 0.0;
}

void ModelParams::set_zero() {
  for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each([&ok](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

ParamVars ParamVars::bind(Tape& tape, const ModelParams& params, ModelParams* grads) {
  auto leaf = [&](const Tensor& value, Tensor* sink) { return sink ? tape.parameter(value, *sink) : tape.reference(value); };
  ParamVars v;
  v.item_embed = leaf(params.item_embed, grads ? &grads->item_embed : nullptr);
  v.pos_embed = leaf(params.pos_embed, grads ? &grads->pos_embed : nullptr);
  for (std::size_t k = 0; k < params.channel_W.size(); ++k)
    v.channel_W.push_back(leaf(params.channel_W[k], grads ? &grads->channel_W[k] : nullptr));
  v.attn_WQ = leaf(params.attn_WQ, grads ? &grads->attn_WQ : nullptr);
  v.attn_WK = leaf(params.attn_WK, grads ? &grads->attn_WK : nullptr);
  v.attn_WV = leaf(params.attn_WV, grads ? &grads->attn_WV : nullptr);
  v.vae_mu_W = leaf(params.vae_mu_W, grads ? &grads->vae_mu_W : nullptr);
  v.vae_mu_b = leaf(params.vae_mu_b, grads ? &grads->vae_mu_b : nullptr);
  v.vae_logvar_W = leaf(params.vae_logvar_W, grads ? &grads->vae_logvar_W : nullptr);
  v.vae_logvar_b = leaf(params.vae_logvar_b, grads ? &grads->vae_logvar_b : nullptr);
  v.ln_gain = leaf(params.ln_gain, grads ? &grads->ln_gain : nullptr);
  v.ln_bias = leaf(params.ln_bias, grads ? &grads->ln_bias : nullptr);
  v.combine_Wg = leaf(params.combine_Wg, grads ? &grads->combine_Wg : nullptr);
  v.combine_Wl = leaf(params.combine_Wl, grads ? &grads->combine_Wl : nullptr);
  return v;
}

// ---- channel-aware aggregation ----------------------------------------------

ChannelAggregation channel_aggregate(Var x, const std::vector<Var>& channel_W, std::span<const std::size_t> targets,
                                     std::span<const std::size_t> sources, Activation act) {
  if (targets.size() != sources.size()) fail("channel_aggregate: target and source lists differ in length");
  const std::size_t K = channel_W.size();
  if (K == 0) fail("channel_aggregate: no channels");
  std::vector<Var> proj(K);
  for (std::size_t k = 0; k < K; ++k) proj[k] = activate(ad::matmul(x, channel_W[k]), act);

  ChannelAggregation out;
  out.raw = proj;
  if (!targets.empty()) {
    const std::vector<std::size_t> tgt(targets.begin(), targets.end());
    const std::vector<std::size_t> src(sources.begin(), sources.end());
    std::vector<Var> scores(K), from(K);
    for (std::size_t k = 0; k < K; ++k) {
      from[k] = ad::gather_rows(proj[k], src);
      scores[k] = ad::rowwise_dot(ad::gather_rows(proj[k], tgt), from[k]);
    }
    out.alpha = ad::softmax_rows(ad::concat_cols(scores));
    for (std::size_t k = 0; k < K; ++k) {
      Var message = ad::scale_rows(from[k], ad::slice_cols(out.alpha, k, k + 1));
      out.raw[k] = ad::scatter_add_rows(proj[k], message, tgt);
    }
  }
  std::vector<Var> normalized(K);
  for (std::size_t k = 0; k < K; ++k) normalized[k] = ad::l2_normalize_rows(out.raw[k]);
  out.z = K == 1 ? normalized[0] : ad::concat_cols(normalized);
  return out;
}

PairList graph_pairs(const GlobalGraph& graph) {
  PairList pairs;
  pairs.targets.reserve(2 * graph.edge_count());
  pairs.sources.reserve(2 * graph.edge_count());
  for (ItemIndex i = 1; i <= graph.n_items(); ++i) {
    for (ItemIndex j : graph.neighbors_of(i)) {
      pairs.targets.push_back(i);
      pairs.sources.push_back(j);
    }
  }
  return pairs;
}

PairList window_pairs(std::size_t n, std::size_t window) {
  if (window < 1) fail("window length must be positive");
  PairList pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    for (std::size_t j = first; j < i; ++j) {
      pairs.targets.push_back(i);
      pairs.sources.push_back(j);
    }
  }
  return pairs;
}

// ---- local path -------------------------------------------------------------

SequenceForward sequence_forward(const ParamVars& p, const HyperParams& hp, Ablation ablation,
                                 std::span<const ItemIndex> items, const Tensor& epsilon, DropoutConfig dropout) {
  const std::size_t n = items.size();
  if (n == 0) fail("window contains only padding");
  if (n > hp.max_len) fail("sequence of " + std::to_string(n) + " items exceeds T = " + std::to_string(hp.max_len));
  for (ItemIndex i : items)
    if (i == kPadItem) fail("padding inside the non-pad part of a window");

  SequenceForward out;
  Var embedded = ad::gather_rows(p.item_embed, to_indices(items));
  out.h = apply_dropout(ad::add(embedded, ad::slice_rows(p.pos_embed, 0, n)), dropout);

  if (uses_sa_vae(ablation)) {
    Var q = ad::matmul(out.h, p.attn_WQ);
    Var k = ad::matmul(out.h, p.attn_WK);
    Var v = ad::matmul(out.h, p.attn_WV);
    Var logits = ad::scale(ad::matmul_bt(q, k), 1.0 / std::sqrt(static_cast<double>(hp.d_in)));
    Var weights = ad::masked_softmax_rows(logits, AttentionMask::causal(n));
    out.attention = weights.value();
    Var d = apply_dropout(ad::matmul(weights, v), dropout);
    out.h_s = ad::layer_norm_rows(ad::add(d, out.h), p.ln_gain, p.ln_bias);
    out.mu = ad::add_row(ad::matmul(out.h_s, p.vae_mu_W), p.vae_mu_b);
    out.log_var = ad::add_row(ad::matmul(out.h_s, p.vae_logvar_W), p.vae_logvar_b);
    if (epsilon.rows() != n || epsilon.cols() != hp.d_in) fail("epsilon must be n x d_in");
    out.z_v = ad::reparameterize(out.mu, out.log_var, epsilon);
    out.has_vae = true;
  } else {
    out.z_v = out.h;
  }

  const PairList pairs = ablation == Ablation::SaVaeOnly ? PairList{} : window_pairs(n, hp.window);
  out.z_l = channel_aggregate(out.z_v, p.channel_W, pairs.targets, pairs.sources, hp.activation).z;
  return out;
}

Var combine(const ParamVars& p, Ablation ablation, const std::optional<Var>& global_rows,
            const std::optional<Var>& local_rows) {
  std::optional<Var> z;
  if (uses_global(ablation)) {
    if (!global_rows) fail("combine: global rows required for ablation " + to_string(ablation));
    z = ad::matmul(*global_rows, p.combine_Wg);
  }
  if (uses_local(ablation)) {
    if (!local_rows) fail("combine: local rows required for ablation " + to_string(ablation));
    Var zl = ad::matmul(*local_rows, p.combine_Wl);
    z = z ? ad::add(*z, zl) : zl;
  }
  return *z;
}

std::vector<TrainingWindow> make_training_windows(UserIndex user, std::span<const ItemIndex> sequence,
                                                  std::size_t max_len) {
  std::vector<TrainingWindow> out;
  if (sequence.size() < 2 || max_len == 0) return out;
  // Inputs are sequence[0 .. n-2], targets sequence[1 .. n-1].
  std::size_t end = sequence.size() - 1;  // exclusive end of the input range
  while (end > 0) {
    const std::size_t begin = end > max_len ? end - max_len : 0;
    TrainingWindow w;
    w.user = user;
    w.items.assign(sequence.begin() + static_cast<std::ptrdiff_t>(begin), sequence.begin() + static_cast<std::ptrdiff_t>(end));
    w.targets.assign(sequence.begin() + static_cast<std::ptrdiff_t>(begin + 1),
                     sequence.begin() + static_cast<std::ptrdiff_t>(end + 1));
    out.push_back(std::move(w));
    end = begin;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

BatchLoss batch_loss(const ParamVars& p, const HyperParams& hp, Ablation ablation, const GlobalGraph& graph,
                     std::span<const TrainingWindow> windows, const BatchNoise& noise) {
  if (windows.empty()) fail("batch_loss: empty batch");
  Tape& tape = *p.item_embed.tape();
  const std::size_t n_items = p.item_embed.rows() - 1;

  std::optional<Var> global;
  if (uses_global(ablation)) {
    if (graph.n_items() != n_items) fail("graph and embedding table disagree on the item count");
    const PairList pairs = graph_pairs(graph);
    global = channel_aggregate(p.item_embed, p.channel_W, pairs.targets, pairs.sources, hp.activation).z;
  }

  std::vector<Var> zs;
  std::vector<std::size_t> targets;
  std::optional<Var> kl_sum;
  const std::uint64_t eps_seed = mix_seed(noise.seed, noise.stream);
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const TrainingWindow& w = windows[b];
    const std::size_t n = w.items.size();
    if (w.targets.size() != n) fail("training window needs one target per input position");
    std::optional<Var> local;
    if (uses_local(ablation)) {
      const Tensor eps = noise.sample_latent && uses_sa_vae(ablation)
                             ? GaussianSample::draw(eps_seed, b, {n, hp.d_in}).epsilon
                             : Tensor::matrix(n, hp.d_in);
      SequenceForward f = sequence_forward(p, hp, ablation, w.items, eps, noise.dropout);
      local = f.z_l;
      if (f.has_vae) {
        Var kl = ad::gaussian_kl(f.mu, f.log_var);
        kl_sum = kl_sum ? ad::add(*kl_sum, kl) : kl;
      }
    }
    std::optional<Var> global_rows;
    if (global) global_rows = ad::gather_rows(*global, to_indices(w.items));
    zs.push_back(combine(p, ablation, global_rows, local));
    for (ItemIndex t : w.targets) {
      if (t == kPadItem || t > n_items) fail("training target outside [1, N]");
      targets.push_back(t - 1);
    }
  }

  BatchLoss out;
  out.positions = targets.size();
  const double inv = 1.0 / static_cast<double>(out.positions);
  Var z = zs.size() == 1 ? zs[0] : ad::concat_rows(zs);
  Var catalog = ad::slice_rows(p.item_embed, 1, n_items + 1);
  out.recon = ad::scale(ad::softmax_catalog_bce(z, catalog, std::move(targets)), inv);
  out.kl = kl_sum ? ad::scale(*kl_sum, inv) : tape.constant(Tensor({1, 1}, 0.0));
  out.loss = ad::add(out.recon, ad::scale(out.kl, hp.beta));
  return out;
}

// ---- plain-tensor entry points ----------------------------------------------

std::vector<double> edge_channel_probs(const Tensor& h_i, const Tensor& h_j, const std::vector<Tensor>& channel_W,
                                       Activation act) {
  if (h_i.size() != h_j.size()) fail("edge_channel_probs: vectors differ in length");
  Tape tape;
  Tensor x = Tensor::matrix(2, h_i.size());
  std::copy(h_i.data().begin(), h_i.data().end(), x.row_span(0).begin());
  std::copy(h_j.data().begin(), h_j.data().end(), x.row_span(1).begin());
  std::vector<Var> w;
  for (const Tensor& wk : channel_W) w.push_back(tape.reference(wk));
  const std::size_t tgt[] = {0};
  const std::size_t src[] = {1};
  auto agg = channel_aggregate(tape.constant(std::move(x)), w, tgt, src, act);
  const auto row = agg.alpha.value().row_span(0);
  return {row.begin(), row.end()};
}

GlobalRepresentation global_aggregate(const GlobalGraph& graph, const Tensor& item_embed,
                                      const std::vector<Tensor>& channel_W, Activation act) {
  if (graph.n_items() + 1 != item_embed.rows()) fail("global_aggregate: graph and embedding table disagree");
  Tape tape;
  std::vector<Var> w;
  for (const Tensor& wk : channel_W) w.push_back(tape.reference(wk));
  const PairList pairs = graph_pairs(graph);
  auto agg = channel_aggregate(tape.reference(item_embed), w, pairs.targets, pairs.sources, act);
  GlobalRepresentation out;
  out.z = agg.z.value();
  for (const Var& r : agg.raw) out.raw.push_back(r.value());
  return out;
}

SaVaeOutput sa_vae_forward(const PaddedWindow& window, const ModelParams& params, const HyperParams& hp,
                           const GaussianSample& sample, DropoutConfig dropout) {
  if (window.indices.size() != hp.max_len) fail("window length differs from T");
  const auto items = window.items();
  if (items.empty()) fail("window contains only padding");
  Tape tape;
  ParamVars p = ParamVars::bind(tape, params, nullptr);
  Tensor eps = sample.epsilon;
  if (eps.size() == hp.max_len * hp.d_in && items.size() != hp.max_len) {
    // A full T x d sample: use the rows aligned with the non-pad suffix.
    Tensor tail = Tensor::matrix(items.size(), hp.d_in);
    std::copy(eps.data().end() - static_cast<std::ptrdiff_t>(tail.size()), eps.data().end(), tail.storage().begin());
    eps = std::move(tail);
  }
  SequenceForward f = sequence_forward(p, hp, Ablation::Full, items, eps, dropout);
  SaVaeOutput out;
  out.pad = window.pad_count();
  out.h_s = f.h_s.value();
  out.mu = f.mu.value();
  out.sigma = f.log_var.value();
  for (double& s : out.sigma.storage()) s = std::exp(0.5 * s);
  out.z_v = f.z_v.value();
  out.attention = Tensor::matrix(hp.max_len, hp.max_len);
  for (std::size_t q = 0; q < items.size(); ++q)
    for (std::size_t k = 0; k < items.size(); ++k) out.attention(out.pad + q, out.pad + k) = f.attention(q, k);
  return out;
}

Tensor local_window_aggregate(const Tensor& z_v, const std::vector<Tensor>& channel_W, std::size_t window,
                              Activation act) {
  Tape tape;
  std::vector<Var> w;
  for (const Tensor& wk : channel_W) w.push_back(tape.reference(wk));
  const PairList pairs = window_pairs(z_v.rows(), window);
  return channel_aggregate(tape.reference(z_v), w, pairs.targets, pairs.sources, act).z.value();
}

Tensor combine_and_score(const Tensor& z_g, const Tensor& z_l, const Tensor& combine_Wg, const Tensor& combine_Wl,
                         const Tensor& item_embed) {
  Tensor z = matmul(z_g, combine_Wg);
  const Tensor zl = matmul(z_l, combine_Wl);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += zl[i];
  Tensor catalog = Tensor::matrix(item_embed.rows() - 1, item_embed.cols());
  std::copy(item_embed.data().begin() + static_cast<std::ptrdiff_t>(item_embed.cols()), item_embed.data().end(),
            catalog.storage().begin());
  return softmax(matmul_bt(z, catalog), 1);
}

ElboTerms elbo_loss(const Tensor& y_hat, ItemIndex target, const Tensor& mu, const Tensor& sigma, double beta) {
  if (target < 1 || target > y_hat.cols()) fail("elbo_loss: target outside [1, N]");
  if (!mu.same_shape(sigma)) fail("elbo_loss: mu and sigma differ in shape");
  ElboTerms t;
  for (std::size_t c = 0; c < y_hat.cols(); ++c) {
    const double p = y_hat[c];
    t.recon -= c + 1 == target ? std::log(std::max(p, ad::kLogFloor)) : std::log(std::max(1.0 - p, ad::kLogFloor));
  }
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double s2 = sigma[i] * sigma[i];
    t.kl += mu[i] * mu[i] + s2 - std::log(s2) - 1.0;
  }
  t.kl *= 0.5;
  t.loss = t.recon + beta * t.kl;
  return t;
}

ForwardTrace trace_window(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                          const GlobalGraph& graph, std::span<const ItemIndex> items, const GaussianSample& sample) {
  if (items.empty()) fail("trace_window: empty sequence");
  Tape tape;
  ParamVars p = ParamVars::bind(tape, params, nullptr);
  ForwardTrace tr;
  const std::size_t n = items.size();
  std::optional<Var> global_rows, local_rows;
  if (uses_global(ablation)) {
    const PairList pairs = graph_pairs(graph);
    Var zg = channel_aggregate(p.item_embed, p.channel_W, pairs.targets, pairs.sources, hp.activation).z;
    global_rows = ad::gather_rows(zg, to_indices(items));
    tr.z_g = ad::slice_rows(*global_rows, n - 1, n).value();
  }
  if (uses_local(ablation)) {
    SequenceForward f = sequence_forward(p, hp, ablation, items, sample.epsilon, {});
    local_rows = f.z_l;
    tr.z_v = f.z_v.value();
    tr.z_l = f.z_l.value();
    if (f.has_vae) {
      tr.h_s = f.h_s.value();
      tr.mu_v = f.mu.value();
      tr.sigma_v = f.log_var.value();
      for (double& s : tr.sigma_v.storage()) s = std::exp(0.5 * s);
    }
  }
  Var z = combine(p, ablation, global_rows, local_rows);
  tr.z = ad::slice_rows(z, n - 1, n).value();
  Var catalog = ad::slice_rows(p.item_embed, 1, params.item_embed.rows());
  tr.y_hat = softmax(matmul_bt(tr.z, catalog.value()), 1);
  return tr;
}

namespace {

Tensor final_rows_scores(const ModelParams& params, const HyperParams& hp, Ablation ablation, const GlobalGraph& graph,
                         std::span<const ItemIndex> items, const Tensor& epsilon, bool one_pass) {
  const std::size_t n = items.size();
  Tape tape;
  ParamVars p = ParamVars::bind(tape, params, nullptr);
  std::optional<Var> zg;
  if (uses_global(ablation)) {
    const PairList pairs = graph_pairs(graph);
    zg = channel_aggregate(p.item_embed, p.channel_W, pairs.targets, pairs.sources, hp.activation).z;
  }
  const Tensor catalog = ad::slice_rows(p.item_embed, 1, params.item_embed.rows()).value();
  auto run = [&](std::size_t len) {
    std::optional<Var> g, l;
    if (zg) g = ad::gather_rows(*zg, to_indices(items.first(len)));
    if (uses_local(ablation)) {
      Tensor eps = Tensor::matrix(len, hp.d_in);
      std::copy(epsilon.data().begin(), epsilon.data().begin() + static_cast<std::ptrdiff_t>(len * hp.d_in),
                eps.storage().begin());
      l = sequence_forward(p, hp, ablation, items.first(len), eps, {}).z_l;
    }
    return combine(p, ablation, g, l).value();
  };
  Tensor scores = Tensor::matrix(n, catalog.rows());
  if (one_pass) {
    scores = matmul_bt(run(n), catalog);
  } else {
    for (std::size_t len = 1; len <= n; ++len) {
      const Tensor z = run(len);
      Tensor last = Tensor::matrix(1, z.cols());
      std::copy(z.row_span(len - 1).begin(), z.row_span(len - 1).end(), last.storage().begin());
      const Tensor s = matmul_bt(last, catalog);
      std::copy(s.data().begin(), s.data().end(), scores.row_span(len - 1).begin());
    }
  }
  return scores;
}

}  // namespace

Tensor prefix_scores_slow(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                          const GlobalGraph& graph, std::span<const ItemIndex> items, const Tensor& epsilon) {
  return final_rows_scores(params, hp, ablation, graph, items, epsilon, false);
}

Tensor causal_scores(const ModelParams& params, const HyperParams& hp, Ablation ablation, const GlobalGraph& graph,
                     std::span<const ItemIndex> items, const Tensor& epsilon) {
  return final_rows_scores(params, hp, ablation, graph, items, epsilon, true);
}

}  // namespace egd
