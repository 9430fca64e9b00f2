#include "egd/verify.hpp"

#include <cmath>
#include <cstdio>

#include "egd/model.hpp"
#include "egd/rng.hpp"
#include "egd/training.hpp"

namespace egd {
namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

Tensor random_row(Rng& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t = Tensor::matrix(1, d);
  for (double& x : t.storage()) x = n(rng);
  return t;
}

}  // namespace

std::vector<PropertyResult> run_verification(std::uint64_t seed) {
  std::vector<PropertyResult> out;

  GradientCheckConfig gc;
  gc.seed = seed;
  const GradCheckReport report = check_model_gradients(gc);
  out.push_back({"gradient check (tiny instance)", report.passes(1e-5),
                 "max rel error " + sci(report.max_rel_error) + " in " + report.worst_param});

  TinyInstance inst = make_tiny_instance(gc);
  const HyperParams& hp = inst.hp;
  Rng rng = make_rng(seed, 0x5e1f);

  double simplex_err = 0.0;
  bool symmetric = true;
  for (int e = 0; e < 1000; ++e) {
    const Tensor a = random_row(rng, hp.d_in), b = random_row(rng, hp.d_in);
    const auto ab = edge_channel_probs(a, b, inst.params.channel_W, hp.activation);
    const auto ba = edge_channel_probs(b, a, inst.params.channel_W, hp.activation);
    double s = 0.0;
    for (double p : ab) s += p;
    simplex_err = std::max(simplex_err, std::abs(s - 1.0));
    symmetric = symmetric && ab == ba;
  }
  out.push_back({"channel probabilities on simplex", simplex_err <= 1e-9, "max |sum - 1| " + sci(simplex_err)});
  out.push_back({"channel probabilities symmetric", symmetric, symmetric ? "exact" : "asymmetric edge found"});

  auto block_norm_error = [&](const Tensor& z) {
    double worst = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t k = 0; k < hp.channels; ++k) {
        double s = 0.0;
        for (std::size_t c = 0; c < hp.d_channel; ++c) s += z(r, k * hp.d_channel + c) * z(r, k * hp.d_channel + c);
        worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
      }
    return worst;
  };
  const GlobalRepresentation g = global_aggregate(inst.graph, inst.params.item_embed, inst.params.channel_W, hp.activation);
  Tensor items_only = Tensor::matrix(g.z.rows() - 1, g.z.cols());
  std::copy(g.z.data().begin() + static_cast<std::ptrdiff_t>(g.z.cols()), g.z.data().end(), items_only.storage().begin());
  double norm_err = block_norm_error(items_only);
  double attn_err = 0.0, min_kl = 0.0;
  bool causal_ok = true;
  double prefix_err = 0.0;
  for (const TrainingWindow& w : inst.windows) {
    const GaussianSample eps = GaussianSample::draw(seed, w.items.size(), {w.items.size(), hp.d_in});
    const ForwardTrace tr = trace_window(inst.params, hp, Ablation::Full, inst.graph, w.items, eps);
    norm_err = std::max(norm_err, block_norm_error(tr.z_l));
    for (std::size_t i = 0; i < tr.mu_v.size(); ++i) {
      const double s2 = tr.sigma_v[i] * tr.sigma_v[i];
      min_kl = std::min(min_kl, 0.5 * (tr.mu_v[i] * tr.mu_v[i] + s2 - std::log(s2) - 1.0));
    }
    const PaddedWindow pw = make_window(w.items, hp.max_len, w.targets.back());
    const SaVaeOutput sv = sa_vae_forward(pw, inst.params, hp, eps);
    for (std::size_t q = sv.pad; q < hp.max_len; ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < hp.max_len; ++k) {
        s += sv.attention(q, k);
        if (k > q && sv.attention(q, k) != 0.0) causal_ok = false;
      }
      attn_err = std::max(attn_err, std::abs(s - 1.0));
    }
    const Tensor slow = prefix_scores_slow(inst.params, hp, Ablation::Full, inst.graph, w.items, eps.epsilon);
    const Tensor fast = causal_scores(inst.params, hp, Ablation::Full, inst.graph, w.items, eps.epsilon);
    prefix_err = std::max(prefix_err, max_abs_diff(slow, fast));
  }
  out.push_back({"channel blocks unit norm", norm_err <= 1e-9, "max |norm - 1| " + sci(norm_err)});
  out.push_back({"attention rows on simplex", attn_err <= 1e-9, "max |sum - 1| " + sci(attn_err)});
  out.push_back({"attention is causal", causal_ok, causal_ok ? "no weight on later positions" : "future weight found"});
  out.push_back({"KL terms non-negative", min_kl >= 0.0, "min term " + sci(min_kl)});
  out.push_back({"prefix recomputation equals single pass", prefix_err <= 1e-10, "max diff " + sci(prefix_err)});
  return out;
}

}  // namespace egd
