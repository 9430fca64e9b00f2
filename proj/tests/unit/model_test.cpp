#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "egd/error.hpp"
#include "egd/model.hpp"
#include "egd/training.hpp"
#include "oracles.hpp"

using namespace egd;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t = Tensor::matrix(r, c);
  for (double& x : t.storage()) x = n(rng);
  return t;
}

std::vector<Tensor> random_channels(Rng& rng, std::size_t K, std::size_t d, std::size_t dc) {
  std::vector<Tensor> W;
  for (std::size_t k = 0; k < K; ++k) W.push_back(random_matrix(rng, d, dc, 0.5));
  return W;
}

HyperParams small_hp() {
  HyperParams hp;
  hp.channels = 3;
  hp.d_in = 6;
  hp.d_channel = 4;
  hp.max_len = 6;
  hp.window = 3;
  hp.dropout = 0.0;
  return hp;
}

// Parameters with embeddings large enough for non-trivial attention.
ModelParams random_params(const HyperParams& hp, std::size_t n_items, std::uint64_t seed) {
  ModelParams p = ModelParams::initialize(hp, n_items, seed);
  Rng rng = make_rng(seed, 500);
  p.item_embed = random_matrix(rng, n_items + 1, hp.d_in, 0.7);
  p.pos_embed = random_matrix(rng, hp.max_len, hp.d_in, 0.3);
  p.vae_mu_b = random_matrix(rng, 1, hp.d_in, 0.2);
  p.ln_bias = random_matrix(rng, 1, hp.d_in, 0.2);
  p.zero_padding_row();
  return p;
}

GlobalGraph random_graph(Rng& rng, std::size_t n, std::size_t edges) {
  std::vector<std::pair<ItemIndex, ItemIndex>> e;
  for (std::size_t i = 0; i < edges; ++i) e.emplace_back(1 + rng() % n, 1 + rng() % n);
  return GlobalGraph(n, e);
}

double max_diff(const Tensor& t, const std::vector<oracle::Vec>& rows, std::size_t first_row = 0) {
  double m = 0.0;
  for (std::size_t r = first_row; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m = std::max(m, std::abs(t(r, c) - rows[r][c]));
  return m;
}

const Ablation kAllAblations[] = {Ablation::Full, Ablation::GlobalOnly, Ablation::LocalOnly, Ablation::SaVaeOnly,
                                  Ablation::SliWinOnly};

}  // namespace

TEST(ChannelProbs, SingleChannelIsCertain) {
  Rng rng = make_rng(1, 1);
  const auto W = random_channels(rng, 1, 5, 3);
  const auto a = edge_channel_probs(random_matrix(rng, 1, 5), random_matrix(rng, 1, 5), W);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_DOUBLE_EQ(a[0], 1.0);
}

TEST(ChannelProbs, IdenticalChannelsAreUniform) {
  Rng rng = make_rng(2, 1);
  const Tensor w = random_matrix(rng, 5, 3);
  const std::vector<Tensor> W(4, w);
  for (double a : edge_channel_probs(random_matrix(rng, 1, 5), random_matrix(rng, 1, 5), W)) EXPECT_NEAR(a, 0.25, 1e-15);
}

TEST(ChannelProbs, SimplexSymmetricAndMatchesOracle) {
  Rng rng = make_rng(3, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto W = random_channels(rng, 1 + trial % 5, 6, 3);
    const Tensor hi = random_matrix(rng, 1, 6), hj = random_matrix(rng, 1, 6);
    const bool tanh_act = trial % 2 == 0;
    const Activation act = tanh_act ? Activation::Tanh : Activation::Sigmoid;
    const auto a = edge_channel_probs(hi, hj, W, act);
    const auto b = edge_channel_probs(hj, hi, W, act);
    const auto o = oracle::channel_probs(oracle::row_of(hi, 0), oracle::row_of(hj, 0), W, tanh_act);
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-12);
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_GE(a[k], 0.0);
      EXPECT_NEAR(a[k], b[k], 1e-12);
      EXPECT_NEAR(a[k], o[k], 1e-12);
    }
  }
}

TEST(GlobalAggregate, MatchesEdgeLoopOracle) {
  Rng rng = make_rng(4, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + rng() % 20;
    const GlobalGraph g = random_graph(rng, n, 2 * n);
    const Tensor E = random_matrix(rng, n + 1, 7);
    const auto W = random_channels(rng, 3, 7, 4);
    const bool tanh_act = trial % 3 != 0;
    const auto out = global_aggregate(g, E, W, tanh_act ? Activation::Tanh : Activation::Sigmoid);
    const auto expect = oracle::algorithm1(E, g.edges(), W, tanh_act);
    EXPECT_LT(max_diff(out.z, expect, 1), 1e-12);
    ASSERT_EQ(out.raw.size(), 3u);
  }
}

TEST(GlobalAggregate, ChannelBlocksHaveUnitNorm) {
  Rng rng = make_rng(5, 1);
  const GlobalGraph g = random_graph(rng, 30, 60);
  const auto out = global_aggregate(g, random_matrix(rng, 31, 8), random_channels(rng, 4, 8, 5));
  for (std::size_t i = 1; i <= 30; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += out.z(i, k * 5 + c) * out.z(i, k * 5 + c);
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
    }
}

TEST(GlobalAggregate, IsolatedItemKeepsOwnProjection) {
  Rng rng = make_rng(6, 1);
  const std::pair<ItemIndex, ItemIndex> e[] = {{1, 2}};
  const GlobalGraph g(3, e);
  const Tensor E = random_matrix(rng, 4, 5);
  const auto W = random_channels(rng, 2, 5, 3);
  const auto out = global_aggregate(g, E, W);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto expect = oracle::normalized(oracle::project(oracle::row_of(E, 3), W[k]));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.z(3, k * 3 + c), expect[c], 1e-14);
  }
}

TEST(GlobalAggregate, PairOrderDoesNotMatter) {
  Rng rng = make_rng(7, 1);
  const GlobalGraph g = random_graph(rng, 12, 30);
  PairList pairs = graph_pairs(g);
  const Tensor E = random_matrix(rng, 13, 6);
  const auto W = random_channels(rng, 3, 6, 2);
  auto run = [&](const PairList& pl) {
    Tape tape;
    std::vector<Var> w;
    for (const Tensor& wk : W) w.push_back(tape.reference(wk));
    return channel_aggregate(tape.reference(E), w, pl.targets, pl.sources, Activation::Tanh).z.value();
  };
  const Tensor base = run(pairs);
  std::vector<std::size_t> order(pairs.targets.size());
  std::iota(order.begin(), order.end(), 0);
  seeded_shuffle(order, rng);
  PairList shuffled;
  for (std::size_t i : order) {
    shuffled.targets.push_back(pairs.targets[i]);
    shuffled.sources.push_back(pairs.sources[i]);
  }
  EXPECT_LT(max_abs_diff(run(shuffled), base), 1e-12);
}

TEST(WindowPairs, Definition) {
  // v5, v6, v2, v4 with L = 3: the last position reads from v6 and v2.
  const PairList p = window_pairs(4, 3);
  std::set<std::pair<std::size_t, std::size_t>> got;
  for (std::size_t i = 0; i < p.targets.size(); ++i) got.insert({p.targets[i], p.sources[i]});
  const std::set<std::pair<std::size_t, std::size_t>> expect = {{1, 0}, {2, 0}, {2, 1}, {3, 1}, {3, 2}};
  EXPECT_EQ(got, expect);
  EXPECT_TRUE(window_pairs(4, 1).targets.empty());
}

TEST(LocalAggregate, MatchesWindowLoopOracle) {
  Rng rng = make_rng(8, 1);
  for (std::size_t L = 1; L <= 7; ++L) {
    const Tensor zv = random_matrix(rng, 6, 5);
    const auto W = random_channels(rng, 3, 5, 2);
    EXPECT_LT(max_diff(local_window_aggregate(zv, W, L), oracle::window_aggregate(zv, W, L)), 1e-12) << "L=" << L;
  }
}

TEST(SaVae, MatchesLoopOracleWithPadding) {
  HyperParams hp = small_hp();
  hp.max_len = 4;
  const ModelParams p = random_params(hp, 9, 3);
  PaddedWindow w = make_window(std::vector<ItemIndex>{4, 7, 2}, 4, 5);
  ASSERT_EQ(w.pad_count(), 1u);
  const std::size_t n = 3;
  const GaussianSample eps = GaussianSample::draw(11, 0, {n, hp.d_in});
  const SaVaeOutput out = sa_vae_forward(w, p, hp, eps);

  Tensor H = Tensor::matrix(n, hp.d_in);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < hp.d_in; ++c) H(t, c) = p.item_embed(w.items()[t], c) + p.pos_embed(t, c);
  Tensor A;
  const Tensor D = oracle::attention(oracle::matmul(H, p.attn_WQ), oracle::matmul(H, p.attn_WK),
                                     oracle::matmul(H, p.attn_WV), [](std::size_t q, std::size_t k) { return k <= q; }, &A);
  Tensor R = D;
  for (std::size_t i = 0; i < R.size(); ++i) R[i] += H[i];
  const Tensor Hs = oracle::layer_norm(R, p.ln_gain, p.ln_bias);
  const Tensor mu = oracle::matmul(Hs, p.vae_mu_W), lv = oracle::matmul(Hs, p.vae_logvar_W);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < hp.d_in; ++c) {
      const double m = mu(t, c) + p.vae_mu_b[c];
      const double s = std::exp(0.5 * (lv(t, c) + p.vae_logvar_b[c]));
      EXPECT_NEAR(out.h_s(t, c), Hs(t, c), 1e-12);
      EXPECT_NEAR(out.mu(t, c), m, 1e-12);
      EXPECT_NEAR(out.sigma(t, c), s, 1e-12);
      EXPECT_NEAR(out.z_v(t, c), m + s * eps.epsilon(t, c), 1e-12);
    }
  for (std::size_t q = 0; q < 4; ++q) {
    double row = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      row += out.attention(q, k);
      if (q < 1 || k < 1 || k > q) EXPECT_EQ(out.attention(q, k), 0.0) << q << "," << k;
      else EXPECT_NEAR(out.attention(q, k), A(q - 1, k - 1), 1e-12);
    }
    EXPECT_NEAR(row, q < 1 ? 0.0 : 1.0, 1e-12);
  }
}

TEST(SaVae, SinglePositionHandTrace) {
  // One item, identity value map, epsilon = 0: attention returns H itself,
  // so h_s = LN(2H) and z = mu.
  HyperParams hp = small_hp();
  hp.max_len = 3;
  ModelParams p = random_params(hp, 5, 8);
  p.attn_WV = Tensor::matrix(hp.d_in, hp.d_in);
  for (std::size_t i = 0; i < hp.d_in; ++i) p.attn_WV(i, i) = 1.0;
  const PaddedWindow w = make_window(std::vector<ItemIndex>{4}, 3, 2);
  const SaVaeOutput out = sa_vae_forward(w, p, hp, GaussianSample::zeros({1, hp.d_in}));
  Tensor two_h = Tensor::matrix(1, hp.d_in);
  for (std::size_t c = 0; c < hp.d_in; ++c) two_h[c] = 2.0 * (p.item_embed(4, c) + p.pos_embed(0, c));
  const Tensor hs = oracle::layer_norm(two_h, p.ln_gain, p.ln_bias);
  const Tensor mu = oracle::matmul(hs, p.vae_mu_W);
  for (std::size_t c = 0; c < hp.d_in; ++c) {
    EXPECT_NEAR(out.h_s[c], hs[c], 1e-12);
    EXPECT_NEAR(out.z_v[c], mu[c] + p.vae_mu_b[c], 1e-12);
  }
  EXPECT_EQ(out.attention(2, 2), 1.0);
  EXPECT_THROW(sa_vae_forward(make_window(std::vector<ItemIndex>{}, 3, 2), p, hp, GaussianSample::zeros({1, hp.d_in})), Error);
}

TEST(Combine, ScoresFormADistribution) {
  Rng rng = make_rng(9, 1);
  const Tensor zg = random_matrix(rng, 1, 6), zl = random_matrix(rng, 1, 6);
  const Tensor Wg = random_matrix(rng, 6, 4), Wl = random_matrix(rng, 6, 4), E = random_matrix(rng, 11, 4);
  const Tensor y = combine_and_score(zg, zl, Wg, Wl, E);
  ASSERT_EQ(y.cols(), 10u);
  double s = 0.0;
  for (double v : y.storage()) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);

  // With W_g = 0 only the local path contributes.
  const Tensor y0 = combine_and_score(zg, zl, Tensor::matrix(6, 4), Wl, E);
  const Tensor z = oracle::matmul(zl, Wl);
  std::vector<double> logits(10);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t c = 0; c < 4; ++c) logits[i] += z[c] * E(i + 1, c);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double zsum = 0.0;
  for (double l : logits) zsum += std::exp(l - mx);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(y0[i], std::exp(logits[i] - mx) / zsum, 1e-14);
}

TEST(Elbo, WorkedExamples) {
  const Tensor y = Tensor::row({0.5, 0.5});
  const ElboTerms a = elbo_loss(y, 1, Tensor::row({0.0}), Tensor::row({1.0}), 0.1);
  EXPECT_NEAR(a.kl, 0.0, 1e-15);
  EXPECT_NEAR(a.recon, 2.0 * std::log(2.0), 1e-15);
  const ElboTerms b = elbo_loss(y, 1, Tensor::row({1.0}), Tensor::row({1.0}), 0.1);
  EXPECT_NEAR(b.kl, 0.5, 1e-15);
  EXPECT_NEAR(b.loss, b.recon + 0.05, 1e-15);
  const ElboTerms c = elbo_loss(y, 2, Tensor::row({3.0}), Tensor::row({0.2}), 0.0);
  EXPECT_EQ(c.loss, c.recon);
  // Probabilities of exactly 0 or 1 are clamped rather than producing inf.
  const ElboTerms d = elbo_loss(Tensor::row({1.0, 0.0}), 2, Tensor::row({0.0}), Tensor::row({1.0}), 0.0);
  EXPECT_TRUE(std::isfinite(d.recon));
  EXPECT_NEAR(d.recon, -2.0 * std::log(1e-12), 1e-9);
  EXPECT_THROW(elbo_loss(y, 0, Tensor::row({0.0}), Tensor::row({1.0}), 0.0), Error);
  EXPECT_THROW(elbo_loss(y, 3, Tensor::row({0.0}), Tensor::row({1.0}), 0.0), Error);
}

TEST(Elbo, KlIsNonNegative) {
  Rng rng = make_rng(10, 1);
  std::uniform_real_distribution<double> sd(0.05, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor mu = random_matrix(rng, 1, 4, 2.0), sigma = Tensor::matrix(1, 4);
    for (double& s : sigma.storage()) s = sd(rng);
    EXPECT_GE(elbo_loss(Tensor::row({0.3, 0.7}), 1, mu, sigma, 1.0).kl, 0.0);
  }
}

TEST(Causality, LaterItemsDoNotChangeEarlierScores) {
  const HyperParams hp = small_hp();
  const std::size_t n_items = 15;
  const ModelParams p = random_params(hp, n_items, 12);
  Rng rng = make_rng(12, 2);
  const GlobalGraph g = random_graph(rng, n_items, 30);
  const std::vector<ItemIndex> items = {3, 9, 1, 14, 6, 2};
  const Tensor eps = random_matrix(rng, items.size(), hp.d_in);
  for (Ablation a : kAllAblations) {
    const Tensor base = causal_scores(p, hp, a, g, items, eps);
    for (std::size_t t = 1; t < items.size(); ++t) {
      auto changed = items;
      changed[t] = changed[t] % n_items + 1;
      const Tensor s = causal_scores(p, hp, a, g, changed, eps);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < n_items; ++c) ASSERT_EQ(s(r, c), base(r, c)) << to_string(a) << " t=" << t;
    }
  }
}

TEST(Causality, OnePassEqualsPrefixRecomputation) {
  const HyperParams hp = small_hp();
  const std::size_t n_items = 12;
  Rng rng = make_rng(13, 2);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelParams p = random_params(hp, n_items, 20 + trial);
    const GlobalGraph g = random_graph(rng, n_items, 20);
    std::vector<ItemIndex> items(1 + rng() % hp.max_len);
    for (auto& i : items) i = 1 + rng() % n_items;
    const Tensor eps = random_matrix(rng, items.size(), hp.d_in);
    for (Ablation a : kAllAblations)
      EXPECT_LT(max_abs_diff(causal_scores(p, hp, a, g, items, eps), prefix_scores_slow(p, hp, a, g, items, eps)), 1e-10)
          << to_string(a);
  }
}

TEST(Trace, FinalRowMatchesCausalScores) {
  const HyperParams hp = small_hp();
  const ModelParams p = random_params(hp, 10, 5);
  Rng rng = make_rng(14, 2);
  const GlobalGraph g = random_graph(rng, 10, 15);
  const std::vector<ItemIndex> items = {2, 5, 7};
  const GaussianSample eps = GaussianSample::draw(3, 3, {3, hp.d_in});
  const ForwardTrace tr = trace_window(p, hp, Ablation::Full, g, items, eps);
  const Tensor s = causal_scores(p, hp, Ablation::Full, g, items, eps.epsilon);
  const Tensor zg = global_aggregate(g, p.item_embed, p.channel_W).z;
  for (std::size_t c = 0; c < hp.concat_dim(); ++c) EXPECT_EQ(tr.z_g[c], zg(7, c));
  const std::vector<double> last(s.row_span(2).begin(), s.row_span(2).end());
  const double mx = *std::max_element(last.begin(), last.end());
  double zsum = 0.0;
  for (double l : last) zsum += std::exp(l - mx);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(tr.y_hat[i], std::exp(last[i] - mx) / zsum, 1e-12);
}

TEST(Ablations, PathsSwitchOnAndOff) {
  const HyperParams hp = small_hp();
  const ModelParams p = random_params(hp, 10, 6);
  Rng rng = make_rng(15, 2);
  const GlobalGraph g = random_graph(rng, 10, 15);
  const std::vector<ItemIndex> items = {2, 5, 7, 1};
  const GaussianSample eps = GaussianSample::draw(3, 3, {4, hp.d_in});
  EXPECT_TRUE(trace_window(p, hp, Ablation::GlobalOnly, g, items, eps).z_l.empty());
  EXPECT_TRUE(trace_window(p, hp, Ablation::LocalOnly, g, items, eps).z_g.empty());
  const ForwardTrace sw = trace_window(p, hp, Ablation::SliWinOnly, g, items, eps);
  EXPECT_TRUE(sw.mu_v.empty());
  // Without the VAE the window runs over the raw embeddings plus positions.
  for (std::size_t t = 0; t < items.size(); ++t)
    for (std::size_t c = 0; c < hp.d_in; ++c) EXPECT_EQ(sw.z_v(t, c), p.item_embed(items[t], c) + p.pos_embed(t, c));
  // Without the window each local row is just its own normalized projection.
  const ForwardTrace sv = trace_window(p, hp, Ablation::SaVaeOnly, g, items, eps);
  EXPECT_LT(max_diff(sv.z_l, oracle::window_aggregate(sv.z_v, p.channel_W, 1)), 1e-12);
  for (const std::string name : {"full", "global-only", "local-only", "sa-vae-only", "sliwin-only"})
    EXPECT_EQ(to_string(parse_ablation(name)), name);
  EXPECT_THROW(parse_ablation("none"), Error);
}

TEST(TrainingWindows, ChunkFromTheMostRecentItem) {
  const std::vector<ItemIndex> seq = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto ws = make_training_windows(0, seq, 3);
  ASSERT_EQ(ws.size(), 3u);
  EXPECT_EQ(ws[0].items, (std::vector<ItemIndex>{1}));
  EXPECT_EQ(ws[0].targets, (std::vector<ItemIndex>{2}));
  EXPECT_EQ(ws[1].items, (std::vector<ItemIndex>{2, 3, 4}));
  EXPECT_EQ(ws[2].items, (std::vector<ItemIndex>{5, 6, 7}));
  EXPECT_EQ(ws[2].targets, (std::vector<ItemIndex>{6, 7, 8}));
  EXPECT_TRUE(make_training_windows(0, std::vector<ItemIndex>{1}, 3).empty());
}

TEST(Gradients, ZeroBetaStillPropagatesThroughTheVae) {
  GradientCheckConfig cfg;
  cfg.hp.beta = 0.0;
  const GradCheckReport r = check_model_gradients(cfg);
  EXPECT_TRUE(r.passes(1e-5)) << r.worst_param << " " << r.max_rel_error;

  // The reconstruction term alone reaches the variance head via the sample.
  const TinyInstance inst = make_tiny_instance(cfg);
  ModelParams grads = ModelParams::zeros(inst.hp, inst.params.n_items());
  Tape tape;
  const ParamVars pv = ParamVars::bind(tape, inst.params, &grads);
  const BatchLoss loss = batch_loss(pv, inst.hp, Ablation::Full, inst.graph, inst.windows, BatchNoise{1, 2, true, {}});
  EXPECT_EQ(loss.loss.value()[0], loss.recon.value()[0]);
  tape.backward(loss.loss);
  double g = 0.0;
  for (double v : grads.vae_logvar_W.storage()) g = std::max(g, std::abs(v));
  EXPECT_GT(g, 0.0);
}

TEST(HyperParams, ValidationRejectsBadValues) {
  HyperParams hp = small_hp();
  EXPECT_NO_THROW(hp.validate());
  hp.channels = 0;
  EXPECT_THROW(hp.validate(), Error);
  hp = small_hp();
  hp.dropout = 1.0;
  EXPECT_THROW(hp.validate(), Error);
}
