#include "egd/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "egd/checkpoint.hpp"
#include "egd/error.hpp"
#include "egd/eval.hpp"
#include "egd/rng.hpp"

namespace egd {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("training", msg); }

// Stream identifiers for the per-epoch / per-batch random draws.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kDropoutStream = 0x4452;
constexpr std::uint64_t kLatentStream = 0x4c41;

std::uint64_t batch_stream(std::uint64_t base, std::size_t epoch, std::size_t batch) {
  return mix_seed(mix_seed(base, epoch), batch);
}

void append_log(const std::filesystem::path& file, const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["recon"] = r.recon;
  j["kl"] = r.kl;
  j["batches"] = r.batches;
  j["seconds"] = r.seconds;
  if (r.valid_ndcg10) j["valid_ndcg@10"] = *r.valid_ndcg10;
  if (r.valid_recall10) j["valid_recall@10"] = *r.valid_recall10;
  std::ofstream out(file, std::ios::app);
  if (!out) fail("cannot append to " + file.string());
  out << j.dump() << '\n';
}

}  // namespace

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState s{params, params, 0};
  s.m.set_zero();
  s.v.set_zero();
  return s;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& cfg) {
  grads.for_each([](const std::string& name, const Tensor& g) {
    if (!g.all_finite()) fail("non-finite gradient in " + name);
  });
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);

  std::vector<const Tensor*> gs;
  grads.for_each([&gs](const std::string&, const Tensor& g) { gs.push_back(&g); });
  std::vector<Tensor*> ms, vs;
  state.m.for_each([&ms](const std::string&, Tensor& x) { ms.push_back(&x); });
  state.v.for_each([&vs](const std::string&, Tensor& x) { vs.push_back(&x); });
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Tensor& p) {
    const Tensor& g = *gs.at(idx);
    Tensor& m = *ms.at(idx);
    Tensor& v = *vs.at(idx);
    ++idx;
    if (!p.same_shape(g) || !p.same_shape(m)) fail("optimizer state does not match parameter " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  });
  params.zero_padding_row();
}

double gradient_norm(const ModelParams& grads) {
  double s = 0.0;
  grads.for_each([&s](const std::string&, const Tensor& g) {
    for (double x : g.data()) s += x * x;
  });
  return std::sqrt(s);
}

void clip_gradients(ModelParams& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = gradient_norm(grads);
  if (!(norm > max_norm)) return;
  const double f = max_norm / norm;
  grads.for_each([f](const std::string&, Tensor& g) {
    for (double& x : g.storage()) x *= f;
  });
}

std::vector<TrainingWindow> collect_training_windows(const LeaveOneOut& split, std::size_t max_len) {
  std::vector<TrainingWindow> out;
  for (const auto& [user, view] : split.splits) {
    auto ws = make_training_windows(user, view.train, max_len);
    out.insert(out.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  return out;
}

StepResult train_step(ModelParams& params, AdamState& state, const HyperParams& hp, Ablation ablation,
                      const GlobalGraph& graph, std::span<const TrainingWindow> batch, const BatchNoise& noise,
                      double clip_norm) {
  ModelParams grads = params;
  grads.set_zero();
  StepResult r;
  {
    Tape tape;
    const ParamVars pv = ParamVars::bind(tape, params, &grads);
    const BatchLoss loss = batch_loss(pv, hp, ablation, graph, batch, noise);
    tape.backward(loss.loss);
    r.loss = loss.loss.value()[0];
    r.recon = loss.recon.value()[0];
    r.kl = loss.kl.value()[0];
    r.positions = loss.positions;
  }
  clip_gradients(grads, clip_norm);
  adam_step(params, grads, state, AdamConfig{hp.lr});
  return r;
}

TrainResult train(const PreparedData& data, const GlobalGraph& graph, const TrainConfig& cfg, const ModelParams* init) {
  const HyperParams& hp = cfg.hp;
  hp.validate();
  const std::size_t n_items = data.corpus.n_items();
  if (graph.n_items() != n_items) fail("graph covers " + std::to_string(graph.n_items()) + " items, data has " +
                                       std::to_string(n_items));

  TrainResult result;
  result.params = init ? *init : ModelParams::initialize(hp, n_items, hp.seed);
  if (result.params.n_items() != n_items) fail("initial parameters have the wrong item count");
  ModelParams& params = result.params;
  AdamState state = AdamState::zeros_like(params);

  const std::vector<TrainingWindow> windows = collect_training_windows(data.split, hp.max_len);
  if (windows.empty() && hp.epochs > 0) fail("no training windows: every user history is too short");

  std::filesystem::path log_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log_file = cfg.out_dir / "train_log.jsonl";
    std::ofstream(log_file, std::ios::trunc);
  }

  std::optional<ModelParams> best;
  double best_score = -1.0;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(windows.size());
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(mix_seed(hp.seed, kShuffleStream), epoch);
    seeded_shuffle(order, shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    double recon_sum = 0.0, kl_sum = 0.0;
    std::size_t positions = 0;
    std::vector<TrainingWindow> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += hp.batch_size) {
      const std::size_t end = std::min(order.size(), begin + hp.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(windows[order[i]]);
      const std::size_t b = rec.batches++;
      Rng dropout_rng(batch_stream(mix_seed(hp.seed, kDropoutStream), epoch, b));
      BatchNoise noise;
      noise.seed = mix_seed(hp.seed, kLatentStream);
      noise.stream = batch_stream(0, epoch, b);
      noise.sample_latent = true;
      noise.dropout = DropoutConfig{hp.dropout, &dropout_rng};
      StepResult s;
      try {
        s = train_step(params, state, hp, cfg.ablation, graph, batch, noise, cfg.clip_norm);
      } catch (const Error& e) {
        throw Error(e.module(), "epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
      }
      recon_sum += s.recon * static_cast<double>(s.positions);
      kl_sum += s.kl * static_cast<double>(s.positions);
      positions += s.positions;
    }
    rec.recon = recon_sum / static_cast<double>(positions);
    rec.kl = kl_sum / static_cast<double>(positions);
    rec.loss = rec.recon + hp.beta * rec.kl;

    bool stop = false;
    if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
      const MetricsReport m =
          evaluate(make_model_scorer(params, hp, cfg.ablation, graph), data, EvalSplit::Valid, cfg.eval_seed);
      rec.valid_ndcg10 = m.ndcg10;
      rec.valid_recall10 = m.recall10;
      if (m.ndcg10 > best_score) {
        best_score = m.ndcg10;
        best = params;
        result.best_epoch = epoch;
        since_best = 0;
      } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
        stop = true;
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (!log_file.empty()) append_log(log_file, rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }

  if (best) params = std::move(*best);
  if (!cfg.out_dir.empty()) {
    CheckpointMeta meta{hp, cfg.ablation, result.best_epoch.value_or(result.history.size()), cfg.config_digest};
    save_checkpoint(cfg.out_dir / "checkpoint", params, meta);
  }
  return result;
}

// ---- gradient verification ---------------------------------------------------

HyperParams GradientCheckConfig::tiny_hyperparams() {
  HyperParams hp;
  hp.channels = 2;
  hp.d_in = 8;
  hp.d_channel = 4;
  hp.max_len = 8;
  hp.window = 4;
  hp.beta = 0.1;
  hp.dropout = 0.0;
  hp.batch_size = 8;
  return hp;
}

TinyInstance make_tiny_instance(const GradientCheckConfig& cfg) {
  TinyInstance inst;
  inst.hp = cfg.hp;
  inst.hp.dropout = 0.0;
  Rng rng = make_rng(cfg.seed, 0x7e57);
  std::uniform_int_distribution<ItemIndex> pick(1, cfg.n_items);
  std::vector<std::vector<ItemIndex>> seqs(cfg.n_users);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    for (std::size_t t = 0; t < cfg.sequence_length; ++t) seqs[u].push_back(pick(rng));
    auto ws = make_training_windows(u, seqs[u], inst.hp.max_len);
    inst.windows.insert(inst.windows.end(), ws.begin(), ws.end());
  }
  inst.graph = build_global_graph(seqs, cfg.n_items);
  inst.params = ModelParams::initialize(inst.hp, cfg.n_items, cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.embed_scale);
  for (double& x : inst.params.item_embed.storage()) x = normal(rng);
  for (double& x : inst.params.pos_embed.storage()) x = normal(rng);
  for (double& x : inst.params.vae_mu_b.storage()) x = normal(rng);
  for (double& x : inst.params.ln_bias.storage()) x = normal(rng);
  inst.params.zero_padding_row();
  return inst;
}

GradCheckReport check_model_gradients(const GradientCheckConfig& cfg) {
  TinyInstance inst = make_tiny_instance(cfg);
  BatchNoise noise;
  noise.seed = cfg.seed;
  noise.stream = 1;
  noise.sample_latent = true;

  ModelParams grads = inst.params;
  grads.set_zero();
  {
    Tape tape;
    if (cfg.hook) tape.set_backward_hook(cfg.hook);
    const ParamVars pv = ParamVars::bind(tape, inst.params, &grads);
    tape.backward(batch_loss(pv, inst.hp, cfg.ablation, inst.graph, inst.windows, noise).loss);
  }

  auto loss = [&]() {
    Tape tape;
    const ParamVars pv = ParamVars::bind(tape, inst.params, nullptr);
    return batch_loss(pv, inst.hp, cfg.ablation, inst.graph, inst.windows, noise).loss.value()[0];
  };
  std::vector<CheckedParam> checked;
  std::vector<const Tensor*> analytic;
  grads.for_each([&analytic](const std::string&, const Tensor& g) { analytic.push_back(&g); });
  std::size_t idx = 0;
  inst.params.for_each([&](const std::string& name, Tensor& p) {
    checked.push_back(CheckedParam{name, &p, analytic.at(idx++)});
  });
  return finite_diff_check(loss, std::move(checked), cfg.h);
}

}  // namespace egd
