// Command-line front end: prepare, build-graph, train, eval, verify, export.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>

#include "egd/checkpoint.hpp"
#include "egd/config.hpp"
#include "egd/corpus.hpp"
#include "egd/error.hpp"
#include "egd/eval.hpp"
#include "egd/export.hpp"
#include "egd/graph.hpp"
#include "egd/training.hpp"
#include "egd/verify.hpp"

namespace fs = std::filesystem;
using namespace egd;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("cli", msg); }

// Flags shared by every subcommand; each one maps to a config key.
const char* const kHyperFlags[] = {"channels", "dim",        "channel-dim", "window", "max-len",
                                   "beta",     "dropout",    "lr",          "batch-size", "epochs",
                                   "seed",     "ablation",   "activation"};

struct Command {
  CLI::App* app = nullptr;
  std::map<std::string, std::string> flags;
  std::string config_file;

  void add(const std::string& key, const std::string& help) {
    app->add_option("--" + key, flags[key], help);
  }

  // defaults < --config file < explicit flags
  RunConfig resolve() const {
    RunConfig cfg = RunConfig::defaults();
    if (!config_file.empty()) {
      cfg.merge(RunConfig::load(config_file));
      cfg.set("config", config_file);
    }
    for (const auto& [k, v] : flags)
      if (app->count("--" + k) > 0) cfg.set(k, v);
    return cfg;
  }

  bool given(const std::string& key) const { return app->count("--" + key) > 0; }
};

// Options bind to members of `c`, so it must outlive parsing and not move.
void make_command(Command& c, CLI::App& root, const std::string& name, const std::string& help,
                  std::initializer_list<std::string> extra) {
  c.app = root.add_subcommand(name, help);
  c.app->add_option("--config", c.config_file, "Flat key=value config file (flags override it)");
  for (const char* k : kHyperFlags) c.add(k, "Hyperparameter '" + std::string(k) + "'");
  for (const std::string& k : extra) c.add(k, k);
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const std::string& require(const RunConfig& cfg, const std::string& key) {
  const std::string& v = cfg.get(key);
  if (v.empty()) fail("--" + key + " is required");
  return v;
}

GlobalGraph load_or_build_graph(const RunConfig& cfg, const PreparedData& data) {
  GlobalGraph g = cfg.get("graph").empty() ? build_global_graph(training_sequences(data.split), data.corpus.n_items())
                                           : read_graph(cfg.get("graph"));
  if (g.n_items() != data.corpus.n_items())
    fail("graph covers " + std::to_string(g.n_items()) + " items but the data has " +
         std::to_string(data.corpus.n_items()));
  const std::size_t cap = cfg.get_size("max-degree");
  if (cap > 0 && cfg.get("graph").empty()) g = cap_degree(g, cap, cfg.get_u64("seed"));
  return g;
}

std::vector<std::string> item_labels(const InteractionCorpus& corpus) {
  std::vector<std::string> ids(corpus.n_items() + 1);
  for (ItemIndex i = 1; i <= corpus.n_items(); ++i) ids[i] = corpus.item_id(i);
  return ids;
}

// Explicit shape flags must agree with the checkpoint.
void check_shape_flags(const Command& cmd, const RunConfig& cfg, const HyperParams& ck) {
  const std::pair<const char*, std::size_t> shapes[] = {
      {"channels", ck.channels}, {"dim", ck.d_in}, {"channel-dim", ck.d_channel}, {"max-len", ck.max_len}};
  for (const auto& [key, value] : shapes)
    if (cmd.given(key) && cfg.get_size(key) != value)
      fail("--" + std::string(key) + "=" + cfg.get(key) + " does not match the checkpoint (" + std::to_string(value) +
           ")");
}

int cmd_prepare(const Command& cmd) {
  const RunConfig cfg = cmd.resolve();
  const InputFormat format = parse_input_format(cfg.get("format"));
  LoadOptions opts;
  opts.min_count = cfg.get("min-count").empty() ? (format == InputFormat::Tsv ? 0 : 5) : cfg.get_size("min-count");
  const InteractionCorpus corpus = load_interactions(require(cfg, "input"), format, opts);
  const PreparedData data = prepare(corpus);
  const fs::path out = require(cfg, "out");
  write_prepared(out, data);
  const CorpusStats s = corpus_stats(data.corpus);
  nlohmann::ordered_json j;
  j["users"] = s.users;
  j["items"] = s.items;
  j["interactions"] = s.interactions;
  j["mean_sequence_length"] = s.mean_sequence_length;
  j["sparsity"] = s.sparsity;
  j["dropped_users"] = data.split.dropped_users;
  std::ofstream(out / "stats.json") << j.dump(2) << '\n';
  cfg.write_to(out);
  std::printf("prepared %zu users, %zu items, %zu interactions (mean length %.2f) -> %s\n", s.users, s.items,
              s.interactions, s.mean_sequence_length, out.c_str());
  return 0;
}

int cmd_build_graph(const Command& cmd) {
  const RunConfig cfg = cmd.resolve();
  const PreparedData data = read_prepared(require(cfg, "data"));
  GlobalGraph g = build_global_graph(training_sequences(data.split), data.corpus.n_items());
  if (const std::size_t cap = cfg.get_size("max-degree"); cap > 0) g = cap_degree(g, cap, cfg.get_u64("seed"));
  const fs::path out = require(cfg, "out");
  fs::create_directories(out);
  write_graph(out / "graph.tsv", g);
  cfg.write_to(out);
  std::printf("graph: %zu items, %zu edges -> %s\n", g.n_items(), g.edge_count(), (out / "graph.tsv").c_str());
  return 0;
}

int cmd_train(const Command& cmd) {
  const RunConfig cfg = cmd.resolve();
  const PreparedData data = read_prepared(require(cfg, "data"));
  const GlobalGraph graph = load_or_build_graph(cfg, data);
  TrainConfig tc;
  tc.hp = cfg.hyperparams();
  tc.ablation = cfg.ablation();
  tc.out_dir = require(cfg, "out");
  tc.eval_every = cfg.get_size("eval-every");
  tc.patience = cfg.get_size("patience");
  tc.clip_norm = cfg.get_double("clip-norm");
  tc.eval_seed = cfg.get_u64("seed");
  tc.config_digest = cfg.digest();
  tc.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %zu loss %.6f recon %.6f kl %.6f (%.1fs)", r.epoch, r.loss, r.recon, r.kl, r.seconds);
    if (r.valid_ndcg10) std::fprintf(stderr, " valid N@10 %.4f R@10 %.4f", *r.valid_ndcg10, *r.valid_recall10);
    std::fprintf(stderr, "\n");
  };
  cfg.write_to(tc.out_dir);
  const TrainResult result = train(data, graph, tc);
  std::printf("trained %zu epochs%s -> %s\n", result.history.size(),
              result.best_epoch ? (", best validation epoch " + std::to_string(*result.best_epoch)).c_str() : "",
              (tc.out_dir / "checkpoint").c_str());
  return 0;
}

int cmd_eval(const Command& cmd) {
  RunConfig cfg = cmd.resolve();
  const PreparedData data = read_prepared(require(cfg, "data"));
  const EvalSplit split = parse_eval_split(cfg.get("split"));
  const std::vector<std::uint64_t> seeds = cfg.get_seeds("seeds");
  const std::string baseline = cfg.get("baseline");

  Scorer scorer;
  std::string digest;
  if (baseline == "pop") {
    scorer = pop_baseline(data);
    digest = cfg.digest();
  } else if (baseline.empty()) {
    const Checkpoint ck = load_checkpoint(require(cfg, "checkpoint"));
    check_shape_flags(cmd, cfg, ck.meta.hp);
    if (ck.params.n_items() != data.corpus.n_items())
      fail("checkpoint has " + std::to_string(ck.params.n_items()) + " items but the data has " +
           std::to_string(data.corpus.n_items()));
    const GlobalGraph graph = load_or_build_graph(cfg, data);
    scorer = make_model_scorer(ck.params, ck.meta.hp, ck.meta.ablation, graph);
    digest = ck.meta.config_digest.empty() ? cfg.digest() : ck.meta.config_digest;
  } else {
    fail("unknown baseline '" + baseline + "' (expected pop)");
  }

  std::vector<MetricsReport> rows;
  for (std::uint64_t s : seeds) {
    rows.push_back(evaluate(scorer, data, split, s));
    rows.back().config_digest = digest;
    std::fprintf(stderr, "seed %llu: N@5 %.4f R@5 %.4f N@10 %.4f R@10 %.4f\n", static_cast<unsigned long long>(s),
                 rows.back().ndcg5, rows.back().recall5, rows.back().ndcg10, rows.back().recall10);
  }
  const MetricsReport mean = average_reports(rows);
  const fs::path out = require(cfg, "out");
  fs::create_directories(out);
  write_metrics_json(out / "metrics.json", mean, rows, utc_timestamp());
  cfg.write_to(out);
  std::printf("%s (%zu users, %zu seeds): N@5 %.4f R@5 %.4f N@10 %.4f R@10 %.4f -> %s\n", mean.split.c_str(),
              mean.n_users, seeds.size(), mean.ndcg5, mean.recall5, mean.ndcg10, mean.recall10,
              (out / "metrics.json").c_str());
  return 0;
}

int cmd_verify(const Command& cmd) {
  const RunConfig cfg = cmd.resolve();
  bool ok = true;
  for (const PropertyResult& r : run_verification(cfg.get_u64("seed"))) {
    std::printf("%s  %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.passed;
  }
  if (!ok) throw Error("verify", "one or more properties failed");
  return 0;
}

int cmd_export(const Command& cmd) {
  const RunConfig cfg = cmd.resolve();
  const PreparedData data = read_prepared(require(cfg, "data"));
  const Checkpoint ck = load_checkpoint(require(cfg, "checkpoint"));
  check_shape_flags(cmd, cfg, ck.meta.hp);
  if (ck.params.n_items() != data.corpus.n_items()) fail("checkpoint and data disagree on the item count");
  const GlobalGraph graph = load_or_build_graph(cfg, data);
  const fs::path out = require(cfg, "out");
  write_item_export(out, export_items(ck.params, ck.meta.hp, graph), item_labels(data.corpus));
  cfg.write_to(out);
  std::printf("exported %zu items -> %s\n", data.corpus.n_items(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-aware graph + self-attentive VAE sequential recommender"};
  app.require_subcommand(1);
  Command prepare;
  make_command(prepare, app, "prepare", "Parse, filter and split an interaction log",
                                 {"input", "format", "min-count", "out"});
  Command build;
  make_command(build, app, "build-graph", "Build the item co-occurrence graph", {"data", "out", "max-degree"});
  Command train;
  make_command(train, app, "train", "Train a model",
                               {"data", "graph", "out", "eval-every", "patience", "clip-norm", "max-degree"});
  Command eval;
  make_command(eval, app, "eval", "Evaluate a checkpoint or baseline",
                              {"data", "graph", "checkpoint", "out", "split", "seeds", "baseline", "max-degree"});
  Command verify;
  make_command(verify, app, "verify", "Run gradient and property checks", {});
  Command exp;
  make_command(exp, app, "export", "Export item embeddings, channels and a 2-D projection",
                             {"data", "graph", "checkpoint", "out", "max-degree"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*prepare.app) return cmd_prepare(prepare);
    if (*build.app) return cmd_build_graph(build);
    if (*train.app) return cmd_train(train);
    if (*eval.app) return cmd_eval(eval);
    if (*verify.app) return cmd_verify(verify);
    if (*exp.app) return cmd_export(exp);
  } catch (const Error& e) {
    std::fprintf(stderr, "ERROR:%s:%s\n", e.module().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ERROR:cli:%s\n", e.what());
    return 1;
  }
  return 1;
}
