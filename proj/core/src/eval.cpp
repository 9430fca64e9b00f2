#include "egd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <numeric>

#include "egd/error.hpp"
#include "egd/rng.hpp"

namespace egd {

std::size_t RankedList::relevant_count() const {
  return static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), true));
}

RankedList rank_candidates(std::span<const ItemIndex> candidates, std::span<const double> scores,
                           std::span<const ItemIndex> relevant) {
  if (candidates.size() != scores.size()) throw Error("eval", "one score per candidate required");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  RankedList r;
  for (std::size_t i : order) {
    r.items.push_back(candidates[i]);
    r.relevant.push_back(std::find(relevant.begin(), relevant.end(), candidates[i]) != relevant.end());
  }
  return r;
}

double ndcg_at_k(const RankedList& ranked, std::size_t k) {
  if (k < 1) throw Error("eval", "cutoff K must be at least 1");
  const std::size_t n_rel = ranked.relevant_count();
  if (n_rel == 0) throw Error("eval", "NDCG undefined without relevant items");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranked.items.size()); ++i)
    if (ranked.relevant[i]) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, n_rel); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

double recall_at_k(const RankedList& ranked, std::size_t k) {
  if (k < 1) throw Error("eval", "cutoff K must be at least 1");
  const std::size_t n_rel = ranked.relevant_count();
  if (n_rel == 0) throw Error("eval", "recall undefined without relevant items");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.items.size()); ++i) hits += ranked.relevant[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(n_rel);
}

EvalSplit parse_eval_split(const std::string& name) {
  if (name == "valid" || name == "validation") return EvalSplit::Valid;
  if (name == "test") return EvalSplit::Test;
  throw Error("eval", "unknown split '" + name + "' (expected valid or test)");
}

std::string to_string(EvalSplit split) { return split == EvalSplit::Valid ? "valid" : "test"; }

MetricsReport evaluate(const Scorer& scorer, const PreparedData& data, EvalSplit split, std::uint64_t seed,
                       std::size_t negatives) {
  MetricsReport report;
  report.split = to_string(split);
  report.seeds = {seed};
  double n5 = 0, r5 = 0, n10 = 0, r10 = 0;
  std::vector<ItemIndex> history;
  for (const auto& [user, view] : data.split.splits) {
    history = view.train;
    ItemIndex target = view.valid_target;
    if (split == EvalSplit::Test) {
      history.push_back(view.valid_target);
      target = view.test_target;
    }
    if (history.empty()) {
      ++report.skipped_users;
      continue;
    }
    const NegativeSample sample = sample_negatives(data.corpus, user, target, negatives, mix_seed(seed, user));
    const std::vector<double> scores = scorer(user, history, sample.candidates);
    const ItemIndex rel[] = {target};
    const RankedList ranked = rank_candidates(sample.candidates, scores, rel);
    n5 += ndcg_at_k(ranked, 5);
    r5 += recall_at_k(ranked, 5);
    n10 += ndcg_at_k(ranked, 10);
    r10 += recall_at_k(ranked, 10);
    ++report.n_users;
  }
  if (report.n_users > 0) {
    const double inv = 1.0 / static_cast<double>(report.n_users);
    report.ndcg5 = n5 * inv;
    report.recall5 = r5 * inv;
    report.ndcg10 = n10 * inv;
    report.recall10 = r10 * inv;
  }
  return report;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw Error("eval", "no reports to average");
  MetricsReport mean;
  mean.split = reports.front().split;
  mean.n_users = reports.front().n_users;
  mean.skipped_users = reports.front().skipped_users;
  mean.config_digest = reports.front().config_digest;
  for (const MetricsReport& r : reports) {
    mean.ndcg5 += r.ndcg5;
    mean.recall5 += r.recall5;
    mean.ndcg10 += r.ndcg10;
    mean.recall10 += r.recall10;
    mean.seeds.insert(mean.seeds.end(), r.seeds.begin(), r.seeds.end());
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  mean.ndcg5 *= inv;
  mean.recall5 *= inv;
  mean.ndcg10 *= inv;
  mean.recall10 *= inv;
  return mean;
}

std::vector<double> item_popularity(const LeaveOneOut& split, std::size_t n_items) {
  std::vector<double> counts(n_items + 1, 0.0);
  for (const auto& [u, view] : split.splits)
    for (ItemIndex i : view.train) counts.at(i) += 1.0;
  return counts;
}

Scorer pop_baseline(const PreparedData& data) {
  auto counts = std::make_shared<std::vector<double>>(item_popularity(data.split, data.corpus.n_items()));
  return [counts](UserIndex, std::span<const ItemIndex>, std::span<const ItemIndex> candidates) {
    std::vector<double> s;
    s.reserve(candidates.size());
    for (ItemIndex i : candidates) s.push_back(i < counts->size() ? (*counts)[i] : 0.0);
    return s;
  };
}

Scorer make_model_scorer(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                         const GlobalGraph& graph) {
  struct State {
    ModelParams params;
    HyperParams hp;
    Ablation ablation;
    Tensor global;
  };
  auto st = std::make_shared<State>(State{params, hp, ablation, {}});
  if (uses_global(ablation)) st->global = global_aggregate(graph, params.item_embed, params.channel_W, hp.activation).z;
  return [st](UserIndex, std::span<const ItemIndex> history, std::span<const ItemIndex> candidates) {
    const std::size_t n = std::min(history.size(), st->hp.max_len);
    const auto items = history.last(n);
    Tape tape;
    ParamVars p = ParamVars::bind(tape, st->params, nullptr);
    std::optional<Var> g, l;
    if (uses_global(st->ablation)) {
      g = ad::gather_rows(tape.reference(st->global), std::vector<std::size_t>{items.back()});
    }
    if (uses_local(st->ablation)) {
      const SequenceForward f =
          sequence_forward(p, st->hp, st->ablation, items, Tensor::matrix(n, st->hp.d_in), {});
      l = ad::slice_rows(f.z_l, n - 1, n);
    }
    const Tensor z = combine(p, st->ablation, g, l).value();
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (ItemIndex c : candidates) {
      const auto h = st->params.item_embed.row_span(c);
      double s = 0.0;
      for (std::size_t d = 0; d < h.size(); ++d) s += z[d] * h[d];
      scores.push_back(s);
    }
    return scores;
  };
}

void write_metrics_json(const std::filesystem::path& file, const MetricsReport& mean,
                        std::span<const MetricsReport> per_seed, const std::string& timestamp) {
  using nlohmann::ordered_json;
  auto row = [](const MetricsReport& r) {
    ordered_json j;
    j["split"] = r.split;
    j["n_users"] = r.n_users;
    j["ndcg@5"] = r.ndcg5;
    j["recall@5"] = r.recall5;
    j["ndcg@10"] = r.ndcg10;
    j["recall@10"] = r.recall10;
    j["seeds"] = r.seeds;
    return j;
  };
  ordered_json j = row(mean);
  j["config_digest"] = mean.config_digest;
  j["skipped_users"] = mean.skipped_users;
  j["per_seed"] = ordered_json::array();
  for (const MetricsReport& r : per_seed) j["per_seed"].push_back(row(r));
  j["timestamp"] = timestamp;
  std::ofstream out(file);
  if (!out) throw Error("eval", "cannot write " + file.string());
  out << j.dump(2) << '\n';
}

}  // namespace egd
