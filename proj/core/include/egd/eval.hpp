#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "egd/corpus.hpp"
#include "egd/graph.hpp"
#include "egd/model.hpp"

namespace egd {

// Candidates in descending score order; ties are broken by ascending item
// index.
struct RankedList {
  std::vector<ItemIndex> items;
  std::vector<bool> relevant;

  std::size_t relevant_count() const;
};

RankedList rank_candidates(std::span<const ItemIndex> candidates, std::span<const double> scores,
                           std::span<const ItemIndex> relevant);

// DCG@K / IDCG@K with binary relevance and IDCG over min(K, |relevant|)
// ideal positions. Throws when nothing is relevant.
double ndcg_at_k(const RankedList& ranked, std::size_t k);
// |relevant in top K| / |relevant|. Throws when nothing is relevant.
double recall_at_k(const RankedList& ranked, std::size_t k);

enum class EvalSplit { Valid, Test };
EvalSplit parse_eval_split(const std::string& name);
std::string to_string(EvalSplit split);

// Scores `candidates` for `user` given the items before the evaluation target.
using Scorer = std::function<std::vector<double>(UserIndex user, std::span<const ItemIndex> history,
                                                 std::span<const ItemIndex> candidates)>;

struct MetricsReport {
  std::string split;
  std::size_t n_users = 0;
  std::size_t skipped_users = 0;
  double ndcg5 = 0.0, recall5 = 0.0, ndcg10 = 0.0, recall10 = 0.0;
  std::vector<std::uint64_t> seeds;
  std::string config_digest;
};

inline constexpr std::size_t kEvalNegatives = 100;

// Leave-one-out protocol: per user, the target is ranked against sampled
// negatives (seeded by hash(seed, user index)). The validation split scores
// from the training prefix; the test split from training prefix + validation
// item. Users are reduced in index order.
MetricsReport evaluate(const Scorer& scorer, const PreparedData& data, EvalSplit split, std::uint64_t seed,
                       std::size_t negatives = kEvalNegatives);

// Mean of several reports (same split); seeds are concatenated.
MetricsReport average_reports(std::span<const MetricsReport> reports);

// Popularity: training-interaction count per item, identical for all users.
std::vector<double> item_popularity(const LeaveOneOut& split, std::size_t n_items);
Scorer pop_baseline(const PreparedData& data);

// Dot-product scorer over the sequential representation at the last history
// position; the latent sample is replaced by its mean and dropout is off.
Scorer make_model_scorer(const ModelParams& params, const HyperParams& hp, Ablation ablation,
                         const GlobalGraph& graph);

// metrics.json: split, n_users, ndcg@5, recall@5, ndcg@10, recall@10, seeds,
// config_digest, plus per_seed rows and a timestamp field.
void write_metrics_json(const std::filesystem::path& file, const MetricsReport& mean,
                        std::span<const MetricsReport> per_seed, const std::string& timestamp);

}  // namespace egd
