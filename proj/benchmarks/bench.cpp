#include <benchmark/benchmark.h>

#include "egd/eval.hpp"
#include "egd/training.hpp"
#include "synthetic.hpp"

using namespace egd;

namespace {

struct Fixture {
  PreparedData data;
  GlobalGraph graph;
  HyperParams hp;
  ModelParams params;
  std::vector<TrainingWindow> windows;

  explicit Fixture(std::size_t n_items) {
    data = prepare(InteractionCorpus::from_events(synthetic::random_log(n_items, 500, 10, 60, 1)));
    graph = build_global_graph(training_sequences(data.split), data.corpus.n_items());
    hp.channels = 5;
    hp.d_in = 64;
    hp.d_channel = 16;
    hp.max_len = 50;
    hp.batch_size = 64;
    params = ModelParams::initialize(hp, data.corpus.n_items(), 1);
    windows = collect_training_windows(data.split, hp.max_len);
  }
};

const Fixture& fixture() {
  static const Fixture f(2000);
  return f;
}

void BM_GlobalAggregate(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(global_aggregate(f.graph, f.params.item_embed, f.params.channel_W));
  state.counters["edges"] = static_cast<double>(f.graph.edge_count());
}
BENCHMARK(BM_GlobalAggregate)->Unit(benchmark::kMillisecond);

void BM_BatchLossForward(benchmark::State& state) {
  const Fixture& f = fixture();
  const std::span<const TrainingWindow> batch(f.windows.data(), f.hp.batch_size);
  for (auto _ : state) {
    Tape tape;
    const ParamVars p = ParamVars::bind(tape, f.params, nullptr);
    benchmark::DoNotOptimize(batch_loss(p, f.hp, Ablation::Full, f.graph, batch, BatchNoise{1, 0, true, {}}).loss.value());
  }
}
BENCHMARK(BM_BatchLossForward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const Fixture& f = fixture();
  const auto ablation = static_cast<Ablation>(state.range(0));
  ModelParams params = f.params;
  AdamState adam = AdamState::zeros_like(params);
  const std::span<const TrainingWindow> batch(f.windows.data(), f.hp.batch_size);
  std::uint64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(params, adam, f.hp, ablation, f.graph, batch, BatchNoise{1, step++, true, {}}));
  state.SetLabel(to_string(ablation));
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 4)->Unit(benchmark::kMillisecond);

void BM_EvaluatePop(benchmark::State& state) {
  const Fixture& f = fixture();
  const Scorer pop = pop_baseline(f.data);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(pop, f.data, EvalSplit::Test, 1));
}
BENCHMARK(BM_EvaluatePop)->Unit(benchmark::kMillisecond);

void BM_EvaluateModel(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) {
    const Scorer s = make_model_scorer(f.params, f.hp, Ablation::Full, f.graph);
    benchmark::DoNotOptimize(evaluate(s, f.data, EvalSplit::Test, 1));
  }
}
BENCHMARK(BM_EvaluateModel)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
