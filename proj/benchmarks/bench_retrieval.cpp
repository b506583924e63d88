#include <benchmark/benchmark.h>

#include <memory>

#include "hsnn/experiment.hpp"

namespace {

// One trained model shared by every retrieval benchmark.
struct Fixture {
  hsnn::RunConfig config;
  hsnn::FeatureSchema schema;
  hsnn::Dataset data;
  hsnn::ServingSnapshot snapshot;
  hsnn::InvertedIndex index;
  hsnn::I2ifIndex i2if;
};

const Fixture& fixture() {
  static const std::unique_ptr<Fixture> f = [] {
    auto f = std::make_unique<Fixture>();
    f->config.world.num_items = 5000;
    f->config.stream.examples_per_epoch = 20000;
    f->config.model.nodes = {50};
    f->schema = f->config.schema();
    f->data = hsnn::generate_dataset(f->config, 1);
    const hsnn::TrainedRun run = hsnn::train_run(f->config, 1, f->data);
    f->snapshot = hsnn::split_model(run.model, run.index.version(), run.trace.steps);
    f->index = hsnn::InvertedIndex::build(f->snapshot, run.index, f->data.world.items(), f->schema);
    f->i2if = hsnn::build_i2if_index(f->data.world.items());
    return f;
  }();
  return *f;
}

void BM_RetrieveLayerwise(benchmark::State& state) {
  const Fixture& f = fixture();
  hsnn::RetrievalBudget budget;
  budget.beam = {std::size_t(state.range(0))};
  budget.top_k = 100;
  std::size_t u = 0, scored = 0;
  for (auto _ : state) {
    const hsnn::User& user = f.data.world.users()[u++ % f.data.world.users().size()];
    const hsnn::RetrievalResult r = hsnn::retrieve_layerwise(f.snapshot, f.index, f.schema, user, f.i2if, budget);
    scored += r.cost.items_scored;
    benchmark::DoNotOptimize(r);
  }
  state.counters["items_scored"] = benchmark::Counter(double(scored), benchmark::Counter::kAvgIterations);
}
BENCHMARK(BM_RetrieveLayerwise)->Arg(2)->Arg(5)->Arg(13)->Unit(benchmark::kMillisecond);

void BM_RetrieveBruteForce(benchmark::State& state) {
  const Fixture& f = fixture();
  std::size_t u = 0;
  for (auto _ : state) {
    const hsnn::User& user = f.data.world.users()[u++ % f.data.world.users().size()];
    benchmark::DoNotOptimize(hsnn::retrieve_brute_force(f.snapshot, f.index, f.schema, user, f.i2if, 100));
  }
}
BENCHMARK(BM_RetrieveBruteForce)->Unit(benchmark::kMillisecond);

}  // namespace
