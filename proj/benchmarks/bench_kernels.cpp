#include <benchmark/benchmark.h>

#include <vector>

#include "hsnn/index.hpp"
#include "hsnn/numerics.hpp"

namespace {

hsnn::Matrix random_points(std::size_t n, std::size_t d, hsnn::Rng& rng) {
  hsnn::Matrix m(n, d);
  for (double& x : m.values()) x = hsnn::normal(rng);
  return m;
}

void BM_MlpForward(benchmark::State& state) {
  hsnn::Rng rng(1);
  const std::size_t width = state.range(0);
  const std::vector<std::size_t> widths{width, width, 2};
  const hsnn::Mlp mlp = hsnn::Mlp::make(32, widths, hsnn::Activation::identity, rng);
  hsnn::Vec x(32);
  for (double& v : x) v = hsnn::normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(mlp.forward(x));
  state.counters["macs"] = double(mlp.macs());
}
BENCHMARK(BM_MlpForward)->Arg(16)->Arg(64)->Arg(256);

void BM_MlpBackward(benchmark::State& state) {
  hsnn::Rng rng(2);
  const std::vector<std::size_t> widths{64, 64, 2};
  const hsnn::Mlp mlp = hsnn::Mlp::make(32, widths, hsnn::Activation::identity, rng);
  hsnn::Vec x(32);
  for (double& v : x) v = hsnn::normal(rng);
  hsnn::Mlp grads = mlp.zeros_like();
  const hsnn::Vec g{1.0, -1.0};
  for (auto _ : state) {
    hsnn::Mlp::Tape tape;
    mlp.forward(x, tape);
    benchmark::DoNotOptimize(mlp.backward(tape, g, grads));
  }
}
BENCHMARK(BM_MlpBackward);

void BM_LtiForwardBackward(benchmark::State& state) {
  hsnn::Rng rng(3);
  const std::size_t K = state.range(0);
  const hsnn::Matrix nodes = random_points(K, 8, rng);
  hsnn::Vec v(8), g(8, 0.1);
  for (double& x : v) x = hsnn::normal(rng);
  hsnn::Matrix grad_nodes(K, 8);
  for (auto _ : state) {
    const hsnn::LtiForward f = hsnn::lti_forward(v, nodes, 10.0);
    benchmark::DoNotOptimize(hsnn::lti_backward(v, nodes, 10.0, f, g, {}, grad_nodes));
  }
}
BENCHMARK(BM_LtiForwardBackward)->Arg(20)->Arg(100)->Arg(1000);

void BM_KMeans(benchmark::State& state) {
  hsnn::Rng data_rng(4);
  const hsnn::Matrix points = random_points(state.range(0), 8, data_rng);
  for (auto _ : state) {
    hsnn::Rng rng(5);
    benchmark::DoNotOptimize(hsnn::kmeans(points, 20, 10, rng));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_KMeans)->Arg(2000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_ResidualAssign(benchmark::State& state) {
  hsnn::Rng rng(6);
  const std::vector<hsnn::Matrix> books{random_points(100, 8, rng), random_points(10, 8, rng)};
  hsnn::Vec v(8);
  for (double& x : v) x = hsnn::normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(hsnn::residual_assign(v, books));
}
BENCHMARK(BM_ResidualAssign);

}  // namespace

BENCHMARK_MAIN();
