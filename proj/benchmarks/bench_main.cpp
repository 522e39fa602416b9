#include <benchmark/benchmark.h>

#include <random>

#include "bswitch/attacks.hpp"
#include "bswitch/stochastic.hpp"

using namespace bswitch;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.values) v = u(rng);
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor x = uniform({batch, 28, 28, 1}, 1);
  const Tensor k = uniform({3, 3, 1, 32}, 2);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(conv2d(tape.constant(x), tape.constant(k), 1, Padding::kValid).value());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(32);

void BM_MnistInfer(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Sequential model = preset_mnist_cnn(3);
  const Tensor x = uniform({batch, 28, 28, 1}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(infer(model, x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_MnistInfer)->Arg(1)->Arg(128);

void BM_GradientQueryRegular(benchmark::State& state) {
  const Sequential model = preset_mnist_cnn(5);
  const Tensor x = uniform({28, 28, 1}, 6);
  GradientQuery q(model, 7);
  const QueryLoss loss = targeted_cross_entropy(3);
  for (auto _ : state) benchmark::DoNotOptimize(q.input_gradient(x, loss));
}
BENCHMARK(BM_GradientQueryRegular);

void BM_GradientQuerySwitching(benchmark::State& state) {
  std::vector<Sequential> pool;
  for (std::uint64_t s = 0; s < 5; ++s) pool.push_back(preset_mnist_cnn(s));
  const SwitchingModel sw = build_switching(pool, default_split_index(pool[0]), 1, 2);
  const Tensor x = uniform({28, 28, 1}, 8);
  GradientQuery q(sw, 9);
  const QueryLoss loss = targeted_cross_entropy(3);
  for (auto _ : state) benchmark::DoNotOptimize(q.input_gradient(x, loss));
}
BENCHMARK(BM_GradientQuerySwitching);

void BM_SapMask(benchmark::State& state) {
  const Tensor a = uniform({200}, 10);
  Rng rng(11);
  for (auto _ : state) benchmark::DoNotOptimize(sap_mask(a.values, 200, rng));
}
BENCHMARK(BM_SapMask);

}  // namespace

BENCHMARK_MAIN();
