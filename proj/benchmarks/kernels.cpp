#include "rrn/costvolume.hpp"
#include "rrn/model.hpp"
#include "rrn/ops.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace rrn;

namespace {

Tensor<float> noise(int c, Grid3 g, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Tensor<float> t(c, g);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

void BM_Conv3(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int ch = static_cast<int>(state.range(1));
    const auto x = noise(ch, {n, n, n}, 1);
    diff::ConvWeights<float> w(ch, ch);
    const auto wt = noise(1, {ch, ch, 27}, 2);
    std::copy(wt.values().begin(), wt.values().end(), w.weight.begin());
    for (auto _ : state) benchmark::DoNotOptimize(diff::conv3_forward(x, w));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Conv3)->Args({16, 32})->Args({32, 32})->Args({32, 64})->Unit(benchmark::kMillisecond);

void BM_Correlate(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto norm = state.range(1) == 0 ? cost::Neighborhood::l1 : cost::Neighborhood::linf;
    const auto a = noise(32, {n, n, n}, 3);
    const auto b = noise(32, {n, n, n}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(cost::correlate(a, b, 2, norm));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Correlate)->Args({16, 0})->Args({32, 0})->Args({32, 1})->Unit(benchmark::kMillisecond);

void BM_CorrelateNaive(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto a = noise(32, {n, n, n}, 3);
    const auto b = noise(32, {n, n, n}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(cost::correlate_naive(a, b, 2, cost::Neighborhood::l1));
}
BENCHMARK(BM_CorrelateNaive)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Warp(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto img = noise(1, {n, n, n}, 5);
    auto d = noise(3, {n, n, n}, 6);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 3.0f;
    for (auto _ : state) benchmark::DoNotOptimize(diff::warp_forward(img, d));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Warp)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
