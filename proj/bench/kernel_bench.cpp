// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <vector>

#include "cogs/kernels.hpp"
#include "cogs/nn.hpp"

using namespace cogs;
namespace k = cogs::kernels;

namespace {

std::vector<double> randn(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const int n = int(state.range(0));
  const auto a = randn(size_t(n) * n, 1), b = randn(size_t(n) * n, 2);
  std::vector<double> c(size_t(n) * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm(false, false, n, n, n, a.data(), b.data(), c.data());
    else k::serial::gemm(false, false, n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(n) * n * n);
}

template <bool Parallel>
void BM_Conv(benchmark::State& state) {
  k::ConvShape s{16, 32, 16, 16, 32, 3, 1, 1};
  s.height = s.width = int(state.range(0));
  const auto x = randn(size_t(s.batch) * s.in_channels * s.height * s.width, 3);
  const auto w = randn(size_t(s.out_channels) * s.patch(), 4);
  std::vector<double> y(size_t(s.batch) * s.out_channels * s.out_height() * s.out_width());
  for (auto _ : state) {
    if constexpr (Parallel) k::conv2d_forward(x.data(), w.data(), nullptr, s, y.data());
    else k::serial::conv2d_forward(x.data(), w.data(), nullptr, s, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_NearestRows(benchmark::State& state) {
  const int n = int(state.range(0)), K = 128, d = 64;
  const auto q = randn(size_t(n) * d, 5), t = randn(size_t(K) * d, 6);
  std::vector<int32_t> idx(static_cast<size_t>(n));
  std::vector<double> dist(static_cast<size_t>(n));
  for (auto _ : state) {
    if constexpr (Parallel) k::nearest_rows(q.data(), n, t.data(), K, d, idx.data(), dist.data());
    else k::serial::nearest_rows(q.data(), n, t.data(), K, d, idx.data(), dist.data());
    benchmark::DoNotOptimize(idx.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}

template <bool Parallel>
void BM_DistanceTransform(benchmark::State& state) {
  const int h = int(state.range(0));
  Rng rng(7);
  std::vector<uint8_t> e(size_t(h) * h);
  for (auto& v : e) v = uniform(rng) < 0.02;
  e[0] = 1;
  std::vector<double> out(e.size());
  for (auto _ : state) {
    if constexpr (Parallel) k::distance_transform(e.data(), h, h, out.data());
    else k::serial::distance_transform(e.data(), h, h, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_Conv<false>)->Name("conv/serial")->Arg(16)->Arg(32);
BENCHMARK(BM_Conv<true>)->Name("conv/omp")->Arg(16)->Arg(32);
BENCHMARK(BM_NearestRows<false>)->Name("nearest/serial")->Arg(1024)->Arg(16384);
BENCHMARK(BM_NearestRows<true>)->Name("nearest/omp")->Arg(1024)->Arg(16384);
BENCHMARK(BM_DistanceTransform<false>)->Name("edt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_DistanceTransform<true>)->Name("edt/omp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
