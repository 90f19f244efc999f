// Serial reference vs OpenMP kernels at the shapes the default model uses
// (batch 8, 48 segments).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "hstgcn/kernels.hpp"

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Gemm(a.data(), b.data(), c.data(), m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <auto GemmTn>
void BM_gemm_tn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  auto a = random_vec(m * k, 1), b = random_vec(m * n, 2);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    GemmTn(a.data(), b.data(), c.data(), m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <auto Cheb>
void BM_chebyshev(benchmark::State& state) {
  const std::size_t n = 48, cols = 4 * 192, order = 3;
  auto op = random_vec(n * n, 3), x = random_vec(n * cols, 4);
  std::vector<std::vector<double>> out(order, std::vector<double>(n * cols));
  std::vector<double*> ptrs;
  for (auto& o : out) ptrs.push_back(o.data());
  for (auto _ : state) {
    Cheb(op.data(), n, x.data(), cols, order, ptrs.data());
    benchmark::DoNotOptimize(ptrs[order - 1]);
  }
}

// Γ2-shaped convolution: 8·48 rows × 4 outputs, window 3×14 → 256 channels.
#define GEMM_SHAPES ->Args({1536, 42, 256})->Args({1536, 576, 64})->Args({768, 192, 128})

BENCHMARK(BM_gemm<hstgcn::kernels::serial::gemm>) GEMM_SHAPES;
BENCHMARK(BM_gemm<hstgcn::kernels::parallel::gemm>) GEMM_SHAPES;
BENCHMARK(BM_gemm_tn<hstgcn::kernels::serial::gemm_tn>) GEMM_SHAPES;
BENCHMARK(BM_gemm_tn<hstgcn::kernels::parallel::gemm_tn>) GEMM_SHAPES;
BENCHMARK(BM_chebyshev<hstgcn::kernels::serial::chebyshev_basis>);
BENCHMARK(BM_chebyshev<hstgcn::kernels::parallel::chebyshev_basis>);

}  // namespace

BENCHMARK_MAIN();
