// Serial reference vs OpenMP kernels. Set OMP_NUM_THREADS to compare thread
// counts; on one core any gap comes from loop order alone.

#include <cstdint>
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "deepir/kernels.hpp"

namespace k = deepir::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Middle layer of the default backbone at a 128 px input.
k::ConvGeometry bench_geometry() { return k::make_conv_geometry(32, 64, 64, 32, 3, 3, 2, 1); }

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const auto g = bench_geometry();
  const auto in = random_vec(g.input_size(), 1);
  const auto w = random_vec(g.weight_size(), 2);
  const auto b = random_vec(g.out_channels, 3);
  std::vector<double> out(g.output_size());
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv2d_forward(g, in, w, b, out);
    else k::reference::conv2d_forward(g, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  const auto g = bench_geometry();
  const auto in = random_vec(g.input_size(), 1);
  const auto w = random_vec(g.weight_size(), 2);
  const auto go = random_vec(g.output_size(), 3);
  std::vector<double> gi(g.input_size()), gw(g.weight_size()), gb(g.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv2d_backward(g, in, w, go, gi, gw, gb);
    else k::reference::conv2d_backward(g, in, w, go, gi, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void BM_DotScan(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), dim = 24;
  const auto rows = random_vec(n * dim, 1);
  const auto q = random_vec(dim, 2);
  std::vector<double> scores(n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::dot_scan(rows, dim, q, scores);
    else k::reference::dot_scan(rows, dim, q, scores);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

template <bool Parallel>
void BM_AdcScan(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), m = 8, ksub = 256;
  std::mt19937 rng(4);
  std::vector<std::uint8_t> codes(n * m);
  for (auto& c : codes) c = static_cast<std::uint8_t>(rng() & 0xff);
  const auto tables = random_vec(m * ksub, 5);
  std::vector<double> scores(n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::adc_scan(codes, m, tables, ksub, scores);
    else k::reference::adc_scan(codes, m, tables, ksub, scores);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

template <bool Parallel>
void BM_AssignNearest(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), dim = 3, kc = 256;
  const auto points = random_vec(n * dim, 1);
  const auto centroids = random_vec(kc * dim, 2);
  std::vector<std::uint32_t> labels(n);
  std::vector<double> sq(n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::assign_nearest(points, dim, centroids, labels, sq);
    else k::reference::assign_nearest(points, dim, centroids, labels, sq);
    benchmark::DoNotOptimize(labels.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/omp");
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/omp");
BENCHMARK(BM_DotScan<false>)->Name("dot_scan/reference")->Arg(100000);
BENCHMARK(BM_DotScan<true>)->Name("dot_scan/omp")->Arg(100000);
BENCHMARK(BM_AdcScan<false>)->Name("adc_scan/reference")->Arg(100000);
BENCHMARK(BM_AdcScan<true>)->Name("adc_scan/omp")->Arg(100000);
BENCHMARK(BM_AssignNearest<false>)->Name("assign_nearest/reference")->Arg(10000);
BENCHMARK(BM_AssignNearest<true>)->Name("assign_nearest/omp")->Arg(10000);

BENCHMARK_MAIN();
