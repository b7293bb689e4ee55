#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "hdc/kernels.hpp"

using namespace hdc::kernels;

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const int64_t n = state.range(0);
  const GemmDims d{n, n, n};
  const auto a = random_vec(static_cast<size_t>(n * n), 1), b = random_vec(static_cast<size_t>(n * n), 2);
  std::vector<float> c(static_cast<size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::gemm(d, a.data(), b.data(), c.data(), false);
    else
      serial::gemm(d, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

ConvGeometry conv_geometry(int64_t channels, int64_t size) {
  ConvGeometry g;
  g.batch = 2;
  g.in_channels = g.out_channels = channels;
  g.in_h = g.in_w = size;
  g.kernel_h = g.kernel_w = 3;
  g.pad = 1;
  return g;
}

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
  const ConvGeometry g = conv_geometry(state.range(0), state.range(1));
  const auto x = random_vec(static_cast<size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 3);
  const auto w = random_vec(static_cast<size_t>(g.out_channels * g.in_channels * 9), 4);
  const auto bias = random_vec(static_cast<size_t>(g.out_channels), 5);
  std::vector<float> y(static_cast<size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()));
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    else
      serial::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
  const ConvGeometry g = conv_geometry(state.range(0), state.range(1));
  const auto x = random_vec(static_cast<size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 6);
  const auto w = random_vec(static_cast<size_t>(g.out_channels * g.in_channels * 9), 7);
  const auto dy = random_vec(static_cast<size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()), 8);
  std::vector<float> dx(x.size()), dw(w.size()), db(static_cast<size_t>(g.out_channels));
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    else
      serial::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dx.data());
  }
}

struct ScanData {
  ScanDims d;
  std::vector<float> x, delta, a, b, c, y, states, dy;
  std::vector<float> gx, gdelta, ga, gb, gc;

  ScanData(int64_t length, int64_t channels) : d{2, length, channels, 4} {
    const auto blc = static_cast<size_t>(d.batch * d.length * d.channels);
    const auto bls = static_cast<size_t>(d.batch * d.length * d.state);
    x = random_vec(blc, 9);
    delta = random_vec(blc, 10, 0.01f, 0.5f);
    a = random_vec(static_cast<size_t>(d.channels * d.state), 11, -4.0f, -0.5f);
    b = random_vec(bls, 12);
    c = random_vec(bls, 13);
    dy = random_vec(blc, 14);
    y.resize(blc);
    states.resize(blc * static_cast<size_t>(d.state));
    gx.resize(blc);
    gdelta.resize(blc);
    ga.resize(a.size());
    gb.resize(bls);
    gc.resize(bls);
  }
  ScanInputs<float> inputs() const { return {x, delta, a, b, c}; }
  ScanGrads<float> grads() { return {gx, gdelta, ga, gb, gc}; }
};

template <bool Parallel>
void BM_scan_forward(benchmark::State& state) {
  ScanData s(state.range(0), state.range(1));
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::selective_scan_forward(s.d, s.inputs(), s.y.data(), s.states.data());
    else
      serial::selective_scan_forward(s.d, s.inputs(), s.y.data(), s.states.data());
    benchmark::DoNotOptimize(s.y.data());
  }
}

template <bool Parallel>
void BM_scan_backward(benchmark::State& state) {
  ScanData s(state.range(0), state.range(1));
  serial::selective_scan_forward(s.d, s.inputs(), s.y.data(), s.states.data());
  for (auto _ : state) {
    if constexpr (Parallel)
      parallel::selective_scan_backward(s.d, s.inputs(), s.states.data(), s.dy.data(), s.grads());
    else
      serial::selective_scan_backward(s.d, s.inputs(), s.states.data(), s.dy.data(), s.grads());
    benchmark::DoNotOptimize(s.gx.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_conv_forward<false>)->Name("conv_forward/serial")->Args({16, 32})->Args({32, 64});
BENCHMARK(BM_conv_forward<true>)->Name("conv_forward/parallel")->Args({16, 32})->Args({32, 64});
BENCHMARK(BM_conv_backward<false>)->Name("conv_backward/serial")->Args({16, 32})->Args({32, 64});
BENCHMARK(BM_conv_backward<true>)->Name("conv_backward/parallel")->Args({16, 32})->Args({32, 64});
BENCHMARK(BM_scan_forward<false>)->Name("scan_forward/serial")->Args({64, 64})->Args({256, 128});
BENCHMARK(BM_scan_forward<true>)->Name("scan_forward/parallel")->Args({64, 64})->Args({256, 128});
BENCHMARK(BM_scan_backward<false>)->Name("scan_backward/serial")->Args({64, 64})->Args({256, 128});
BENCHMARK(BM_scan_backward<true>)->Name("scan_backward/parallel")->Args({64, 64})->Args({256, 128});

BENCHMARK_MAIN();
