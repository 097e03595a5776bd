#include <benchmark/benchmark.h>

#include <random>

#include "segreg/nn/kernels.hpp"
#include "segreg/warp.hpp"

using namespace segreg;

namespace {

Grid<float> noise(int rows, int cols, int channels, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, scale);
  Grid<float> out(rows, cols, channels);
  for (float& v : out.values()) v = g(rng);
  return out;
}

struct ConvCase {
  nn::Tensor x;
  std::vector<float> w, b;
  int out;
};

ConvCase conv_case(const benchmark::State& st) {
  const int n = static_cast<int>(st.range(0)), cin = static_cast<int>(st.range(1)), cout = static_cast<int>(st.range(2));
  ConvCase c{noise(n, n, cin, 1), std::vector<float>(cout * cin * 9), std::vector<float>(cout), cout};
  const auto w = noise(1, 1, cout * cin * 9, 2, 0.1f);
  std::copy(w.values().begin(), w.values().end(), c.w.begin());
  return c;
}

void BM_ConvForward(benchmark::State& st) {
  const auto c = conv_case(st);
  for (auto _ : st) benchmark::DoNotOptimize(nn::conv2d_forward(c.x, c.w, c.b, c.out, 3));
}

void BM_ConvForwardSerial(benchmark::State& st) {
  const auto c = conv_case(st);
  for (auto _ : st) benchmark::DoNotOptimize(nn::reference::conv2d_forward(c.x, c.w, c.b, c.out, 3));
}

void BM_ConvBackward(benchmark::State& st) {
  const auto c = conv_case(st);
  const auto gy = noise(c.x.rows(), c.x.cols(), c.out, 3);
  std::vector<float> gw(c.w.size()), gb(c.b.size());
  for (auto _ : st) benchmark::DoNotOptimize(nn::conv2d_backward(c.x, c.w, c.out, 3, gy, gw, gb));
}

void BM_ConvBackwardSerial(benchmark::State& st) {
  const auto c = conv_case(st);
  const auto gy = noise(c.x.rows(), c.x.cols(), c.out, 3);
  std::vector<float> gw(c.w.size()), gb(c.b.size());
  for (auto _ : st) benchmark::DoNotOptimize(nn::reference::conv2d_backward(c.x, c.w, c.out, 3, gy, gw, gb));
}

void BM_Warp(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto img = noise(n, n, 1, 4), field = noise(n, n, 2, 5, 3.0f);
  for (auto _ : st) benchmark::DoNotOptimize(warp(img, field, Border::clamp));
}

void BM_WarpSerial(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto img = noise(n, n, 1, 4), field = noise(n, n, 2, 5, 3.0f);
  for (auto _ : st) benchmark::DoNotOptimize(reference::warp(img, field, Border::clamp));
}

}  // namespace

BENCHMARK(BM_ConvForward)->Args({64, 16, 16})->Args({128, 16, 32})->Args({256, 1, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForwardSerial)->Args({64, 16, 16})->Args({128, 16, 32})->Args({256, 1, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward)->Args({64, 16, 16})->Args({128, 16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardSerial)->Args({64, 16, 16})->Args({128, 16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Warp)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_WarpSerial)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
