// OpenMP kernels vs the serial reference implementations.

#include <random>

#include <benchmark/benchmark.h>
#include <omp.h>

#include "kdseg/kernels.hpp"
#include "kdseg/metrics.hpp"

using namespace kdseg;

namespace {

Tensorf random(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensorf t(n, c, h, w);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

LabelMap random_labels(std::size_t n, std::size_t h, std::size_t w, std::int32_t classes, std::uint64_t seed,
                       bool with_ignore) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> d(0, classes);
  std::vector<std::int32_t> v(n * h * w);
  for (auto& x : v) x = d(rng) == classes && with_ignore ? kDefaultIgnoreId : d(rng) % classes;
  return LabelMap(n, h, w, std::move(v));
}

// Args: batch, channels, spatial extent.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({8, 32, 32})->Args({8, 64, 16})->Args({4, 16, 64});
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             s = static_cast<std::size_t>(state.range(2));
  const Tensorf x = random(n, c, s, s, 1), w = random(c, c, 3, 3, 2), bias = random(c, 1, 1, 1, 3);
  const ConvGeometry g;
  for (auto _ : state) {
    Tensorf y = Parallel ? kernels::conv2d_forward(x, w, bias, g) : reference::conv2d_forward(x, w, bias, g);
    benchmark::DoNotOptimize(y.storage().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * c * c * s * s * 9));
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             s = static_cast<std::size_t>(state.range(2));
  const Tensorf x = random(n, c, s, s, 1), w = random(c, c, 3, 3, 2), dy = random(n, c, s, s, 4);
  const ConvGeometry g;
  Tensorf dx, dw(w.shape()), db(c, 1, 1, 1);
  for (auto _ : state) {
    ConvGrads<float> grads{&dx, &dw, &db};
    if (Parallel) kernels::conv2d_backward(x, w, dy, g, grads);
    else reference::conv2d_backward(x, w, dy, g, grads);
    benchmark::DoNotOptimize(dx.storage().data());
  }
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const Tensorf x = random(8, static_cast<std::size_t>(state.range(0)), 64, 64, 5);
  Tensorf out(x.shape());
  for (auto _ : state) {
    if (Parallel) kernels::softmax_channels(x, 2.0, out);
    else reference::softmax_channels(x, 2.0, out);
    benchmark::DoNotOptimize(out.storage().data());
  }
}

template <bool Parallel>
void BM_Confusion(benchmark::State& state) {
  const LabelMap pred = random_labels(8, 256, 256, 19, 6, false), truth = random_labels(8, 256, 256, 19, 7, true);
  for (auto _ : state) {
    ConfusionMatrix cm = Parallel ? accumulate(ConfusionMatrix(19), pred, truth)
                                  : reference::accumulate(ConfusionMatrix(19), pred, truth);
    benchmark::DoNotOptimize(cm);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * pred.size()));
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/openmp")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/openmp")->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Softmax<false>)->Name("softmax/reference")->Arg(19)->Arg(150)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Softmax<true>)->Name("softmax/openmp")->Arg(19)->Arg(150)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Confusion<false>)->Name("confusion/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Confusion<true>)->Name("confusion/openmp")->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  benchmark::AddCustomContext("omp_max_threads", std::to_string(omp_get_max_threads()));
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
