// OpenMP kernels against their serial references.
#include <benchmark/benchmark.h>

#include "qsdlab/fv_engine.hpp"
#include "qsdlab/models.hpp"
#include "qsdlab/spectral.hpp"

namespace {

using namespace qsdlab;

template <bool Parallel>
void bm_fv_step(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto model = make_model(presets::TorusDiffusion{}, 0.01);
  const UniformCubeMeasure init(1);
  auto ens = initial_ensemble(*model, n, init, 7);
  for (auto _ : state) {
    ens = Parallel ? fv_step(*model, ens) : fv_step_serial(*model, ens);
    benchmark::DoNotOptimize(ens.states().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}

template <bool Parallel>
void bm_step_kernel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    auto k = Parallel ? grid_step_kernel(presets::TorusDiffusion{}, 0.01, n)
                      : grid_step_kernel_serial(presets::TorusDiffusion{}, 0.01, n);
    benchmark::DoNotOptimize(k.m.data());
  }
}

}  // namespace

BENCHMARK(bm_fv_step<true>)->Name("fv_step/openmp")->RangeMultiplier(4)->Range(1 << 10, 1 << 16);
BENCHMARK(bm_fv_step<false>)->Name("fv_step/serial")->RangeMultiplier(4)->Range(1 << 10, 1 << 16);
BENCHMARK(bm_step_kernel<true>)->Name("grid_step_kernel/openmp")->Arg(200)->Arg(800);
BENCHMARK(bm_step_kernel<false>)->Name("grid_step_kernel/serial")->Arg(200)->Arg(800);

BENCHMARK_MAIN();
