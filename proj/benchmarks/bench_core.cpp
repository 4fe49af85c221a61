// Microbenchmarks for the kernels that dominate solver wall time: curvature
// matrix-vector products, the factored preconditioner, the dense
// eigendecomposition, and whole solver iterations.

#include <benchmark/benchmark.h>

#include <vector>

#include "astra/attribution.hpp"
#include "astra/data.hpp"
#include "astra/ekfac.hpp"
#include "astra/ihvp.hpp"
#include "astra/linalg.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"
#include "astra/trainer.hpp"

namespace {

using namespace astra;

struct Problem {
  MlpSpec spec;
  Dataset data;
  ParamVector params;
  EkfacState state;
  ParamVector v;
};

const Problem& problem() {
  static const Problem p = [] {
    Problem out;
    out.spec = MlpSpec{{16, 16, 8, 1}, TaskKind::kRegression};
    out.data = synth_regression(512, 16, 0.2, 7);
    TrainConfig tc;
    tc.lr.base = 0.05;
    tc.batch_size = 32;
    tc.epochs = 5;
    tc.init_seed = 11;
    tc.batch_seed = 12;
    out.params = train(out.spec, out.data.examples, tc).final_params();
    out.state = build_attribution_state(out.spec, out.params, out.data.examples, 21);
    out.v.resize(out.params.size());
    Rng rng(99);
    for (double& e : out.v) e = rng.normal();
    return out;
  }();
  return p;
}

void BM_GgnVec(benchmark::State& state) {
  const Problem& p = problem();
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const std::span<const Example> span(p.data.examples.data(), batch);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ggn_vec(p.spec, p.params, span, p.v));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_GgnVec)->Arg(32)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_Precondition(benchmark::State& state) {
  const Problem& p = problem();
  for (auto _ : state) {
    benchmark::DoNotOptimize(precondition(p.state, 0.1, p.v));
  }
}
BENCHMARK(BM_Precondition)->Unit(benchmark::kMicrosecond);

void BM_SymEigh(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  DenseMatrix b(n, n);
  for (double& e : b.data) e = rng.normal();
  DenseMatrix spd = matmul(transpose(b), b);
  for (std::size_t i = 0; i < n; ++i) spd(i, i) += 1.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sym_eigh(spd));
  }
}
BENCHMARK(BM_SymEigh)->Arg(17)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_SniIterations(benchmark::State& state) {
  const Problem& p = problem();
  SolverConfig cfg;
  cfg.lr = 0.05;
  cfg.damping = 0.1;
  cfg.iterations = static_cast<int>(state.range(0));
  cfg.batch_size = 128;
  cfg.seed = 3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sni_solve(p.spec, p.params, p.data.examples, p.v, cfg));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SniIterations)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_AstraIterations(benchmark::State& state) {
  const Problem& p = problem();
  SolverConfig cfg;
  cfg.lr = 0.01;
  cfg.damping = 0.1;
  cfg.iterations = static_cast<int>(state.range(0));
  cfg.batch_size = 128;
  cfg.momentum = 0.9;
  cfg.seed = 3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        astra_solve(p.spec, p.params, p.data.examples, p.state, p.v, cfg));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AstraIterations)->Arg(50)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
