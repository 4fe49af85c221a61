#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "astra/ekfac.hpp"
#include "astra/model.hpp"

namespace astra {

enum class SolverInit {
  kDefault,                     // query gradient; preconditioned when available
  kZero,
  kQueryGradient,
  kPreconditionedQueryGradient  // requires a curvature state
};

// Shared configuration for the stochastic iteration solvers.
struct SolverConfig {
  double lr = 0.01;
  double damping = 1e-3;           // lambda on the curvature being inverted
  double precond_damping = -1.0;   // lambda-tilde; negative means "same as damping"
  int iterations = 200;
  int batch_size = 256;            // clamped to the dataset size; 0 = full batch
  double momentum = 0.0;
  int lr_decay_every = 0;          // 0 disables the step decay
  double lr_decay_factor = 1.0;
  int repeats = 1;                 // independent runs averaged at the end
  std::uint64_t seed = 0;
  SolverInit init = SolverInit::kDefault;
  int snapshot_stride = 0;         // 0 disables iterate snapshots
};

// Appendix-style defaults: lr = 0.1 * damping, momentum 0.9, lr halved every
// 50 iterations, 200 iterations, batch 256.
SolverConfig default_astra_config(double damping);
SolverConfig default_sni_config(double damping);

struct TraceEntry {
  int iteration = 0;
  double objective = 0.0;  // mini-batch quadratic objective at this iterate
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct SolveTrace {
  std::vector<TraceEntry> entries;
  std::vector<std::pair<int, ParamVector>> snapshots;  // (iteration, iterate)
};

struct SolveResult {
  ParamVector x;
  SolveTrace trace;
};

// Dense damped-curvature solve: assembles the full Gauss-Newton matrix
// column by column (guarded to dimension <= 2000), adds lambda I, factorizes.
// The residual is verified to 1e-10 relative before returning.
ParamVector exact_ihvp(const MlpSpec& spec, const ParamVector& params,
                       std::span<const Example> examples, double lambda,
                       std::span<const double> v);

// Dense Gauss-Newton matrix over the dataset (test oracle and exact solver
// backend; same dimension guard).
DenseMatrix assemble_dense_ggn(const MlpSpec& spec, const ParamVector& params,
                               std::span<const Example> examples);

// Stochastic Neumann iterations on the damped quadratic: each step samples a
// mini-batch with replacement and moves against the residual
// (G_batch + lambda I) theta - v, with optional heavy-ball momentum and step
// decay.  Repeats run independently and average.  Diverging iterations raise
// DivergenceError (objective above 1e6x its initial magnitude, or non-finite).
SolveResult sni_solve(const MlpSpec& spec, const ParamVector& params,
                      std::span<const Example> examples, std::span<const double> v,
                      const SolverConfig& config);

// Same iteration with every step passed through the damped Kronecker
// preconditioner (P + lambda-tilde I)^{-1}.  Momentum acts on the
// preconditioned step.
SolveResult astra_solve(const MlpSpec& spec, const ParamVector& params,
                        std::span<const Example> examples, const EkfacState& state,
                        std::span<const double> v, const SolverConfig& config);

// h(theta) = 1/2 theta^T (G + lambda I) theta - theta^T v over the full
// dataset; the solvers minimize exactly this in expectation.
double quadratic_objective(const MlpSpec& spec, const ParamVector& params,
                           std::span<const Example> examples, double lambda,
                           std::span<const double> v, std::span<const double> theta);

// Deterministic truncated Neumann series
//   alpha * sum_{j=0}^{J-1} (I - alpha (G + lambda I))^j v
// evaluated by Horner's rule; `apply_g` maps a vector to G times it.
std::vector<double> truncated_neumann_apply(
    const std::function<std::vector<double>(std::span<const double>)>& apply_g,
    double alpha, double lambda, int terms, std::span<const double> v);

// Damping such that (G + lambda-hat I)^{-1} mimics the truncated series:
// lambda + 1 / (alpha * terms).
double effective_damping(double alpha, double lambda, int terms);

// Learning-rate sweep: runs the solver once per grid value, scores each run
// by the mean mini-batch objective over its last ten trace entries, and keeps
// the best finite run (diverged runs are skipped; all-diverged raises).
struct SweepOutcome {
  double best_lr = 0.0;
  std::vector<std::pair<double, double>> scores;  // (lr, mean tail objective)
};
SweepOutcome sweep_learning_rate(const MlpSpec& spec, const ParamVector& params,
                                 std::span<const Example> examples,
                                 std::span<const double> v, SolverConfig config,
                                 std::span<const double> lr_grid,
                                 const EkfacState* state = nullptr);

void save_trace_csv(const std::string& path, const SolveTrace& trace);

}  // namespace astra
