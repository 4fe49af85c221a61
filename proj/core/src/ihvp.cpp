#include "astra/ihvp.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "astra/error.hpp"
#include "astra/linalg.hpp"
#include "astra/rng.hpp"

namespace astra {

SolverConfig default_astra_config(double damping) {
  SolverConfig config;
  config.damping = damping;
  config.precond_damping = damping;
  config.lr = 0.1 * damping;
  config.momentum = 0.9;
  config.lr_decay_every = 50;
  config.lr_decay_factor = 0.5;
  config.iterations = 200;
  config.batch_size = 256;
  return config;
}

SolverConfig default_sni_config(double damping) {
  SolverConfig config = default_astra_config(damping);
  config.precond_damping = -1.0;
  return config;
}

DenseMatrix assemble_dense_ggn(const MlpSpec& spec, const ParamVector& params,
                               std::span<const Example> examples) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  const std::size_t d = layout.total;
  if (d > 2000)
    throw DimensionError("assemble_dense_ggn: dimension " + std::to_string(d) +
                         " exceeds the dense guard (2000)");
  DenseMatrix g(d, d);
  ParamVector unit(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    unit[j] = 1.0;
    const ParamVector col = ggn_vec(spec, params, examples, unit);
    for (std::size_t i = 0; i < d; ++i) g(i, j) = col[i];
    unit[j] = 0.0;
  }
  // Symmetrize away accumulation-order noise.
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double s = 0.5 * (g(i, j) + g(j, i));
      g(i, j) = s;
      g(j, i) = s;
    }
  return g;
}

ParamVector exact_ihvp(const MlpSpec& spec, const ParamVector& params,
                       std::span<const Example> examples, double lambda,
                       std::span<const double> v) {
  if (!(lambda > 0.0)) throw NumericError("exact_ihvp: damping must be positive");
  DenseMatrix g = assemble_dense_ggn(spec, params, examples);
  for (std::size_t i = 0; i < g.rows; ++i) g(i, i) += lambda;
  std::vector<double> x = cholesky_solve(g, v);
  // Residual certificate.
  std::vector<double> r = matvec(g, x);
  axpy(-1.0, v, r);
  const double vnorm = norm2(v);
  if (vnorm > 0.0 && norm2(r) > 1e-10 * vnorm)
    throw NumericError("exact_ihvp: residual exceeds the 1e-10 certificate");
  return x;
}

double quadratic_objective(const MlpSpec& spec, const ParamVector& params,
                           std::span<const Example> examples, double lambda,
                           std::span<const double> v, std::span<const double> theta) {
  const ParamVector gtheta = ggn_vec(spec, params, examples, theta);
  return 0.5 * (dot(theta, gtheta) + lambda * dot(theta, theta)) - dot(theta, v);
}

namespace {

struct EngineSetup {
  const EkfacState* state = nullptr;  // null for the unpreconditioned solver
};

ParamVector initial_iterate(const SolverConfig& config, const EngineSetup& setup,
                            double lambda_tilde, std::span<const double> v) {
  switch (config.init) {
    case SolverInit::kZero:
      return ParamVector(v.size(), 0.0);
    case SolverInit::kQueryGradient:
      return ParamVector(v.begin(), v.end());
    case SolverInit::kPreconditionedQueryGradient:
      if (!setup.state)
        throw ConfigError("solver init: preconditioned start needs a curvature state");
      return precondition(*setup.state, lambda_tilde, v);
    case SolverInit::kDefault:
      if (setup.state) return precondition(*setup.state, lambda_tilde, v);
      return ParamVector(v.begin(), v.end());
  }
  throw ConfigError("solver init: unknown mode");
}

SolveResult stochastic_solve(const MlpSpec& spec, const ParamVector& params,
                             std::span<const Example> examples,
                             std::span<const double> v, const SolverConfig& config,
                             const EngineSetup& setup) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (v.size() != layout.total)
    throw DimensionError("solver: right-hand side length mismatch");
  if (examples.empty()) throw DimensionError("solver: empty dataset");
  if (!(config.damping > 0.0)) throw NumericError("solver: damping must be positive");
  if (config.iterations < 0) throw ConfigError("solver: negative iteration count");
  if (setup.state) check_state_layout(*setup.state, spec);

  const double lambda = config.damping;
  const double lambda_tilde =
      config.precond_damping >= 0.0 ? config.precond_damping : lambda;
  const int n = static_cast<int>(examples.size());
  const int batch =
      config.batch_size <= 0 ? n : std::min(config.batch_size, n);
  const bool full_batch = batch >= n;
  const int repeats = std::max(1, config.repeats);

  std::vector<int> all_indices(n);
  std::iota(all_indices.begin(), all_indices.end(), 0);

  SolveResult result;
  ParamVector mean(layout.total, 0.0);
  const auto t_start = std::chrono::steady_clock::now();

  for (int rep = 0; rep < repeats; ++rep) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(rep), 0x736f6c7665ULL));
    ParamVector theta = initial_iterate(config, setup, lambda_tilde, v);
    ParamVector momentum_buf(layout.total, 0.0);
    const bool record = rep == 0;
    if (record && config.snapshot_stride > 0)
      result.trace.snapshots.emplace_back(0, theta);

    double h0 = 0.0;
    std::vector<int> indices;
    for (int k = 0; k < config.iterations; ++k) {
      double alpha = config.lr;
      if (config.lr_decay_every > 0)
        alpha *= std::pow(config.lr_decay_factor,
                          static_cast<double>(k / config.lr_decay_every));

      const std::span<const int> batch_span = [&]() -> std::span<const int> {
        if (full_batch) return all_indices;
        indices.resize(batch);
        for (int b = 0; b < batch; ++b)
          indices[b] = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        return indices;
      }();

      const ParamVector gtheta = ggn_vec_indexed(spec, params, examples, batch_span, theta);

      // Mini-batch objective at the incoming iterate; also the divergence probe.
      const double h = 0.5 * (dot(theta, gtheta) + lambda * dot(theta, theta)) -
                       dot(theta, v);
      if (k == 0) h0 = h;
      if (!std::isfinite(h) || h > 1e6 * std::max(1.0, std::abs(h0)))
        throw DivergenceError(
            "solver diverged at iteration " + std::to_string(k) +
                " (objective " + std::to_string(h) + ")",
            k);

      // Residual of the damped system, preconditioned when a state is given.
      ParamVector step(layout.total);
      for (std::size_t i = 0; i < step.size(); ++i)
        step[i] = gtheta[i] + lambda * theta[i] - v[i];
      if (setup.state) step = precondition(*setup.state, lambda_tilde, step);

      for (std::size_t i = 0; i < theta.size(); ++i) {
        momentum_buf[i] = config.momentum * momentum_buf[i] + step[i];
        theta[i] -= alpha * momentum_buf[i];
      }
      for (double c : theta)
        if (!std::isfinite(c))
          throw DivergenceError("solver produced a non-finite iterate at iteration " +
                                    std::to_string(k),
                                k);

      if (record) {
        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                      t_start)
                .count();
        result.trace.entries.push_back({k, h, alpha, wall});
        if (config.snapshot_stride > 0 &&
            ((k + 1) % config.snapshot_stride == 0 || k + 1 == config.iterations))
          result.trace.snapshots.emplace_back(k + 1, theta);
      }
    }
    axpy(1.0, theta, mean);
  }
  scale(1.0 / static_cast<double>(repeats), mean);
  result.x = std::move(mean);
  return result;
}

}  // namespace

SolveResult sni_solve(const MlpSpec& spec, const ParamVector& params,
                      std::span<const Example> examples, std::span<const double> v,
                      const SolverConfig& config) {
  EngineSetup setup;
  if (config.init == SolverInit::kPreconditionedQueryGradient)
    throw ConfigError("sni_solve: preconditioned init requires the preconditioned solver");
  return stochastic_solve(spec, params, examples, v, config, setup);
}

SolveResult astra_solve(const MlpSpec& spec, const ParamVector& params,
                        std::span<const Example> examples, const EkfacState& state,
                        std::span<const double> v, const SolverConfig& config) {
  EngineSetup setup;
  setup.state = &state;
  return stochastic_solve(spec, params, examples, v, config, setup);
}

std::vector<double> truncated_neumann_apply(
    const std::function<std::vector<double>(std::span<const double>)>& apply_g,
    double alpha, double lambda, int terms, std::span<const double> v) {
  if (terms < 0) throw ConfigError("truncated_neumann_apply: negative term count");
  if (!(alpha > 0.0)) throw NumericError("truncated_neumann_apply: alpha must be positive");
  std::vector<double> acc(v.size(), 0.0);
  if (terms == 0) return acc;
  // Horner: acc_1 = v; acc_{j+1} = v + (I - alpha (G + lambda I)) acc_j.
  acc.assign(v.begin(), v.end());
  for (int j = 1; j < terms; ++j) {
    std::vector<double> g = apply_g(acc);
    if (g.size() != acc.size())
      throw DimensionError("truncated_neumann_apply: operator changed the dimension");
    for (std::size_t i = 0; i < acc.size(); ++i)
      acc[i] = v[i] + acc[i] - alpha * (g[i] + lambda * acc[i]);
  }
  scale(alpha, acc);
  return acc;
}

double effective_damping(double alpha, double lambda, int terms) {
  if (!(alpha > 0.0) || terms <= 0)
    throw NumericError("effective_damping: needs alpha > 0 and terms >= 1");
  return lambda + 1.0 / (alpha * static_cast<double>(terms));
}

SweepOutcome sweep_learning_rate(const MlpSpec& spec, const ParamVector& params,
                                 std::span<const Example> examples,
                                 std::span<const double> v, SolverConfig config,
                                 std::span<const double> lr_grid,
                                 const EkfacState* state) {
  if (lr_grid.empty()) throw ConfigError("sweep_learning_rate: empty grid");
  SweepOutcome outcome;
  double best = std::numeric_limits<double>::infinity();
  for (double lr : lr_grid) {
    config.lr = lr;
    double score = std::numeric_limits<double>::infinity();
    try {
      const SolveResult res = state ? astra_solve(spec, params, examples, *state, v, config)
                                    : sni_solve(spec, params, examples, v, config);
      const std::size_t count = res.trace.entries.size();
      if (count > 0) {
        const std::size_t tail = std::min<std::size_t>(10, count);
        double total = 0.0;
        for (std::size_t i = count - tail; i < count; ++i)
          total += res.trace.entries[i].objective;
        score = total / static_cast<double>(tail);
      }
    } catch (const DivergenceError&) {
      // Excluded from the sweep; recorded as +inf.
    }
    outcome.scores.emplace_back(lr, score);
    if (score < best) {
      best = score;
      outcome.best_lr = lr;
    }
  }
  if (!std::isfinite(best))
    throw NumericError("sweep_learning_rate: every learning rate diverged");
  return outcome;
}

void save_trace_csv(const std::string& path, const SolveTrace& trace) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_trace_csv: cannot write '" + path + "'");
  out << "iteration,objective,lr,wall_ms\n";
  out.precision(17);
  for (const TraceEntry& e : trace.entries)
    out << e.iteration << "," << e.objective << "," << e.lr << "," << e.wall_ms << "\n";
}

}  // namespace astra
