#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "astra/ekfac.hpp"
#include "astra/ihvp.hpp"
#include "astra/model.hpp"
#include "astra/trainer.hpp"

namespace astra {

// Query-side iHVP backend used by influence-function attribution.
enum class AttributionMethod { kIdentity, kEkfac, kSni, kAstra };

std::string if_method_tag(AttributionMethod method);  // "if-identity", ...
AttributionMethod parse_attribution_method(const std::string& name);

// Dense |queries| x |train| score grid.  Scores follow the datamodel
// orientation: score(q, m) estimates the first-order effect of *including*
// training example m on the query measurement, so summing a row over a
// training subset predicts the measurement of a model trained on that subset.
// (A training example whose inclusion lowers the query's error gets a
// negative score; self-scores under a loss-like measurement are negative.)
struct AttributionMatrix {
  std::string method;      // "if-astra", "source-ekfac", ...
  std::uint64_t seed = 0;  // seed tag of the run that produced the scores
  std::size_t num_queries = 0;
  std::size_t num_train = 0;
  std::vector<double> scores;  // row-major, one row per query

  double at(std::size_t q, std::size_t m) const;
  double& at(std::size_t q, std::size_t m);
};

struct IfConfig {
  AttributionMethod method = AttributionMethod::kEkfac;
  // damping, iteration budget, and base seed all live here; the per-query
  // solves for sni/astra run with seed mix_seed(solver.seed, query_index).
  SolverConfig solver{};
  // Per-layer inclusion flags (empty = attribute every layer).  Masked-out
  // layers are removed from the score dot products; the solve itself stays
  // full-parameter.
  std::vector<std::uint8_t> layer_mask;
  int workers = 1;
};

// Curvature factorization for attribution at the given parameters: statistics
// and eigenvalue-correction passes consume independent streams derived from
// `seed`, matching what if_attribute builds internally when no state is
// passed (so a state built here with config.solver.seed is interchangeable).
EkfacState build_attribution_state(const MlpSpec& spec, const ParamVector& params,
                                   std::span<const Example> train, std::uint64_t seed);

// Influence-function scores: per query solve u = (G + lambda I)^{-1} grad f,
// then score(q, m) = -u . grad L(params, z_m) with one backward pass per
// training example.  kIdentity skips the solve (plain gradient dot product);
// kEkfac applies the damped Kronecker inverse; kSni / kAstra run the
// stochastic solvers.  `state` supplies the curvature factorization for
// kEkfac / kAstra; passing nullptr builds one from the training set with
// seeds derived from config.solver.seed.  Solver divergence is rethrown with
// the query index prepended.
AttributionMatrix if_attribute(const MlpSpec& spec, const ParamVector& params,
                               std::span<const Example> train,
                               std::span<const Example> queries, const IfConfig& config,
                               const EkfacState* state = nullptr);

// One trajectory segment prepared for unrolled attribution: its step count,
// mean learning rate, implied damping 1 / (mean_lr * steps), averaged
// parameters, and a curvature factorization built at those parameters.
struct SourceSegment {
  int index = 0;
  std::uint64_t steps = 0;
  double mean_lr = 0.0;
  double damping = 0.0;
  ParamVector mean_params;
  EkfacState state;

  double horizon() const;  // mean_lr * steps == 1 / damping
};

struct SourcePlan {
  ParamVector final_params;  // where query measurement gradients are taken
  std::vector<SourceSegment> segments;  // earliest segment first
};

// Segments the trajectory, derives each segment's damping, and builds one
// curvature factorization per segment at the segment-mean parameters
// (statistics and eigenvalue-correction passes seeded from stats_seed and the
// segment index).  Segments with a non-positive mean learning rate are
// rejected, since their implied damping would not be positive.
SourcePlan build_source_plan(const MlpSpec& spec, const Trajectory& trajectory,
                             int num_segments, std::span<const Example> train,
                             std::uint64_t stats_seed);

// Iteration-weighted mean of the per-segment dampings; the default damping
// for influence-function runs that should be comparable to unrolled runs.
double implied_if_damping(const SourcePlan& plan);

enum class SourceMode { kEkfac, kAstra };

std::string source_mode_tag(SourceMode mode);  // "source-ekfac", "source-astra"
SourceMode parse_source_mode(const std::string& name);

struct SourceConfig {
  SourceMode mode = SourceMode::kEkfac;
  // Used by kAstra segment solves (damping is overridden per segment with the
  // segment's implied value; lr <= 0 selects the recipe default of
  // 0.1 * segment damping).  Each solve runs with seed
  // mix_seed(solver.seed, query_index, segment_index).
  SolverConfig solver{};
  std::vector<std::uint8_t> layer_mask;
  int workers = 1;
};

// Unrolled attribution over trajectory segments.  Per query, a carry vector
// starts as the measurement gradient at the final parameters and walks the
// segments from last to first; at each segment the response
//   r = (I - exp(-horizon * curvature)) curvature^{-1} carry   (kEkfac)
//   r = (curvature + damping I)^{-1} carry via the solver      (kAstra)
// contributes score(q, m) -= r . grad L(mean_params, z_m), and the carry is
// then attenuated by exp(-horizon * curvature).  With a single segment and
// constant learning rate this reduces to influence functions at the
// segment-mean parameters with damping 1 / (mean_lr * total_steps).
AttributionMatrix source_attribute(const MlpSpec& spec, const SourcePlan& plan,
                                   std::span<const Example> train,
                                   std::span<const Example> queries,
                                   const SourceConfig& config);

// Elementwise mean over runs of the same method and shape with pairwise
// distinct seed tags; the result's seed tag chains the member seeds.
AttributionMatrix ensemble(std::span<const AttributionMatrix> members);

// CSV rows "query_id,train_id,score,method,seed" (17 significant digits).
void save_scores_csv(const std::string& path, const AttributionMatrix& matrix);

// Compact binary grid (magic "ATTR"): method tag, seed tag, dims, raw
// little-endian doubles.
void save_attribution(const std::string& path, const AttributionMatrix& matrix);
AttributionMatrix load_attribution(const std::string& path);

}  // namespace astra
