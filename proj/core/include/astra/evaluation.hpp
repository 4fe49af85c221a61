#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "astra/attribution.hpp"
#include "astra/ekfac.hpp"
#include "astra/ihvp.hpp"
#include "astra/model.hpp"
#include "astra/trainer.hpp"

namespace astra {

// M random inclusion masks of identical cardinality floor(beta * N).
struct MaskSet {
  std::size_t num_examples = 0;
  std::size_t cardinality = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint8_t>> masks;
  // Number of mask pairs that came out identical (expected 0 at any
  // reasonable scale; surfaced so callers can log it).
  int duplicate_pairs = 0;
};

// Each mask draws a uniform floor(beta*N)-subset via a seeded partial
// Fisher-Yates shuffle of the index range; mask i uses seed mix_seed(seed, i).
MaskSet generate_masks(std::size_t num_examples, double beta, int count,
                       std::uint64_t seed);

void save_masks_csv(const std::string& path, const MaskSet& masks);
MaskSet load_masks_csv(const std::string& path);

// Retraining grid: per (mask, repeat) cell one full training run, measured on
// every query at the final parameters.
struct GroundTruth {
  std::size_t num_masks = 0;
  std::size_t num_queries = 0;
  int repeats = 0;
  // Per-repeat samples, (mask * repeats + repeat) * num_queries + query;
  // NaN for diverged cells.
  std::vector<double> samples;
  // Mean / sample standard deviation over the surviving repeats of each mask,
  // mask * num_queries + query.
  std::vector<double> expected;
  std::vector<double> stddev;
  std::vector<std::pair<int, int>> failed_cells;  // (mask, repeat) divergences

  double expected_at(std::size_t mask, std::size_t query) const;
  double sample_at(std::size_t mask, int repeat, std::size_t query) const;
};

// Seed-stream tags: ground-truth cell (mask, repeat) trains with
// init_seed  = mix_seed(base_seed, mask, repeat, kGroundTruthInitTag) and
// batch_seed = mix_seed(base_seed, mask, repeat, kGroundTruthBatchTag);
// null-simulation trial t draws from mix_seed(seed, t, kNullLdsTag).
inline constexpr std::uint64_t kGroundTruthInitTag = 0x696e6974ull;   // "init"
inline constexpr std::uint64_t kGroundTruthBatchTag = 0x62617463ull;  // "batc"
inline constexpr std::uint64_t kNullLdsTag = 0x6e756c6cull;           // "null"

struct GroundTruthOptions {
  int repeats = 1;
  std::uint64_t base_seed = 0;
  int workers = 1;
  // When set, finished cells are appended here ("mask_id,repeat,query_id,
  // measurement" rows; a diverged cell journals one row with query_id -1) and
  // an interrupted run resumes by skipping cells the journal already holds.
  std::string journal_path;
};

// Trains one model per (mask, repeat) cell — masked examples excluded — and
// measures every query at the final parameters.  Cell seeds derive from
// mix_seed(base_seed, mask_index, repeat_index, tag) with distinct tags for
// the init and batch-order streams, so cells are reproducible and
// order-independent.  A diverged training run marks its cell failed and the
// mask's mean uses the surviving repeats; a mask whose every repeat diverged
// raises NumericError.
GroundTruth compute_ground_truth(const MlpSpec& spec, std::span<const Example> examples,
                                 const TrainConfig& train_config, const MaskSet& masks,
                                 std::span<const Example> queries,
                                 const GroundTruthOptions& options);

// Deterministic (sorted) per-repeat grid CSV, same row format as the journal.
void save_ground_truth_csv(const std::string& path, const GroundTruth& ground_truth);
GroundTruth load_ground_truth_csv(const std::string& path);

// Sum of the query's scores over the included training examples.
double group_influence(std::span<const double> scores_row,
                       std::span<const std::uint8_t> mask);

struct LdsReport {
  std::string method;
  std::uint64_t seed = 0;
  int ensemble_size = 1;
  // Per-query Spearman correlation; NaN marks a query excluded because its
  // ground-truth or prediction column was constant across masks.
  std::vector<double> per_query;
  std::vector<int> excluded_queries;
  double mean = 0.0;            // over included queries
  double standard_error = 0.0;  // sample std / sqrt(included), 0 if < 2
};

// Per query: Spearman correlation between the expected retraining ground
// truth over masks and the predicted group influences over masks; reports the
// mean and standard error over the non-excluded queries.
LdsReport lds(const AttributionMatrix& scores, const MaskSet& masks,
              const GroundTruth& ground_truth);

void save_lds_report_json(const std::string& path, const LdsReport& report);

// Null distribution of the mean LDS under random scores: each trial draws an
// independent standard-normal score grid and evaluates it against the same
// masks and ground truth.  `mean + 3 * stddev` bounds what chance alone
// produces.
struct NullLdsBound {
  double mean = 0.0;
  double stddev = 0.0;
  int trials = 0;
};
NullLdsBound simulate_null_lds(const MaskSet& masks, const GroundTruth& ground_truth,
                               std::size_t num_train, int trials, std::uint64_t seed);

// Curvature-subspace scan: run both stochastic solvers per query with iterate
// snapshots; at every snapshot and eigenvalue threshold, record the quadratic
// objective of the first query's iterate projected onto the bin (eigenvalues
// above the threshold) and the mean LDS of scores built from every query's
// projected iterate dotted against the training gradients.
struct CurvatureScanPoint {
  int iteration = 0;
  double threshold = 0.0;
  double objective = 0.0;
  double lds = 0.0;
  std::string solver;  // "sni" or "astra"
};

struct CurvatureScan {
  std::vector<CurvatureScanPoint> points;
};

struct CurvatureScanConfig {
  SolverConfig sni{};    // snapshot_stride must be > 0; dampings must match
  SolverConfig astra{};
  std::vector<double> thresholds = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5};  // descending
  int workers = 1;
};

CurvatureScan curvature_scan(const MlpSpec& spec, const ParamVector& params,
                             std::span<const Example> train, const EkfacState& state,
                             std::span<const Example> queries, const MaskSet& masks,
                             const GroundTruth& ground_truth,
                             const CurvatureScanConfig& config);

// CSV rows "iteration,bin_threshold,objective,lds,solver".
void save_curvature_scan_csv(const std::string& path, const CurvatureScan& scan);

}  // namespace astra
