#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "astra/model.hpp"

namespace astra {

// Column statistics recorded when a CSV source is standardized, so scores and
// measurements can be traced back to raw units.
struct Standardization {
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;
  bool target_standardized = false;
};

struct Dataset {
  TaskKind task = TaskKind::kRegression;
  int feature_dim = 0;
  int num_classes = 0;  // 0 for regression
  std::vector<Example> examples;
  std::optional<Standardization> standardization;

  int size() const { return static_cast<int>(examples.size()); }
};

// Tabular CSV with a header row; `target_column` names the target, every
// other column is a numeric feature.  Features are standardized to zero mean
// and unit variance over the full file (computed once, before any masking);
// regression targets likewise.  A constant column standardizes with a unit
// divisor.  Malformed cells raise ConfigError naming row and column.
Dataset load_csv(const std::string& path, const std::string& target_column,
                 TaskKind task);

// Linear teacher with additive Gaussian noise: x ~ N(0, I_d),
// t = w^T x / sqrt(d) + noise_std * eps, planted w ~ N(0, I) from the seed.
Dataset synth_regression(int n, int d, double noise_std, std::uint64_t seed);

// Isotropic Gaussian clusters, one per class, centers scaled so `margin`
// controls separation.  label_noise_fraction of examples get a label
// resampled uniformly among the wrong classes.
Dataset synth_classification(int n, int d, int classes, double margin,
                             std::uint64_t seed, double label_noise_fraction = 0.0);

// Splits off `n_query` examples (seeded permutation) as held-out queries.
struct SplitResult {
  Dataset train;
  std::vector<Example> queries;
};
SplitResult split(const Dataset& dataset, int n_query, std::uint64_t seed);

// JSON manifest describing how a dataset artifact was produced.
std::string dataset_manifest_json(const Dataset& dataset, const std::string& kind,
                                  std::uint64_t seed, const std::string& source_path);

// Dataset round-trip as CSV (feature columns f0..f{d-1} then `target`).
void save_examples_csv(const std::string& path, const std::vector<Example>& examples,
                       int feature_dim);
std::vector<Example> load_examples_csv(const std::string& path, int feature_dim);

}  // namespace astra
