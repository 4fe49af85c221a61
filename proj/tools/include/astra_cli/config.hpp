#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "astra/data.hpp"
#include "astra/ihvp.hpp"
#include "astra/model.hpp"
#include "astra/trainer.hpp"

namespace astra_cli {

// Parsed "[section]" / "key = value" file with '#' or ';' full-line comments.
// Sections and keys are case-sensitive; values keep inner whitespace.
struct RawConfig {
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::string path;

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
};

RawConfig parse_config_file(const std::string& path);

// FNV-1a hash over the canonicalized (sorted, whitespace-normalized) entries;
// formatting and comment changes do not alter it.
std::uint64_t config_hash(const RawConfig& raw);
std::string config_hash_prefix(const RawConfig& raw);  // 12 hex chars

struct DataSection {
  std::string kind;  // synth-regression | synth-classification | csv
  int n = 512;
  int d = 16;
  double noise_std = 0.1;
  int classes = 3;
  double margin = 1.0;
  double label_noise = 0.0;
  std::uint64_t seed = 1;
  std::string path;           // csv kind only
  std::string target_column = "target";
  std::string task = "regression";  // csv kind only
  int n_query = 32;
  std::uint64_t split_seed = 2;
};

struct ModelSection {
  std::vector<int> hidden = {16, 8};
};

struct TrainSection {
  astra::TrainConfig config;
};

struct SolverSection {
  std::string method = "astra";  // identity | ekfac | sni | astra | exact
  // lr <= 0 and damping <= 0 select the derived defaults (0.1 * damping and
  // the segment-implied influence damping respectively).
  astra::SolverConfig config;
  int query_index = 0;
};

struct SourceSection {
  int segments = 3;
  std::uint64_t stats_seed = 31;
  std::string mode = "ekfac";  // ekfac | astra
};

struct EvalSection {
  int masks = 50;
  double beta = 0.5;
  int repeats = 20;
  std::uint64_t mask_seed = 41;
  std::uint64_t truth_seed = 42;
  int null_trials = 200;
  std::uint64_t null_seed = 43;
  std::vector<double> bins = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5};
  int scan_queries = 8;
  double scan_damping = 1e-4;
  int scan_iterations = 300;
  int scan_stride = 10;
  double scan_sni_lr = 0.1;
  double scan_astra_lr = 0.01;
};

// Typed view over a RawConfig.  Construction validates every key against the
// schema (unknown sections or keys are configuration errors) and checks
// cross-section consistency.
struct ExperimentConfig {
  DataSection data;
  ModelSection model;
  TrainSection train;
  SolverSection solver;
  SourceSection source;
  EvalSection eval;
  std::uint64_t hash = 0;
  std::string hash_prefix;

  astra::TaskKind task_kind() const;
  astra::MlpSpec mlp_spec() const;  // input d, hidden widths, task output
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig make_experiment_config(const RawConfig& raw);

}  // namespace astra_cli
