#include "astra/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>

#include <json.hpp>

#include "astra/error.hpp"
#include "astra/linalg.hpp"
#include "astra/parallel.hpp"
#include "astra/rng.hpp"

namespace astra {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

bool is_constant(std::span<const double> v) {
  for (double x : v)
    if (x != v.front()) return false;
  return true;
}

}  // namespace

// --- masks ---------------------------------------------------------------------

MaskSet generate_masks(std::size_t num_examples, double beta, int count,
                       std::uint64_t seed) {
  if (num_examples == 0) throw ConfigError("generate_masks: empty dataset");
  if (!(beta > 0.0 && beta < 1.0))
    throw ConfigError("generate_masks: subsampling fraction must lie in (0, 1), got " +
                      std::to_string(beta));
  if (count < 1) throw ConfigError("generate_masks: mask count must be >= 1");
  const std::size_t cardinality =
      static_cast<std::size_t>(beta * static_cast<double>(num_examples));
  if (cardinality < 1)
    throw ConfigError("generate_masks: floor(beta * N) must be >= 1");

  MaskSet set;
  set.num_examples = num_examples;
  set.cardinality = cardinality;
  set.seed = seed;
  set.masks.reserve(static_cast<std::size_t>(count));
  std::vector<std::size_t> indices(num_examples);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    std::iota(indices.begin(), indices.end(), 0);
    std::vector<std::uint8_t> mask(num_examples, 0);
    for (std::size_t j = 0; j < cardinality; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(
                                       static_cast<std::uint64_t>(num_examples - j)));
      std::swap(indices[j], indices[pick]);
      mask[indices[j]] = 1;
    }
    set.masks.push_back(std::move(mask));
  }

  std::vector<std::vector<std::uint8_t>> sorted = set.masks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i] == sorted[i - 1]) ++set.duplicate_pairs;
  return set;
}

void save_masks_csv(const std::string& path, const MaskSet& masks) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_masks_csv: cannot write '" + path + "'");
  out << "num_examples,cardinality,seed,num_masks,duplicate_pairs\n";
  out << masks.num_examples << ',' << masks.cardinality << ',' << masks.seed << ','
      << masks.masks.size() << ',' << masks.duplicate_pairs << '\n';
  out << "mask_id,example_id\n";
  for (std::size_t i = 0; i < masks.masks.size(); ++i)
    for (std::size_t m = 0; m < masks.masks[i].size(); ++m)
      if (masks.masks[i][m]) out << i << ',' << m << '\n';
  if (!out) throw ConfigError("save_masks_csv: short write to '" + path + "'");
}

MaskSet load_masks_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("load_masks_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || split_csv_row(line).size() != 5)
    throw ConfigError("load_masks_csv: '" + path + "' is missing its metadata header");
  if (!std::getline(in, line))
    throw ConfigError("load_masks_csv: '" + path + "' is missing its metadata row");
  const std::vector<std::string> meta = split_csv_row(line);
  if (meta.size() != 5)
    throw ConfigError("load_masks_csv: malformed metadata row in '" + path + "'");
  MaskSet set;
  std::size_t num_masks = 0;
  try {
    set.num_examples = std::stoull(meta[0]);
    set.cardinality = std::stoull(meta[1]);
    set.seed = std::stoull(meta[2]);
    num_masks = std::stoull(meta[3]);
    set.duplicate_pairs = std::stoi(meta[4]);
  } catch (const std::exception&) {
    throw ConfigError("load_masks_csv: malformed metadata row in '" + path + "'");
  }
  if (!std::getline(in, line) || split_csv_row(line).size() != 2)
    throw ConfigError("load_masks_csv: '" + path + "' is missing its column header");
  set.masks.assign(num_masks, std::vector<std::uint8_t>(set.num_examples, 0));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> row = split_csv_row(line);
    if (row.size() != 2)
      throw ConfigError("load_masks_csv: malformed row '" + line + "'");
    std::size_t mask_id = 0, example_id = 0;
    try {
      mask_id = std::stoull(row[0]);
      example_id = std::stoull(row[1]);
    } catch (const std::exception&) {
      throw ConfigError("load_masks_csv: malformed row '" + line + "'");
    }
    if (mask_id >= num_masks || example_id >= set.num_examples)
      throw ConfigError("load_masks_csv: row '" + line + "' is out of range");
    set.masks[mask_id][example_id] = 1;
  }
  for (std::size_t i = 0; i < set.masks.size(); ++i) {
    std::size_t card = 0;
    for (std::uint8_t flag : set.masks[i]) card += flag;
    if (card != set.cardinality)
      throw ConfigError("load_masks_csv: mask " + std::to_string(i) + " has " +
                        std::to_string(card) + " inclusions, expected " +
                        std::to_string(set.cardinality));
  }
  return set;
}

// --- ground truth ----------------------------------------------------------------

double GroundTruth::expected_at(std::size_t mask, std::size_t query) const {
  return expected[mask * num_queries + query];
}

double GroundTruth::sample_at(std::size_t mask, int repeat, std::size_t query) const {
  return samples[(mask * static_cast<std::size_t>(repeats) +
                  static_cast<std::size_t>(repeat)) *
                     num_queries +
                 query];
}

namespace {

// Derives expected/stddev/failed_cells from the per-repeat samples.  A cell
// is failed iff its samples are NaN; partly-NaN cells mark a corrupt grid.
void finalize_grid(GroundTruth& gt) {
  gt.expected.assign(gt.num_masks * gt.num_queries, 0.0);
  gt.stddev.assign(gt.num_masks * gt.num_queries, 0.0);
  gt.failed_cells.clear();
  for (std::size_t mask = 0; mask < gt.num_masks; ++mask) {
    std::vector<int> survivors;
    for (int r = 0; r < gt.repeats; ++r) {
      bool any_nan = false;
      bool all_nan = true;
      for (std::size_t q = 0; q < gt.num_queries; ++q) {
        const bool nan = std::isnan(gt.sample_at(mask, r, q));
        any_nan = any_nan || nan;
        all_nan = all_nan && nan;
      }
      if (any_nan && !all_nan)
        throw NumericError("ground truth: mask " + std::to_string(mask) + " repeat " +
                           std::to_string(r) + " holds a partly-NaN cell");
      if (all_nan)
        gt.failed_cells.emplace_back(static_cast<int>(mask), r);
      else
        survivors.push_back(r);
    }
    if (survivors.empty())
      throw NumericError("ground truth: every repeat of mask " + std::to_string(mask) +
                         " diverged; the mask has no estimate");
    for (std::size_t q = 0; q < gt.num_queries; ++q) {
      double sum = 0.0;
      for (int r : survivors) sum += gt.sample_at(mask, r, q);
      const double mean = sum / static_cast<double>(survivors.size());
      double ss = 0.0;
      for (int r : survivors) {
        const double d = gt.sample_at(mask, r, q) - mean;
        ss += d * d;
      }
      gt.expected[mask * gt.num_queries + q] = mean;
      gt.stddev[mask * gt.num_queries + q] =
          survivors.size() > 1
              ? std::sqrt(ss / static_cast<double>(survivors.size() - 1))
              : 0.0;
    }
  }
}

struct JournalRow {
  std::size_t mask = 0;
  int repeat = 0;
  long query = 0;  // -1 marks a diverged cell
  double value = 0.0;
};

std::vector<JournalRow> parse_grid_rows(std::istream& in, const std::string& path) {
  std::vector<JournalRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("mask_id", 0) == 0) continue;  // header
    }
    const std::vector<std::string> fields = split_csv_row(line);
    if (fields.size() != 4)
      throw ConfigError("ground-truth grid '" + path + "': malformed row '" + line + "'");
    JournalRow row;
    try {
      row.mask = std::stoull(fields[0]);
      row.repeat = std::stoi(fields[1]);
      row.query = std::stol(fields[2]);
      row.value = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw ConfigError("ground-truth grid '" + path + "': malformed row '" + line + "'");
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

GroundTruth compute_ground_truth(const MlpSpec& spec, std::span<const Example> examples,
                                 const TrainConfig& train_config, const MaskSet& masks,
                                 std::span<const Example> queries,
                                 const GroundTruthOptions& options) {
  validate_spec(spec);
  if (masks.masks.empty()) throw ConfigError("compute_ground_truth: no masks");
  if (queries.empty()) throw DimensionError("compute_ground_truth: empty query set");
  if (options.repeats < 1)
    throw ConfigError("compute_ground_truth: repeats must be >= 1");
  if (masks.num_examples != examples.size())
    throw DimensionError("compute_ground_truth: masks cover " +
                         std::to_string(masks.num_examples) + " examples, dataset has " +
                         std::to_string(examples.size()));

  GroundTruth gt;
  gt.num_masks = masks.masks.size();
  gt.num_queries = queries.size();
  gt.repeats = options.repeats;
  const std::size_t cells = gt.num_masks * static_cast<std::size_t>(gt.repeats);
  gt.samples.assign(cells * gt.num_queries, kNaN);
  std::vector<std::uint8_t> done(cells, 0);

  // Resume: cells already journaled (complete or marked diverged) are skipped.
  const bool journaling = !options.journal_path.empty();
  if (journaling) {
    std::ifstream in(options.journal_path);
    if (in) {
      std::map<std::pair<std::size_t, int>, std::vector<JournalRow>> by_cell;
      for (const JournalRow& row : parse_grid_rows(in, options.journal_path)) {
        if (row.mask >= gt.num_masks || row.repeat < 0 || row.repeat >= gt.repeats ||
            row.query >= static_cast<long>(gt.num_queries))
          throw ConfigError("ground-truth journal '" + options.journal_path +
                            "' references a cell outside this grid; it belongs to a "
                            "different configuration");
        by_cell[{row.mask, row.repeat}].push_back(row);
      }
      for (const auto& [key, rows] : by_cell) {
        const std::size_t cell =
            key.first * static_cast<std::size_t>(gt.repeats) +
            static_cast<std::size_t>(key.second);
        if (rows.size() == 1 && rows.front().query == -1) {
          done[cell] = 1;  // diverged cell: samples stay NaN
          continue;
        }
        if (rows.size() != gt.num_queries) continue;  // partial cell: re-run
        for (const JournalRow& row : rows) {
          if (row.query < 0) continue;
          gt.samples[cell * gt.num_queries + static_cast<std::size_t>(row.query)] =
              row.value;
        }
        done[cell] = 1;
      }
    }
  }

  std::ofstream journal;
  std::mutex journal_mutex;
  if (journaling) {
    std::ifstream probe(options.journal_path);
    const bool has_content = probe.good() && probe.peek() != std::ifstream::traits_type::eof();
    probe.close();
    journal.open(options.journal_path, std::ios::app);
    if (!journal)
      throw ConfigError("compute_ground_truth: cannot write journal '" +
                        options.journal_path + "'");
    journal.precision(17);
    if (!has_content) journal << "mask_id,repeat,query_id,measurement\n" << std::flush;
  }

  parallel_for(cells, options.workers, [&](std::size_t cell) {
    if (done[cell]) return;
    const std::size_t mask_index = cell / static_cast<std::size_t>(gt.repeats);
    const int repeat = static_cast<int>(cell % static_cast<std::size_t>(gt.repeats));
    TrainConfig config = train_config;
    config.init_seed = mix_seed(options.base_seed, mask_index,
                                static_cast<std::uint64_t>(repeat), kGroundTruthInitTag);
    config.batch_seed = mix_seed(options.base_seed, mask_index,
                                 static_cast<std::uint64_t>(repeat), kGroundTruthBatchTag);
    bool diverged = false;
    std::vector<double> measurements(gt.num_queries, kNaN);
    try {
      const Trajectory trajectory = train(spec, examples, config, masks.masks[mask_index]);
      const ParamVector& final_params = trajectory.final_params();
      for (std::size_t q = 0; q < gt.num_queries; ++q)
        measurements[q] = measurement(spec, final_params, queries[q]);
    } catch (const DivergenceError&) {
      diverged = true;
    }
    if (!diverged)
      for (std::size_t q = 0; q < gt.num_queries; ++q)
        gt.samples[cell * gt.num_queries + q] = measurements[q];
    if (journaling) {
      std::lock_guard<std::mutex> lock(journal_mutex);
      if (diverged) {
        journal << mask_index << ',' << repeat << ",-1,nan\n";
      } else {
        for (std::size_t q = 0; q < gt.num_queries; ++q)
          journal << mask_index << ',' << repeat << ',' << q << ','
                  << measurements[q] << '\n';
      }
      journal << std::flush;
    }
  });

  finalize_grid(gt);
  return gt;
}

void save_ground_truth_csv(const std::string& path, const GroundTruth& ground_truth) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_ground_truth_csv: cannot write '" + path + "'");
  out << "mask_id,repeat,query_id,measurement\n";
  out.precision(17);
  for (std::size_t mask = 0; mask < ground_truth.num_masks; ++mask)
    for (int r = 0; r < ground_truth.repeats; ++r) {
      if (std::isnan(ground_truth.sample_at(mask, r, 0))) {
        out << mask << ',' << r << ",-1,nan\n";
        continue;
      }
      for (std::size_t q = 0; q < ground_truth.num_queries; ++q)
        out << mask << ',' << r << ',' << q << ','
            << ground_truth.sample_at(mask, r, q) << '\n';
    }
  if (!out) throw ConfigError("save_ground_truth_csv: short write to '" + path + "'");
}

GroundTruth load_ground_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("load_ground_truth_csv: cannot open '" + path + "'");
  const std::vector<JournalRow> rows = parse_grid_rows(in, path);
  if (rows.empty())
    throw MissingArtifactError("load_ground_truth_csv: '" + path + "' holds no cells");
  GroundTruth gt;
  long max_query = -1;
  std::size_t max_mask = 0;
  int max_repeat = 0;
  for (const JournalRow& row : rows) {
    max_mask = std::max(max_mask, row.mask);
    max_repeat = std::max(max_repeat, row.repeat);
    max_query = std::max(max_query, row.query);
  }
  if (max_query < 0)
    throw MissingArtifactError("load_ground_truth_csv: every cell in '" + path +
                               "' is marked diverged");
  gt.num_masks = max_mask + 1;
  gt.repeats = max_repeat + 1;
  gt.num_queries = static_cast<std::size_t>(max_query) + 1;
  const std::size_t cells = gt.num_masks * static_cast<std::size_t>(gt.repeats);
  gt.samples.assign(cells * gt.num_queries, kNaN);
  std::vector<int> rows_seen(cells, 0);
  std::vector<std::uint8_t> diverged(cells, 0);
  for (const JournalRow& row : rows) {
    const std::size_t cell = row.mask * static_cast<std::size_t>(gt.repeats) +
                             static_cast<std::size_t>(row.repeat);
    if (row.query == -1) {
      diverged[cell] = 1;
      continue;
    }
    gt.samples[cell * gt.num_queries + static_cast<std::size_t>(row.query)] = row.value;
    ++rows_seen[cell];
  }
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const std::string where = "mask " + std::to_string(cell / gt.repeats) + " repeat " +
                              std::to_string(cell % gt.repeats);
    if (diverged[cell] && rows_seen[cell] > 0)
      throw ConfigError("load_ground_truth_csv: " + where +
                        " is marked diverged but also has measurement rows");
    if (!diverged[cell] && rows_seen[cell] != static_cast<int>(gt.num_queries))
      throw MissingArtifactError("load_ground_truth_csv: " + where + " has " +
                                 std::to_string(rows_seen[cell]) + " of " +
                                 std::to_string(gt.num_queries) +
                                 " query rows; the grid is incomplete — resume it");
  }
  finalize_grid(gt);
  return gt;
}

// --- LDS -----------------------------------------------------------------------

double group_influence(std::span<const double> scores_row,
                       std::span<const std::uint8_t> mask) {
  if (scores_row.size() != mask.size())
    throw DimensionError("group_influence: " + std::to_string(scores_row.size()) +
                         " scores vs " + std::to_string(mask.size()) + " mask flags");
  double sum = 0.0;
  for (std::size_t m = 0; m < mask.size(); ++m)
    if (mask[m]) sum += scores_row[m];
  return sum;
}

namespace {

// Spearman correlation of one query's ground truth against its group
// influences; NaN when either vector is constant over the masks.
double query_rho(std::span<const double> scores_row, const MaskSet& masks,
                 const GroundTruth& ground_truth, std::size_t q) {
  const std::size_t num_masks = masks.masks.size();
  std::vector<double> truth(num_masks), predicted(num_masks);
  for (std::size_t j = 0; j < num_masks; ++j) {
    truth[j] = ground_truth.expected_at(j, q);
    predicted[j] = group_influence(scores_row, masks.masks[j]);
  }
  if (is_constant(truth) || is_constant(predicted)) return kNaN;
  return spearman(truth, predicted);
}

}  // namespace

LdsReport lds(const AttributionMatrix& scores, const MaskSet& masks,
              const GroundTruth& ground_truth) {
  if (scores.num_train != masks.num_examples)
    throw DimensionError("lds: scores cover " + std::to_string(scores.num_train) +
                         " training examples, masks cover " +
                         std::to_string(masks.num_examples));
  if (masks.masks.size() != ground_truth.num_masks)
    throw DimensionError("lds: " + std::to_string(masks.masks.size()) +
                         " masks vs ground truth over " +
                         std::to_string(ground_truth.num_masks));
  if (scores.num_queries != ground_truth.num_queries)
    throw DimensionError("lds: " + std::to_string(scores.num_queries) +
                         " query rows vs ground truth over " +
                         std::to_string(ground_truth.num_queries) + " queries");

  LdsReport report;
  report.method = scores.method;
  report.seed = scores.seed;
  report.per_query.assign(scores.num_queries, kNaN);
  std::vector<double> included;
  for (std::size_t q = 0; q < scores.num_queries; ++q) {
    const double rho = query_rho(
        std::span<const double>(&scores.scores[q * scores.num_train], scores.num_train),
        masks, ground_truth, q);
    report.per_query[q] = rho;
    if (std::isnan(rho))
      report.excluded_queries.push_back(static_cast<int>(q));
    else
      included.push_back(rho);
  }
  if (included.empty())
    throw NumericError("lds: every query column was constant; no correlation defined");
  double sum = 0.0;
  for (double rho : included) sum += rho;
  report.mean = sum / static_cast<double>(included.size());
  if (included.size() > 1) {
    double ss = 0.0;
    for (double rho : included) {
      const double d = rho - report.mean;
      ss += d * d;
    }
    report.standard_error = std::sqrt(ss / static_cast<double>(included.size() - 1)) /
                            std::sqrt(static_cast<double>(included.size()));
  }
  return report;
}

void save_lds_report_json(const std::string& path, const LdsReport& report) {
  nlohmann::json doc;
  doc["method"] = report.method;
  doc["seed"] = report.seed;
  doc["ensemble_size"] = report.ensemble_size;
  nlohmann::json per_query = nlohmann::json::array();
  for (double rho : report.per_query) {
    if (std::isnan(rho))
      per_query.push_back(nullptr);
    else
      per_query.push_back(rho);
  }
  doc["per_query"] = std::move(per_query);
  doc["excluded_queries"] = report.excluded_queries;
  doc["mean"] = report.mean;
  doc["standard_error"] = report.standard_error;
  std::ofstream out(path);
  if (!out) throw ConfigError("save_lds_report_json: cannot write '" + path + "'");
  out << doc.dump(2) << '\n';
  if (!out) throw ConfigError("save_lds_report_json: short write to '" + path + "'");
}

NullLdsBound simulate_null_lds(const MaskSet& masks, const GroundTruth& ground_truth,
                               std::size_t num_train, int trials, std::uint64_t seed) {
  if (trials < 2) throw ConfigError("simulate_null_lds: need at least 2 trials");
  if (masks.num_examples != num_train)
    throw DimensionError("simulate_null_lds: masks cover " +
                         std::to_string(masks.num_examples) + " examples, scores would "
                         "cover " + std::to_string(num_train));
  std::vector<double> trial_means(static_cast<std::size_t>(trials), 0.0);
  for (int t = 0; t < trials; ++t) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t), kNullLdsTag));
    std::vector<double> row(num_train);
    std::vector<double> included;
    for (std::size_t q = 0; q < ground_truth.num_queries; ++q) {
      for (double& s : row) s = rng.normal();
      const double rho = query_rho(row, masks, ground_truth, q);
      if (!std::isnan(rho)) included.push_back(rho);
    }
    if (included.empty())
      throw NumericError("simulate_null_lds: every ground-truth column is constant");
    double sum = 0.0;
    for (double rho : included) sum += rho;
    trial_means[static_cast<std::size_t>(t)] =
        sum / static_cast<double>(included.size());
  }
  NullLdsBound bound;
  bound.trials = trials;
  double sum = 0.0;
  for (double m : trial_means) sum += m;
  bound.mean = sum / static_cast<double>(trials);
  double ss = 0.0;
  for (double m : trial_means) {
    const double d = m - bound.mean;
    ss += d * d;
  }
  bound.stddev = std::sqrt(ss / static_cast<double>(trials - 1));
  return bound;
}

// --- curvature scan --------------------------------------------------------------

CurvatureScan curvature_scan(const MlpSpec& spec, const ParamVector& params,
                             std::span<const Example> train, const EkfacState& state,
                             std::span<const Example> queries, const MaskSet& masks,
                             const GroundTruth& ground_truth,
                             const CurvatureScanConfig& config) {
  validate_spec(spec);
  check_state_layout(state, spec);
  if (queries.empty()) throw DimensionError("curvature_scan: empty query set");
  if (config.thresholds.empty()) throw ConfigError("curvature_scan: no bin thresholds");
  for (std::size_t i = 0; i < config.thresholds.size(); ++i) {
    if (!(config.thresholds[i] > 0.0))
      throw ConfigError("curvature_scan: thresholds must be positive");
    if (i > 0 && !(config.thresholds[i] < config.thresholds[i - 1]))
      throw ConfigError("curvature_scan: thresholds must be strictly descending");
  }
  if (config.sni.snapshot_stride <= 0 || config.astra.snapshot_stride <= 0)
    throw ConfigError("curvature_scan: solver snapshot_stride must be positive");
  if (config.sni.iterations != config.astra.iterations ||
      config.sni.snapshot_stride != config.astra.snapshot_stride)
    throw ConfigError("curvature_scan: solver iteration counts and snapshot strides "
                      "must match so the traces align");
  if (!(config.sni.damping > 0.0) || config.sni.damping != config.astra.damping)
    throw ConfigError("curvature_scan: solvers must share one positive damping");
  const double damping = config.sni.damping;
  const ParamLayout layout = ParamLayout::from_spec(spec);

  std::vector<ParamVector> query_grads(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q)
    query_grads[q] = measurement_grad(spec, params, queries[q]);

  std::vector<double> train_grads(train.size() * layout.total);
  parallel_for(train.size(), config.workers, [&](std::size_t m) {
    const ParamVector g = grad(spec, params, train[m]);
    std::copy(g.begin(), g.end(),
              train_grads.begin() + static_cast<std::ptrdiff_t>(m * layout.total));
  });

  struct SolverRun {
    std::string name;
    const SolverConfig* base;
    std::vector<std::vector<std::pair<int, ParamVector>>> snapshots;  // per query
  };
  SolverRun runs[2] = {{"sni", &config.sni, {}}, {"astra", &config.astra, {}}};
  for (SolverRun& run : runs) {
    run.snapshots.resize(queries.size());
    parallel_for(queries.size(), config.workers, [&](std::size_t q) {
      SolverConfig solver = *run.base;
      solver.seed = mix_seed(run.base->seed, q);
      SolveResult result;
      if (run.name == "sni")
        result = sni_solve(spec, params, train, query_grads[q], solver);
      else
        result = astra_solve(spec, params, train, state, query_grads[q], solver);
      run.snapshots[q] = std::move(result.trace.snapshots);
    });
    for (std::size_t q = 1; q < queries.size(); ++q) {
      if (run.snapshots[q].size() != run.snapshots[0].size())
        throw NumericError("curvature_scan: snapshot traces diverged across queries");
      for (std::size_t s = 0; s < run.snapshots[q].size(); ++s)
        if (run.snapshots[q][s].first != run.snapshots[0][s].first)
          throw NumericError("curvature_scan: snapshot iterations differ across queries");
    }
  }

  CurvatureScan scan;
  for (const SolverRun& run : runs) {
    const std::size_t num_snapshots = run.snapshots[0].size();
    for (std::size_t s = 0; s < num_snapshots; ++s) {
      const int iteration = run.snapshots[0][s].first;
      for (double threshold : config.thresholds) {
        CurvatureScanPoint point;
        point.iteration = iteration;
        point.threshold = threshold;
        point.solver = run.name;

        const ParamVector projected_first =
            project_to_bin(state, threshold, run.snapshots[0][s].second);
        point.objective = quadratic_objective(spec, params, train, damping,
                                              query_grads[0], projected_first);

        AttributionMatrix scores;
        scores.method = "proj-if-" + run.name;
        scores.seed = run.base->seed;
        scores.num_queries = queries.size();
        scores.num_train = train.size();
        scores.scores.assign(queries.size() * train.size(), 0.0);
        parallel_for(queries.size(), config.workers, [&](std::size_t q) {
          const ParamVector projected =
              project_to_bin(state, threshold, run.snapshots[q][s].second);
          for (std::size_t m = 0; m < train.size(); ++m)
            scores.at(q, m) =
                -dot(projected, std::span<const double>(
                                    &train_grads[m * layout.total], layout.total));
        });
        point.lds = lds(scores, masks, ground_truth).mean;
        scan.points.push_back(std::move(point));
      }
    }
  }
  return scan;
}

void save_curvature_scan_csv(const std::string& path, const CurvatureScan& scan) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_curvature_scan_csv: cannot write '" + path + "'");
  out << "iteration,bin_threshold,objective,lds,solver\n";
  out.precision(17);
  for (const CurvatureScanPoint& point : scan.points)
    out << point.iteration << ',' << point.threshold << ',' << point.objective << ','
        << point.lds << ',' << point.solver << '\n';
  if (!out) throw ConfigError("save_curvature_scan_csv: short write to '" + path + "'");
}

}  // namespace astra
