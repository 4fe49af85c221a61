#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "astra/attribution.hpp"
#include "astra/data.hpp"
#include "astra/error.hpp"
#include "astra/evaluation.hpp"
#include "astra/linalg.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"
#include "astra/trainer.hpp"
#include "oracles.hpp"

using astra::AttributionMatrix;
using astra::DenseMatrix;
using astra::Example;
using astra::GroundTruth;
using astra::GroundTruthOptions;
using astra::MaskSet;
using astra::MlpSpec;
using astra::ParamVector;
using astra::TrainConfig;

namespace {

MaskSet handmade_masks(std::size_t num_examples, std::vector<std::vector<std::uint8_t>> masks) {
  MaskSet set;
  set.num_examples = num_examples;
  set.cardinality = 0;
  for (std::uint8_t f : masks.front()) set.cardinality += f;
  set.masks = std::move(masks);
  return set;
}

// A ground-truth grid with directly chosen expectations (repeats = 1, samples
// mirror the expectations) for exercising the rank-correlation path.
GroundTruth crafted_truth(std::size_t num_masks, std::size_t num_queries) {
  GroundTruth gt;
  gt.num_masks = num_masks;
  gt.num_queries = num_queries;
  gt.repeats = 1;
  gt.expected.assign(num_masks * num_queries, 0.0);
  gt.stddev.assign(num_masks * num_queries, 0.0);
  gt.samples.assign(num_masks * num_queries, 0.0);
  return gt;
}

AttributionMatrix random_scores(std::size_t num_queries, std::size_t num_train,
                                std::uint64_t seed) {
  AttributionMatrix m;
  m.method = "if-test";
  m.seed = seed;
  m.num_queries = num_queries;
  m.num_train = num_train;
  m.scores.resize(num_queries * num_train);
  astra::Rng rng(seed);
  for (double& s : m.scores) s = rng.normal();
  return m;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("masks have fixed cardinality and are seed-reproducible") {
  MaskSet a = astra::generate_masks(20, 0.5, 30, 7);
  CHECK(a.num_examples == 20);
  CHECK(a.cardinality == 10);
  CHECK(a.seed == 7);
  REQUIRE(a.masks.size() == 30);
  for (const std::vector<std::uint8_t>& mask : a.masks) {
    std::size_t card = 0;
    for (std::uint8_t f : mask) card += f;
    CHECK(card == 10);
  }
  CHECK(a.duplicate_pairs == 0);

  MaskSet b = astra::generate_masks(20, 0.5, 30, 7);
  CHECK(a.masks == b.masks);
  MaskSet c = astra::generate_masks(20, 0.5, 30, 8);
  CHECK(a.masks != c.masks);

  // floor(0.3 * 21) = 6.
  MaskSet d = astra::generate_masks(21, 0.3, 3, 1);
  CHECK(d.cardinality == 6);
}

TEST_CASE("mask draws are roughly uniform over examples") {
  MaskSet set = astra::generate_masks(20, 0.5, 200, 11);
  std::vector<int> counts(20, 0);
  for (const std::vector<std::uint8_t>& mask : set.masks)
    for (std::size_t m = 0; m < 20; ++m) counts[m] += mask[m];
  // Each example appears ~100 +- 7 times; 40 is beyond five sigma.
  for (int count : counts) {
    CHECK(count > 60);
    CHECK(count < 140);
  }
}

TEST_CASE("duplicate masks are counted when the space is tiny") {
  // Two examples at beta 0.5: only two possible masks, so 10 draws must
  // collide at least 8 times.
  MaskSet tiny = astra::generate_masks(2, 0.5, 10, 3);
  CHECK(tiny.cardinality == 1);
  CHECK(tiny.duplicate_pairs >= 8);
}

TEST_CASE("mask generation rejects degenerate requests") {
  CHECK_THROWS_AS(astra::generate_masks(0, 0.5, 4, 1), astra::ConfigError);
  CHECK_THROWS_AS(astra::generate_masks(10, 0.0, 4, 1), astra::ConfigError);
  CHECK_THROWS_AS(astra::generate_masks(10, 1.0, 4, 1), astra::ConfigError);
  CHECK_THROWS_AS(astra::generate_masks(10, 0.5, 0, 1), astra::ConfigError);
  // floor(0.05 * 10) = 0 kept examples.
  CHECK_THROWS_AS(astra::generate_masks(10, 0.05, 4, 1), astra::ConfigError);
}

TEST_CASE("mask files round-trip and validate their cardinality") {
  oracle::TempDir dir("masks");
  MaskSet set = astra::generate_masks(12, 0.5, 5, 19);
  const std::string path = dir.file("masks.csv");
  astra::save_masks_csv(path, set);

  MaskSet back = astra::load_masks_csv(path);
  CHECK(back.num_examples == set.num_examples);
  CHECK(back.cardinality == set.cardinality);
  CHECK(back.seed == set.seed);
  CHECK(back.duplicate_pairs == set.duplicate_pairs);
  CHECK(back.masks == set.masks);

  CHECK_THROWS_AS(astra::load_masks_csv(dir.file("absent.csv")),
                  astra::MissingArtifactError);
  oracle::write_file(dir.file("junk.csv"), "hello\nworld\n");
  CHECK_THROWS_AS(astra::load_masks_csv(dir.file("junk.csv")), astra::ConfigError);

  // Dropping one inclusion row breaks the declared cardinality.
  std::string text = oracle::read_file(path);
  text.erase(text.rfind('\n', text.size() - 2) + 1);
  oracle::write_file(dir.file("short.csv"), text);
  CHECK_THROWS_WITH_AS(astra::load_masks_csv(dir.file("short.csv")),
                       doctest::Contains("inclusions, expected"), astra::ConfigError);
}

TEST_CASE("an all-ones mask cell reproduces a plain training run") {
  MlpSpec spec;
  spec.layer_dims = {2, 3, 1};
  spec.task = astra::TaskKind::kRegression;
  astra::Dataset ds = astra::synth_regression(20, 2, 0.2, 4);
  std::vector<Example> queries(ds.examples.begin(), ds.examples.begin() + 3);

  TrainConfig config;
  config.lr.base = 0.05;
  config.batch_size = 8;
  config.epochs = 3;
  config.checkpoint_every_epochs = 1;

  MaskSet masks = handmade_masks(20, {std::vector<std::uint8_t>(20, 1)});
  GroundTruthOptions options;
  options.repeats = 1;
  options.base_seed = 31;
  GroundTruth gt =
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options);
  REQUIRE(gt.num_masks == 1);
  REQUIRE(gt.num_queries == 3);

  // The cell's seeds are documented functions of (base seed, mask, repeat).
  TrainConfig cell = config;
  cell.init_seed = astra::mix_seed(31ull, 0ull, 0ull, astra::kGroundTruthInitTag);
  cell.batch_seed = astra::mix_seed(31ull, 0ull, 0ull, astra::kGroundTruthBatchTag);
  const astra::Trajectory traj = astra::train(spec, ds.examples, cell);
  for (std::size_t q = 0; q < 3; ++q)
    CHECK(gt.expected_at(0, q) ==
          astra::measurement(spec, traj.final_params(), queries[q]));
  CHECK(gt.failed_cells.empty());
}

TEST_CASE("retraining a convex model matches the closed-form optimum per mask") {
  MlpSpec spec;
  spec.layer_dims = {2, 1};  // linear regression: the ridge solution is exact
  spec.task = astra::TaskKind::kRegression;
  astra::Dataset ds = astra::synth_regression(36, 2, 0.3, 5);
  std::vector<Example> train_set(ds.examples.begin(), ds.examples.begin() + 32);
  std::vector<Example> queries(ds.examples.begin() + 32, ds.examples.end());

  MaskSet masks = astra::generate_masks(32, 0.5, 3, 77);
  TrainConfig config;
  config.lr.base = 0.3;
  config.batch_size = 16;  // the whole masked subset: deterministic descent
  config.epochs = 700;
  config.weight_decay = 0.1;
  config.checkpoint_every_epochs = 200;

  GroundTruthOptions options;
  options.repeats = 2;
  options.base_seed = 9;
  options.workers = 3;
  GroundTruth gt =
      astra::compute_ground_truth(spec, train_set, config, masks, queries, options);

  for (std::size_t j = 0; j < masks.masks.size(); ++j) {
    // Ridge normal equations on the mask's subset, bias column included.
    std::vector<std::size_t> kept;
    for (std::size_t m = 0; m < 32; ++m)
      if (masks.masks[j][m]) kept.push_back(m);
    const double n = static_cast<double>(kept.size());
    DenseMatrix a(3, 3);
    std::vector<double> b(3, 0.0);
    for (std::size_t m : kept) {
      const std::vector<double> xt = {train_set[m].x[0], train_set[m].x[1], 1.0};
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) a(r, c) += xt[r] * xt[c] / n;
        b[r] += xt[r] * train_set[m].target / n;
      }
    }
    for (std::size_t r = 0; r < 3; ++r) a(r, r) += config.weight_decay;
    const std::vector<double> w = oracle::solve_dense(a, b);

    for (std::size_t q = 0; q < queries.size(); ++q) {
      const double pred =
          w[0] * queries[q].x[0] + w[1] * queries[q].x[1] + w[2];
      const double want = std::abs(pred - queries[q].target);
      CHECK(gt.expected_at(j, q) == doctest::Approx(want).epsilon(1e-4));
      // Both repeats descend to the same optimum from different inits.
      CHECK(gt.stddev[j * gt.num_queries + q] < 1e-5);
    }
  }
}

TEST_CASE("the journal makes reruns no-ops and resumes truncated grids") {
  oracle::TempDir dir("journal");
  MlpSpec spec;
  spec.layer_dims = {2, 3, 1};
  spec.task = astra::TaskKind::kRegression;
  astra::Dataset ds = astra::synth_regression(16, 2, 0.2, 6);
  std::vector<Example> queries(ds.examples.begin(), ds.examples.begin() + 2);
  MaskSet masks = astra::generate_masks(16, 0.5, 3, 13);

  TrainConfig config;
  config.lr.base = 0.05;
  config.batch_size = 4;
  config.epochs = 2;
  config.checkpoint_every_epochs = 1;

  GroundTruthOptions options;
  options.repeats = 2;
  options.base_seed = 21;
  options.workers = 1;  // keep the journal row order stable
  options.journal_path = dir.file("journal.csv");

  GroundTruth first =
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options);
  const std::string journal_after_first = oracle::read_file(options.journal_path);
  CHECK(journal_after_first.rfind("mask_id,repeat,query_id,measurement\n", 0) == 0);

  // Every cell is journaled, so a rerun retrains nothing and appends nothing.
  GroundTruth second =
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options);
  CHECK(oracle::read_file(options.journal_path) == journal_after_first);
  CHECK(second.samples == first.samples);
  CHECK(second.expected == first.expected);

  // Chop off part of the last cell: the partial cell is re-run, the rest is
  // trusted, and the grid comes back identical.
  std::string truncated = journal_after_first;
  truncated.erase(truncated.rfind('\n', truncated.size() - 2) + 1);
  oracle::write_file(options.journal_path, truncated);
  GroundTruth resumed =
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options);
  CHECK(resumed.samples == first.samples);

  // The journal is an optimization only: a journal-free run agrees.
  GroundTruthOptions bare = options;
  bare.journal_path.clear();
  GroundTruth scratch =
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, bare);
  CHECK(scratch.samples == first.samples);
}

TEST_CASE("uniformly diverging cells fail the mask and journal the divergence") {
  oracle::TempDir dir("diverge");
  MlpSpec spec;
  spec.layer_dims = {2, 3, 1};
  spec.task = astra::TaskKind::kRegression;
  astra::Dataset ds = astra::synth_regression(12, 2, 0.2, 7);
  std::vector<Example> queries(ds.examples.begin(), ds.examples.begin() + 2);
  MaskSet masks = astra::generate_masks(12, 0.5, 2, 3);

  TrainConfig config;
  config.lr.base = 1e12;  // every run blows up immediately
  config.batch_size = 4;
  config.epochs = 2;
  config.checkpoint_every_epochs = 1;

  GroundTruthOptions options;
  options.repeats = 1;
  options.base_seed = 5;
  options.journal_path = dir.file("journal.csv");
  CHECK_THROWS_WITH_AS(
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options),
      doctest::Contains("every repeat of mask"), astra::NumericError);
  CHECK(oracle::read_file(options.journal_path).find(",-1,nan") != std::string::npos);
}

TEST_CASE("ground-truth validation") {
  MlpSpec spec;
  spec.layer_dims = {2, 1};
  spec.task = astra::TaskKind::kRegression;
  astra::Dataset ds = astra::synth_regression(10, 2, 0.2, 8);
  std::vector<Example> queries(ds.examples.begin(), ds.examples.begin() + 1);
  MaskSet masks = astra::generate_masks(10, 0.5, 2, 3);
  TrainConfig config;
  GroundTruthOptions options;

  MaskSet none;
  CHECK_THROWS_AS(
      astra::compute_ground_truth(spec, ds.examples, config, none, queries, options),
      astra::ConfigError);
  CHECK_THROWS_AS(astra::compute_ground_truth(spec, ds.examples, config, masks,
                                              std::vector<Example>{}, options),
                  astra::DimensionError);
  options.repeats = 0;
  CHECK_THROWS_AS(
      astra::compute_ground_truth(spec, ds.examples, config, masks, queries, options),
      astra::ConfigError);
  options.repeats = 1;
  MaskSet wrong = astra::generate_masks(9, 0.5, 2, 3);
  CHECK_THROWS_AS(
      astra::compute_ground_truth(spec, ds.examples, config, wrong, queries, options),
      astra::DimensionError);
}

TEST_CASE("ground-truth grids round-trip, including diverged cells") {
  oracle::TempDir dir("gtcsv");
  GroundTruth gt;
  gt.num_masks = 2;
  gt.num_queries = 2;
  gt.repeats = 2;
  const double nan = std::nan("");
  // mask 0: repeat 0 fine, repeat 1 diverged; mask 1: both fine.
  gt.samples = {1.5, -0.25, nan, nan, 3.0, 4.0, 5.0, 8.0};
  gt.expected = {1.5, -0.25, 4.0, 6.0};
  gt.stddev = {0.0, 0.0, std::sqrt(2.0), std::sqrt(8.0)};

  const std::string path = dir.file("grid.csv");
  astra::save_ground_truth_csv(path, gt);
  GroundTruth back = astra::load_ground_truth_csv(path);
  CHECK(back.num_masks == 2);
  CHECK(back.num_queries == 2);
  CHECK(back.repeats == 2);
  REQUIRE(back.failed_cells.size() == 1);
  CHECK(back.failed_cells[0] == std::pair<int, int>(0, 1));
  CHECK(back.expected == gt.expected);
  for (std::size_t i = 0; i < gt.stddev.size(); ++i)
    CHECK(back.stddev[i] == doctest::Approx(gt.stddev[i]).epsilon(1e-12));
  CHECK(back.sample_at(1, 1, 0) == 5.0);
  CHECK(std::isnan(back.sample_at(0, 1, 0)));

  CHECK_THROWS_AS(astra::load_ground_truth_csv(dir.file("absent.csv")),
                  astra::MissingArtifactError);

  // An incomplete cell asks to be resumed.
  oracle::write_file(dir.file("partial.csv"),
                     "mask_id,repeat,query_id,measurement\n0,0,0,1.0\n0,0,1,2.0\n"
                     "1,0,0,3.0\n");
  CHECK_THROWS_WITH_AS(astra::load_ground_truth_csv(dir.file("partial.csv")),
                       doctest::Contains("resume"), astra::MissingArtifactError);

  // A cell cannot be both diverged and measured.
  oracle::write_file(dir.file("conflict.csv"),
                     "mask_id,repeat,query_id,measurement\n0,0,0,1.0\n0,0,-1,nan\n");
  CHECK_THROWS_AS(astra::load_ground_truth_csv(dir.file("conflict.csv")),
                  astra::ConfigError);

  // All cells diverged: nothing to load.
  oracle::write_file(dir.file("alldead.csv"),
                     "mask_id,repeat,query_id,measurement\n0,0,-1,nan\n");
  CHECK_THROWS_AS(astra::load_ground_truth_csv(dir.file("alldead.csv")),
                  astra::MissingArtifactError);

  // A partly-NaN measured cell marks a corrupt grid.
  oracle::write_file(dir.file("partnan.csv"),
                     "mask_id,repeat,query_id,measurement\n0,0,0,1.0\n0,0,1,nan\n");
  CHECK_THROWS_WITH_AS(astra::load_ground_truth_csv(dir.file("partnan.csv")),
                       doctest::Contains("partly-NaN"), astra::NumericError);
}

TEST_CASE("group influence sums exactly the included scores") {
  astra::Rng rng(15);
  std::vector<double> row(10);
  for (double& s : row) s = rng.normal();
  std::vector<std::uint8_t> mask = {1, 0, 0, 1, 1, 0, 1, 0, 0, 1};
  double want = 0.0;
  for (std::size_t m = 0; m < 10; ++m)
    if (mask[m]) want += row[m];
  CHECK(astra::group_influence(row, mask) == want);
  CHECK(astra::group_influence(row, std::vector<std::uint8_t>(10, 0)) == 0.0);

  std::vector<std::uint8_t> short_mask(9, 1);
  CHECK_THROWS_AS(astra::group_influence(row, short_mask), astra::DimensionError);
}

TEST_CASE("rank alignment scores hit the two extremes and exclude constants") {
  MaskSet masks = astra::generate_masks(6, 0.5, 8, 23);
  AttributionMatrix scores = random_scores(3, 6, 101);
  GroundTruth gt = crafted_truth(8, 3);
  for (std::size_t j = 0; j < 8; ++j) {
    const std::span<const double> row0(&scores.scores[0], 6);
    const std::span<const double> row1(&scores.scores[6], 6);
    gt.expected[j * 3 + 0] = astra::group_influence(row0, masks.masks[j]);
    gt.expected[j * 3 + 1] = -astra::group_influence(row1, masks.masks[j]);
    gt.expected[j * 3 + 2] = 42.0;  // constant column: excluded
  }

  astra::LdsReport report = astra::lds(scores, masks, gt);
  CHECK(report.method == scores.method);
  CHECK(report.per_query[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.per_query[1] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::isnan(report.per_query[2]));
  REQUIRE(report.excluded_queries == std::vector<int>{2});
  CHECK(report.mean == doctest::Approx(0.0).epsilon(1e-12));
  // Sample deviation of {1, -1} is sqrt(2); over sqrt(2) queries: exactly 1.
  CHECK(report.standard_error == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rank alignment is invariant to positive affine score maps") {
  MaskSet masks = astra::generate_masks(8, 0.5, 10, 29);
  AttributionMatrix scores = random_scores(3, 8, 31);
  GroundTruth gt = crafted_truth(10, 3);
  astra::Rng rng(33);
  for (double& e : gt.expected) e = rng.normal();

  astra::LdsReport base = astra::lds(scores, masks, gt);
  AttributionMatrix mapped = scores;
  for (double& s : mapped.scores) s = 3.0 * s + 7.0;
  astra::LdsReport same = astra::lds(mapped, masks, gt);
  for (std::size_t q = 0; q < 3; ++q)
    CHECK(same.per_query[q] == doctest::Approx(base.per_query[q]).epsilon(1e-12));
  CHECK(same.mean == doctest::Approx(base.mean).epsilon(1e-12));
}

TEST_CASE("rank alignment validates its shapes and degenerate inputs") {
  MaskSet masks = astra::generate_masks(6, 0.5, 8, 23);
  AttributionMatrix scores = random_scores(2, 6, 41);
  GroundTruth gt = crafted_truth(8, 2);
  astra::Rng rng(43);
  for (double& e : gt.expected) e = rng.normal();

  AttributionMatrix wrong_train = random_scores(2, 5, 44);
  CHECK_THROWS_AS(astra::lds(wrong_train, masks, gt), astra::DimensionError);
  GroundTruth wrong_masks = crafted_truth(7, 2);
  CHECK_THROWS_AS(astra::lds(scores, masks, wrong_masks), astra::DimensionError);
  GroundTruth wrong_queries = crafted_truth(8, 3);
  CHECK_THROWS_AS(astra::lds(scores, masks, wrong_queries), astra::DimensionError);

  GroundTruth flat = crafted_truth(8, 2);  // all-zero expectations
  CHECK_THROWS_WITH_AS(astra::lds(scores, masks, flat),
                       doctest::Contains("every query column was constant"),
                       astra::NumericError);
}

TEST_CASE("rank-alignment reports serialize with null markers for exclusions") {
  oracle::TempDir dir("ldsjson");
  astra::LdsReport report;
  report.method = "if-astra";
  report.seed = 99;
  report.ensemble_size = 4;
  report.per_query = {0.5, std::nan(""), -0.25};
  report.excluded_queries = {1};
  report.mean = 0.125;
  report.standard_error = 0.0625;
  const std::string path = dir.file("report.json");
  astra::save_lds_report_json(path, report);

  const nlohmann::json doc = nlohmann::json::parse(oracle::read_file(path));
  CHECK(doc["method"] == "if-astra");
  CHECK(doc["seed"] == 99);
  CHECK(doc["ensemble_size"] == 4);
  REQUIRE(doc["per_query"].size() == 3);
  CHECK(doc["per_query"][0] == 0.5);
  CHECK(doc["per_query"][1].is_null());
  CHECK(doc["per_query"][2] == -0.25);
  CHECK(doc["excluded_queries"] == std::vector<int>{1});
  CHECK(doc["mean"] == 0.125);
  CHECK(doc["standard_error"] == 0.0625);

  CHECK_THROWS_AS(astra::save_lds_report_json(dir.str() + "/no/r.json", report),
                  astra::ConfigError);
}

TEST_CASE("the null baseline is reproducible and centered near zero") {
  MaskSet masks = astra::generate_masks(10, 0.5, 12, 51);
  GroundTruth gt = crafted_truth(12, 3);
  astra::Rng rng(53);
  for (double& e : gt.expected) e = rng.normal();

  astra::NullLdsBound a = astra::simulate_null_lds(masks, gt, 10, 64, 7);
  astra::NullLdsBound b = astra::simulate_null_lds(masks, gt, 10, 64, 7);
  CHECK(a.mean == b.mean);
  CHECK(a.stddev == b.stddev);
  CHECK(a.trials == 64);
  CHECK(std::abs(a.mean) < 0.5);
  CHECK(a.stddev > 0.0);

  astra::NullLdsBound c = astra::simulate_null_lds(masks, gt, 10, 64, 8);
  CHECK(a.mean != c.mean);

  CHECK_THROWS_AS(astra::simulate_null_lds(masks, gt, 10, 1, 7), astra::ConfigError);
  CHECK_THROWS_AS(astra::simulate_null_lds(masks, gt, 9, 64, 7), astra::DimensionError);
}

TEST_CASE("the curvature scan grids snapshots against bins for both solvers") {
  MlpSpec spec;
  spec.layer_dims = {2, 3, 1};
  spec.task = astra::TaskKind::kRegression;
  ParamVector params = astra::init_params(spec, 61);
  astra::Dataset ds = astra::synth_regression(28, 2, 0.3, 62);
  std::vector<Example> train_set(ds.examples.begin(), ds.examples.begin() + 24);
  std::vector<Example> queries(ds.examples.begin() + 24, ds.examples.end());

  astra::EkfacState state = astra::build_attribution_state(spec, params, train_set, 63);
  double min_lambda = std::numeric_limits<double>::infinity();
  double max_lambda = 0.0;
  for (const astra::LayerKron& layer : state.layers)
    for (double lam : layer.lambda.data) {
      min_lambda = std::min(min_lambda, lam);
      max_lambda = std::max(max_lambda, lam);
    }
  REQUIRE(min_lambda > 0.0);  // the full-space threshold below keeps everything

  MaskSet masks = astra::generate_masks(24, 0.5, 10, 64);
  GroundTruth gt = crafted_truth(10, queries.size());
  astra::Rng rng(65);
  for (double& e : gt.expected) e = rng.normal();

  astra::CurvatureScanConfig config;
  config.sni.damping = config.astra.damping = 1e-3;
  config.sni.lr = 0.05;
  config.astra.lr = 0.2;
  config.sni.iterations = config.astra.iterations = 20;
  config.sni.batch_size = config.astra.batch_size = 0;
  config.sni.momentum = config.astra.momentum = 0.0;
  config.sni.snapshot_stride = config.astra.snapshot_stride = 10;
  config.sni.seed = config.astra.seed = 17;
  config.thresholds = {max_lambda * 2.0, max_lambda / 8.0, min_lambda / 2.0};

  astra::CurvatureScan scan = astra::curvature_scan(spec, params, train_set, state,
                                                    queries, masks, gt, config);
  // 2 solvers x 3 snapshots (0, 10, 20) x 3 thresholds.
  REQUIRE(scan.points.size() == 18);
  for (const astra::CurvatureScanPoint& p : scan.points) {
    CHECK((p.solver == "sni" || p.solver == "astra"));
    CHECK((p.iteration == 0 || p.iteration == 10 || p.iteration == 20));
    CHECK(std::isfinite(p.objective));
    CHECK(std::isfinite(p.lds));
    CHECK(p.lds >= -1.0);
    CHECK(p.lds <= 1.0);
  }

  // The widest bin keeps every eigendirection, so its objective must equal
  // the raw quadratic objective of a directly re-run solver snapshot.
  astra::SolverConfig direct = config.sni;
  direct.seed = astra::mix_seed(config.sni.seed, std::size_t{0});
  const ParamVector v0 = astra::measurement_grad(spec, params, queries[0]);
  astra::SolveResult rerun = astra::sni_solve(spec, params, train_set, v0, direct);
  REQUIRE(rerun.trace.snapshots.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    const astra::CurvatureScanPoint& point = scan.points[s * 3 + 2];  // finest bin
    CHECK(point.solver == "sni");
    CHECK(point.iteration == rerun.trace.snapshots[s].first);
    const double want =
        astra::quadratic_objective(spec, params, train_set, 1e-3, v0,
                                   rerun.trace.snapshots[s].second);
    CHECK(point.objective == doctest::Approx(want).epsilon(1e-12));
  }

  // At the last snapshot, keeping the full space reaches at least as low an
  // objective as the coarsest (near-empty) bin.
  const astra::CurvatureScanPoint& coarse_last = scan.points[2 * 3 + 0];
  const astra::CurvatureScanPoint& fine_last = scan.points[2 * 3 + 2];
  CHECK(fine_last.objective <= coarse_last.objective + 1e-9);

  // Determinism, including under parallelism.
  astra::CurvatureScanConfig par = config;
  par.workers = 3;
  astra::CurvatureScan again = astra::curvature_scan(spec, params, train_set, state,
                                                     queries, masks, gt, par);
  REQUIRE(again.points.size() == scan.points.size());
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    CHECK(again.points[i].objective == scan.points[i].objective);
    CHECK(again.points[i].lds == scan.points[i].lds);
  }

  // CSV export.
  oracle::TempDir dir("scan");
  const std::string path = dir.file("scan.csv");
  astra::save_curvature_scan_csv(path, scan);
  const std::string text = oracle::read_file(path);
  CHECK(text.rfind("iteration,bin_threshold,objective,lds,solver\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : text)
    if (c == '\n') ++rows;
  CHECK(rows == 19);

  // Config validation.
  astra::CurvatureScanConfig bad = config;
  bad.thresholds = {};
  CHECK_THROWS_AS(astra::curvature_scan(spec, params, train_set, state, queries, masks,
                                        gt, bad),
                  astra::ConfigError);
  bad = config;
  bad.thresholds = {1e-2, 1e-1};
  CHECK_THROWS_WITH_AS(astra::curvature_scan(spec, params, train_set, state, queries,
                                             masks, gt, bad),
                       doctest::Contains("strictly descending"), astra::ConfigError);
  bad = config;
  bad.thresholds = {1e-1, 0.0};
  CHECK_THROWS_AS(astra::curvature_scan(spec, params, train_set, state, queries, masks,
                                        gt, bad),
                  astra::ConfigError);
  bad = config;
  bad.sni.snapshot_stride = 0;
  CHECK_THROWS_AS(astra::curvature_scan(spec, params, train_set, state, queries, masks,
                                        gt, bad),
                  astra::ConfigError);
  bad = config;
  bad.astra.iterations = 30;
  CHECK_THROWS_WITH_AS(astra::curvature_scan(spec, params, train_set, state, queries,
                                             masks, gt, bad),
                       doctest::Contains("must match"), astra::ConfigError);
  bad = config;
  bad.astra.damping = 2e-3;
  CHECK_THROWS_WITH_AS(astra::curvature_scan(spec, params, train_set, state, queries,
                                             masks, gt, bad),
                       doctest::Contains("share one positive damping"),
                       astra::ConfigError);
}

}  // TEST_SUITE("evaluation")
