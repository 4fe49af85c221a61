#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "astra/attribution.hpp"
#include "astra/data.hpp"
#include "astra/error.hpp"
#include "astra/ihvp.hpp"
#include "astra/linalg.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"
#include "astra/trainer.hpp"
#include "oracles.hpp"

using astra::AttributionMatrix;
using astra::AttributionMethod;
using astra::EkfacState;
using astra::Example;
using astra::IfConfig;
using astra::MlpSpec;
using astra::ParamVector;
using astra::SourceConfig;
using astra::SourceMode;
using astra::SourcePlan;

namespace {

struct Fixture {
  MlpSpec spec;
  ParamVector params;
  std::vector<Example> train;
  std::vector<Example> queries;
};

Fixture make_fixture(std::uint64_t seed = 3) {
  Fixture f;
  f.spec.layer_dims = {2, 3, 1};
  f.spec.task = astra::TaskKind::kRegression;
  f.params = astra::init_params(f.spec, seed);
  astra::Dataset ds = astra::synth_regression(28, 2, 0.3, seed + 1);
  f.train.assign(ds.examples.begin(), ds.examples.begin() + 24);
  f.queries.assign(ds.examples.begin() + 24, ds.examples.end());
  return f;
}

// Hand-rolled identity scores: minus the dot of the query measurement
// gradient with each training loss gradient.
AttributionMatrix identity_oracle(const Fixture& f) {
  AttributionMatrix m;
  m.num_queries = f.queries.size();
  m.num_train = f.train.size();
  m.scores.assign(m.num_queries * m.num_train, 0.0);
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    const ParamVector u = astra::measurement_grad(f.spec, f.params, f.queries[q]);
    for (std::size_t t = 0; t < f.train.size(); ++t)
      m.at(q, t) = -astra::dot(u, astra::grad(f.spec, f.params, f.train[t]));
  }
  return m;
}

astra::Trajectory short_training_run(const Fixture& f, int epochs) {
  astra::TrainConfig config;
  config.lr.base = 0.05;
  config.batch_size = 8;
  config.epochs = epochs;  // 3 steps per epoch on 24 examples
  config.init_seed = 11;
  config.batch_seed = 12;
  config.checkpoint_every_epochs = 1;
  return astra::train(f.spec, f.train, config);
}

AttributionMatrix tagged(double fill, std::uint64_t seed, const std::string& method) {
  AttributionMatrix m;
  m.method = method;
  m.seed = seed;
  m.num_queries = 2;
  m.num_train = 3;
  m.scores.assign(6, fill);
  return m;
}

}  // namespace

TEST_SUITE("attribution") {

TEST_CASE("method tags round-trip and reject unknown names") {
  CHECK(astra::if_method_tag(AttributionMethod::kIdentity) == "if-identity");
  CHECK(astra::if_method_tag(AttributionMethod::kEkfac) == "if-ekfac");
  CHECK(astra::if_method_tag(AttributionMethod::kSni) == "if-sni");
  CHECK(astra::if_method_tag(AttributionMethod::kAstra) == "if-astra");
  CHECK(astra::parse_attribution_method("identity") == AttributionMethod::kIdentity);
  CHECK(astra::parse_attribution_method("ekfac") == AttributionMethod::kEkfac);
  CHECK(astra::parse_attribution_method("sni") == AttributionMethod::kSni);
  CHECK(astra::parse_attribution_method("astra") == AttributionMethod::kAstra);
  CHECK_THROWS_WITH_AS(astra::parse_attribution_method("lissa"),
                       doctest::Contains("unknown attribution method"),
                       astra::ConfigError);

  CHECK(astra::source_mode_tag(SourceMode::kEkfac) == "source-ekfac");
  CHECK(astra::source_mode_tag(SourceMode::kAstra) == "source-astra");
  CHECK(astra::parse_source_mode("ekfac") == SourceMode::kEkfac);
  CHECK(astra::parse_source_mode("astra") == SourceMode::kAstra);
  CHECK_THROWS_AS(astra::parse_source_mode("identity"), astra::ConfigError);
}

TEST_CASE("identity attribution is the raw gradient alignment") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kIdentity;
  config.solver.seed = 77;
  AttributionMatrix got = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
  AttributionMatrix want = identity_oracle(f);
  CHECK(got.method == "if-identity");
  CHECK(got.seed == 77);
  CHECK(got.num_queries == 4);
  CHECK(got.num_train == 24);
  CHECK(oracle::max_abs_diff(got.scores, want.scores) < 1e-14);
}

TEST_CASE("self-scores are negative under the loss-like measurement") {
  // Queries that ARE training examples: including yourself reduces your own
  // error, so the inclusion-oriented score must not be positive.
  Fixture f = make_fixture(9);
  std::vector<Example> self_queries(f.train.begin(), f.train.begin() + 6);
  IfConfig config;
  config.method = AttributionMethod::kIdentity;
  AttributionMatrix scores =
      astra::if_attribute(f.spec, f.params, f.train, self_queries, config);
  for (std::size_t q = 0; q < self_queries.size(); ++q)
    CHECK(scores.at(q, q) <= 0.0);
}

TEST_CASE("preconditioned scores replay the damped Kronecker inverse per query") {
  Fixture f = make_fixture();
  EkfacState state = astra::build_attribution_state(f.spec, f.params, f.train, 21);
  IfConfig config;
  config.method = AttributionMethod::kEkfac;
  config.solver.damping = 0.2;
  AttributionMatrix got =
      astra::if_attribute(f.spec, f.params, f.train, f.queries, config, &state);
  CHECK(got.method == "if-ekfac");

  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    ParamVector u = astra::measurement_grad(f.spec, f.params, f.queries[q]);
    u = astra::precondition(state, 0.2, u);
    for (std::size_t t = 0; t < f.train.size(); ++t) {
      const double want = -astra::dot(u, astra::grad(f.spec, f.params, f.train[t]));
      CHECK(got.at(q, t) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("a one-step preconditioned solve reproduces the closed-form scores") {
  Fixture f = make_fixture();
  EkfacState state = astra::build_attribution_state(f.spec, f.params, f.train, 22);

  IfConfig ek;
  ek.method = AttributionMethod::kEkfac;
  ek.solver.damping = 0.15;
  AttributionMatrix closed =
      astra::if_attribute(f.spec, f.params, f.train, f.queries, ek, &state);

  IfConfig one = ek;
  one.method = AttributionMethod::kAstra;
  one.solver.lr = 1.0;
  one.solver.iterations = 1;
  one.solver.momentum = 0.0;
  one.solver.batch_size = 0;
  one.solver.init = astra::SolverInit::kZero;
  AttributionMatrix stepped =
      astra::if_attribute(f.spec, f.params, f.train, f.queries, one, &state);
  CHECK(oracle::max_abs_diff(stepped.scores, closed.scores) < 1e-14);
}

TEST_CASE("iterative scores approach the dense-solve scores") {
  Fixture f = make_fixture();
  const double lambda = 0.1;

  // Dense oracle: u* from an explicit damped solve per query.
  astra::DenseMatrix g = oracle::dense_ggn_by_columns(f.spec, f.params, f.train);
  for (std::size_t i = 0; i < g.rows; ++i) g(i, i) += lambda;
  AttributionMatrix want;
  want.num_queries = f.queries.size();
  want.num_train = f.train.size();
  want.scores.assign(want.num_queries * want.num_train, 0.0);
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    const ParamVector mg = astra::measurement_grad(f.spec, f.params, f.queries[q]);
    const std::vector<double> u = oracle::solve_dense(g, mg);
    for (std::size_t t = 0; t < f.train.size(); ++t)
      want.at(q, t) = -astra::dot(u, astra::grad(f.spec, f.params, f.train[t]));
  }

  IfConfig config;
  config.method = AttributionMethod::kAstra;
  config.solver.damping = lambda;
  config.solver.lr = 0.1;
  config.solver.momentum = 0.9;
  config.solver.iterations = 500;
  config.solver.batch_size = 0;
  config.solver.seed = 5;
  AttributionMatrix got = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
  CHECK(oracle::rel_err(got.scores, want.scores) < 1e-3);
}

TEST_CASE("omitting the curvature state rebuilds it from the solver seed") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kEkfac;
  config.solver.damping = 0.3;
  config.solver.seed = 91;
  AttributionMatrix implicit =
      astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
  EkfacState state = astra::build_attribution_state(f.spec, f.params, f.train, 91);
  AttributionMatrix explicit_state =
      astra::if_attribute(f.spec, f.params, f.train, f.queries, config, &state);
  CHECK(implicit.scores == explicit_state.scores);
}

TEST_CASE("each query's stochastic solve runs on its own derived seed") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kSni;
  config.solver.damping = 0.5;
  config.solver.lr = 0.05;
  config.solver.iterations = 30;
  config.solver.batch_size = 6;  // stochastic: the seed matters
  config.solver.momentum = 0.0;
  config.solver.seed = 1234;
  AttributionMatrix got = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);

  for (std::size_t q : {std::size_t{0}, std::size_t{3}}) {
    astra::SolverConfig solver = config.solver;
    solver.seed = astra::mix_seed(config.solver.seed, q);
    const ParamVector mg = astra::measurement_grad(f.spec, f.params, f.queries[q]);
    const ParamVector u = astra::sni_solve(f.spec, f.params, f.train, mg, solver).x;
    for (std::size_t t = 0; t < f.train.size(); ++t) {
      const double want = -astra::dot(u, astra::grad(f.spec, f.params, f.train[t]));
      CHECK(got.at(q, t) == doctest::Approx(want).epsilon(1e-13));
    }
  }
}

TEST_CASE("parallel workers do not change the scores") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kEkfac;
  config.solver.damping = 0.2;
  config.workers = 1;
  AttributionMatrix serial = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
  config.workers = 4;
  AttributionMatrix parallel = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
  CHECK(serial.scores == parallel.scores);
}

TEST_CASE("layer masks restrict the score dot products") {
  Fixture f = make_fixture();
  const astra::ParamLayout layout = astra::ParamLayout::from_spec(f.spec);
  IfConfig config;
  config.method = AttributionMethod::kIdentity;
  config.layer_mask = {1, 0};  // keep the first layer only
  AttributionMatrix got = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);

  const std::size_t cut = layout.layers[0].size();
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    const ParamVector u = astra::measurement_grad(f.spec, f.params, f.queries[q]);
    for (std::size_t t = 0; t < f.train.size(); ++t) {
      const ParamVector gt = astra::grad(f.spec, f.params, f.train[t]);
      double want = 0.0;
      for (std::size_t i = 0; i < cut; ++i) want -= u[i] * gt[i];
      CHECK(got.at(q, t) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  config.layer_mask = {1, 0, 1};
  CHECK_THROWS_WITH_AS(astra::if_attribute(f.spec, f.params, f.train, f.queries, config),
                       doctest::Contains("layer mask"), astra::ConfigError);
  config.layer_mask = {0, 0};
  CHECK_THROWS_WITH_AS(astra::if_attribute(f.spec, f.params, f.train, f.queries, config),
                       doctest::Contains("every layer is masked out"),
                       astra::ConfigError);
}

TEST_CASE("a diverging per-query solve names the query") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kSni;
  config.solver.damping = 0.5;
  config.solver.lr = 1e12;
  config.solver.iterations = 20;
  config.solver.batch_size = 0;
  try {
    astra::if_attribute(f.spec, f.params, f.train, f.queries, config);
    CHECK(false);
  } catch (const astra::DivergenceError& e) {
    CHECK(std::string(e.what()).find("query ") != std::string::npos);
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("attribution input validation") {
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kEkfac;
  config.solver.damping = 0.1;

  CHECK_THROWS_AS(
      astra::if_attribute(f.spec, f.params, std::vector<Example>{}, f.queries, config),
      astra::DimensionError);
  CHECK_THROWS_AS(
      astra::if_attribute(f.spec, f.params, f.train, std::vector<Example>{}, config),
      astra::DimensionError);
  ParamVector short_params(f.params.begin(), f.params.end() - 1);
  CHECK_THROWS_AS(astra::if_attribute(f.spec, short_params, f.train, f.queries, config),
                  astra::DimensionError);
  config.solver.damping = 0.0;
  CHECK_THROWS_WITH_AS(astra::if_attribute(f.spec, f.params, f.train, f.queries, config),
                       doctest::Contains("damping must be positive"),
                       astra::ConfigError);
  // The identity method never inverts anything, so no damping is needed.
  config.method = AttributionMethod::kIdentity;
  CHECK_NOTHROW(astra::if_attribute(f.spec, f.params, f.train, f.queries, config));
}

TEST_CASE("the unrolled plan derives damping from the realized schedule") {
  Fixture f = make_fixture();
  astra::Trajectory traj = short_training_run(f, 5);  // 15 optimizer steps
  SourcePlan plan = astra::build_source_plan(f.spec, traj, 3, f.train, 31);

  CHECK(plan.final_params == traj.final_params());
  REQUIRE(plan.segments.size() == 3);
  std::uint64_t total = 0;
  for (const astra::SourceSegment& seg : plan.segments) {
    total += seg.steps;
    CHECK(seg.mean_lr == doctest::Approx(0.05));
    CHECK(seg.damping == doctest::Approx(1.0 / (seg.mean_lr *
                                                static_cast<double>(seg.steps)))
                             .epsilon(1e-15));
    CHECK(seg.horizon() == doctest::Approx(1.0 / seg.damping).epsilon(1e-12));
    CHECK_NOTHROW(astra::check_state_layout(seg.state, f.spec));
  }
  CHECK(total == traj.total_steps);
  CHECK(plan.segments[0].index == 0);
  CHECK(plan.segments[2].index == 2);

  // Distinct per-segment statistics seeds give distinct spectra.
  CHECK(plan.segments[0].state.layers[0].lambda.data !=
        plan.segments[1].state.layers[0].lambda.data);

  // Iteration-weighted damping average.
  double weighted = 0.0;
  for (const astra::SourceSegment& seg : plan.segments)
    weighted += static_cast<double>(seg.steps) * seg.damping;
  CHECK(astra::implied_if_damping(plan) ==
        doctest::Approx(weighted / static_cast<double>(traj.total_steps)).epsilon(1e-15));

  SourcePlan empty;
  CHECK_THROWS_AS(astra::implied_if_damping(empty), astra::ConfigError);
}

TEST_CASE("segments with zero learning rate are rejected") {
  Fixture f = make_fixture();
  astra::Trajectory frozen;
  frozen.total_steps = 4;
  frozen.step_lrs.assign(4, 0.0);
  frozen.checkpoints.push_back({0, f.params});
  frozen.checkpoints.push_back({4, f.params});
  CHECK_THROWS_WITH_AS(astra::build_source_plan(f.spec, frozen, 1, f.train, 31),
                       doctest::Contains("implied damping is not positive"),
                       astra::ConfigError);
}

TEST_CASE("unrolled scores replay the carry chain over two segments") {
  Fixture f = make_fixture();
  astra::Trajectory traj = short_training_run(f, 4);  // 12 steps -> spans of 6
  SourcePlan plan = astra::build_source_plan(f.spec, traj, 2, f.train, 31);
  SourceConfig config;
  config.mode = SourceMode::kEkfac;
  AttributionMatrix got = astra::source_attribute(f.spec, plan, f.train, f.queries, config);
  CHECK(got.method == "source-ekfac");

  // Hand-walked recursion: newest segment first, finite-horizon response per
  // segment, exponential attenuation of the carry in between.
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    ParamVector carry = astra::measurement_grad(f.spec, plan.final_params, f.queries[q]);
    std::vector<double> want(f.train.size(), 0.0);
    for (std::size_t l = plan.segments.size(); l-- > 0;) {
      const astra::SourceSegment& seg = plan.segments[l];
      const ParamVector response =
          astra::finite_horizon_inverse_apply(seg.state, seg.horizon(), carry);
      for (std::size_t t = 0; t < f.train.size(); ++t)
        want[t] -= astra::dot(response,
                              astra::grad(f.spec, seg.mean_params, f.train[t]));
      if (l > 0) carry = astra::matrix_exp_apply(seg.state, seg.horizon(), carry);
    }
    for (std::size_t t = 0; t < f.train.size(); ++t)
      CHECK(got.at(q, t) == doctest::Approx(want[t]).epsilon(1e-11));
  }
}

TEST_CASE("solver-backed unrolled scores track the dense damped responses") {
  Fixture f = make_fixture();
  astra::Trajectory traj = short_training_run(f, 4);
  SourcePlan plan = astra::build_source_plan(f.spec, traj, 2, f.train, 31);

  SourceConfig config;
  config.mode = SourceMode::kAstra;
  config.solver.lr = 0.3;
  config.solver.iterations = 250;
  config.solver.batch_size = 0;
  config.solver.momentum = 0.0;
  config.solver.seed = 7;
  AttributionMatrix got = astra::source_attribute(f.spec, plan, f.train, f.queries, config);
  CHECK(got.method == "source-astra");

  AttributionMatrix want;
  want.num_queries = f.queries.size();
  want.num_train = f.train.size();
  want.scores.assign(want.num_queries * want.num_train, 0.0);
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    ParamVector carry = astra::measurement_grad(f.spec, plan.final_params, f.queries[q]);
    for (std::size_t l = plan.segments.size(); l-- > 0;) {
      const astra::SourceSegment& seg = plan.segments[l];
      astra::DenseMatrix g =
          oracle::dense_ggn_by_columns(f.spec, seg.mean_params, f.train);
      for (std::size_t i = 0; i < g.rows; ++i) g(i, i) += seg.damping;
      const std::vector<double> response = oracle::solve_dense(g, carry);
      for (std::size_t t = 0; t < f.train.size(); ++t)
        want.at(q, t) -= astra::dot(response,
                                    astra::grad(f.spec, seg.mean_params, f.train[t]));
      if (l > 0) carry = astra::matrix_exp_apply(seg.state, seg.horizon(), carry);
    }
  }
  CHECK(oracle::rel_err(got.scores, want.scores) < 1e-3);

  // Worker count is a throughput knob, not a semantics knob.
  config.workers = 3;
  AttributionMatrix parallel =
      astra::source_attribute(f.spec, plan, f.train, f.queries, config);
  CHECK(parallel.scores == got.scores);
}

TEST_CASE("a single stationary segment collapses onto influence functions") {
  // Two identical checkpoints and a constant learning rate: the unrolled
  // solver-backed scores must coincide with influence functions computed at
  // the (identical) segment-mean parameters with the implied damping.
  Fixture f = make_fixture();
  astra::Trajectory frozen;
  frozen.total_steps = 40;
  frozen.step_lrs.assign(40, 0.05);
  frozen.checkpoints.push_back({0, f.params});
  frozen.checkpoints.push_back({40, f.params});
  SourcePlan plan = astra::build_source_plan(f.spec, frozen, 1, f.train, 31);
  REQUIRE(plan.segments.size() == 1);
  CHECK(plan.segments[0].damping == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(plan.segments[0].mean_params == f.params);

  SourceConfig source;
  source.mode = SourceMode::kAstra;
  source.solver.lr = 0.2;
  source.solver.iterations = 300;
  source.solver.batch_size = 0;
  source.solver.momentum = 0.0;
  AttributionMatrix unrolled =
      astra::source_attribute(f.spec, plan, f.train, f.queries, source);

  IfConfig inf;
  inf.method = AttributionMethod::kAstra;
  inf.solver = source.solver;
  inf.solver.damping = plan.segments[0].damping;
  AttributionMatrix influence = astra::if_attribute(f.spec, f.params, f.train, f.queries,
                                                    inf, &plan.segments[0].state);
  CHECK(oracle::max_abs_diff(unrolled.scores, influence.scores) < 1e-10);
}

TEST_CASE("ensembles average elementwise and chain their seed tags") {
  std::vector<AttributionMatrix> members;
  members.push_back(tagged(1.0, 10, "if-astra"));
  members.push_back(tagged(2.0, 20, "if-astra"));
  members.push_back(tagged(6.0, 30, "if-astra"));
  members[1].at(1, 2) = 5.0;

  AttributionMatrix mean = astra::ensemble(members);
  CHECK(mean.method == "if-astra");
  CHECK(mean.num_queries == 2);
  CHECK(mean.num_train == 3);
  CHECK(mean.seed == astra::mix_seed(astra::mix_seed(10ull, 20ull), 30ull));
  CHECK(mean.at(0, 0) == doctest::Approx(3.0));
  CHECK(mean.at(1, 2) == doctest::Approx(4.0));

  // A single member passes through unchanged.
  AttributionMatrix solo = astra::ensemble(std::vector<AttributionMatrix>{members[0]});
  CHECK(solo.scores == members[0].scores);
  CHECK(solo.seed == 10);

  std::vector<AttributionMatrix> mixed = {tagged(1.0, 1, "if-astra"),
                                          tagged(1.0, 2, "if-ekfac")};
  CHECK_THROWS_WITH_AS(astra::ensemble(mixed), doctest::Contains("method mismatch"),
                       astra::ConfigError);

  std::vector<AttributionMatrix> dupes = {tagged(1.0, 4, "if-astra"),
                                          tagged(2.0, 4, "if-astra")};
  CHECK_THROWS_WITH_AS(astra::ensemble(dupes), doctest::Contains("duplicate seed tag"),
                       astra::ConfigError);

  std::vector<AttributionMatrix> shapes = {tagged(1.0, 1, "if-astra"),
                                           tagged(1.0, 2, "if-astra")};
  shapes[1].num_train = 2;
  shapes[1].scores.assign(4, 1.0);
  CHECK_THROWS_AS(astra::ensemble(shapes), astra::DimensionError);

  CHECK_THROWS_AS(astra::ensemble(std::vector<AttributionMatrix>{}), astra::ConfigError);
}

TEST_CASE("score grids round-trip through the binary format") {
  oracle::TempDir dir("attr");
  Fixture f = make_fixture();
  IfConfig config;
  config.method = AttributionMethod::kIdentity;
  config.solver.seed = 55;
  AttributionMatrix matrix = astra::if_attribute(f.spec, f.params, f.train, f.queries, config);

  const std::string path = dir.file("scores.bin");
  astra::save_attribution(path, matrix);
  AttributionMatrix back = astra::load_attribution(path);
  CHECK(back.method == matrix.method);
  CHECK(back.seed == matrix.seed);
  CHECK(back.num_queries == matrix.num_queries);
  CHECK(back.num_train == matrix.num_train);
  CHECK(back.scores == matrix.scores);

  CHECK_THROWS_AS(astra::load_attribution(dir.file("nope.bin")),
                  astra::MissingArtifactError);
  oracle::write_file(dir.file("bad.bin"), "NOTATTR!");
  CHECK_THROWS_AS(astra::load_attribution(dir.file("bad.bin")), astra::ConfigError);

  // Truncation inside the payload.
  const std::string full = oracle::read_file(path);
  oracle::write_file(dir.file("cut.bin"), full.substr(0, full.size() / 2));
  CHECK_THROWS_AS(astra::load_attribution(dir.file("cut.bin")),
                  astra::MissingArtifactError);

  AttributionMatrix broken = matrix;
  broken.scores.pop_back();
  CHECK_THROWS_AS(astra::save_attribution(dir.file("broken.bin"), broken),
                  astra::DimensionError);
  CHECK_THROWS_AS(astra::save_attribution(dir.str() + "/no/scores.bin", matrix),
                  astra::ConfigError);
}

TEST_CASE("score export carries ids, tags, and full precision") {
  oracle::TempDir dir("scorescsv");
  AttributionMatrix m = tagged(0.0, 99, "if-sni");
  m.at(0, 0) = 1.0 / 3.0;
  m.at(1, 2) = -2.5e-17;
  const std::string path = dir.file("scores.csv");
  astra::save_scores_csv(path, m);

  const std::string text = oracle::read_file(path);
  CHECK(text.rfind("query_id,train_id,score,method,seed\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : text)
    if (c == '\n') ++rows;
  CHECK(rows == 1 + 6);
  CHECK(text.find(",if-sni,99\n") != std::string::npos);

  // 17 significant digits: the printed value parses back to the exact double.
  const std::size_t line_start = text.find('\n') + 1;
  const std::size_t second_comma = text.find(',', text.find(',', line_start) + 1);
  const double parsed = std::stod(text.substr(second_comma + 1));
  CHECK(parsed == 1.0 / 3.0);

  CHECK_THROWS_AS(astra::save_scores_csv(dir.str() + "/no/f.csv", m),
                  astra::ConfigError);
}

}  // TEST_SUITE("attribution")
