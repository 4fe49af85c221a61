#include "astra_cli/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "astra/attribution.hpp"
#include "astra/data.hpp"
#include "astra/ekfac.hpp"
#include "astra/error.hpp"
#include "astra/evaluation.hpp"
#include "astra/ihvp.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"
#include "astra/trainer.hpp"

namespace astra_cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed tag stream for ensemble members (member 0 keeps the base seeds).
constexpr std::uint64_t kEnsembleTag = 0x656e73ull;  // "ens"

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

struct Ctx {
  const ExperimentConfig& cfg;
  const CliOptions& opt;
  fs::path run;
  std::ostream& out;
};

// --- manifest plumbing -------------------------------------------------------

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw astra::MissingArtifactError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw astra::ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out)
    throw astra::MissingArtifactError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json base_manifest(const Ctx& ctx, const std::string& command) {
  json j;
  j["command"] = command;
  j["config_hash"] = ctx.cfg.hash_prefix;
  return j;
}

void check_same_config(const Ctx& ctx, const json& manifest, const fs::path& where) {
  const std::string recorded = manifest.value("config_hash", "");
  if (recorded != ctx.cfg.hash_prefix)
    throw astra::ConfigError(
        "artifacts under " + where.string() + " were produced from config " +
        recorded + " but the current config hashes to " + ctx.cfg.hash_prefix +
        " — point --run-dir at a fresh directory or restore the original config");
}

// True when the stage's manifest exists for this config (and, when `effective`
// is non-null, for the same effective options) — the stage is then skipped.
// A manifest from a different config or different options is refused rather
// than silently overwritten.
bool stage_current(const Ctx& ctx, const fs::path& manifest_path,
                   const std::string& stage, const json& effective = nullptr) {
  if (!fs::exists(manifest_path)) return false;
  json recorded = load_json_file(manifest_path);
  check_same_config(ctx, recorded, manifest_path.parent_path());
  if (!effective.is_null() && recorded.value("effective", json()) != effective)
    throw astra::ConfigError(
        "artifacts under " + manifest_path.parent_path().string() +
        " were produced with different options (" +
        recorded.value("effective", json()).dump() + " vs " + effective.dump() +
        ") — use a fresh --run-dir");
  ctx.out << stage << ": up to date (manifest matches config " << ctx.cfg.hash_prefix
          << "); skipping\n";
  return true;
}

json require_manifest(const Ctx& ctx, const fs::path& manifest_path,
                      const std::string& hint) {
  if (!fs::exists(manifest_path))
    throw astra::MissingArtifactError("missing " + manifest_path.string() + " — " + hint);
  json recorded = load_json_file(manifest_path);
  check_same_config(ctx, recorded, manifest_path.parent_path());
  return recorded;
}

fs::path stage_dir(const Ctx& ctx, const char* name) {
  fs::path dir = ctx.run / name;
  fs::create_directories(dir);
  return dir;
}

// --- artifact loading --------------------------------------------------------

struct LoadedData {
  astra::MlpSpec spec;
  std::vector<astra::Example> train;
  std::vector<astra::Example> queries;
};

LoadedData load_data_stage(const Ctx& ctx) {
  fs::path dir = ctx.run / "data";
  json manifest =
      require_manifest(ctx, dir / "manifest.json", "run 'gen-data' first");
  const json& details = manifest.at("details");
  const int feature_dim = details.at("feature_dim").get<int>();
  const int num_classes = details.at("num_classes").get<int>();
  const bool classification = details.at("task").get<std::string>() == "classification";

  LoadedData data;
  data.spec.task = classification ? astra::TaskKind::kClassification
                                  : astra::TaskKind::kRegression;
  data.spec.layer_dims.push_back(feature_dim);
  for (int h : ctx.cfg.model.hidden) data.spec.layer_dims.push_back(h);
  data.spec.layer_dims.push_back(classification ? num_classes : 1);
  astra::validate_spec(data.spec);

  data.train = astra::load_examples_csv((dir / "train.csv").string(), feature_dim);
  data.queries = astra::load_examples_csv((dir / "queries.csv").string(), feature_dim);
  if (data.train.empty() || data.queries.empty())
    throw astra::MissingArtifactError("empty dataset artifacts under " + dir.string());
  return data;
}

astra::Trajectory load_train_stage(const Ctx& ctx, const astra::MlpSpec& spec) {
  require_manifest(ctx, ctx.run / "train" / "manifest.json", "run 'train' first");
  return astra::load_trajectory((ctx.run / "train").string(), spec);
}

astra::EkfacState load_ekfac_stage(const Ctx& ctx, const astra::MlpSpec& spec) {
  require_manifest(ctx, ctx.run / "ekfac" / "manifest.json", "run 'ekfac' first");
  astra::EkfacState state =
      astra::load_ekfac_state((ctx.run / "ekfac" / "state.bin").string());
  astra::check_state_layout(state, spec);
  return state;
}

struct TruthArtifacts {
  astra::MaskSet masks;
  astra::GroundTruth ground_truth;
};

TruthArtifacts load_truth_stage(const Ctx& ctx) {
  fs::path dir = ctx.run / "truth";
  require_manifest(ctx, dir / "manifest.json", "run 'retrain-grid' first");
  TruthArtifacts t;
  t.masks = astra::load_masks_csv((dir / "masks.csv").string());
  t.ground_truth = astra::load_ground_truth_csv((dir / "ground_truth.csv").string());
  return t;
}

// --- derived solver settings -------------------------------------------------

// Iteration-weighted mean of the per-segment implied dampings
// 1 / (mean_lr * steps); the recommended damping when influence scores should
// be comparable to unrolled-trajectory scores.
double implied_damping_from(const astra::Trajectory& trajectory, int segments) {
  double weighted = 0.0;
  double total_steps = 0.0;
  for (const astra::Segment& seg : astra::segment_trajectory(trajectory, segments)) {
    if (!(seg.mean_lr > 0.0))
      throw astra::ConfigError(
          "cannot derive a damping default: trajectory segment " +
          std::to_string(seg.index) +
          " has a non-positive mean learning rate; set [solver] damping explicitly");
    weighted += static_cast<double>(seg.steps) /
                (seg.mean_lr * static_cast<double>(seg.steps));
    total_steps += static_cast<double>(seg.steps);
  }
  return weighted / total_steps;
}

// Applies --seed and fills the derived defaults: damping from the trajectory
// segments when not set, learning rate as 0.1 * damping when not set.
astra::SolverConfig resolve_solver(const Ctx& ctx, const astra::Trajectory* trajectory) {
  astra::SolverConfig solver = ctx.cfg.solver.config;
  if (ctx.opt.seed) solver.seed = *ctx.opt.seed;
  if (!(solver.damping > 0.0)) {
    if (trajectory == nullptr)
      throw astra::ConfigError(
          "[solver] damping must be positive (no trained trajectory available to "
          "derive it from)");
    solver.damping = implied_damping_from(*trajectory, ctx.cfg.source.segments);
    ctx.out << "  derived [solver] damping " << fmt(solver.damping) << " from "
            << ctx.cfg.source.segments << " trajectory segments\n";
  }
  if (!(solver.lr > 0.0)) solver.lr = 0.1 * solver.damping;
  return solver;
}

std::uint64_t member_seed(std::uint64_t base, int member) {
  return member == 0 ? base
                     : astra::mix_seed(base, static_cast<std::uint64_t>(member),
                                       kEnsembleTag);
}

astra::TrainConfig member_train_config(const astra::TrainConfig& base, int member) {
  astra::TrainConfig config = base;
  config.init_seed = member_seed(base.init_seed, member);
  config.batch_seed = member_seed(base.batch_seed, member);
  return config;
}

// --- commands ----------------------------------------------------------------

void cmd_gen_data(const Ctx& ctx) {
  fs::path dir = stage_dir(ctx, "data");
  if (stage_current(ctx, dir / "manifest.json", "gen-data")) return;

  const DataSection& d = ctx.cfg.data;
  astra::Dataset dataset;
  if (d.kind == "synth-regression") {
    dataset = astra::synth_regression(d.n, d.d, d.noise_std, d.seed);
  } else if (d.kind == "synth-classification") {
    dataset = astra::synth_classification(d.n, d.d, d.classes, d.margin, d.seed,
                                          d.label_noise);
  } else {
    dataset = astra::load_csv(d.path, d.target_column, ctx.cfg.task_kind());
  }
  if (dataset.size() <= d.n_query)
    throw astra::ConfigError("[data] n_query = " + std::to_string(d.n_query) +
                             " leaves no training examples from a dataset of " +
                             std::to_string(dataset.size()));

  astra::SplitResult parts = astra::split(dataset, d.n_query, d.split_seed);
  astra::save_examples_csv((dir / "train.csv").string(), parts.train.examples,
                           dataset.feature_dim);
  astra::save_examples_csv((dir / "queries.csv").string(), parts.queries,
                           dataset.feature_dim);

  const bool classification = dataset.task == astra::TaskKind::kClassification;
  json manifest = base_manifest(ctx, "gen-data");
  manifest["details"] = {
      {"kind", d.kind},
      {"feature_dim", dataset.feature_dim},
      {"task", classification ? "classification" : "regression"},
      {"num_classes", dataset.num_classes},
      {"n_train", parts.train.size()},
      {"n_query", d.n_query},
      {"seed", d.seed},
      {"split_seed", d.split_seed},
  };
  manifest["dataset"] =
      json::parse(astra::dataset_manifest_json(dataset, d.kind, d.seed, d.path));
  manifest["outputs"] = {"train.csv", "queries.csv"};
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "gen-data: " << parts.train.size() << " train / " << parts.queries.size()
          << " query examples (" << dataset.feature_dim << " features, "
          << (classification ? "classification" : "regression") << ") in "
          << dir.string() << "\n";
}

void cmd_train(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  fs::path dir = stage_dir(ctx, "train");
  if (stage_current(ctx, dir / "manifest.json", "train")) return;

  astra::Trajectory trajectory =
      astra::train(data.spec, data.train, ctx.cfg.train.config);
  std::vector<std::string> files =
      astra::save_trajectory(dir.string(), data.spec, trajectory);
  const double final_loss =
      astra::mean_loss(data.spec, trajectory.final_params(), data.train);

  json manifest = base_manifest(ctx, "train");
  manifest["details"] = {
      {"total_steps", trajectory.total_steps},
      {"checkpoints", files.size()},
      {"init_seed", ctx.cfg.train.config.init_seed},
      {"batch_seed", ctx.cfg.train.config.batch_seed},
      {"final_train_loss", final_loss},
  };
  files.push_back("steps.csv");
  manifest["outputs"] = files;
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "train: " << trajectory.total_steps << " steps, "
          << trajectory.checkpoints.size()
          << " checkpoints, final mean training loss " << fmt(final_loss) << "\n";
}

void cmd_retrain_grid(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  fs::path dir = stage_dir(ctx, "truth");
  if (stage_current(ctx, dir / "manifest.json", "retrain-grid")) return;

  const EvalSection& e = ctx.cfg.eval;
  astra::MaskSet masks =
      astra::generate_masks(data.train.size(), e.beta, e.masks, e.mask_seed);
  astra::save_masks_csv((dir / "masks.csv").string(), masks);

  astra::GroundTruthOptions options;
  options.repeats = e.repeats;
  options.base_seed = e.truth_seed;
  options.workers = ctx.opt.workers;
  options.journal_path = (dir / "journal.csv").string();
  astra::GroundTruth truth = astra::compute_ground_truth(
      data.spec, data.train, ctx.cfg.train.config, masks, data.queries, options);
  astra::save_ground_truth_csv((dir / "ground_truth.csv").string(), truth);

  json manifest = base_manifest(ctx, "retrain-grid");
  manifest["details"] = {
      {"masks", e.masks},
      {"beta", e.beta},
      {"cardinality", masks.cardinality},
      {"repeats", e.repeats},
      {"mask_seed", e.mask_seed},
      {"truth_seed", e.truth_seed},
      {"duplicate_mask_pairs", masks.duplicate_pairs},
      {"failed_cells", truth.failed_cells.size()},
  };
  manifest["outputs"] = {"masks.csv", "journal.csv", "ground_truth.csv"};
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "retrain-grid: " << e.masks << " masks x " << e.repeats
          << " repeats over " << data.queries.size() << " queries ("
          << truth.failed_cells.size() << " diverged cells)\n";
}

void cmd_ekfac(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
  fs::path dir = stage_dir(ctx, "ekfac");
  const std::uint64_t seed =
      ctx.opt.seed ? *ctx.opt.seed : ctx.cfg.solver.config.seed;
  json effective = {{"seed", seed}};
  if (stage_current(ctx, dir / "manifest.json", "ekfac", effective)) return;

  astra::EkfacState state = astra::build_attribution_state(
      data.spec, trajectory.final_params(), data.train, seed);
  astra::save_ekfac_state((dir / "state.bin").string(), state);

  json manifest = base_manifest(ctx, "ekfac");
  manifest["effective"] = effective;
  manifest["details"] = {{"layers", state.layers.size()},
                         {"total_dim", state.total_dim()}};
  manifest["outputs"] = {"state.bin"};
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "ekfac: factorized " << state.total_dim() << " parameters across "
          << state.layers.size() << " layers\n";
}

void cmd_ihvp_solve(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
  const std::string method =
      ctx.opt.method.empty() ? ctx.cfg.solver.method : ctx.opt.method;
  if (method != "exact" && method != "ekfac" && method != "sni" && method != "astra")
    throw astra::ConfigError("ihvp-solve supports methods exact, ekfac, sni, astra; got '" +
                             method + "'");

  astra::SolverConfig solver = resolve_solver(ctx, &trajectory);
  const int q = ctx.cfg.solver.query_index;
  if (q < 0 || q >= static_cast<int>(data.queries.size()))
    throw astra::ConfigError("[solver] query_index " + std::to_string(q) +
                             " out of range for " +
                             std::to_string(data.queries.size()) + " queries");

  fs::path dir = stage_dir(ctx, "ihvp");
  const std::string stem = "solution_" + method + "_q" + std::to_string(q);
  fs::path manifest_path = dir / ("manifest_" + method + "_q" + std::to_string(q) + ".json");
  json effective = {{"method", method},     {"seed", solver.seed},
                    {"query", q},           {"damping", solver.damping},
                    {"lr", solver.lr},      {"iterations", solver.iterations}};
  if (stage_current(ctx, manifest_path, "ihvp-solve", effective)) return;

  const astra::ParamVector& params = trajectory.final_params();
  astra::ParamVector v = astra::measurement_grad(data.spec, params, data.queries[q]);

  astra::ParamVector x;
  bool has_trace = false;
  astra::SolveTrace trace;
  astra::SolverConfig per_query = solver;
  per_query.seed = astra::mix_seed(solver.seed, static_cast<std::uint64_t>(q));
  if (method == "exact") {
    x = astra::exact_ihvp(data.spec, params, data.train, solver.damping, v);
  } else if (method == "ekfac") {
    astra::EkfacState state = load_ekfac_stage(ctx, data.spec);
    x = astra::precondition(state, solver.damping, v);
  } else if (method == "sni") {
    astra::SolveResult result = astra::sni_solve(data.spec, params, data.train, v, per_query);
    x = std::move(result.x);
    trace = std::move(result.trace);
    has_trace = true;
  } else {
    astra::EkfacState state = load_ekfac_stage(ctx, data.spec);
    astra::SolveResult result =
        astra::astra_solve(data.spec, params, data.train, state, v, per_query);
    x = std::move(result.x);
    trace = std::move(result.trace);
    has_trace = true;
  }
  const double objective =
      astra::quadratic_objective(data.spec, params, data.train, solver.damping, v, x);

  astra::Checkpoint solution;
  solution.step = static_cast<std::uint64_t>(solver.iterations);
  solution.params = x;
  astra::save_checkpoint((dir / (stem + ".bin")).string(), data.spec, solution);
  json outputs = {stem + ".bin"};
  if (has_trace) {
    const std::string trace_name = "trace_" + method + "_q" + std::to_string(q) + ".csv";
    astra::save_trace_csv((dir / trace_name).string(), trace);
    outputs.push_back(trace_name);
  }

  json manifest = base_manifest(ctx, "ihvp-solve");
  manifest["effective"] = effective;
  manifest["details"] = {{"objective", objective}};
  manifest["outputs"] = outputs;
  write_json_file(manifest_path, manifest);
  ctx.out << "ihvp-solve[" << method << "]: query " << q << ", damping "
          << fmt(solver.damping) << ", quadratic objective " << fmt(objective) << "\n";
}

// Loads the precomputed curvature state when the ekfac stage exists and was
// built with the expected seed; otherwise the attribution call builds its own.
std::optional<astra::EkfacState> try_load_matching_state(const Ctx& ctx,
                                                         const astra::MlpSpec& spec,
                                                         std::uint64_t seed) {
  fs::path manifest_path = ctx.run / "ekfac" / "manifest.json";
  if (!fs::exists(manifest_path)) return std::nullopt;
  json manifest = load_json_file(manifest_path);
  if (manifest.value("config_hash", "") != ctx.cfg.hash_prefix) return std::nullopt;
  if (manifest.value("effective", json()).value("seed", std::uint64_t{0}) != seed)
    return std::nullopt;
  astra::EkfacState state =
      astra::load_ekfac_state((ctx.run / "ekfac" / "state.bin").string());
  astra::check_state_layout(state, spec);
  return state;
}

void cmd_attribute(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
  const std::string name =
      ctx.opt.method.empty() ? ctx.cfg.solver.method : ctx.opt.method;
  const astra::AttributionMethod method = astra::parse_attribution_method(name);
  const std::string tag = astra::if_method_tag(method);
  astra::SolverConfig solver = resolve_solver(ctx, &trajectory);
  const int members = ctx.opt.ensemble;

  fs::path dir = stage_dir(ctx, "scores");
  fs::path manifest_path = dir / ("manifest_" + tag + ".json");
  json effective = {{"method", tag},
                    {"seed", solver.seed},
                    {"damping", solver.damping},
                    {"lr", solver.lr},
                    {"iterations", solver.iterations}};

  int done = 0;
  if (fs::exists(manifest_path)) {
    json recorded = load_json_file(manifest_path);
    check_same_config(ctx, recorded, dir);
    if (recorded.value("effective", json()) != effective)
      throw astra::ConfigError("scores under " + dir.string() +
                               " were produced with different solver options — use a "
                               "fresh --run-dir");
    done = recorded.value("members", 0);
    if (done >= members) {
      ctx.out << "attribute[" << tag << "]: up to date (" << done
              << " members); skipping\n";
      return;
    }
    ctx.out << "attribute[" << tag << "]: extending ensemble from " << done << " to "
            << members << " members\n";
  }

  const bool needs_state = method == astra::AttributionMethod::kEkfac ||
                           method == astra::AttributionMethod::kAstra;
  json outputs = json::array();
  for (int k = 0; k < done; ++k) {
    outputs.push_back(tag + ".member" + std::to_string(k) + ".bin");
    outputs.push_back(tag + ".member" + std::to_string(k) + ".csv");
  }
  for (int k = done; k < members; ++k) {
    astra::Trajectory member_traj =
        k == 0 ? trajectory
               : astra::train(data.spec, data.train,
                              member_train_config(ctx.cfg.train.config, k));
    astra::IfConfig icfg;
    icfg.method = method;
    icfg.solver = solver;
    icfg.solver.seed = member_seed(solver.seed, k);
    icfg.workers = ctx.opt.workers;

    std::optional<astra::EkfacState> state;
    if (k == 0 && needs_state)
      state = try_load_matching_state(ctx, data.spec, icfg.solver.seed);
    astra::AttributionMatrix matrix =
        astra::if_attribute(data.spec, member_traj.final_params(), data.train,
                            data.queries, icfg, state ? &*state : nullptr);

    const std::string stem = tag + ".member" + std::to_string(k);
    astra::save_attribution((dir / (stem + ".bin")).string(), matrix);
    astra::save_scores_csv((dir / (stem + ".csv")).string(), matrix);
    outputs.push_back(stem + ".bin");
    outputs.push_back(stem + ".csv");
    ctx.out << "attribute[" << tag << "]: member " << k << " scored "
            << matrix.num_queries << " x " << matrix.num_train << " grid (seed "
            << icfg.solver.seed << ")\n";
  }

  json manifest = base_manifest(ctx, "attribute");
  manifest["effective"] = effective;
  manifest["members"] = members;
  manifest["outputs"] = outputs;
  write_json_file(manifest_path, manifest);
}

void cmd_source_attribute(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
  const std::string name =
      ctx.opt.method.empty() ? ctx.cfg.source.mode : ctx.opt.method;
  const astra::SourceMode mode = astra::parse_source_mode(name);
  const std::string tag = astra::source_mode_tag(mode);

  astra::SolverConfig solver = ctx.cfg.solver.config;  // per-segment damping/lr
  if (ctx.opt.seed) solver.seed = *ctx.opt.seed;
  const int members = ctx.opt.ensemble;
  const int segments = ctx.cfg.source.segments;

  fs::path dir = stage_dir(ctx, "scores");
  fs::path manifest_path = dir / ("manifest_" + tag + ".json");
  json effective = {{"mode", tag},
                    {"seed", solver.seed},
                    {"stats_seed", ctx.cfg.source.stats_seed},
                    {"segments", segments},
                    {"iterations", solver.iterations}};

  int done = 0;
  if (fs::exists(manifest_path)) {
    json recorded = load_json_file(manifest_path);
    check_same_config(ctx, recorded, dir);
    if (recorded.value("effective", json()) != effective)
      throw astra::ConfigError("scores under " + dir.string() +
                               " were produced with different options — use a fresh "
                               "--run-dir");
    done = recorded.value("members", 0);
    if (done >= members) {
      ctx.out << "source-attribute[" << tag << "]: up to date (" << done
              << " members); skipping\n";
      return;
    }
    ctx.out << "source-attribute[" << tag << "]: extending ensemble from " << done
            << " to " << members << " members\n";
  }

  json outputs = json::array();
  for (int k = 0; k < done; ++k) {
    outputs.push_back(tag + ".member" + std::to_string(k) + ".bin");
    outputs.push_back(tag + ".member" + std::to_string(k) + ".csv");
  }
  double reference_damping = 0.0;
  for (int k = done; k < members; ++k) {
    astra::Trajectory member_traj =
        k == 0 ? trajectory
               : astra::train(data.spec, data.train,
                              member_train_config(ctx.cfg.train.config, k));
    astra::SourcePlan plan = astra::build_source_plan(
        data.spec, member_traj, segments, data.train,
        member_seed(ctx.cfg.source.stats_seed, k));
    if (k == 0) reference_damping = astra::implied_if_damping(plan);

    astra::SourceConfig scfg;
    scfg.mode = mode;
    scfg.solver = solver;
    scfg.solver.seed = member_seed(solver.seed, k);
    scfg.workers = 1;
    astra::AttributionMatrix matrix =
        astra::source_attribute(data.spec, plan, data.train, data.queries, scfg);

    const std::string stem = tag + ".member" + std::to_string(k);
    astra::save_attribution((dir / (stem + ".bin")).string(), matrix);
    astra::save_scores_csv((dir / (stem + ".csv")).string(), matrix);
    outputs.push_back(stem + ".bin");
    outputs.push_back(stem + ".csv");
    ctx.out << "source-attribute[" << tag << "]: member " << k << " scored "
            << matrix.num_queries << " x " << matrix.num_train << " grid over "
            << segments << " segments\n";
  }

  json manifest = base_manifest(ctx, "source-attribute");
  manifest["effective"] = effective;
  manifest["members"] = members;
  if (reference_damping > 0.0)
    manifest["details"] = {{"implied_if_damping", reference_damping}};
  manifest["outputs"] = outputs;
  write_json_file(manifest_path, manifest);
}

// Accepts a bare backend name ("astra"), a full score tag ("if-astra",
// "source-ekfac"), or "source" (the configured unrolled mode).
std::string resolve_score_tag(const Ctx& ctx) {
  std::string name = ctx.opt.method;
  if (name.empty()) {
    if (ctx.cfg.solver.method == "exact")
      throw astra::ConfigError(
          "lds needs a score method; [solver] method = exact does not produce "
          "score grids (pass --method)");
    return "if-" + ctx.cfg.solver.method;
  }
  if (name == "source") return astra::source_mode_tag(astra::parse_source_mode(ctx.cfg.source.mode));
  if (name.rfind("if-", 0) == 0)
    return astra::if_method_tag(astra::parse_attribution_method(name.substr(3)));
  if (name.rfind("source-", 0) == 0)
    return astra::source_mode_tag(astra::parse_source_mode(name.substr(7)));
  return astra::if_method_tag(astra::parse_attribution_method(name));
}

void cmd_lds(const Ctx& ctx) {
  TruthArtifacts truth = load_truth_stage(ctx);
  const std::string tag = resolve_score_tag(ctx);
  const int members = ctx.opt.ensemble;
  const EvalSection& e = ctx.cfg.eval;

  fs::path dir = stage_dir(ctx, "lds");
  const std::string stem = "lds_" + tag + "_e" + std::to_string(members);
  fs::path manifest_path = dir / ("manifest_" + stem + ".json");
  json effective = {{"method", tag},
                    {"ensemble", members},
                    {"null_trials", e.null_trials},
                    {"null_seed", e.null_seed}};
  if (stage_current(ctx, manifest_path, "lds", effective)) return;

  std::vector<astra::AttributionMatrix> grids;
  grids.reserve(static_cast<std::size_t>(members));
  for (int k = 0; k < members; ++k) {
    fs::path path = ctx.run / "scores" / (tag + ".member" + std::to_string(k) + ".bin");
    if (!fs::exists(path))
      throw astra::MissingArtifactError(
          "missing " + path.string() + " — run " +
          (tag.rfind("source-", 0) == 0 ? "'source-attribute'" : "'attribute'") +
          " with --ensemble at least " + std::to_string(members) + " first");
    grids.push_back(astra::load_attribution(path.string()));
  }
  astra::AttributionMatrix scores =
      members == 1 ? std::move(grids.front()) : astra::ensemble(grids);

  astra::LdsReport report = astra::lds(scores, truth.masks, truth.ground_truth);
  report.ensemble_size = members;
  astra::NullLdsBound null_bound = astra::simulate_null_lds(
      truth.masks, truth.ground_truth, scores.num_train, e.null_trials, e.null_seed);
  astra::save_lds_report_json((dir / (stem + ".json")).string(), report);

  json manifest = base_manifest(ctx, "lds");
  manifest["effective"] = effective;
  manifest["details"] = {
      {"mean", report.mean},
      {"standard_error", report.standard_error},
      {"excluded_queries", report.excluded_queries.size()},
      {"null_mean", null_bound.mean},
      {"null_stddev", null_bound.stddev},
      {"null_three_sigma", null_bound.mean + 3.0 * null_bound.stddev},
  };
  manifest["outputs"] = {stem + ".json"};
  write_json_file(manifest_path, manifest);
  ctx.out << "lds[" << tag << ", ensemble " << members << "]: mean "
          << fmt(report.mean) << " +/- " << fmt(report.standard_error) << " over "
          << (report.per_query.size() - report.excluded_queries.size())
          << " queries (" << report.excluded_queries.size()
          << " excluded); null 3-sigma bound "
          << fmt(null_bound.mean + 3.0 * null_bound.stddev) << "\n";
}

// Ground truth restricted to the first `count` queries (expected, stddev and
// per-repeat samples keep their mask/repeat blocks, queries truncated).
astra::GroundTruth restrict_queries(const astra::GroundTruth& full, std::size_t count) {
  astra::GroundTruth out;
  out.num_masks = full.num_masks;
  out.num_queries = count;
  out.repeats = full.repeats;
  out.failed_cells = full.failed_cells;
  out.expected.reserve(full.num_masks * count);
  out.stddev.reserve(full.num_masks * count);
  for (std::size_t mask = 0; mask < full.num_masks; ++mask)
    for (std::size_t q = 0; q < count; ++q) {
      out.expected.push_back(full.expected[mask * full.num_queries + q]);
      out.stddev.push_back(full.stddev[mask * full.num_queries + q]);
    }
  out.samples.reserve(full.num_masks * static_cast<std::size_t>(full.repeats) * count);
  for (std::size_t mask = 0; mask < full.num_masks; ++mask)
    for (int rep = 0; rep < full.repeats; ++rep)
      for (std::size_t q = 0; q < count; ++q)
        out.samples.push_back(full.sample_at(mask, rep, q));
  return out;
}

void cmd_curvature_scan(const Ctx& ctx) {
  LoadedData data = load_data_stage(ctx);
  astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
  astra::EkfacState state = load_ekfac_stage(ctx, data.spec);
  TruthArtifacts truth = load_truth_stage(ctx);

  fs::path dir = stage_dir(ctx, "scan");
  if (stage_current(ctx, dir / "manifest.json", "curvature-scan")) return;

  const EvalSection& e = ctx.cfg.eval;
  const std::size_t num_queries =
      std::min<std::size_t>(static_cast<std::size_t>(e.scan_queries),
                            data.queries.size());
  std::vector<astra::Example> queries(data.queries.begin(),
                                      data.queries.begin() +
                                          static_cast<std::ptrdiff_t>(num_queries));
  astra::GroundTruth truth_subset =
      restrict_queries(truth.ground_truth, num_queries);

  astra::CurvatureScanConfig scan_config;
  astra::SolverConfig base = ctx.cfg.solver.config;
  if (ctx.opt.seed) base.seed = *ctx.opt.seed;
  base.damping = e.scan_damping;
  base.iterations = e.scan_iterations;
  base.snapshot_stride = e.scan_stride;
  base.repeats = 1;
  scan_config.sni = base;
  scan_config.sni.lr = e.scan_sni_lr;
  scan_config.astra = base;
  scan_config.astra.lr = e.scan_astra_lr;
  scan_config.thresholds = e.bins;
  scan_config.workers = 1;

  astra::CurvatureScan scan =
      astra::curvature_scan(data.spec, trajectory.final_params(), data.train, state,
                            queries, truth.masks, truth_subset, scan_config);
  astra::save_curvature_scan_csv((dir / "scan.csv").string(), scan);

  json manifest = base_manifest(ctx, "curvature-scan");
  manifest["details"] = {
      {"queries", num_queries},
      {"damping", e.scan_damping},
      {"iterations", e.scan_iterations},
      {"snapshot_stride", e.scan_stride},
      {"thresholds", e.bins},
      {"sni_lr", e.scan_sni_lr},
      {"astra_lr", e.scan_astra_lr},
      {"points", scan.points.size()},
  };
  manifest["outputs"] = {"scan.csv"};
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "curvature-scan: " << scan.points.size() << " (iteration, threshold) points over "
          << num_queries << " queries\n";
}

void cmd_neumann_damping(const Ctx& ctx) {
  astra::SolverConfig solver = ctx.cfg.solver.config;
  if (ctx.opt.seed) solver.seed = *ctx.opt.seed;
  if (!(solver.damping > 0.0) || !(solver.lr > 0.0)) {
    LoadedData data = load_data_stage(ctx);
    astra::Trajectory trajectory = load_train_stage(ctx, data.spec);
    solver = resolve_solver(ctx, &trajectory);
  }

  fs::path dir = stage_dir(ctx, "neumann");
  json effective = {{"lr", solver.lr},
                    {"damping", solver.damping},
                    {"iterations", solver.iterations}};
  if (stage_current(ctx, dir / "manifest.json", "neumann-damping", effective)) return;

  const double lambda_hat =
      astra::effective_damping(solver.lr, solver.damping, solver.iterations);

  std::ofstream band(dir / "band.csv");
  if (!band)
    throw astra::MissingArtifactError("cannot write " + (dir / "band.csv").string());
  band << "sigma,truncated_series,effective_inverse,damped_inverse\n";
  band << std::setprecision(17);
  for (int i = 0; i <= 50; ++i) {
    const double exponent = -4.0 + 5.0 * static_cast<double>(i) / 50.0;
    const double sigma = std::pow(10.0, exponent);
    auto apply_g = [sigma](std::span<const double> v) {
      return std::vector<double>{sigma * v[0]};
    };
    const std::vector<double> one{1.0};
    const double truncated = astra::truncated_neumann_apply(
        apply_g, solver.lr, solver.damping, solver.iterations, one)[0];
    band << sigma << "," << truncated << "," << 1.0 / (sigma + lambda_hat) << ","
         << 1.0 / (sigma + solver.damping) << "\n";
  }
  band.close();

  json manifest = base_manifest(ctx, "neumann-damping");
  manifest["effective"] = effective;
  manifest["details"] = {{"effective_damping", lambda_hat}};
  manifest["outputs"] = {"band.csv"};
  write_json_file(dir / "manifest.json", manifest);
  ctx.out << "neumann-damping: alpha " << fmt(solver.lr) << ", J "
          << solver.iterations << ", lambda " << fmt(solver.damping)
          << " -> effective damping " << fmt(lambda_hat) << " (band.csv)\n";
}

}  // namespace

std::filesystem::path resolve_run_dir(const ExperimentConfig& config,
                                      const CliOptions& options) {
  if (!options.run_dir.empty()) return fs::path(options.run_dir);
  const char* root_env = std::getenv("ASTRA_TDA_RUN_ROOT");
  fs::path root = root_env != nullptr && *root_env != '\0' ? fs::path(root_env)
                                                           : fs::path("runs");
  return root / config.hash_prefix;
}

int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err) {
  CLI::App app{"iHVP and training-data attribution workbench"};
  app.require_subcommand(1);

  CliOptions opt;
  std::uint64_t seed_value = 0;

  struct CommandSpec {
    const char* name;
    const char* help;
    bool workers;
    bool method;
    bool seed;
    bool ensemble;
  };
  const CommandSpec specs[] = {
      {"gen-data", "generate (or import) the dataset and query split", false, false,
       false, false},
      {"train", "train the base model and store its checkpoint trajectory", false,
       false, false, false},
      {"retrain-grid", "retraining ground truth over sampled masks", true, false,
       false, false},
      {"ekfac", "factorize curvature at the final checkpoint", false, false, true,
       false},
      {"ihvp-solve", "solve one damped inverse-curvature system", false, true, true,
       false},
      {"attribute", "influence-function score grids", true, true, true, true},
      {"source-attribute", "unrolled-trajectory score grids", false, true, true,
       true},
      {"lds", "linear datamodeling score of stored score grids", false, true, false,
       true},
      {"curvature-scan", "solver iterates projected onto curvature bins", false,
       false, true, false},
      {"neumann-damping", "effective damping of the truncated solver", false, false,
       false, false},
  };

  std::string selected;
  for (const CommandSpec& spec : specs) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    sub->add_option("--config", opt.config_path, "experiment config file (INI sections)")
        ->required();
    sub->add_option("--run-dir", opt.run_dir,
                    "run directory (default: content-addressed under "
                    "$ASTRA_TDA_RUN_ROOT or ./runs)");
    if (spec.workers)
      sub->add_option("--workers", opt.workers, "worker thread bound")
          ->check(CLI::PositiveNumber);
    if (spec.method)
      sub->add_option("--method", opt.method, "method/mode override");
    if (spec.seed)
      sub->add_option("--seed", seed_value, "solver seed override")
          ->check(CLI::NonNegativeNumber);
    if (spec.ensemble)
      sub->add_option("--ensemble", opt.ensemble, "ensemble member count")
          ->check(CLI::Range(1, 256));
    sub->callback([&selected, name = std::string(spec.name)] { selected = name; });
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommand(selected);
    const CLI::Option* seed_option = sub->get_option_no_throw("--seed");
    if (seed_option != nullptr && seed_option->count() > 0) opt.seed = seed_value;

    ExperimentConfig cfg = load_experiment_config(opt.config_path);
    fs::path run = resolve_run_dir(cfg, opt);
    fs::create_directories(run);
    Ctx ctx{cfg, opt, run, out};

    if (selected == "gen-data") cmd_gen_data(ctx);
    else if (selected == "train") cmd_train(ctx);
    else if (selected == "retrain-grid") cmd_retrain_grid(ctx);
    else if (selected == "ekfac") cmd_ekfac(ctx);
    else if (selected == "ihvp-solve") cmd_ihvp_solve(ctx);
    else if (selected == "attribute") cmd_attribute(ctx);
    else if (selected == "source-attribute") cmd_source_attribute(ctx);
    else if (selected == "lds") cmd_lds(ctx);
    else if (selected == "curvature-scan") cmd_curvature_scan(ctx);
    else if (selected == "neumann-damping") cmd_neumann_damping(ctx);
    return kExitOk;
  } catch (const astra::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const astra::DimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const astra::MissingArtifactError& e) {
    err << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const astra::DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace astra_cli
