#include "astra/attribution.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include "astra/error.hpp"
#include "astra/linalg.hpp"
#include "astra/parallel.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats assume a little-endian host");

namespace astra {

namespace {

// Seed-stream tags separating the statistics and eigenvalue-correction passes
// of internally built curvature states.
constexpr std::uint64_t kStatsTag = 0x656b666163ull;       // "ekfac"
constexpr std::uint64_t kCorrectionTag = 0x636f7272ull;    // "corr"

void check_layer_mask(const std::vector<std::uint8_t>& mask, const MlpSpec& spec) {
  if (mask.empty()) return;
  if (mask.size() != static_cast<std::size_t>(spec.num_layers()))
    throw ConfigError("layer mask: " + std::to_string(mask.size()) +
                      " flags for a network with " + std::to_string(spec.num_layers()) +
                      " layers");
  bool any = false;
  for (std::uint8_t flag : mask) any = any || flag != 0;
  if (!any) throw ConfigError("layer mask: every layer is masked out");
}

void apply_layer_mask(const std::vector<std::uint8_t>& mask, const ParamLayout& layout,
                      ParamVector& v) {
  if (mask.empty()) return;
  for (std::size_t l = 0; l < layout.layers.size(); ++l) {
    if (mask[l]) continue;
    const LayerShape& shape = layout.layers[l];
    std::fill(v.begin() + static_cast<std::ptrdiff_t>(shape.offset),
              v.begin() + static_cast<std::ptrdiff_t>(shape.offset + shape.size()), 0.0);
  }
}

// Loss gradients of every training example at `params`, rows of an N x D grid.
std::vector<double> train_gradients(const MlpSpec& spec, const ParamVector& params,
                                    std::span<const Example> train, std::size_t dim,
                                    int workers) {
  std::vector<double> grads(train.size() * dim);
  parallel_for(train.size(), workers, [&](std::size_t m) {
    const ParamVector g = grad(spec, params, train[m]);
    std::copy(g.begin(), g.end(), grads.begin() + static_cast<std::ptrdiff_t>(m * dim));
  });
  return grads;
}

void check_all_finite(const AttributionMatrix& matrix) {
  for (std::size_t q = 0; q < matrix.num_queries; ++q)
    for (std::size_t m = 0; m < matrix.num_train; ++m)
      if (!std::isfinite(matrix.at(q, m)))
        throw NumericError("attribution: non-finite score at query " + std::to_string(q) +
                           ", train example " + std::to_string(m));
}

}  // namespace

EkfacState build_attribution_state(const MlpSpec& spec, const ParamVector& params,
                                   std::span<const Example> train, std::uint64_t seed) {
  Rng stats_rng(mix_seed(seed, kStatsTag));
  EkfacState state = build_state(collect_stats(spec, params, train, stats_rng));
  Rng correction_rng(mix_seed(seed, kCorrectionTag));
  correct_eigenvalues(state, spec, params, train, correction_rng);
  return state;
}

double AttributionMatrix::at(std::size_t q, std::size_t m) const {
  return scores[q * num_train + m];
}

double& AttributionMatrix::at(std::size_t q, std::size_t m) {
  return scores[q * num_train + m];
}

std::string if_method_tag(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::kIdentity: return "if-identity";
    case AttributionMethod::kEkfac: return "if-ekfac";
    case AttributionMethod::kSni: return "if-sni";
    case AttributionMethod::kAstra: return "if-astra";
  }
  throw ConfigError("if_method_tag: unknown method");
}

AttributionMethod parse_attribution_method(const std::string& name) {
  if (name == "identity") return AttributionMethod::kIdentity;
  if (name == "ekfac") return AttributionMethod::kEkfac;
  if (name == "sni") return AttributionMethod::kSni;
  if (name == "astra") return AttributionMethod::kAstra;
  throw ConfigError("unknown attribution method '" + name +
                    "' (expected identity, ekfac, sni, or astra)");
}

std::string source_mode_tag(SourceMode mode) {
  switch (mode) {
    case SourceMode::kEkfac: return "source-ekfac";
    case SourceMode::kAstra: return "source-astra";
  }
  throw ConfigError("source_mode_tag: unknown mode");
}

SourceMode parse_source_mode(const std::string& name) {
  if (name == "ekfac") return SourceMode::kEkfac;
  if (name == "astra") return SourceMode::kAstra;
  throw ConfigError("unknown unrolled-attribution mode '" + name +
                    "' (expected ekfac or astra)");
}

AttributionMatrix if_attribute(const MlpSpec& spec, const ParamVector& params,
                               std::span<const Example> train,
                               std::span<const Example> queries, const IfConfig& config,
                               const EkfacState* state) {
  validate_spec(spec);
  if (train.empty()) throw DimensionError("if_attribute: empty training set");
  if (queries.empty()) throw DimensionError("if_attribute: empty query set");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (params.size() != layout.total)
    throw DimensionError("if_attribute: parameter vector length " +
                         std::to_string(params.size()) + " != " +
                         std::to_string(layout.total));
  check_layer_mask(config.layer_mask, spec);

  const bool needs_state = config.method == AttributionMethod::kEkfac ||
                           config.method == AttributionMethod::kAstra;
  const bool needs_damping = config.method != AttributionMethod::kIdentity;
  if (needs_damping && !(config.solver.damping > 0.0))
    throw ConfigError("if_attribute: damping must be positive");

  EkfacState built;
  if (needs_state && state == nullptr) {
    built = build_attribution_state(spec, params, train, config.solver.seed);
    state = &built;
  }
  if (needs_state) check_state_layout(*state, spec);

  const std::vector<double> grads =
      train_gradients(spec, params, train, layout.total, config.workers);

  AttributionMatrix matrix;
  matrix.method = if_method_tag(config.method);
  matrix.seed = config.solver.seed;
  matrix.num_queries = queries.size();
  matrix.num_train = train.size();
  matrix.scores.assign(queries.size() * train.size(), 0.0);

  parallel_for(queries.size(), config.workers, [&](std::size_t q) {
    ParamVector u = measurement_grad(spec, params, queries[q]);
    if (config.method != AttributionMethod::kIdentity) {
      SolverConfig solver = config.solver;
      solver.seed = mix_seed(config.solver.seed, q);
      try {
        switch (config.method) {
          case AttributionMethod::kEkfac:
            u = precondition(*state, solver.damping, u);
            break;
          case AttributionMethod::kSni:
            u = sni_solve(spec, params, train, u, solver).x;
            break;
          case AttributionMethod::kAstra:
            u = astra_solve(spec, params, train, *state, u, solver).x;
            break;
          case AttributionMethod::kIdentity:
            break;
        }
      } catch (const DivergenceError& err) {
        throw DivergenceError("query " + std::to_string(q) + ": " + err.what(),
                              err.iteration);
      }
    }
    apply_layer_mask(config.layer_mask, layout, u);
    for (std::size_t m = 0; m < train.size(); ++m)
      matrix.at(q, m) = -dot(u, std::span<const double>(&grads[m * layout.total],
                                                        layout.total));
  });

  check_all_finite(matrix);
  return matrix;
}

double SourceSegment::horizon() const {
  return mean_lr * static_cast<double>(steps);
}

SourcePlan build_source_plan(const MlpSpec& spec, const Trajectory& trajectory,
                             int num_segments, std::span<const Example> train,
                             std::uint64_t stats_seed) {
  validate_spec(spec);
  if (train.empty()) throw DimensionError("build_source_plan: empty training set");
  SourcePlan plan;
  plan.final_params = trajectory.final_params();
  const std::vector<Segment> segments = segment_trajectory(trajectory, num_segments);
  for (const Segment& seg : segments) {
    SourceSegment out;
    out.index = seg.index;
    out.steps = seg.steps;
    out.mean_lr = seg.mean_lr;
    if (!(seg.mean_lr > 0.0) || seg.steps == 0)
      throw ConfigError("build_source_plan: segment " + std::to_string(seg.index) +
                        " has mean learning rate " + std::to_string(seg.mean_lr) +
                        " over " + std::to_string(seg.steps) +
                        " steps; its implied damping is not positive");
    out.damping = 1.0 / (seg.mean_lr * static_cast<double>(seg.steps));
    out.mean_params = seg.mean_params;
    out.state = build_attribution_state(spec, out.mean_params, train,
                                mix_seed(stats_seed, static_cast<std::uint64_t>(seg.index)));
    plan.segments.push_back(std::move(out));
  }
  return plan;
}

double implied_if_damping(const SourcePlan& plan) {
  if (plan.segments.empty()) throw ConfigError("implied_if_damping: empty plan");
  double weighted = 0.0;
  double total_steps = 0.0;
  for (const SourceSegment& seg : plan.segments) {
    weighted += static_cast<double>(seg.steps) * seg.damping;
    total_steps += static_cast<double>(seg.steps);
  }
  return weighted / total_steps;
}

AttributionMatrix source_attribute(const MlpSpec& spec, const SourcePlan& plan,
                                   std::span<const Example> train,
                                   std::span<const Example> queries,
                                   const SourceConfig& config) {
  validate_spec(spec);
  if (plan.segments.empty()) throw ConfigError("source_attribute: empty plan");
  if (train.empty()) throw DimensionError("source_attribute: empty training set");
  if (queries.empty()) throw DimensionError("source_attribute: empty query set");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (plan.final_params.size() != layout.total)
    throw DimensionError("source_attribute: final parameter vector length mismatch");
  check_layer_mask(config.layer_mask, spec);
  const std::size_t num_segments = plan.segments.size();
  for (const SourceSegment& seg : plan.segments) {
    if (seg.mean_params.size() != layout.total)
      throw DimensionError("source_attribute: segment " + std::to_string(seg.index) +
                           " parameter vector length mismatch");
    check_state_layout(seg.state, spec);
    if (!(seg.damping > 0.0))
      throw ConfigError("source_attribute: segment " + std::to_string(seg.index) +
                        " damping must be positive");
  }

  // Per-segment training gradients at the segment-mean parameters.
  std::vector<std::vector<double>> segment_grads(num_segments);
  for (std::size_t l = 0; l < num_segments; ++l)
    segment_grads[l] =
        train_gradients(spec, plan.segments[l].mean_params, train, layout.total,
                        config.workers);

  AttributionMatrix matrix;
  matrix.method = source_mode_tag(config.mode);
  matrix.seed = config.solver.seed;
  matrix.num_queries = queries.size();
  matrix.num_train = train.size();
  matrix.scores.assign(queries.size() * train.size(), 0.0);

  parallel_for(queries.size(), config.workers, [&](std::size_t q) {
    ParamVector carry = measurement_grad(spec, plan.final_params, queries[q]);
    for (std::size_t l = num_segments; l-- > 0;) {
      const SourceSegment& seg = plan.segments[l];
      ParamVector response;
      if (config.mode == SourceMode::kEkfac) {
        response = finite_horizon_inverse_apply(seg.state, seg.horizon(), carry);
      } else {
        SolverConfig solver = config.solver;
        solver.damping = seg.damping;
        if (!(solver.lr > 0.0)) solver.lr = 0.1 * seg.damping;
        solver.seed = mix_seed(config.solver.seed, q, l);
        try {
          response = astra_solve(spec, seg.mean_params, train, seg.state, carry, solver).x;
        } catch (const DivergenceError& err) {
          throw DivergenceError("query " + std::to_string(q) + ", segment " +
                                    std::to_string(l) + ": " + err.what(),
                                err.iteration);
        }
      }
      apply_layer_mask(config.layer_mask, layout, response);
      const std::vector<double>& grads = segment_grads[l];
      for (std::size_t m = 0; m < train.size(); ++m)
        matrix.at(q, m) -= dot(response, std::span<const double>(
                                             &grads[m * layout.total], layout.total));
      if (l > 0) carry = matrix_exp_apply(seg.state, seg.horizon(), carry);
    }
  });

  check_all_finite(matrix);
  return matrix;
}

AttributionMatrix ensemble(std::span<const AttributionMatrix> members) {
  if (members.empty()) throw ConfigError("ensemble: no attribution matrices given");
  const AttributionMatrix& first = members.front();
  AttributionMatrix result;
  result.method = first.method;
  result.seed = first.seed;
  result.num_queries = first.num_queries;
  result.num_train = first.num_train;
  result.scores.assign(first.scores.size(), 0.0);
  for (std::size_t i = 0; i < members.size(); ++i) {
    const AttributionMatrix& m = members[i];
    if (m.method != first.method)
      throw ConfigError("ensemble: method mismatch ('" + m.method + "' vs '" +
                        first.method + "')");
    if (m.num_queries != first.num_queries || m.num_train != first.num_train)
      throw DimensionError("ensemble: score grid shapes differ");
    for (std::size_t j = 0; j < i; ++j)
      if (members[j].seed == m.seed)
        throw ConfigError("ensemble: duplicate seed tag " + std::to_string(m.seed));
    if (i > 0) result.seed = mix_seed(result.seed, m.seed);
    for (std::size_t k = 0; k < m.scores.size(); ++k) result.scores[k] += m.scores[k];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& s : result.scores) s *= inv;
  return result;
}

// --- persistence --------------------------------------------------------------

void save_scores_csv(const std::string& path, const AttributionMatrix& matrix) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_scores_csv: cannot write '" + path + "'");
  out << "query_id,train_id,score,method,seed\n";
  out.precision(17);
  for (std::size_t q = 0; q < matrix.num_queries; ++q)
    for (std::size_t m = 0; m < matrix.num_train; ++m)
      out << q << ',' << m << ',' << matrix.at(q, m) << ',' << matrix.method << ','
          << matrix.seed << '\n';
  if (!out) throw ConfigError("save_scores_csv: short write to '" + path + "'");
}

namespace {

constexpr char kAttrMagic[4] = {'A', 'T', 'T', 'R'};
constexpr std::uint32_t kAttrVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw MissingArtifactError(std::string("attribution grid: truncated reading ") + what);
  return v;
}
std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw MissingArtifactError(std::string("attribution grid: truncated reading ") + what);
  return v;
}

}  // namespace

void save_attribution(const std::string& path, const AttributionMatrix& matrix) {
  if (matrix.scores.size() != matrix.num_queries * matrix.num_train)
    throw DimensionError("save_attribution: score grid size does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_attribution: cannot write '" + path + "'");
  out.write(kAttrMagic, 4);
  write_u32(out, kAttrVersion);
  write_u32(out, static_cast<std::uint32_t>(matrix.method.size()));
  out.write(matrix.method.data(), static_cast<std::streamsize>(matrix.method.size()));
  write_u64(out, matrix.seed);
  write_u32(out, static_cast<std::uint32_t>(matrix.num_queries));
  write_u32(out, static_cast<std::uint32_t>(matrix.num_train));
  out.write(reinterpret_cast<const char*>(matrix.scores.data()),
            static_cast<std::streamsize>(matrix.scores.size() * sizeof(double)));
  if (!out) throw ConfigError("save_attribution: short write to '" + path + "'");
}

AttributionMatrix load_attribution(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("load_attribution: cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kAttrMagic, 4) != 0)
    throw ConfigError("load_attribution: '" + path + "' is not an attribution grid file");
  const std::uint32_t version = read_u32(in, "version");
  if (version != kAttrVersion)
    throw ConfigError("load_attribution: unsupported version " + std::to_string(version));
  const std::uint32_t method_len = read_u32(in, "method tag length");
  AttributionMatrix matrix;
  matrix.method.assign(method_len, '\0');
  if (method_len > 0 &&
      !in.read(matrix.method.data(), static_cast<std::streamsize>(method_len)))
    throw MissingArtifactError("attribution grid: truncated reading method tag");
  matrix.seed = read_u64(in, "seed tag");
  matrix.num_queries = read_u32(in, "query count");
  matrix.num_train = read_u32(in, "train count");
  matrix.scores.assign(matrix.num_queries * matrix.num_train, 0.0);
  if (!matrix.scores.empty() &&
      !in.read(reinterpret_cast<char*>(matrix.scores.data()),
               static_cast<std::streamsize>(matrix.scores.size() * sizeof(double))))
    throw MissingArtifactError("attribution grid: truncated reading scores");
  return matrix;
}

}  // namespace astra
