#include "astra/ekfac.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "astra/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats assume a little-endian host");

namespace astra {

std::size_t EkfacState::total_dim() const {
  std::size_t total = 0;
  for (const LayerKron& layer : layers)
    total += layer.lambda.rows * layer.lambda.cols;
  return total;
}

void check_state_layout(const EkfacState& state, const MlpSpec& spec) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (state.layers.size() != layout.layers.size())
    throw DimensionError("EkfacState: layer count does not match the network");
  for (std::size_t l = 0; l < layout.layers.size(); ++l) {
    const LayerKron& k = state.layers[l];
    const LayerShape& shape = layout.layers[l];
    if (k.lambda.rows != static_cast<std::size_t>(shape.out) ||
        k.lambda.cols != static_cast<std::size_t>(shape.in_plus_one))
      throw DimensionError("EkfacState: layer " + std::to_string(l) + " shape mismatch");
  }
}

BackwardResult pseudo_gradient(const MlpSpec& spec, const ParamVector& params,
                               std::span<const double> x, Rng& rng,
                               bool want_layer_deltas) {
  ForwardCache cache;
  const std::vector<double> output = forward(spec, params, x, &cache);
  Example fake;
  fake.x.assign(x.begin(), x.end());
  fake.target = sample_label(spec, output, rng);
  // The negative log-likelihood of the sampled label shares its output delta
  // with the training loss (squared error <-> unit-variance Gaussian).
  const std::vector<double> delta = loss_output_delta(spec, output, fake);
  return backward_from_delta(spec, params, x, cache, delta, want_layer_deltas);
}

std::vector<LayerStats> collect_stats(const MlpSpec& spec, const ParamVector& params,
                                      std::span<const Example> examples, Rng& rng) {
  if (examples.empty()) throw DimensionError("collect_stats: empty dataset");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  const int P = spec.num_layers();
  std::vector<LayerStats> stats(P);
  for (int l = 0; l < P; ++l) {
    const int in1 = layout.layers[l].in_plus_one;
    const int out = layout.layers[l].out;
    stats[l].input_cov = DenseMatrix(in1, in1);
    stats[l].output_cov = DenseMatrix(out, out);
  }

  std::vector<double> abar;
  for (const Example& ex : examples) {
    ForwardCache cache;
    const std::vector<double> output = forward(spec, params, ex.x, &cache);
    Example fake;
    fake.x = ex.x;
    fake.target = sample_label(spec, output, rng);
    const std::vector<double> delta = loss_output_delta(spec, output, fake);
    const BackwardResult back =
        backward_from_delta(spec, params, ex.x, cache, delta, /*want_layer_deltas=*/true);

    for (int l = 0; l < P; ++l) {
      const int in1 = layout.layers[l].in_plus_one;
      const std::vector<double>& a_in = cache.inputs[l];
      abar.assign(a_in.begin(), a_in.end());
      abar.push_back(1.0);
      DenseMatrix& ic = stats[l].input_cov;
      for (int i = 0; i < in1; ++i) {
        const double ai = abar[i];
        if (ai == 0.0) continue;
        for (int j = 0; j < in1; ++j) ic(i, j) += ai * abar[j];
      }
      const std::vector<double>& ds = back.layer_deltas[l];
      DenseMatrix& oc = stats[l].output_cov;
      const int out = layout.layers[l].out;
      for (int i = 0; i < out; ++i) {
        const double di = ds[i];
        if (di == 0.0) continue;
        for (int j = 0; j < out; ++j) oc(i, j) += di * ds[j];
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(examples.size());
  for (LayerStats& st : stats) {
    scale(inv_n, st.input_cov.data);
    scale(inv_n, st.output_cov.data);
  }
  return stats;
}

EkfacState build_state(const std::vector<LayerStats>& stats) {
  EkfacState state;
  for (const LayerStats& st : stats) {
    LayerKron layer;
    EigenPair in_pair = sym_eigh(st.input_cov);
    EigenPair out_pair = sym_eigh(st.output_cov);
    layer.q_input = std::move(in_pair.basis);
    layer.input_eigs = std::move(in_pair.values);
    layer.q_output = std::move(out_pair.basis);
    layer.output_eigs = std::move(out_pair.values);
    const std::size_t out = layer.q_output.rows;
    const std::size_t in1 = layer.q_input.rows;
    layer.lambda = DenseMatrix(out, in1);
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < in1; ++j) {
        const double v = layer.output_eigs[i] * layer.input_eigs[j];
        layer.lambda(i, j) = v > 0.0 ? v : 0.0;
      }
    state.layers.push_back(std::move(layer));
  }
  return state;
}

namespace {

// R = Qout^T * W * Qin where W is the out x (in+1) grid slice.
DenseMatrix project_grid(const LayerKron& layer, const double* w) {
  const std::size_t out = layer.q_output.rows;
  const std::size_t in1 = layer.q_input.rows;
  DenseMatrix tmp(out, in1);  // Qout^T W
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t k = 0; k < out; ++k) {
      const double q = layer.q_output(k, i);
      if (q == 0.0) continue;
      const double* wrow = w + k * in1;
      double* trow = &tmp.data[i * in1];
      for (std::size_t j = 0; j < in1; ++j) trow[j] += q * wrow[j];
    }
  DenseMatrix res(out, in1);  // tmp * Qin
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t k = 0; k < in1; ++k) {
      const double t = tmp(i, k);
      if (t == 0.0) continue;
      const double* qrow = &layer.q_input.data[k * in1];
      double* rrow = &res.data[i * in1];
      for (std::size_t j = 0; j < in1; ++j) rrow[j] += t * qrow[j];
    }
  return res;
}

}  // namespace

void correct_eigenvalues(EkfacState& state, const MlpSpec& spec,
                         const ParamVector& params, std::span<const Example> examples,
                         Rng& rng) {
  if (examples.empty()) throw DimensionError("correct_eigenvalues: empty dataset");
  check_state_layout(state, spec);
  const ParamLayout layout = ParamLayout::from_spec(spec);
  for (LayerKron& layer : state.layers)
    layer.lambda.data.assign(layer.lambda.data.size(), 0.0);

  for (const Example& ex : examples) {
    const BackwardResult back = pseudo_gradient(spec, params, ex.x, rng);
    for (std::size_t l = 0; l < state.layers.size(); ++l) {
      LayerKron& layer = state.layers[l];
      const DenseMatrix proj = project_grid(layer, &back.grad[layout.layers[l].offset]);
      for (std::size_t i = 0; i < proj.data.size(); ++i)
        layer.lambda.data[i] += proj.data[i] * proj.data[i];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(examples.size());
  for (LayerKron& layer : state.layers)
    for (double& v : layer.lambda.data) {
      v *= inv_n;
      if (v < 0.0) v = 0.0;
    }
}

namespace {

enum class GridOp { kPrecondition, kExp, kProject, kFiniteHorizon };

ParamVector apply_in_eigenbasis(const EkfacState& state, std::span<const double> v,
                                GridOp op, double scalar) {
  const std::size_t total = state.total_dim();
  if (v.size() != total)
    throw DimensionError("EkfacState apply: vector length " + std::to_string(v.size()) +
                         " != " + std::to_string(total));
  ParamVector result(total, 0.0);
  std::size_t offset = 0;
  for (const LayerKron& layer : state.layers) {
    const std::size_t out = layer.q_output.rows;
    const std::size_t in1 = layer.q_input.rows;
    DenseMatrix coords = project_grid(layer, &v[offset]);
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < in1; ++j) {
        const double lam = layer.lambda(i, j);
        double& c = coords(i, j);
        switch (op) {
          case GridOp::kPrecondition:
            c /= lam + scalar;
            break;
          case GridOp::kExp:
            c *= std::exp(-scalar * lam);
            break;
          case GridOp::kProject:
            if (lam <= scalar) c = 0.0;
            break;
          case GridOp::kFiniteHorizon: {
            // (1 - exp(-horizon * lam)) / lam, series expansion near lam = 0.
            const double t = scalar * lam;
            c *= (t < 1e-12) ? scalar * (1.0 - 0.5 * t)
                             : (1.0 - std::exp(-t)) / lam;
            break;
          }
        }
      }
    // Map back: Qout * coords * Qin^T.
    DenseMatrix tmp(out, in1);
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t k = 0; k < out; ++k) {
        const double q = layer.q_output(i, k);
        if (q == 0.0) continue;
        const double* crow = &coords.data[k * in1];
        double* trow = &tmp.data[i * in1];
        for (std::size_t j = 0; j < in1; ++j) trow[j] += q * crow[j];
      }
    for (std::size_t i = 0; i < out; ++i) {
      double* orow = &result[offset + i * in1];
      for (std::size_t k = 0; k < in1; ++k) {
        const double t = tmp(i, k);
        if (t == 0.0) continue;
        // row k of Q_in holds Q_in(k, j); we need (coords * Qin^T)(i, j)
        // = sum_k tmp(i, k) * Qin(j, k).
        for (std::size_t j = 0; j < in1; ++j) orow[j] += t * layer.q_input(j, k);
      }
    }
    offset += out * in1;
  }
  return result;
}

}  // namespace

ParamVector precondition(const EkfacState& state, double damping,
                         std::span<const double> v) {
  if (!(damping > 0.0)) throw NumericError("precondition: damping must be positive");
  return apply_in_eigenbasis(state, v, GridOp::kPrecondition, damping);
}

ParamVector matrix_exp_apply(const EkfacState& state, double c,
                             std::span<const double> v) {
  if (!(c >= 0.0)) throw NumericError("matrix_exp_apply: scale must be non-negative");
  return apply_in_eigenbasis(state, v, GridOp::kExp, c);
}

ParamVector finite_horizon_inverse_apply(const EkfacState& state, double horizon,
                                         std::span<const double> v) {
  if (!(horizon > 0.0))
    throw NumericError("finite_horizon_inverse_apply: horizon must be positive");
  return apply_in_eigenbasis(state, v, GridOp::kFiniteHorizon, horizon);
}

ParamVector project_to_bin(const EkfacState& state, double threshold,
                           std::span<const double> v) {
  if (!(threshold > 0.0)) throw NumericError("project_to_bin: threshold must be positive");
  return apply_in_eigenbasis(state, v, GridOp::kProject, threshold);
}

std::size_t bin_dimension(const EkfacState& state, double threshold) {
  if (!(threshold > 0.0)) throw NumericError("bin_dimension: threshold must be positive");
  std::size_t kept = 0;
  for (const LayerKron& layer : state.layers)
    for (double lam : layer.lambda.data)
      if (lam > threshold) ++kept;
  return kept;
}

// --- persistence --------------------------------------------------------------

namespace {

constexpr char kEkfacMagic[4] = {'E', 'K', 'F', 'C'};
constexpr std::uint32_t kEkfacVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw MissingArtifactError(std::string("ekfac state: truncated reading ") + what);
  return v;
}
void write_doubles(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}
void read_doubles(std::istream& in, std::vector<double>& v, const char* what) {
  if (!in.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw MissingArtifactError(std::string("ekfac state: truncated reading ") + what);
}

}  // namespace

void save_ekfac_state(const std::string& path, const EkfacState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_ekfac_state: cannot write '" + path + "'");
  out.write(kEkfacMagic, 4);
  write_u32(out, kEkfacVersion);
  write_u32(out, static_cast<std::uint32_t>(state.layers.size()));
  for (const LayerKron& layer : state.layers) {
    write_u32(out, static_cast<std::uint32_t>(layer.lambda.rows));
    write_u32(out, static_cast<std::uint32_t>(layer.lambda.cols));
    write_doubles(out, layer.q_input.data);
    write_doubles(out, layer.input_eigs);
    write_doubles(out, layer.q_output.data);
    write_doubles(out, layer.output_eigs);
    write_doubles(out, layer.lambda.data);
  }
  if (!out) throw ConfigError("save_ekfac_state: short write to '" + path + "'");
}

EkfacState load_ekfac_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("load_ekfac_state: cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kEkfacMagic, 4) != 0)
    throw ConfigError("load_ekfac_state: '" + path + "' is not an EKFAC state file");
  const std::uint32_t version = read_u32(in, "version");
  if (version != kEkfacVersion)
    throw ConfigError("load_ekfac_state: unsupported version " + std::to_string(version));
  const std::uint32_t layer_count = read_u32(in, "layer count");
  EkfacState state;
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const std::uint32_t rows = read_u32(in, "rows");
    const std::uint32_t cols = read_u32(in, "cols");
    LayerKron layer;
    layer.q_input = DenseMatrix(cols, cols);
    layer.input_eigs.assign(cols, 0.0);
    layer.q_output = DenseMatrix(rows, rows);
    layer.output_eigs.assign(rows, 0.0);
    layer.lambda = DenseMatrix(rows, cols);
    read_doubles(in, layer.q_input.data, "input basis");
    read_doubles(in, layer.input_eigs, "input eigenvalues");
    read_doubles(in, layer.q_output.data, "output basis");
    read_doubles(in, layer.output_eigs, "output eigenvalues");
    read_doubles(in, layer.lambda.data, "lambda grid");
    state.layers.push_back(std::move(layer));
  }
  return state;
}

}  // namespace astra
