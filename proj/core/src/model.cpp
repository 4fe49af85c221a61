#include "astra/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "astra/error.hpp"
#include "astra/linalg.hpp"

namespace astra {

void validate_spec(const MlpSpec& spec) {
  if (spec.layer_dims.size() < 2)
    throw DimensionError("MlpSpec: need at least input and output widths");
  for (int d : spec.layer_dims)
    if (d <= 0) throw DimensionError("MlpSpec: layer widths must be positive");
  if (spec.task == TaskKind::kRegression && spec.output_dim() != 1)
    throw DimensionError("MlpSpec: regression networks use a scalar output");
  if (spec.task == TaskKind::kClassification && spec.output_dim() < 2)
    throw DimensionError("MlpSpec: classification needs at least two classes");
}

ParamLayout ParamLayout::from_spec(const MlpSpec& spec) {
  validate_spec(spec);
  ParamLayout layout;
  std::size_t offset = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    LayerShape shape;
    shape.out = spec.layer_dims[l + 1];
    shape.in_plus_one = spec.layer_dims[l] + 1;
    shape.offset = offset;
    offset += shape.size();
    layout.layers.push_back(shape);
  }
  layout.total = offset;
  return layout;
}

int Example::label() const {
  const double r = std::round(target);
  if (std::abs(target - r) > 1e-9 || r < 0.0)
    throw DimensionError("Example: target is not a valid class index");
  return static_cast<int>(r);
}

namespace {

inline double relu(double v) { return v > 0.0 ? v : 0.0; }
// Subgradient at exactly zero is taken as zero.
inline double relu_deriv(double v) { return v > 0.0 ? 1.0 : 0.0; }

void check_params(const MlpSpec& spec, const ParamVector& params) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (params.size() != layout.total)
    throw DimensionError("params: expected " + std::to_string(layout.total) +
                         " values, got " + std::to_string(params.size()));
}

}  // namespace

std::vector<double> forward(const MlpSpec& spec, const ParamVector& params,
                            std::span<const double> x, ForwardCache* cache) {
  check_params(spec, params);
  if (static_cast<int>(x.size()) != spec.input_dim())
    throw DimensionError("forward: input width " + std::to_string(x.size()) +
                         " != " + std::to_string(spec.input_dim()));
  const ParamLayout layout = ParamLayout::from_spec(spec);
  const int P = spec.num_layers();
  std::vector<double> act(x.begin(), x.end());
  if (cache) {
    cache->inputs.assign(P, {});
    cache->preacts.assign(P, {});
  }
  for (int l = 0; l < P; ++l) {
    const LayerShape& shape = layout.layers[l];
    if (cache) cache->inputs[l] = act;
    std::vector<double> s(shape.out, 0.0);
    const double* w = &params[shape.offset];
    const int in = shape.in_plus_one - 1;
    for (int o = 0; o < shape.out; ++o) {
      const double* row = w + static_cast<std::size_t>(o) * shape.in_plus_one;
      double v = row[in];  // bias
      for (int i = 0; i < in; ++i) v += row[i] * act[i];
      s[o] = v;
    }
    if (cache) cache->preacts[l] = s;
    if (l + 1 < P) {
      act.resize(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) act[i] = relu(s[i]);
    } else {
      act = s;
    }
  }
  return act;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

double loss(const MlpSpec& spec, std::span<const double> output, const Example& ex) {
  if (spec.task == TaskKind::kRegression) {
    const double r = output[0] - ex.target;
    return 0.5 * r * r;
  }
  const int t = ex.label();
  if (t >= spec.output_dim())
    throw DimensionError("loss: class index out of range");
  // -log softmax_t, computed through the log-sum-exp for stability.
  const double mx = *std::max_element(output.begin(), output.end());
  double lse = 0.0;
  for (double v : output) lse += std::exp(v - mx);
  return mx + std::log(lse) - output[t];
}

double loss(const MlpSpec& spec, const ParamVector& params, const Example& ex) {
  const std::vector<double> output = forward(spec, params, ex.x);
  return loss(spec, std::span<const double>(output), ex);
}

std::vector<double> loss_output_delta(const MlpSpec& spec, std::span<const double> output,
                                      const Example& ex) {
  if (spec.task == TaskKind::kRegression) {
    return {output[0] - ex.target};
  }
  std::vector<double> delta = softmax(output);
  const int t = ex.label();
  if (t >= spec.output_dim())
    throw DimensionError("loss_output_delta: class index out of range");
  delta[t] -= 1.0;
  return delta;
}

BackwardResult backward_from_delta(const MlpSpec& spec, const ParamVector& params,
                                   std::span<const double> x, const ForwardCache& cache,
                                   std::span<const double> output_delta,
                                   bool want_layer_deltas) {
  check_params(spec, params);
  const ParamLayout layout = ParamLayout::from_spec(spec);
  const int P = spec.num_layers();
  if (static_cast<int>(output_delta.size()) != spec.output_dim())
    throw DimensionError("backward_from_delta: output delta width mismatch");
  (void)x;

  BackwardResult result;
  result.grad.assign(layout.total, 0.0);
  if (want_layer_deltas) result.layer_deltas.assign(P, {});

  std::vector<double> delta(output_delta.begin(), output_delta.end());
  for (int l = P - 1; l >= 0; --l) {
    const LayerShape& shape = layout.layers[l];
    const int in = shape.in_plus_one - 1;
    const std::vector<double>& a_in = cache.inputs[l];
    if (want_layer_deltas) result.layer_deltas[l] = delta;
    // dW = delta a_bar^T
    double* g = &result.grad[shape.offset];
    for (int o = 0; o < shape.out; ++o) {
      double* grow = g + static_cast<std::size_t>(o) * shape.in_plus_one;
      const double d = delta[o];
      for (int i = 0; i < in; ++i) grow[i] = d * a_in[i];
      grow[in] = d;
    }
    if (l > 0) {
      // delta_{l-1} = (W^T delta) o relu'(s_{l-1})
      const double* w = &params[shape.offset];
      std::vector<double> next(in, 0.0);
      for (int o = 0; o < shape.out; ++o) {
        const double* row = w + static_cast<std::size_t>(o) * shape.in_plus_one;
        const double d = delta[o];
        for (int i = 0; i < in; ++i) next[i] += row[i] * d;
      }
      const std::vector<double>& s_prev = cache.preacts[l - 1];
      for (int i = 0; i < in; ++i) next[i] *= relu_deriv(s_prev[i]);
      delta = std::move(next);
    }
  }
  return result;
}

ParamVector grad(const MlpSpec& spec, const ParamVector& params, const Example& ex) {
  ForwardCache cache;
  const std::vector<double> out = forward(spec, params, ex.x, &cache);
  const std::vector<double> delta = loss_output_delta(spec, out, ex);
  return backward_from_delta(spec, params, ex.x, cache, delta).grad;
}

double mean_loss(const MlpSpec& spec, const ParamVector& params,
                 std::span<const Example> batch) {
  if (batch.empty()) throw DimensionError("mean_loss: empty batch");
  double total = 0.0;
  for (const Example& ex : batch) total += loss(spec, params, ex);
  return total / static_cast<double>(batch.size());
}

ParamVector mean_grad(const MlpSpec& spec, const ParamVector& params,
                      std::span<const Example> batch) {
  if (batch.empty()) throw DimensionError("mean_grad: empty batch");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  ParamVector acc(layout.total, 0.0);
  for (const Example& ex : batch) {
    const ParamVector g = grad(spec, params, ex);
    axpy(1.0, g, acc);
  }
  scale(1.0 / static_cast<double>(batch.size()), acc);
  return acc;
}

namespace {

// Adds J^T H J v for one example into `out` (no batch normalization here).
void ggn_vec_accumulate(const MlpSpec& spec, const ParamLayout& layout,
                        const ParamVector& params, const Example& ex,
                        std::span<const double> v, std::span<double> out) {
  const int P = spec.num_layers();
  ForwardCache cache;
  const std::vector<double> output = forward(spec, params, ex.x, &cache);

  // Forward-mode JVP: tangent of the output under parameter direction v.
  // da_0 = 0 since the input is fixed.
  std::vector<double> da(ex.x.size(), 0.0);
  std::vector<double> ds;
  for (int l = 0; l < P; ++l) {
    const LayerShape& shape = layout.layers[l];
    const int in = shape.in_plus_one - 1;
    const std::vector<double>& a_in = cache.inputs[l];
    const double* w = &params[shape.offset];
    const double* vb = &v[shape.offset];
    ds.assign(shape.out, 0.0);
    for (int o = 0; o < shape.out; ++o) {
      const double* wrow = w + static_cast<std::size_t>(o) * shape.in_plus_one;
      const double* vrow = vb + static_cast<std::size_t>(o) * shape.in_plus_one;
      double t = vrow[in];  // bias direction
      for (int i = 0; i < in; ++i) t += vrow[i] * a_in[i] + wrow[i] * da[i];
      ds[o] = t;
    }
    if (l + 1 < P) {
      const std::vector<double>& s = cache.preacts[l];
      da.resize(ds.size());
      for (std::size_t i = 0; i < ds.size(); ++i) da[i] = relu_deriv(s[i]) * ds[i];
    }
  }

  // Output-space curvature H applied to the output tangent.
  std::vector<double> u;
  if (spec.task == TaskKind::kRegression) {
    u = ds;
  } else {
    const std::vector<double> p = softmax(output);
    const double pds = dot(p, ds);
    u.resize(ds.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = p[i] * (ds[i] - pds);
  }

  // Reverse-mode VJP of u through the network accumulates J^T u.
  BackwardResult back = backward_from_delta(spec, params, ex.x, cache, u);
  axpy(1.0, back.grad, out);
}

}  // namespace

ParamVector ggn_vec(const MlpSpec& spec, const ParamVector& params,
                    std::span<const Example> batch, std::span<const double> v) {
  if (batch.empty()) throw DimensionError("ggn_vec: empty batch");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (v.size() != layout.total) throw DimensionError("ggn_vec: direction length mismatch");
  ParamVector out(layout.total, 0.0);
  for (const Example& ex : batch) ggn_vec_accumulate(spec, layout, params, ex, v, out);
  scale(1.0 / static_cast<double>(batch.size()), out);
  return out;
}

ParamVector ggn_vec_indexed(const MlpSpec& spec, const ParamVector& params,
                            std::span<const Example> examples,
                            std::span<const int> indices, std::span<const double> v) {
  if (indices.empty()) throw DimensionError("ggn_vec_indexed: empty index set");
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (v.size() != layout.total)
    throw DimensionError("ggn_vec_indexed: direction length mismatch");
  ParamVector out(layout.total, 0.0);
  for (int idx : indices) {
    if (idx < 0 || idx >= static_cast<int>(examples.size()))
      throw DimensionError("ggn_vec_indexed: index out of range");
    ggn_vec_accumulate(spec, layout, params, examples[idx], v, out);
  }
  scale(1.0 / static_cast<double>(indices.size()), out);
  return out;
}

double sample_label(const MlpSpec& spec, std::span<const double> output, Rng& rng) {
  if (spec.task == TaskKind::kRegression) {
    return output[0] + rng.normal();
  }
  const std::vector<double> p = softmax(output);
  return static_cast<double>(rng.categorical(p));
}

double measurement(const MlpSpec& spec, std::span<const double> output, const Example& ex) {
  if (spec.task == TaskKind::kRegression) {
    return std::abs(output[0] - ex.target);
  }
  const int t = ex.label();
  const int c = spec.output_dim();
  if (t >= c) throw DimensionError("measurement: class index out of range");
  if (c < 2) throw DimensionError("measurement: margin undefined for a single class");
  // -g_t + log sum_{i != t} exp g_i, stable via the off-target max.
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < c; ++i)
    if (i != t) mx = std::max(mx, output[i]);
  double lse = 0.0;
  for (int i = 0; i < c; ++i)
    if (i != t) lse += std::exp(output[i] - mx);
  return -output[t] + mx + std::log(lse);
}

double measurement(const MlpSpec& spec, const ParamVector& params, const Example& ex) {
  const std::vector<double> output = forward(spec, params, ex.x);
  return measurement(spec, std::span<const double>(output), ex);
}

std::vector<double> measurement_output_delta(const MlpSpec& spec,
                                             std::span<const double> output,
                                             const Example& ex) {
  if (spec.task == TaskKind::kRegression) {
    const double r = output[0] - ex.target;
    const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
    return {s};
  }
  const int t = ex.label();
  const int c = spec.output_dim();
  if (t >= c) throw DimensionError("measurement_output_delta: class index out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < c; ++i)
    if (i != t) mx = std::max(mx, output[i]);
  double total = 0.0;
  std::vector<double> delta(c, 0.0);
  for (int i = 0; i < c; ++i) {
    if (i == t) continue;
    delta[i] = std::exp(output[i] - mx);
    total += delta[i];
  }
  for (int i = 0; i < c; ++i) delta[i] = (i == t) ? -1.0 : delta[i] / total;
  return delta;
}

ParamVector measurement_grad(const MlpSpec& spec, const ParamVector& params,
                             const Example& ex) {
  ForwardCache cache;
  const std::vector<double> out = forward(spec, params, ex.x, &cache);
  const std::vector<double> delta = measurement_output_delta(spec, out, ex);
  return backward_from_delta(spec, params, ex.x, cache, delta).grad;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  Rng rng(seed);
  ParamVector params(layout.total, 0.0);
  for (int l = 0; l < spec.num_layers(); ++l) {
    const LayerShape& shape = layout.layers[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.layer_dims[l]));
    for (std::size_t i = 0; i < shape.size(); ++i)
      params[shape.offset + i] = rng.uniform(-bound, bound);
  }
  return params;
}

}  // namespace astra
