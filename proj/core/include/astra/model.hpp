#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "astra/rng.hpp"

namespace astra {

enum class TaskKind { kRegression, kClassification };

// Fully connected ReLU network with a linear final layer.  layer_dims lists
// widths including input and output, e.g. {2, 8, 4, 1}.
struct MlpSpec {
  std::vector<int> layer_dims;
  TaskKind task = TaskKind::kRegression;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  int num_layers() const { return static_cast<int>(layer_dims.size()) - 1; }
};

// Throws unless the spec describes a usable network (>= 1 layer, positive
// widths, regression scalar output, classification >= 2 classes).
void validate_spec(const MlpSpec& spec);

// Per-layer slice of the flat parameter vector.  Each layer stores the
// bias-augmented weight matrix W (out x (in+1), bias in the last column)
// row-major, layers concatenated in order.
struct LayerShape {
  int out = 0;
  int in_plus_one = 0;
  std::size_t offset = 0;
  std::size_t size() const {
    return static_cast<std::size_t>(out) * static_cast<std::size_t>(in_plus_one);
  }
};

struct ParamLayout {
  std::vector<LayerShape> layers;
  std::size_t total = 0;
  static ParamLayout from_spec(const MlpSpec& spec);
};

// Flat parameter-space vector (parameters, gradients, solver iterates).
using ParamVector = std::vector<double>;

// One training or query example.  `target` holds the regression value or the
// class index (validated integral on use).
struct Example {
  std::vector<double> x;
  double target = 0.0;
  int label() const;
};

// Intermediate activations kept for backward passes.
struct ForwardCache {
  std::vector<std::vector<double>> inputs;   // a_0 .. a_{P-1} (pre-bias)
  std::vector<std::vector<double>> preacts;  // s_1 .. s_P
};

// Network output (pre-softmax logits for classification).
std::vector<double> forward(const MlpSpec& spec, const ParamVector& params,
                            std::span<const double> x, ForwardCache* cache = nullptr);

// Training loss for one example: 1/2 squared error (regression) or softmax
// cross-entropy (classification).
double loss(const MlpSpec& spec, std::span<const double> output, const Example& ex);
double loss(const MlpSpec& spec, const ParamVector& params, const Example& ex);

// dLoss/d(output) evaluated at `output`.
std::vector<double> loss_output_delta(const MlpSpec& spec, std::span<const double> output,
                                      const Example& ex);

// Backward pass from an arbitrary output-space delta.  Optionally records the
// per-layer pre-activation deltas (needed by the curvature factor statistics).
struct BackwardResult {
  ParamVector grad;
  std::vector<std::vector<double>> layer_deltas;  // d/ds_l, filled on request
};
BackwardResult backward_from_delta(const MlpSpec& spec, const ParamVector& params,
                                   std::span<const double> x, const ForwardCache& cache,
                                   std::span<const double> output_delta,
                                   bool want_layer_deltas = false);

// Loss gradient for one example.
ParamVector grad(const MlpSpec& spec, const ParamVector& params, const Example& ex);

// Mean loss / mean loss gradient over a batch.
double mean_loss(const MlpSpec& spec, const ParamVector& params,
                 std::span<const Example> batch);
ParamVector mean_grad(const MlpSpec& spec, const ParamVector& params,
                      std::span<const Example> batch);

// Generalized Gauss-Newton product (1/B) sum_i J_i^T H_i J_i v over the batch,
// computed per example as forward-mode JVP -> output-space curvature ->
// reverse-mode VJP.  H_i is the identity for 1/2-squared-error regression and
// diag(p) - p p^T for softmax cross-entropy.
ParamVector ggn_vec(const MlpSpec& spec, const ParamVector& params,
                    std::span<const Example> batch, std::span<const double> v);
ParamVector ggn_vec_indexed(const MlpSpec& spec, const ParamVector& params,
                            std::span<const Example> examples,
                            std::span<const int> indices, std::span<const double> v);

// Draw a label from the model's own predictive distribution at input x:
// unit-variance Gaussian around the output (regression) or the softmax
// categorical (classification, returned as the class index).
double sample_label(const MlpSpec& spec, std::span<const double> output, Rng& rng);

// Evaluation measurement: absolute prediction error for regression, the
// negative correct-class logit margin -g_t + log(sum_{i != t} exp g_i) for
// classification.
double measurement(const MlpSpec& spec, std::span<const double> output, const Example& ex);
double measurement(const MlpSpec& spec, const ParamVector& params, const Example& ex);

// d(measurement)/d(output); sign(0) taken as 0 for the regression case.
std::vector<double> measurement_output_delta(const MlpSpec& spec,
                                             std::span<const double> output,
                                             const Example& ex);
ParamVector measurement_grad(const MlpSpec& spec, const ParamVector& params,
                             const Example& ex);

// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

// Uniform fan-in initialization: each layer filled from
// U[-1/sqrt(fan_in), +1/sqrt(fan_in)], biases included, in layer order.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

}  // namespace astra
