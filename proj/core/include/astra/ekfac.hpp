#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "astra/linalg.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"

namespace astra {

// Raw second-moment statistics for one layer: bias-augmented input covariance
// (in+1 x in+1) and pre-activation pseudo-gradient covariance (out x out).
struct LayerStats {
  DenseMatrix input_cov;
  DenseMatrix output_cov;
};

// Eigendecomposed Kronecker curvature block for one layer.  `lambda` holds
// one curvature scalar per Kronecker eigenvector, arranged as an
// out x (in+1) grid matching the layer's weight slice: entry (i, j) belongs
// to the eigenvector (input basis column j) (x) (output basis column i).
struct LayerKron {
  DenseMatrix q_input;               // (in+1) x (in+1), columns = eigenvectors
  std::vector<double> input_eigs;    // ascending
  DenseMatrix q_output;              // out x out
  std::vector<double> output_eigs;   // ascending
  DenseMatrix lambda;                // out x (in+1), non-negative
};

struct EkfacState {
  std::vector<LayerKron> layers;
  std::size_t total_dim() const;
};

// Accumulates the factor statistics over the dataset.  Labels are sampled
// once per example from the model's own predictive distribution and the
// pseudo-gradient of -log p(sampled label | x) drives the output covariance.
std::vector<LayerStats> collect_stats(const MlpSpec& spec, const ParamVector& params,
                                      std::span<const Example> examples, Rng& rng);

// Eigendecomposes both factors per layer; the initial curvature grid is the
// Kronecker spectrum lambda(i, j) = output_eig[i] * input_eig[j].
EkfacState build_state(const std::vector<LayerStats>& stats);

// Replaces the Kronecker spectrum with the corrected diagonal: the mean
// squared projection of per-example pseudo-gradients onto each Kronecker
// eigenvector, using freshly sampled labels (independent of collect_stats).
// Entries are clamped at zero.
void correct_eigenvalues(EkfacState& state, const MlpSpec& spec,
                         const ParamVector& params, std::span<const Example> examples,
                         Rng& rng);

// (P + damping I)^{-1} v through the eigenbasis, layer by layer:
// V' = Q_out^T V Q_in, divide by (lambda + damping), map back.
ParamVector precondition(const EkfacState& state, double damping,
                         std::span<const double> v);

// exp(-c P) v in the same eigenbasis (no damping).
ParamVector matrix_exp_apply(const EkfacState& state, double c,
                             std::span<const double> v);

// (I - exp(-horizon P)) P^{-1} v in the eigenbasis: each eigencoordinate is
// scaled by (1 - exp(-horizon * lambda)) / lambda, with the analytic
// lambda -> 0 limit `horizon`.  This is the finite-horizon response of
// gradient flow on a quadratic with curvature P.
ParamVector finite_horizon_inverse_apply(const EkfacState& state, double horizon,
                                         std::span<const double> v);

// Zeroes every eigencoordinate whose curvature is <= threshold (strictly
// positive thresholds only), keeping the high-curvature subspace.
ParamVector project_to_bin(const EkfacState& state, double threshold,
                           std::span<const double> v);

// Number of eigendirections with curvature above the threshold.
std::size_t bin_dimension(const EkfacState& state, double threshold);

// Sampled-label pseudo-gradient of one input (label drawn inside), with the
// per-layer pre-activation deltas when requested.
BackwardResult pseudo_gradient(const MlpSpec& spec, const ParamVector& params,
                               std::span<const double> x, Rng& rng,
                               bool want_layer_deltas = false);

// Binary persistence: magic "EKFC", u32 version, u32 layer count, then per
// layer u32 rows / u32 cols followed by Q_in, input_eigs, Q_out, output_eigs,
// lambda as raw little-endian doubles.
void save_ekfac_state(const std::string& path, const EkfacState& state);
EkfacState load_ekfac_state(const std::string& path);

// Throws unless the state's layer shapes match the spec's parameter layout.
void check_state_layout(const EkfacState& state, const MlpSpec& spec);

}  // namespace astra
