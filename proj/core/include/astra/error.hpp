#pragma once

#include <stdexcept>
#include <string>

namespace astra {

// Shape/argument violations (wrong vector length, mismatched layer dims, ...).
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Numerically undefined results (constant input to a rank correlation,
// non-SPD factorization target, eigensolver failure, ...).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent user configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A pipeline stage was asked to consume an artifact that does not exist.
struct MissingArtifactError : std::runtime_error {
  explicit MissingArtifactError(const std::string& what) : std::runtime_error(what) {}
};

// An iterative solver blew up.  Carries the iteration index so the CLI can
// report where the iteration left the stable region.
struct DivergenceError : std::runtime_error {
  int iteration;
  DivergenceError(const std::string& what, int iter)
      : std::runtime_error(what), iteration(iter) {}
};

}  // namespace astra
