#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "astra_cli/config.hpp"

namespace astra_cli {

// Process exit codes, stable across commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;     // unexpected error
inline constexpr int kExitConfig = 2;      // configuration / usage error
inline constexpr int kExitMissing = 3;     // missing upstream artifact
inline constexpr int kExitDivergence = 4;  // solver or training divergence

struct CliOptions {
  std::string config_path;
  std::string run_dir;  // explicit run directory; empty = content-addressed
  int workers = 1;
  std::optional<std::uint64_t> seed;  // overrides the solver seed
  std::string method;                 // per-command method/mode override
  int ensemble = 1;                   // attribution ensemble size
};

// Explicit --run-dir wins; otherwise <root>/<config-hash-prefix> where root
// is $ASTRA_TDA_RUN_ROOT or "runs".
std::filesystem::path resolve_run_dir(const ExperimentConfig& config,
                                      const CliOptions& options);

// Parses argv-style arguments (without the program name), dispatches the
// subcommand, and maps exceptions to exit codes.  Command output and notices
// go to `out`, diagnostics to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err);

}  // namespace astra_cli
