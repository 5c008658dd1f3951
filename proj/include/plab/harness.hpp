#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "plab/config.hpp"

namespace plab {

/// A verification that did not pass; collected into failures.json.
struct Failure {
  std::string check;
  std::string detail;
  double value = 0.0;
  double threshold = 0.0;
};

struct RunOptions {
  std::filesystem::path out;  ///< empty: the config's `output`
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool verbose = true;  ///< progress lines on stderr
};

struct RunResult {
  std::vector<Failure> failures;
  std::vector<std::string> artifacts;  ///< relative to the output directory
  int exit_code() const { return failures.empty() ? 0 : 1; }
};

/// Subcommands accepted by run_command. "all" (alias "run") chains
/// validate-kernel, solve-thermal, solve-equilibrium, verify-identities, sweep.
const std::vector<std::string>& subcommands();

/// Runs one subcommand into the output directory.
///
/// Writes config.json (canonical copy), manifest.json (config hash, code
/// version, seed, commands run, SHA-256 of every artifact) and failures.json.
/// Throws StalenessError if the directory already holds a manifest with a
/// different config hash, ConfigError for an out-of-regime sweep without
/// sweep.allow_out_of_regime, IoError when `analyze` finds no sample dumps.
RunResult run_command(const std::string& subcommand, ExperimentConfig config, const RunOptions& options);

/// Re-runs every command recorded in `out_dir`/manifest.json from
/// `out_dir`/config.json into a scratch directory and byte-compares all
/// recorded artifacts. Throws IoError naming a recorded artifact that is
/// missing and ReproducibilityError naming the first one that differs.
void reproduce(const std::filesystem::path& out_dir, int threads = 1, bool verbose = true);

}  // namespace plab
