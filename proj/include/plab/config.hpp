#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "plab/grid.hpp"
#include "plab/kernels.hpp"

namespace plab {

struct KernelConfig {
  std::string name = "gaussian";  ///< gaussian | matern | zero
  double amplitude = 1.0;
  double width = 1.0;
};

struct PotentialConfig {
  std::string name = "quadratic";
  double stiffness = 1.0;
};

struct SolverConfig {
  double tol = 1e-10;
  double damping = 0.5;
  int max_iter = 500000;
  double equilibrium_tol = 1e-7;
};

/// One (N, β) work item of a sweep; θ = N β.
struct SweepPoint {
  int N = 0;
  double beta = 0.0;
  double theta = 0.0;
};

struct SweepConfig {
  std::vector<int> N;
  double s = 0.75;
  bool allow_out_of_regime = false;
  /// 1/2 < s < 1: β sits strictly between N^{-1} and N^{-1/2}.
  bool in_regime() const { return s > 0.5 && s < 1.0; }
  std::vector<SweepPoint> points() const;
};

struct ChainSettings {
  std::uint64_t seed = 1;
  int chains = 2;
  int burn_in = 200;
  int thinning = 1;
  int samples = 500;
  bool tune = true;
};

struct AnalysisConfig {
  std::vector<double> x_star;
  std::vector<double> windows;  ///< window side lengths in rescaled units
  int correlation_bins = 4;
  int marginal_bins = 64;
  double confinement_radius = 2.0;
  std::vector<std::vector<double>> y_points;
  std::vector<int> k_orders;
  std::vector<double> epsilons;
  std::vector<double> log_bounds;  ///< ε chosen so the bound equals exp(value)
  double tv_threshold = 0.05;
  bool require_poisson = false;
};

struct VerifyConfig {
  int configurations = 100;
  std::vector<int> N;
  std::vector<double> thetas;
  double tolerance = 1e-6;
  int densities = 20;
};

struct ExperimentConfig {
  KernelConfig kernel;
  PotentialConfig potential;
  int dimension = 1;
  double half_width = 3.0;
  int points = 1024;
  SolverConfig solver;
  std::vector<double> thetas;
  SweepConfig sweep;
  ChainSettings chain;
  AnalysisConfig analysis;
  VerifyConfig verify;
  std::string output = "runs/default";

  Grid grid() const;
  KernelSpec make_kernel() const;
  PotentialSpec make_potential() const;
};

/// Parses and validates a config document. Errors are ConfigError with the
/// dotted field path ("chain.burn_in: expected a nonnegative integer").
/// Out-of-regime sweeps load with a warning on stderr.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical serialisation (sorted keys, round-trip doubles); parsing it gives
/// back an equal config.
std::string to_canonical_json(const ExperimentConfig& config);

/// SHA-256 of the canonical serialisation with `output` blanked (where a run
/// is written does not change what it computes), hex.
std::string config_hash(const ExperimentConfig& config);

std::string sha256_hex(const std::string& bytes);

/// Library version plus the git revision recorded at configure time.
const std::string& code_version();

}  // namespace plab
