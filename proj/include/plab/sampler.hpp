#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "plab/fields.hpp"
#include "plab/grid.hpp"
#include "plab/kernels.hpp"

namespace plab {

/// X_N = (x_1, ..., x_N), stored row-major (N × d), with cached energies.
///
/// Pair sums use ordered pairs throughout: Σ_{i≠j} counts every unordered pair
/// twice. Forgetting the factor 2 silently rescales β.
struct ParticleConfiguration {
  int dimension = 1;
  std::vector<double> positions;
  double pair_energy = 0.0;    ///< Σ_{i≠j} g(x_i - x_j)
  double potential_sum = 0.0;  ///< Σ_i V(x_i)

  std::size_t size() const {
    return positions.size() / static_cast<std::size_t>(dimension);
  }
  std::span<const double> particle(std::size_t i) const {
    return std::span<const double>(positions).subspan(i * static_cast<std::size_t>(dimension),
                                                      static_cast<std::size_t>(dimension));
  }
};

/// Builds a configuration and fills both caches. Throws ShapeError if the
/// coordinate count is not a multiple of d, NumericalError on non-finite input.
ParticleConfiguration make_configuration(int dimension, std::vector<double> positions,
                                         const KernelSpec& kernel, const PotentialSpec& potential);

/// Σ_{i≠j} g(x_i - x_j), O(N²).
double pair_energy(std::span<const double> positions, int dimension, const KernelSpec& kernel);

/// H_N = Σ_{i≠j} g(x_i - x_j) + N Σ V(x_i), recomputed from the coordinates
/// (the caches are ignored). Throws ShapeError if X does not hold N points.
double hamiltonian(const ParticleConfiguration& x, const KernelSpec& kernel,
                   const PotentialSpec& potential, int n);

/// F_N = (1/N²) Σ_{i≠j} g + E(μ) - (2/N) Σ h^μ(x_i).
/// Throws DomainError if a particle lies outside μ's box.
double next_order_energy(const ParticleConfiguration& x, const DensityField& mu,
                         const KernelSpec& kernel);

struct SplittingReport {
  double direct_H = 0.0;
  /// N²(E_θ(μ_θ) + F_N) + N Σ ζ_θ(x_i)
  double reconstructed_H = 0.0;
  double relative_gap = 0.0;  ///< |direct - reconstructed| / max(1, |direct|)
  /// N²(E_θ(μ_θ) + F_N + N Σ ζ_θ(x_i)), the variant with the single-particle
  /// term inside the bracket; reported for comparison only.
  double bracketed_H = 0.0;
  double bracketed_gap = 0.0;
};

/// Precomputes h^{μ_θ}, log μ_θ, E(μ_θ) and E_θ(μ_θ) once so that many
/// configurations can be checked cheaply.
///
/// ζ_θ = -(1/θ) log μ_θ is evaluated by interpolating log μ_θ, never the log
/// of an interpolated density. h^μ and log μ_θ use the same four-point
/// interpolant: it is linear in the node values, so the identity
/// log μ_θ = -θ(2h + V) - log L_θ survives interpolation, and it is exact for
/// quadratic V.
class SplittingEvaluator {
 public:
  SplittingEvaluator(const ThermalSolution& solution, const KernelSpec& kernel,
                     const PotentialSpec& potential);

  double interaction_energy() const { return energy_; }
  double thermal_free_energy() const { return thermal_energy_; }

  double field_at(std::span<const double> x) const;
  double zeta(std::span<const double> x) const;

  double next_order_energy(const ParticleConfiguration& x) const;
  SplittingReport residual(const ParticleConfiguration& x) const;

 private:
  KernelSpec kernel_;
  PotentialSpec potential_;
  double theta_;
  GridField field_;
  GridField log_density_;
  double energy_ = 0.0;
  double thermal_energy_ = 0.0;
};

SplittingReport splitting_residual(const ParticleConfiguration& x, const ThermalSolution& solution,
                                   const KernelSpec& kernel, const PotentialSpec& potential);

/// Settings for one Metropolis–Hastings run of P_{N,β} ∝ exp(-β H_N).
struct ChainConfig {
  int N = 1;
  double beta = 1.0;
  double theta = 1.0;  ///< must equal N · beta exactly
  double proposal_scale = 0.1;
  int burn_in = 100;   ///< sweeps
  int thinning = 1;    ///< sweeps between retained samples
  int samples = 100;   ///< retained per chain
  int chains = 1;
  std::uint64_t seed = 0;
  /// Robbins–Monro adaptation of the proposal scale during burn-in only.
  bool tune = true;
  double target_acceptance = 0.35;
  /// Starting positions (N × d); defaults to i.i.d. N(0, 1/(2θ)) per coordinate.
  std::optional<std::vector<double>> initial;

  /// θ = N β.
  static ChainConfig with_beta(int n, double beta);
  /// β = N^{-s}, θ = N β.
  static ChainConfig with_exponent(int n, double s);

  /// Throws ConfigError unless θ = N β, burn-in and thinning ≥ 1, and the
  /// remaining fields are in range.
  void validate() const;
};

struct ChainDiagnostics {
  double acceptance_rate = 0.0;     ///< post burn-in
  std::uint64_t accepted = 0;       ///< post burn-in
  std::uint64_t proposed = 0;       ///< post burn-in
  std::vector<double> energy_trace;  ///< H_N after every post burn-in sweep
  double autocorrelation_time = 1.0;  ///< of energy_trace, in sweeps
  double proposal_scale = 0.0;        ///< frozen value used after burn-in
  int cache_checks = 0;
  double max_cache_drift = 0.0;       ///< relative, over all checkpoints
};

struct GibbsRun {
  /// Retained configurations, chain 0 first, in sweep order within a chain.
  std::vector<ParticleConfiguration> samples;
  std::vector<int> chain_of_sample;
  std::vector<std::uint64_t> sweep_of_sample;
  std::vector<ChainDiagnostics> chains;

  double acceptance_rate() const;
  /// Largest per-chain energy autocorrelation time, in sweeps.
  double autocorrelation_time() const;
};

/// Single-particle Gaussian random-walk Metropolis–Hastings.
///
/// One sweep is N proposals, each moving a uniformly chosen particle; ΔH is
/// computed in O(N). Every 1000 accepted moves the cached energy is checked
/// against a full recomputation (NumericalError beyond 1e-9 relative) and
/// resynchronised. Chain c draws from Rng(seed, c); chains run on up to
/// `threads` threads and are merged by chain index, so results do not depend
/// on the thread count.
GibbsRun sample_gibbs(const ChainConfig& config, const KernelSpec& kernel,
                      const PotentialSpec& potential, int threads = 1);

/// Burn-in suggestion: 10 · τ from a pilot chain of `pilot_sweeps` sweeps
/// (itself after `pilot_sweeps` sweeps of tuning), at least `minimum`.
int pilot_burn_in(const ChainConfig& config, const KernelSpec& kernel,
                  const PotentialSpec& potential, int pilot_sweeps = 200, int minimum = 50);

/// Histogram density of all coordinates pooled over samples and particles,
/// normalised to unit mass over the points that fall in the box. Throws
/// DomainError if none does.
DensityField estimate_marginal(std::span<const ParticleConfiguration> samples, const Grid& grid);

/// Same, restricted to particle `index` of every sample.
DensityField estimate_marginal_of_particle(std::span<const ParticleConfiguration> samples,
                                           const Grid& grid, std::size_t index);

/// Fraction of samples with at least one particle at Euclidean norm > radius.
double confinement_probability(std::span<const ParticleConfiguration> samples, double radius);

/// Binary sample dump: "PLABSMP1", u32 N, u32 d, u64 record count, then per
/// record u64 chain id, u64 sweep index, N·d f64 coordinates (row-major).
/// Little-endian.
void write_samples_binary(const std::filesystem::path& path, const GibbsRun& run);

struct SampleDump {
  int N = 0;
  int dimension = 0;
  std::vector<std::uint64_t> chain;
  std::vector<std::uint64_t> sweep;
  std::vector<std::vector<double>> positions;
};

SampleDump read_samples_binary(const std::filesystem::path& path);

}  // namespace plab
