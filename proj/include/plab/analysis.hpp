#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/fields.hpp"
#include "plab/rng.hpp"
#include "plab/sampler.hpp"
#include "plab/stats.hpp"

namespace plab {

/// Axis-aligned box in rescaled coordinates.
struct Window {
  std::vector<double> lower;
  std::vector<double> upper;

  /// Box of the given side length centred at the origin.
  static Window centered(int dimension, double side);

  int dimension() const { return static_cast<int>(lower.size()); }
  double volume() const;
  bool contains(std::span<const double> p) const;
};

/// Particles recentred at x* and magnified by N^{1/d}, restricted to a window.
struct LocalProcessSample {
  std::vector<double> center;
  double scale = 1.0;  ///< N^{1/d}
  Window window;
  std::vector<double> points;  ///< row-major, all inside `window`

  int dimension() const { return window.dimension(); }
  std::size_t count() const { return points.size() / static_cast<std::size_t>(dimension()); }
  std::span<const double> point(std::size_t i) const {
    const auto d = static_cast<std::size_t>(dimension());
    return std::span<const double>(points).subspan(i * d, d);
  }
};

LocalProcessSample extract_local_process(const ParticleConfiguration& x,
                                         std::span<const double> center, const Window& window);

std::vector<LocalProcessSample> extract_local_processes(std::span<const ParticleConfiguration> xs,
                                                        std::span<const double> center,
                                                        const Window& window);

/// Homogeneous Poisson process on `window`: n independent samples.
std::vector<LocalProcessSample> synthetic_poisson_samples(const Window& window, double intensity,
                                                          std::size_t n, Rng& rng);

/// Histogram of point counts per sample inside a window.
struct CountStatistics {
  double window_volume = 0.0;
  std::vector<std::uint64_t> histogram;  ///< histogram[c] = samples with c points
  std::uint64_t n_samples = 0;
  bool low_power = false;  ///< fewer than 30 samples

  double mean() const;
  double variance() const;
};

/// Counts, per sample, the points inside `window` (which may be smaller than
/// the extraction window).
CountStatistics count_statistics(std::span<const LocalProcessSample> samples, const Window& window);

struct PoissonGofResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int degrees_of_freedom = 0;
  int cells = 0;           ///< after tail pooling
  double tv_distance = 0.0;  ///< ½ Σ_c |p̂_c - Poisson(c)|, tail included
  bool low_power = false;  ///< fewer than two pooled cells or 30 samples
};

/// Chi-square goodness of fit of the count histogram against Poisson(mean),
/// merging categories (from the left, and the last cell backwards) until every
/// expected count is at least 5. The right tail cell includes P(count ≥ c).
PoissonGofResult poisson_gof_test(const CountStatistics& stats, double mean);

/// ½ Σ_c |p̂_c - Poisson(mean; c)| over all c ≥ 0.
double poisson_tv_distance(const CountStatistics& stats, double mean);

struct ProportionEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  Interval interval;  ///< exact 95% binomial interval
  std::uint64_t successes = 0;
  std::uint64_t trials = 0;
};

/// Fraction of samples with no point in `window`.
ProportionEstimate void_probability(std::span<const LocalProcessSample> samples, const Window& window);

struct LaplaceEstimate {
  double value = 0.0;  ///< mean of exp(-Σ f(p))
  double standard_error = 0.0;
  Interval interval;  ///< value ± 1.96 se, clipped to [0, 1]
  double poisson_prediction = 0.0;  ///< exp(∫_W (e^{-f} - 1) λ dx), when λ is given
  double poisson_second_moment = 0.0;  ///< exp(∫_W (e^{-2f} - 1) λ dx)
  double p_value = 1.0;  ///< z-test against the prediction with the Poisson variance
};

using TestFunction = std::function<double(std::span<const double>)>;

/// Monte Carlo Laplace functional E[exp(-Σ_{p ∈ W} f(p))]; f may return +∞.
/// With an intensity, adds the Poisson prediction by midpoint quadrature
/// (`quadrature_points` per axis) over the window.
LaplaceEstimate laplace_functional(std::span<const LocalProcessSample> samples, const TestFunction& f,
                                   const Window& window, std::optional<double> intensity = std::nullopt,
                                   int quadrature_points = 2000);

struct CorrelationEstimate {
  int order = 1;
  /// Bin edges of the binned coordinate: the first coordinate of the point
  /// (k = 1), the distance |p₁ - p₂| (k = 2), or the diameter of the triple
  /// (k = 3).
  std::vector<double> bin_edges;
  std::vector<double> values;           ///< estimated R_k per bin
  std::vector<double> standard_errors;
  std::vector<double> tuple_counts;     ///< ordered k-tuples observed per bin
  std::vector<double> reference_volume; ///< ∫_{W^k} 1{coordinate ∈ bin}
  std::vector<bool> undersampled;       ///< fewer than 5 tuples in the bin
  std::uint64_t n_samples = 0;
  /// Joint Hotelling T² test of "R_k ≡ reference", when a reference is
  /// supplied. Adjacent bins are pooled until at least 50 samples contribute
  /// to each; NaN p-value if fewer than 50 contribute in total or the
  /// covariance is singular.
  std::optional<double> reference;
  int test_bins = 0;  ///< pooled bins entering T²
  double hotelling_t2 = 0.0;
  double p_value = 1.0;
};

/// Binned estimator of the k-point correlation function from ordered k-tuples
/// of distinct points inside the window: tuple counts divided by the sample
/// count and by the W^k volume of the bin. A Poisson process of intensity λ
/// gives R_k ≡ λ^k. k ∈ {1, 2, 3}.
CorrelationEstimate correlation_estimate(std::span<const LocalProcessSample> samples, const Window& window,
                                         int order, int bins, std::optional<double> reference = std::nullopt);

/// C(N, k) = N! / ((N - k)! N^k), the finite-N factor on k-point functions of
/// N i.i.d. points; 1 for N = 0 (the infinite-N limit).
double finite_n_factor(int n, int k);

/// h^{emp_N}(y) = (1/N) Σ_j g(y - x_j), evaluated exactly.
double empirical_field(const ParticleConfiguration& x, const KernelSpec& kernel,
                       std::span<const double> y);

struct BoundCheckReport {
  double epsilon = 0.0;
  int k = 0;
  double empirical_probability = 0.0;
  Interval interval;  ///< Clopper–Pearson 95%
  std::uint64_t exceedances = 0;
  std::uint64_t n_samples = 0;
  double theoretical_bound = 0.0;  ///< exp(Nβ g(0) - N²β ε² / (g(0) k²))
  bool vacuous = false;            ///< bound ≥ 1
  /// ε ≥ k g(0): |Σ (h^{emp} - h^{μ})| ≤ k g(0) holds deterministically for
  /// nonnegative kernels, so no exceedance is possible.
  bool deterministic = false;
  bool satisfied = false;
  double max_abs_deviation = 0.0;
  std::uint64_t ceiling_violations = 0;  ///< samples with h^{emp} outside [0, g(0)]
};

/// Precomputed pieces for the field-fluctuation checks at (N, β).
class FluctuationProbe {
 public:
  /// Throws ConfigError if θ of the solution is not N β (to 1e-12 relative).
  FluctuationProbe(int n, double beta, const ThermalSolution& solution, const KernelSpec& kernel,
                   std::vector<std::vector<double>> y_points);

  /// h^{emp_N}(y_i) for every test point.
  std::vector<double> empirical_values(const ParticleConfiguration& x) const;
  /// h^{μ_θ}(y_i), interpolated from the solution's grid.
  const std::vector<double>& reference_values() const { return reference_; }
  double reference_sum() const { return reference_sum_; }

  int n() const { return n_; }
  double beta() const { return beta_; }
  int k() const { return static_cast<int>(y_.size()); }
  double g0() const { return kernel_.g0(); }
  const KernelSpec& kernel() const { return kernel_; }

 private:
  int n_;
  double beta_;
  KernelSpec kernel_;
  std::vector<std::vector<double>> y_;
  std::vector<double> reference_;
  double reference_sum_ = 0.0;
};

/// Empirical P(|Σ (h^{emp} - h^{μ_θ})(y_i)| > ε) against the concentration
/// bound. Throws ConfigError if a sample does not hold N particles.
BoundCheckReport concentration_check(std::span<const ParticleConfiguration> samples,
                                     const FluctuationProbe& probe, double epsilon);

/// ε at which the concentration bound equals `bound`.
double epsilon_for_bound(int n, double beta, double g0, int k, double bound);

struct LaplaceFluctuationReport {
  int k = 0;
  double log_empirical = 0.0;  ///< log E[exp(-Nβ Σ h^{emp}(y_i))]
  double log_reference = 0.0;  ///< -Nβ Σ h^{μ_θ}(y_i)
  double abs_log_ratio = 0.0;  ///< |log M_N|
  double bound = 0.0;          ///< √(2N) g(0) k
  double a_n_allowance = 0.0;  ///< exp(-Nβ g(0)) (1 + e^{√(2N) g(0) k})
  double standard_error_log = 0.0;  ///< delta-method s.e. of log_empirical
  bool satisfied = false;
};

LaplaceFluctuationReport laplace_fluctuation_check(std::span<const ParticleConfiguration> samples,
                                                   const FluctuationProbe& probe);

/// Two-sided z-test p-value for a void probability against exp(-λ|W|), using
/// the binomial variance under the null.
double void_probability_p_value(const ProportionEstimate& estimate, double expected);

struct PoissonTestRow {
  int N = 0;
  double beta = 0.0;
  double intensity = 0.0;  ///< λ in rescaled units
  double window_side = 0.0;
  double window_volume = 0.0;
  CountStatistics counts;
  PoissonGofResult gof;
  double count_ess = 0.0;  ///< effective sample size of the count series
  /// n / count_ess (at least 1). Standard errors below are inflated by its
  /// square root and the χ² and T² statistics divided by it.
  double design_effect = 1.0;
  ProportionEstimate void_estimate;
  double void_prediction = 0.0;
  double void_p_value = 1.0;
  LaplaceEstimate laplace;  ///< f = 1_W
  CorrelationEstimate r1;
  CorrelationEstimate r2;
};

/// Count, void, Laplace (f = 1_W) and k = 1, 2 correlation tests for one set
/// of local samples against Poisson(λ). Samples are taken in chain order and
/// corrected for autocorrelation through the design effect.
PoissonTestRow poisson_tests(std::span<const LocalProcessSample> samples, const Window& window,
                             double intensity, int correlation_bins = 4);

struct PoissonConvergenceSummary {
  std::vector<PoissonTestRow> rows;  ///< ordered by N
  bool tv_decreasing = false;
  double final_tv = 0.0;
};

PoissonConvergenceSummary summarize_poisson_convergence(std::vector<PoissonTestRow> rows);

struct CalibrationReport {
  int repetitions = 0;
  double level = 0.05;
  std::vector<std::string> tests;
  std::vector<double> rejection_rates;  ///< fraction of repetitions with p < level
  std::vector<int> undecided;           ///< repetitions with a NaN p-value (no rejection)
};

/// Runs every test in poisson_tests on `repetitions` independent synthetic
/// Poisson data sets (stream r of `seed` for repetition r) and reports the
/// rejection rate of each.
CalibrationReport calibrate_on_synthetic_poisson(const Window& window, double intensity,
                                                 std::size_t samples_per_repetition, int repetitions,
                                                 std::uint64_t seed, double level = 0.05);

}  // namespace plab
