#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace plab {

double mean(std::span<const double> x);

/// Unbiased sample variance; 0 for fewer than two values.
double variance(std::span<const double> x);

/// Integrated autocorrelation time τ = 1 + 2 Σ_{t≥1} ρ(t), summed up to the
/// first window W with W ≥ c·τ(W) (Sokal's automatic windowing). Returns 1 for
/// constant or very short series.
double integrated_autocorrelation_time(std::span<const double> x, double window_factor = 5.0);

/// Sample lag-1 autocorrelation; 0 for constant or too-short series.
double lag1_autocorrelation(std::span<const double> x);

/// n / τ.
double effective_sample_size(std::span<const double> x);

struct Interval {
  double lower = 0.0;
  double upper = 1.0;
};

/// Exact binomial interval for successes/trials at the given two-sided level.
Interval clopper_pearson_interval(std::uint64_t successes, std::uint64_t trials,
                                  double confidence = 0.95);

Interval wilson_interval(std::uint64_t successes, std::uint64_t trials, double confidence = 0.95);

/// P(χ²_dof > statistic).
double chi_square_survival(double statistic, double dof);

/// Two-sided standard normal p-value of a z-score.
double normal_two_sided_p(double z);

double normal_quantile(double p);

}  // namespace plab
