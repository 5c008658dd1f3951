#include "plab/stats.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/beta.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "plab/errors.hpp"

namespace plab {

double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

double integrated_autocorrelation_time(std::span<const double> x, double window_factor) {
  const std::size_t n = x.size();
  if (n < 4) return 1.0;
  const double m = mean(x);
  double c0 = 0.0;
  for (double v : x) c0 += (v - m) * (v - m);
  c0 /= static_cast<double>(n);
  if (!(c0 > 0.0)) return 1.0;

  double tau = 1.0;
  for (std::size_t t = 1; t < n / 2; ++t) {
    double ct = 0.0;
    for (std::size_t i = 0; i + t < n; ++i) ct += (x[i] - m) * (x[i + t] - m);
    ct /= static_cast<double>(n);
    tau += 2.0 * ct / c0;
    if (static_cast<double>(t) >= window_factor * tau) break;
  }
  return std::max(tau, 1.0);
}

double lag1_autocorrelation(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const double m = mean(x);
  double c0 = 0.0, c1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) c0 += (x[i] - m) * (x[i] - m);
  for (std::size_t i = 0; i + 1 < n; ++i) c1 += (x[i] - m) * (x[i + 1] - m);
  return c0 > 0.0 ? c1 / c0 : 0.0;
}

double effective_sample_size(std::span<const double> x) {
  return static_cast<double>(x.size()) / integrated_autocorrelation_time(x);
}

Interval clopper_pearson_interval(std::uint64_t successes, std::uint64_t trials, double confidence) {
  if (trials == 0) throw ParameterError("binomial interval needs at least one trial");
  if (successes > trials) throw ParameterError("more successes than trials");
  const double alpha = 1.0 - confidence;
  const double k = static_cast<double>(successes);
  const double n = static_cast<double>(trials);
  Interval out;
  out.lower = successes == 0 ? 0.0
                             : boost::math::quantile(boost::math::beta_distribution<>(k, n - k + 1),
                                                     alpha / 2);
  out.upper = successes == trials
                  ? 1.0
                  : boost::math::quantile(boost::math::beta_distribution<>(k + 1, n - k),
                                          1 - alpha / 2);
  return out;
}

Interval wilson_interval(std::uint64_t successes, std::uint64_t trials, double confidence) {
  if (trials == 0) throw ParameterError("binomial interval needs at least one trial");
  const double z = normal_quantile(0.5 + confidence / 2);
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double denom = 1 + z * z / n;
  const double centre = (p + z * z / (2 * n)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

double chi_square_survival(double statistic, double dof) {
  if (!(dof > 0.0)) throw ParameterError("chi-square needs positive degrees of freedom");
  if (statistic <= 0.0) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<>(dof), statistic));
}

double normal_two_sided_p(double z) {
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::normal_distribution<>(), std::abs(z)));
}

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal_distribution<>(), p); }

}  // namespace plab
