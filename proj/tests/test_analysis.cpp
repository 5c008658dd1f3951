#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "plab/analysis.hpp"
#include "plab/errors.hpp"

using namespace plab;

namespace {

const double kPi = std::numbers::pi;

ParticleConfiguration points(std::vector<double> x, const KernelSpec& k) {
  return make_configuration(1, std::move(x), k, make_quadratic_potential(1, 1.0));
}

const KernelSpec& unit_gaussian() {
  static const KernelSpec k = make_gaussian_kernel(1, 1.0, 1.0);
  return k;
}

double at(double x) { return x; }

}  // namespace

TEST(LocalProcess, ParticleAtCentreMapsToOrigin) {
  const double centre = 0.3;
  const auto s = extract_local_process(points({0.3}, unit_gaussian()), std::span<const double>(&centre, 1),
                                       Window::centered(1, 2.0));
  ASSERT_EQ(s.count(), 1u);
  EXPECT_EQ(s.point(0)[0], 0.0);
  EXPECT_EQ(s.scale, 1.0);
}

TEST(LocalProcess, FarParticlesGiveEmptySample) {
  const double centre = 0.0;
  std::vector<double> x(100, 0.5);
  const auto s = extract_local_process(points(x, unit_gaussian()), std::span<const double>(&centre, 1),
                                       Window::centered(1, 4.0));
  EXPECT_EQ(s.count(), 0u);
}

TEST(LocalProcess, RescalesByN) {
  std::vector<double> x(100, -3.0);
  x[17] = 0.25 + 0.05;
  const double centre = 0.25;
  const auto s = extract_local_process(points(x, unit_gaussian()), std::span<const double>(&centre, 1),
                                       Window::centered(1, 20.0));
  ASSERT_EQ(s.count(), 1u);
  EXPECT_NEAR(s.point(0)[0], 5.0, 1e-12);
  EXPECT_EQ(s.scale, 100.0);
}

TEST(Counts, AllEmptySamples) {
  std::vector<LocalProcessSample> samples(40);
  for (auto& s : samples) s.window = Window::centered(1, 1.0);
  const auto stats = count_statistics(samples, Window::centered(1, 1.0));
  EXPECT_EQ(stats.histogram, (std::vector<std::uint64_t>{40}));
  EXPECT_EQ(stats.n_samples, 40u);
  EXPECT_FALSE(stats.low_power);
}

TEST(Counts, SyntheticPoissonMean) {
  Rng rng(1);
  const auto w = Window::centered(1, 2.0);
  const auto samples = synthetic_poisson_samples(w, 1.0, 5000, rng);
  const auto stats = count_statistics(samples, w);
  EXPECT_NEAR(stats.mean(), 2.0, 3.0 * std::sqrt(2.0 / 5000));
  std::uint64_t total = 0;
  for (auto c : stats.histogram) total += c;
  EXPECT_EQ(total, stats.n_samples);
}

TEST(Counts, DoublingTheWindowDoublesTheMean) {
  Rng rng(2);
  const auto big = Window::centered(1, 4.0);
  const auto samples = synthetic_poisson_samples(big, 1.5, 4000, rng);
  const double m2 = count_statistics(samples, Window::centered(1, 2.0)).mean();
  const double m4 = count_statistics(samples, big).mean();
  // Delta-method s.e. of the ratio of two correlated means, bounded generously.
  const double se = 2.0 * std::sqrt(1.0 / (3.0 * 4000) + 1.0 / (6.0 * 4000));
  EXPECT_NEAR(m4 / m2, 2.0, 3.0 * se);
}

TEST(PoissonGof, SyntheticDataIsCalibrated) {
  const auto w = Window::centered(1, 1.0);
  int rejections = 0;
  for (int rep = 0; rep < 200; ++rep) {
    Rng rng(2024, static_cast<std::uint64_t>(rep));
    const auto samples = synthetic_poisson_samples(w, 3.0, 10000, rng);
    if (poisson_gof_test(count_statistics(samples, w), 3.0).p_value < 0.05) ++rejections;
  }
  EXPECT_NEAR(rejections / 200.0, 0.05, 0.02);
}

TEST(PoissonGof, DeterministicCountsAreRejected) {
  CountStatistics stats;
  stats.n_samples = 1000;
  stats.histogram = {0, 0, 0, 1000};
  const auto r = poisson_gof_test(stats, 3.0);
  EXPECT_LT(r.p_value, 1e-6);
  EXPECT_GT(r.tv_distance, 0.7);
}

TEST(PoissonGof, WrongIntensityIsRejected) {
  Rng rng(3);
  const auto w = Window::centered(1, 1.0);
  const auto samples = synthetic_poisson_samples(w, 2.0, 10000, rng);
  EXPECT_LT(poisson_gof_test(count_statistics(samples, w), 4.0).p_value, 0.01);
}

TEST(PoissonGof, PoolingKeepsExpectedCountsAboveFive) {
  // Tiny mean: everything beyond zero pools into one tail cell.
  CountStatistics stats;
  stats.n_samples = 200;
  stats.histogram = {190, 10};
  const auto r = poisson_gof_test(stats, 0.05);
  EXPECT_EQ(r.cells, 2);
  EXPECT_EQ(r.degrees_of_freedom, 1);
  // Oracle: two cells {0}, {≥1} with expected 200 e^{-0.05} and the rest.
  const double e0 = 200 * std::exp(-0.05), e1 = 200 - e0;
  EXPECT_NEAR(r.statistic, (190 - e0) * (190 - e0) / e0 + (10 - e1) * (10 - e1) / e1, 1e-9);
  // With 100 samples the tail expects 4.9 < 5 and collapses into one cell.
  stats.n_samples = 100;
  stats.histogram = {95, 5};
  EXPECT_EQ(poisson_gof_test(stats, 0.05).cells, 1);
}

TEST(PoissonGof, TotalVariationOfExactLawIsSmall) {
  CountStatistics stats;
  stats.n_samples = 1000000;
  for (int c = 0; c < 20; ++c)
    stats.histogram.push_back(static_cast<std::uint64_t>(std::llround(1e6 * std::exp(-1.0) / std::tgamma(c + 1.0))));
  EXPECT_LT(poisson_tv_distance(stats, 1.0), 1e-5);
}

TEST(VoidProbability, SyntheticPoisson) {
  Rng rng(4);
  const auto w = Window::centered(1, 1.0);
  const auto samples = synthetic_poisson_samples(w, 1.0, 4000, rng);
  const auto v = void_probability(samples, w);
  const double expected = std::exp(-1.0);
  EXPECT_NEAR(v.value, expected, 3.0 * std::sqrt(expected * (1 - expected) / 4000));
  EXPECT_LE(v.interval.lower, v.value);
  EXPECT_GE(v.interval.upper, v.value);
}

TEST(VoidProbability, TrivialCases) {
  Rng rng(5);
  const auto samples = synthetic_poisson_samples(Window::centered(1, 2.0), 3.0, 50, rng);
  EXPECT_EQ(void_probability(samples, Window::centered(1, 0.0)).value, 1.0);
  std::vector<LocalProcessSample> empty(50);
  for (auto& s : empty) s.window = Window::centered(1, 2.0);
  EXPECT_EQ(void_probability(empty, Window::centered(1, 2.0)).value, 1.0);
}

TEST(LaplaceFunctional, ZeroTestFunctionGivesOne) {
  Rng rng(6);
  const auto w = Window::centered(1, 2.0);
  const auto samples = synthetic_poisson_samples(w, 2.0, 100, rng);
  const auto r = laplace_functional(samples, [](std::span<const double>) { return 0.0; }, w, 2.0);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_EQ(r.poisson_prediction, 1.0);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(LaplaceFunctional, InfiniteTestFunctionIsVoidProbability) {
  Rng rng(7);
  const auto w = Window::centered(1, 1.0);
  const auto samples = synthetic_poisson_samples(w, 1.2, 500, rng);
  const double inf = std::numeric_limits<double>::infinity();
  const auto r = laplace_functional(samples, [inf](std::span<const double>) { return inf; }, w, 1.2);
  EXPECT_EQ(r.value, void_probability(samples, w).value);
  EXPECT_NEAR(r.poisson_prediction, std::exp(-1.2), 1e-12);
}

TEST(LaplaceFunctional, IndicatorMatchesPoissonPrediction) {
  Rng rng(8);
  const auto w = Window::centered(1, 2.0);
  const double lambda = 0.8;
  const auto samples = synthetic_poisson_samples(w, lambda, 5000, rng);
  const auto r = laplace_functional(samples, [](std::span<const double>) { return 1.0; }, w, lambda);
  const double expected = std::exp(lambda * 2.0 * (std::exp(-1.0) - 1.0));
  EXPECT_NEAR(r.poisson_prediction, expected, 1e-12);
  EXPECT_NEAR(r.value, expected, 3.0 * r.standard_error);
}

TEST(LaplaceFunctional, QuadratureOfSmoothTestFunction) {
  // f(p) = p² on [-1, 1]: ∫(e^{-p²} - 1) dp = √π erf(1) - 2.
  std::vector<LocalProcessSample> samples(1);
  samples[0].window = Window::centered(1, 2.0);
  const auto r = laplace_functional(samples, [](std::span<const double> p) { return p[0] * p[0]; },
                                    Window::centered(1, 2.0), 1.0);
  EXPECT_NEAR(std::log(r.poisson_prediction), std::sqrt(kPi) * std::erf(1.0) - 2.0, 1e-6);
}

TEST(Correlation, OneCorrelationOfPoissonIsFlat) {
  Rng rng(9);
  const auto w = Window::centered(1, 4.0);
  const double lambda = 1.5;
  const auto samples = synthetic_poisson_samples(w, lambda, 4000, rng);
  const auto r = correlation_estimate(samples, w, 1, 4, lambda);
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_NEAR(r.values[b], lambda, 4.0 * r.standard_errors[b]);
    EXPECT_FALSE(r.undersampled[b]);
  }
  EXPECT_GT(r.p_value, 1e-3);
  // ∫_W R₁ equals the mean count.
  double integral = 0.0;
  for (std::size_t b = 0; b < 4; ++b) integral += r.values[b] * (r.bin_edges[b + 1] - r.bin_edges[b]);
  EXPECT_NEAR(integral, count_statistics(samples, w).mean(), 1e-12);
}

TEST(Correlation, TwoCorrelationOfPoissonHasNoHole) {
  Rng rng(10);
  const auto w = Window::centered(1, 3.0);
  const double lambda = 1.0;
  const auto samples = synthetic_poisson_samples(w, lambda, 6000, rng);
  const auto r = correlation_estimate(samples, w, 2, 3, lambda * lambda);
  for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(r.values[b], 1.0, 4.0 * r.standard_errors[b]);
  EXPECT_GT(r.p_value, 1e-3);
}

TEST(Correlation, ThreeCorrelationOfPoissonIsFlat) {
  Rng rng(11);
  const auto w = Window::centered(1, 3.0);
  const auto samples = synthetic_poisson_samples(w, 1.0, 6000, rng);
  const auto r = correlation_estimate(samples, w, 3, 3, 1.0);
  for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(r.values[b], 1.0, 4.0 * r.standard_errors[b]);
}

TEST(Correlation, ReferenceVolumesPartitionTheProductWindow) {
  std::vector<LocalProcessSample> samples(1);
  const auto w = Window::centered(1, 2.5);
  samples[0].window = w;
  double pair_total = 0.0, triple_total = 0.0;
  for (double v : correlation_estimate(samples, w, 2, 7).reference_volume) pair_total += v;
  for (double v : correlation_estimate(samples, w, 3, 7).reference_volume) triple_total += v;
  EXPECT_NEAR(pair_total, 2.5 * 2.5, 1e-12);
  EXPECT_NEAR(triple_total, 2.5 * 2.5 * 2.5, 1e-12);
}

TEST(Correlation, TwoDimensionalPairVolumeMatchesClosedForm) {
  // For the unit square, the pair-difference density is (1-|u|)(1-|v|); the
  // mass with |u| < 1/4 ... computed instead via r < ε: ≈ π ε² for small ε.
  std::vector<LocalProcessSample> samples(1);
  const auto w = Window::centered(2, 1.0);
  samples[0].window = w;
  const auto r = correlation_estimate(samples, w, 2, 20);
  const double eps = r.bin_edges[1];
  // Exact: ∫_{|u|<ε} (1-|u₁|)(1-|u₂|) du = π ε² - 8ε³/3 + ε⁴/2.
  EXPECT_NEAR(r.reference_volume[0], kPi * eps * eps - 8.0 * eps * eps * eps / 3.0 + std::pow(eps, 4) / 2.0,
              2e-4);
}

TEST(Correlation, EmptySamplesGiveZero) {
  std::vector<LocalProcessSample> samples(40);
  for (auto& s : samples) s.window = Window::centered(1, 2.0);
  const auto r = correlation_estimate(samples, Window::centered(1, 2.0), 1, 5);
  for (double v : r.values) EXPECT_EQ(v, 0.0);
  for (bool u : r.undersampled) EXPECT_TRUE(u);
}

TEST(Correlation, FiniteNFactor) {
  EXPECT_EQ(finite_n_factor(10, 1), 1.0);
  EXPECT_DOUBLE_EQ(finite_n_factor(4, 2), 0.75);
  EXPECT_DOUBLE_EQ(finite_n_factor(5, 3), 5.0 * 4.0 * 3.0 / 125.0);
  EXPECT_EQ(finite_n_factor(0, 3), 1.0);
}

TEST(EmpiricalField, MatchesDefinitionAndStaysBelowG0) {
  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> x(30);
    for (double& c : x) c = rng.uniform(-1.0, 1.0);
    const auto conf = points(x, unit_gaussian());
    const double y = rng.uniform(-1.0, 1.0);
    double direct = 0.0;
    for (double c : x) direct += std::exp(-kPi * (y - c) * (y - c));
    direct /= 30.0;
    const double h = empirical_field(conf, unit_gaussian(), std::span<const double>(&y, 1));
    EXPECT_NEAR(h, direct, 1e-14);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 1.0);
  }
}

TEST(EmpiricalField, AgreesWithBinnedGridFieldWithinInterpolationError) {
  const Grid grid(1, 2.0, 2048);
  FieldConvolver conv(grid, unit_gaussian());
  Rng rng(13);
  // |g'| ≤ √(2π/e) for the unit Gaussian; binning moves a particle by ≤ h/2.
  const double tolerance = std::sqrt(2 * kPi / std::exp(1.0)) * grid.spacing();
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> x(50);
    for (double& c : x) c = rng.uniform(-1.0, 1.0);
    const auto conf = points(x, unit_gaussian());
    const std::vector<ParticleConfiguration> one = {conf};
    const auto binned = estimate_marginal(one, grid);
    const GridField h(grid, conv.potential(binned.values()));
    for (double y : {-0.7, 0.0, 0.33}) {
      const std::span<const double> p(&y, 1);
      EXPECT_NEAR(interpolate(h, p), empirical_field(conf, unit_gaussian(), p), tolerance);
    }
  }
}

class FluctuationTest : public ::testing::Test {
 protected:
  static const ThermalSolution& solution() {
    static const ThermalSolution sol = [] {
      ThermalOptions opt;
      opt.tol = 1e-10;
      return solve_thermal_equilibrium(unit_gaussian(), make_quadratic_potential(1, 1.0), 5.0,
                                       Grid(1, 3.0, 512), opt);
    }();
    return sol;
  }
  static const GibbsRun& run() {
    static const GibbsRun r = [] {
      auto c = ChainConfig::with_beta(50, 0.1);
      c.burn_in = 200;
      c.samples = 1500;
      c.seed = 3;
      return sample_gibbs(c, unit_gaussian(), make_quadratic_potential(1, 1.0));
    }();
    return r;
  }
};

TEST_F(FluctuationTest, HugeEpsilonIsDeterministicallySatisfied) {
  const FluctuationProbe probe(50, 0.1, solution(), unit_gaussian(), {{0.0}, {0.5}});
  const auto r = concentration_check(run().samples, probe, 4.5);
  EXPECT_EQ(r.empirical_probability, 0.0);
  EXPECT_TRUE(r.deterministic);
  EXPECT_TRUE(r.satisfied);
  EXPECT_EQ(r.ceiling_violations, 0u);
}

TEST_F(FluctuationTest, BoundFormulaAndInverse) {
  const FluctuationProbe probe(50, 0.1, solution(), unit_gaussian(), {{0.0}});
  const double eps = epsilon_for_bound(50, 0.1, 1.0, 1, std::exp(-5.0));
  const auto r = concentration_check(run().samples, probe, eps);
  EXPECT_NEAR(r.theoretical_bound, std::exp(-5.0), 1e-12);
  EXPECT_NEAR(r.theoretical_bound, std::exp(5.0 * 1.0 - 2500 * 0.1 * eps * eps), 1e-15);
  EXPECT_FALSE(r.vacuous);
  EXPECT_TRUE(r.satisfied);
  // Below g(0) k / √N the bound is vacuous.
  const auto v = concentration_check(run().samples, probe, 0.1);
  EXPECT_TRUE(v.vacuous);
  EXPECT_TRUE(v.satisfied);
}

TEST_F(FluctuationTest, MismatchedMetadataIsConfigError) {
  EXPECT_THROW(FluctuationProbe(60, 0.1, solution(), unit_gaussian(), {{0.0}}), ConfigError);
  const FluctuationProbe probe(50, 0.1, solution(), unit_gaussian(), {{0.0}});
  const std::vector<ParticleConfiguration> wrong = {points({0.0, 0.1}, unit_gaussian())};
  EXPECT_THROW(concentration_check(wrong, probe, 1.0), ConfigError);
}

TEST_F(FluctuationTest, ZeroKernelHasNoFluctuation) {
  const auto zero = make_zero_kernel(1);
  const FluctuationProbe probe(50, 0.1, solution(), zero, {{0.0}, {0.2}});
  const auto r = concentration_check(run().samples, probe, 1e-3);
  EXPECT_EQ(r.empirical_probability, 0.0);
  EXPECT_TRUE(r.satisfied);
  const auto l = laplace_fluctuation_check(run().samples, probe);
  EXPECT_EQ(l.log_empirical, 0.0);
  EXPECT_EQ(l.abs_log_ratio, 0.0);
}

TEST_F(FluctuationTest, LaplaceRatioWithinBoundScalesWithK) {
  const FluctuationProbe one(50, 0.1, solution(), unit_gaussian(), {{0.0}});
  const FluctuationProbe three(50, 0.1, solution(), unit_gaussian(), {{0.0}, {0.4}, {-0.6}});
  const auto r1 = laplace_fluctuation_check(run().samples, one);
  const auto r3 = laplace_fluctuation_check(run().samples, three);
  EXPECT_DOUBLE_EQ(r1.bound, 10.0);
  EXPECT_DOUBLE_EQ(r3.bound, 30.0);
  EXPECT_TRUE(r1.satisfied);
  EXPECT_TRUE(r3.satisfied);
}

TEST(PoissonSuite, DegenerateWindowIsTriviallyConsistent) {
  Rng rng(14);
  const auto samples = synthetic_poisson_samples(Window::centered(1, 2.0), 1.0, 100, rng);
  const auto stats = count_statistics(samples, Window::centered(1, 0.0));
  EXPECT_EQ(stats.histogram, (std::vector<std::uint64_t>{100}));
  const auto gof = poisson_gof_test(stats, 0.0);
  EXPECT_EQ(gof.tv_distance, 0.0);
  EXPECT_EQ(gof.p_value, 1.0);
}

TEST(PoissonSuite, SummaryDetectsDecreasingDistance) {
  std::vector<PoissonTestRow> rows(3);
  rows[0].N = 1000;
  rows[0].gof.tv_distance = 0.02;
  rows[1].N = 200;
  rows[1].gof.tv_distance = 0.1;
  rows[2].N = 500;
  rows[2].gof.tv_distance = 0.05;
  const auto s = summarize_poisson_convergence(rows);
  EXPECT_TRUE(s.tv_decreasing);
  EXPECT_EQ(s.rows.front().N, 200);
  EXPECT_EQ(s.final_tv, 0.02);
  rows[0].gof.tv_distance = 0.06;
  EXPECT_FALSE(summarize_poisson_convergence(rows).tv_decreasing);
}

TEST(PoissonSuite, IidPointsAreNearlyPoissonForLargeN) {
  // g ≡ 0 control: N i.i.d. points from a density with value ρ at x*, so the
  // local count is Binomial(N, ρ|W|/N) and its TV to Poisson is O(1/N).
  const int n = 2000;
  Rng rng(15);
  const double rho = 0.5;  // uniform on [-1, 1]
  const double centre = 0.0;
  std::vector<ParticleConfiguration> xs;
  for (int s = 0; s < 4000; ++s) {
    std::vector<double> x(static_cast<std::size_t>(n));
    for (double& c : x) c = rng.uniform(-1.0, 1.0);
    xs.push_back(make_configuration(1, std::move(x), make_zero_kernel(1), make_quadratic_potential(1, 1.0)));
  }
  const auto w = Window::centered(1, 4.0);
  const auto local = extract_local_processes(xs, std::span<const double>(&centre, 1), w);
  const auto row = poisson_tests(local, w, rho);
  EXPECT_LE(row.gof.tv_distance, 0.02);
  EXPECT_GT(row.gof.p_value, 1e-3);
}

TEST(Calibration, ReportsOneRatePerTest) {
  const auto r = calibrate_on_synthetic_poisson(Window::centered(1, 2.0), 1.0, 200, 20, 1);
  EXPECT_EQ(r.tests.size(), r.rejection_rates.size());
  for (double rate : r.rejection_rates) {
    EXPECT_GE(rate, 0.0);
    EXPECT_LE(rate, 1.0);
  }
  EXPECT_EQ(at(r.level), 0.05);
}
