#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "plab/errors.hpp"
#include "plab/fields.hpp"
#include "plab/rng.hpp"
#include "plab/sampler.hpp"
#include "plab/stats.hpp"

using namespace plab;

namespace {

const double kPi = std::numbers::pi;

const KernelSpec& unit_gaussian() {
  static const KernelSpec k = make_gaussian_kernel(1, 1.0, 1.0);
  return k;
}

const PotentialSpec& quadratic() {
  static const PotentialSpec v = make_quadratic_potential(1, 1.0);
  return v;
}

const KernelSpec& zero_kernel() {
  static const KernelSpec k = make_zero_kernel(1);
  return k;
}

// Independent second implementation of H_N for the unit Gaussian and V = x².
double naive_hamiltonian(const std::vector<double>& x) {
  const std::size_t n = x.size();
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) h += std::exp(-kPi * (x[i] - x[j]) * (x[i] - x[j]));
  for (double xi : x) h += static_cast<double>(n) * xi * xi;
  return h;
}

ParticleConfiguration config(std::vector<double> x, const KernelSpec& k = unit_gaussian()) {
  return make_configuration(1, std::move(x), k, quadratic());
}

// Draws from a grid density: node by inverse CDF, then uniform within the cell.
std::vector<double> draw_from(const DensityField& mu, std::size_t n, Rng& rng) {
  const Grid& grid = mu.grid();
  std::vector<double> cdf(grid.size());
  double run = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) cdf[i] = (run += mu[i] * grid.cell_volume());
  std::vector<double> out(n);
  for (auto& x : out) {
    const double u = rng.uniform() * run;
    const auto i = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    x = grid.coordinate(static_cast<int>(std::min(i, grid.size() - 1))) +
        (rng.uniform() - 0.5) * grid.spacing();
  }
  return out;
}

const ThermalSolution& thermal50() {
  static const ThermalSolution sol = [] {
    ThermalOptions opt;
    opt.tol = 1e-12;
    return solve_thermal_equilibrium(unit_gaussian(), quadratic(), 50.0, Grid(1, 2.0, 1024), opt);
  }();
  return sol;
}

}  // namespace

TEST(Hamiltonian, TwoParticlesAtOriginCountOrderedPairs) {
  EXPECT_DOUBLE_EQ(hamiltonian(config({0.0, 0.0}), unit_gaussian(), quadratic(), 2), 2.0);
}

TEST(Hamiltonian, SingleParticleHasNoPairTerm) {
  EXPECT_DOUBLE_EQ(hamiltonian(config({0.7}), unit_gaussian(), quadratic(), 1), 0.49);
}

TEST(Hamiltonian, MatchesNaiveDoubleLoop) {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> x(5);
    for (double& c : x) c = rng.uniform(-1.5, 1.5);
    const double direct = hamiltonian(config(x), unit_gaussian(), quadratic(), 5);
    EXPECT_NEAR(direct, naive_hamiltonian(x), 1e-12 * std::abs(direct));
  }
}

TEST(Hamiltonian, CachesAgreeWithRecomputation) {
  const auto x = config({0.1, -0.4, 0.9});
  EXPECT_NEAR(x.pair_energy + 3.0 * x.potential_sum, naive_hamiltonian({0.1, -0.4, 0.9}), 1e-13);
}

TEST(Hamiltonian, RejectsWrongParticleCount) {
  EXPECT_THROW(hamiltonian(config({0.0, 1.0}), unit_gaussian(), quadratic(), 3), ShapeError);
}

TEST(NextOrderEnergy, SingleParticleIsEnergyMinusTwiceField) {
  const Grid grid(1, 2.0, 256);
  const auto mu = DensityField::from_function(grid, [](std::span<const double> x) {
    return std::exp(-4.0 * x[0] * x[0]);
  });
  // Oracle: direct node double sums (no FFT).
  double energy = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    for (std::size_t j = 0; j < grid.size(); ++j) {
      const double r = grid.coordinate(static_cast<int>(i)) - grid.coordinate(static_cast<int>(j));
      energy += mu[i] * mu[j] * std::exp(-kPi * r * r);
    }
  energy *= grid.cell_volume() * grid.cell_volume();
  const int node = 140;
  const double x = grid.coordinate(node);
  double field = 0.0;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const double r = x - grid.coordinate(static_cast<int>(j));
    field += mu[j] * std::exp(-kPi * r * r) * grid.cell_volume();
  }
  EXPECT_NEAR(next_order_energy(config({x}), mu, unit_gaussian()), energy - 2.0 * field, 1e-12);
}

TEST(NextOrderEnergy, DeltaMeasureGivesMinusHalfG0) {
  const Grid grid(1, 2.0, 1024);
  const double origin = 0.0;
  const auto mu = DensityField::delta(grid, std::span<const double>(&origin, 1));
  // The delta sits at h/2, so h^δ(0) = g(h/2) ≈ g(0) up to O(h²).
  EXPECT_NEAR(next_order_energy(config({0.0, 0.0}), mu, unit_gaussian()), -0.5, 1e-4);
}

TEST(NextOrderEnergy, FieldTermAveragesToTwiceEnergy) {
  const auto& sol = thermal50();
  const SplittingEvaluator eval(sol, unit_gaussian(), quadratic());
  Rng rng(3);
  const std::size_t n = 200;
  std::vector<double> terms;
  for (int rep = 0; rep < 100; ++rep) {
    const auto x = draw_from(sol.density, n, rng);
    double s = 0.0;
    for (double xi : x) s += eval.field_at(std::span<const double>(&xi, 1));
    terms.push_back(2.0 * s / static_cast<double>(n));
  }
  const double se = std::sqrt(variance(terms) / static_cast<double>(terms.size()));
  EXPECT_NEAR(mean(terms), 2.0 * eval.interaction_energy(), 3.0 * se + 1e-6);
}

TEST(NextOrderEnergy, ParticleOutsideBoxIsDomainError) {
  const Grid grid(1, 1.0, 64);
  EXPECT_THROW(next_order_energy(config({0.0, 1.5}), DensityField::uniform(grid), unit_gaussian()),
               DomainError);
}

TEST(Splitting, ZeroKernelIsExact) {
  ThermalOptions opt;
  opt.tol = 1e-12;
  const auto sol = solve_thermal_equilibrium(zero_kernel(), quadratic(), 10.0, Grid(1, 2.5, 512), opt);
  const SplittingEvaluator eval(sol, zero_kernel(), quadratic());
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x(7);
    for (double& c : x) c = rng.uniform(-2.2, 2.2);
    EXPECT_LE(eval.residual(config(x, zero_kernel())).relative_gap, 1e-8);
  }
}

TEST(Splitting, ThreeRandomParticlesAtTheta50) {
  const SplittingEvaluator eval(thermal50(), unit_gaussian(), quadratic());
  Rng rng(6);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> x(3);
    for (double& c : x) c = rng.uniform(-1.8, 1.8);
    const auto r = eval.residual(config(x));
    EXPECT_LE(r.relative_gap, 1e-6);
    EXPECT_NEAR(r.direct_H, naive_hamiltonian(x), 1e-12 * std::max(1.0, std::abs(r.direct_H)));
  }
}

TEST(Splitting, AllParticlesAtTheMode) {
  const auto& sol = thermal50();
  const auto& values = sol.density.values();
  const auto mode = static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
  const double x = sol.density.grid().coordinate(mode);
  EXPECT_LE(splitting_residual(config({x, x, x, x}), sol, unit_gaussian(), quadratic()).relative_gap,
            1e-6);
}

TEST(Splitting, BracketedFormDiffersExceptForOneParticle) {
  const SplittingEvaluator eval(thermal50(), unit_gaussian(), quadratic());
  const auto one = eval.residual(config({0.3}));
  EXPECT_NEAR(one.bracketed_H, one.reconstructed_H, 1e-12);
  const auto three = eval.residual(config({0.3, -0.2, 0.5}));
  EXPECT_GT(three.bracketed_gap, 1e-3);
  EXPECT_LE(three.relative_gap, 1e-6);
}

TEST(ChainConfig, EnforcesThetaConsistency) {
  auto c = ChainConfig::with_beta(10, 0.5);
  EXPECT_DOUBLE_EQ(c.theta, 5.0);
  EXPECT_NO_THROW(c.validate());
  c.theta = 5.0000001;
  EXPECT_THROW(c.validate(), ConfigError);
  auto b = ChainConfig::with_exponent(100, 0.5);
  EXPECT_DOUBLE_EQ(b.beta, 0.1);
  b.burn_in = 0;
  EXPECT_THROW(b.validate(), ConfigError);
  b.burn_in = 1;
  b.thinning = 0;
  EXPECT_THROW(b.validate(), ConfigError);
}

TEST(Gibbs, ZeroKernelVarianceMatchesGaussianTarget) {
  auto c = ChainConfig::with_beta(20, 0.5);
  c.burn_in = 200;
  c.samples = 3000;
  c.seed = 21;
  const auto run = sample_gibbs(c, zero_kernel(), quadratic());
  std::vector<double> second_moment;
  for (const auto& x : run.samples) {
    double s = 0.0;
    for (double v : x.positions) s += v * v;
    second_moment.push_back(s / static_cast<double>(x.size()));
  }
  const double se = std::sqrt(variance(second_moment) / effective_sample_size(second_moment));
  EXPECT_NEAR(mean(second_moment), 1.0 / (2.0 * c.theta), 3.0 * se);
  EXPECT_GT(run.acceptance_rate(), 0.2);
  EXPECT_LT(run.acceptance_rate(), 0.5);
}

TEST(Gibbs, TwoParticlesRepel) {
  auto c = ChainConfig::with_beta(2, 500.0);
  c.burn_in = 500;
  c.samples = 4000;
  c.seed = 8;
  auto mean_gap = [&](const KernelSpec& k) {
    const auto run = sample_gibbs(c, k, quadratic());
    double s = 0.0;
    for (const auto& x : run.samples) s += std::abs(x.positions[0] - x.positions[1]);
    return s / static_cast<double>(run.samples.size());
  };
  EXPECT_GT(mean_gap(unit_gaussian()), 1.5 * mean_gap(zero_kernel()));
}

TEST(Gibbs, IdenticalSeedsGiveIdenticalStreams) {
  auto c = ChainConfig::with_beta(15, 0.4);
  c.burn_in = 20;
  c.samples = 30;
  c.chains = 3;
  c.seed = 99;
  const auto a = sample_gibbs(c, unit_gaussian(), quadratic(), 1);
  const auto b = sample_gibbs(c, unit_gaussian(), quadratic(), 3);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t s = 0; s < a.samples.size(); ++s) {
    EXPECT_EQ(a.samples[s].positions, b.samples[s].positions);
    EXPECT_EQ(a.chain_of_sample[s], b.chain_of_sample[s]);
  }
  c.seed = 100;
  const auto d = sample_gibbs(c, unit_gaussian(), quadratic(), 1);
  EXPECT_NE(a.samples.back().positions, d.samples.back().positions);
  // Distinct chains see distinct streams.
  EXPECT_NE(a.samples[29].positions, a.samples[59].positions);
}

TEST(Gibbs, IncrementalEnergyStaysConsistent) {
  auto c = ChainConfig::with_beta(40, 0.25);
  c.burn_in = 50;
  c.samples = 200;
  c.seed = 4;
  const auto run = sample_gibbs(c, unit_gaussian(), quadratic());
  EXPECT_GT(run.chains[0].cache_checks, 0);
  EXPECT_LE(run.chains[0].max_cache_drift, 1e-9);
  for (const auto& x : {run.samples.front(), run.samples.back()}) {
    const double direct = hamiltonian(x, unit_gaussian(), quadratic(), 40);
    EXPECT_NEAR(x.pair_energy + 40.0 * x.potential_sum, direct, 1e-9 * std::abs(direct));
  }
  EXPECT_EQ(run.chains[0].energy_trace.size(), 200u);
  EXPECT_GE(run.chains[0].autocorrelation_time, 1.0);
}

TEST(Gibbs, ThinningAndSweepIndices) {
  auto c = ChainConfig::with_beta(5, 1.0);
  c.burn_in = 7;
  c.thinning = 3;
  c.samples = 4;
  const auto run = sample_gibbs(c, unit_gaussian(), quadratic());
  EXPECT_EQ(run.sweep_of_sample, (std::vector<std::uint64_t>{10, 13, 16, 19}));
  EXPECT_EQ(run.chains[0].proposed, 5u * 12u);
}

TEST(Gibbs, DetailedBalanceOnFiveBins) {
  // N = 1: target ∝ exp(-θ x²). Coarse-grained flows of a reversible
  // stationary chain are symmetric, and bin occupancies match the target.
  auto c = ChainConfig::with_beta(1, 2.0);
  c.burn_in = 500;
  c.samples = 200000;
  c.seed = 17;
  c.proposal_scale = 0.6;
  c.tune = false;
  const auto run = sample_gibbs(c, zero_kernel(), quadratic());
  const double sd = 1.0 / std::sqrt(2.0 * c.theta);
  const std::vector<double> edges = {-0.8 * sd, -0.25 * sd, 0.25 * sd, 0.8 * sd};
  auto bin = [&](double x) {
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin());
  };
  double flow[5][5] = {};
  double occupancy[5] = {};
  int prev = bin(run.samples[0].positions[0]);
  const double t = static_cast<double>(run.samples.size() - 1);
  for (std::size_t s = 1; s < run.samples.size(); ++s) {
    const int cur = bin(run.samples[s].positions[0]);
    flow[prev][cur] += 1.0 / t;
    occupancy[cur] += 1.0 / t;
    prev = cur;
  }
  for (int a = 0; a < 5; ++a)
    for (int b = a + 1; b < 5; ++b)
      EXPECT_NEAR(flow[a][b], flow[b][a], 4.0 * std::sqrt((flow[a][b] + flow[b][a]) / t) + 1e-12)
          << a << "->" << b;
  auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  std::vector<double> cuts = {-INFINITY};
  for (double e : edges) cuts.push_back(e / sd);
  cuts.push_back(INFINITY);
  const double tau = 10.0;  // generous allowance for autocorrelated occupancy
  for (int a = 0; a < 5; ++a) {
    const double p = phi(cuts[static_cast<std::size_t>(a) + 1]) - phi(cuts[static_cast<std::size_t>(a)]);
    EXPECT_NEAR(occupancy[a], p, 4.0 * std::sqrt(tau * p * (1 - p) / t)) << "bin " << a;
  }
}

TEST(Marginal, SingleParticleAtOriginIsDelta) {
  const Grid grid(1, 1.0, 16);
  const std::vector<ParticleConfiguration> samples = {config({0.0})};
  const auto rho = estimate_marginal(samples, grid);
  const double origin = 0.0;
  const auto delta = DensityField::delta(grid, std::span<const double>(&origin, 1));
  EXPECT_EQ(rho.values(), delta.values());
}

TEST(Marginal, AllMassOutsideIsDomainError) {
  const std::vector<ParticleConfiguration> samples = {config({5.0})};
  EXPECT_THROW(estimate_marginal(samples, Grid(1, 1.0, 16)), DomainError);
}

TEST(Marginal, ZeroKernelHistogramApproachesGaussian) {
  const Grid grid(1, 1.0, 20);
  auto c = ChainConfig::with_beta(10, 1.0);
  c.burn_in = 100;
  c.samples = 8000;
  c.seed = 31;
  const auto run = sample_gibbs(c, zero_kernel(), quadratic());
  auto sup_gap = [&](std::size_t count) {
    const auto rho = estimate_marginal(std::span(run.samples).first(count), grid);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double a = grid.coordinate(i) - grid.spacing() / 2, b = a + grid.spacing();
      const double s = std::sqrt(c.theta);
      const double cell_mass = 0.5 * (std::erf(s * b) - std::erf(s * a)) / std::erf(s * 1.0);
      worst = std::max(worst, std::abs(rho[static_cast<std::size_t>(i)] - cell_mass / grid.spacing()));
    }
    return worst;
  };
  const double coarse = sup_gap(200);
  const double fine = sup_gap(8000);
  EXPECT_LT(fine, coarse);
  EXPECT_LT(fine, 0.1);
}

TEST(Marginal, GaussianKernelMatchesThermalSolution) {
  const Grid grid(1, 1.6, 64);
  ThermalOptions opt;
  opt.tol = 1e-10;
  const auto sol = solve_thermal_equilibrium(unit_gaussian(), quadratic(), 100.0, grid, opt);
  auto c = ChainConfig::with_beta(100, 1.0);
  c.burn_in = 200;
  c.samples = 200;
  c.thinning = 2;
  c.seed = 12;
  const auto run = sample_gibbs(c, unit_gaussian(), quadratic());
  const auto rho = estimate_marginal(run.samples, grid);
  EXPECT_LT(l1_distance(rho, sol.density), 0.1);
}

TEST(Marginal, ParticleOneAgreesWithPooled) {
  const Grid grid(1, 1.2, 8);
  auto c = ChainConfig::with_beta(10, 1.0);
  c.burn_in = 200;
  c.samples = 6000;
  c.thinning = 5;
  c.seed = 77;
  const auto run = sample_gibbs(c, unit_gaussian(), quadratic());
  const auto pooled = estimate_marginal(run.samples, grid);
  const auto first = estimate_marginal_of_particle(run.samples, grid, 0);
  const double n = static_cast<double>(run.samples.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double p = pooled[i] * grid.cell_volume();
    const double q = first[i] * grid.cell_volume();
    EXPECT_NEAR(q, p, 4.5 * std::sqrt(p * (1 - p) / n) + 1e-12) << "bin " << i;
  }
}

TEST(Confinement, TrivialRadii) {
  const std::vector<ParticleConfiguration> samples = {config({0.1, -0.3}), config({0.2, 0.4})};
  EXPECT_EQ(confinement_probability(samples, 100.0), 0.0);
  EXPECT_EQ(confinement_probability(samples, 0.0), 1.0);
  EXPECT_EQ(confinement_probability(samples, 0.35), 0.5);
}

TEST(Confinement, ZeroKernelMatchesIndependentOracle) {
  auto c = ChainConfig::with_beta(10, 10.0);
  c.burn_in = 200;
  c.samples = 5000;
  c.thinning = 2;
  c.seed = 5;
  const auto run = sample_gibbs(c, zero_kernel(), quadratic());
  auto oracle = [&](double r) {
    const double tail = std::erfc(r * std::sqrt(c.theta));  // 2 Φ̄(r √(2θ))
    return 1.0 - std::pow(1.0 - tail, c.N);
  };
  EXPECT_NEAR(confinement_probability(run.samples, 1.0), oracle(1.0), 1e-12);
  const double r = 0.15;
  std::vector<double> hits;
  for (const auto& x : run.samples) {
    double any = 0.0;
    for (double v : x.positions) any = std::max(any, std::abs(v) > r ? 1.0 : 0.0);
    hits.push_back(any);
  }
  const double se = std::sqrt(variance(hits) / effective_sample_size(hits));
  EXPECT_NEAR(confinement_probability(run.samples, r), oracle(r), 3.0 * se);
}

TEST(SampleDump, RoundTrip) {
  auto c = ChainConfig::with_beta(4, 1.0);
  c.burn_in = 3;
  c.samples = 5;
  c.chains = 2;
  const auto run = sample_gibbs(c, unit_gaussian(), quadratic());
  const auto path = std::filesystem::temp_directory_path() / "plab_samples_roundtrip.bin";
  write_samples_binary(path, run);
  const auto dump = read_samples_binary(path);
  ASSERT_EQ(dump.positions.size(), 10u);
  EXPECT_EQ(dump.N, 4);
  EXPECT_EQ(dump.dimension, 1);
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_EQ(dump.positions[s], run.samples[s].positions);
    EXPECT_EQ(dump.chain[s], static_cast<std::uint64_t>(run.chain_of_sample[s]));
    EXPECT_EQ(dump.sweep[s], run.sweep_of_sample[s]);
  }
  std::filesystem::remove(path);
}
