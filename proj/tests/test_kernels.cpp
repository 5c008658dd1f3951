#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "plab/errors.hpp"
#include "plab/kernels.hpp"

using namespace plab;

namespace {

const double kPi = std::numbers::pi;

// Composite Simpson on [a, b] with n (even) panels.
template <class F>
double simpson(F&& f, double a, double b, int n) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

double at(const KernelSpec& k, std::vector<double> x) { return k(x); }
double fourier_at(const KernelSpec& k, std::vector<double> xi) { return k.fourier(xi); }

}  // namespace

TEST(GaussianKernel, UnitInstanceIsSelfDual) {
  const auto g = make_gaussian_kernel(1, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(g.g0(), 1.0);
  for (double xi : {0.0, 0.25, 0.7, 1.9})
    EXPECT_NEAR(fourier_at(g, {xi}), std::exp(-kPi * xi * xi), 1e-15);
  const double mass = simpson([&](double xi) { return fourier_at(g, {xi}); }, -8.0, 8.0, 4000);
  EXPECT_NEAR(mass, 1.0, 1e-12);
}

TEST(GaussianKernel, IsEven) {
  const auto g = make_gaussian_kernel(1, 1.0, 1.0);
  for (double x : {0.3, 1.7}) EXPECT_EQ(at(g, {x}), at(g, {-x}));
}

TEST(GaussianKernel, TwoDimensionalFourierMassEqualsG0) {
  const auto g = make_gaussian_kernel(2, 2.0, 1.0);
  // Tensor Simpson over [-6, 6]^2 of the closed-form transform.
  const double mass = simpson(
      [&](double a) {
        return simpson([&](double b) { return fourier_at(g, {a, b}); }, -6.0, 6.0, 600);
      },
      -6.0, 6.0, 600);
  EXPECT_NEAR(mass, 2.0, 1e-10);
  EXPECT_DOUBLE_EQ(g.g0(), 2.0);
}

TEST(GaussianKernel, RejectsNonPositiveParameters) {
  EXPECT_THROW(make_gaussian_kernel(1, 0.0, 1.0), ParameterError);
  EXPECT_THROW(make_gaussian_kernel(1, 1.0, -1.0), ParameterError);
  EXPECT_THROW(make_gaussian_kernel(0, 1.0, 1.0), ParameterError);
}

TEST(MaternKernel, TransformMatchesDirectQuadrature) {
  // ĝ(ξ) = 2 ∫_0^∞ g(x) cos(2π x ξ) dx for an even 1-d kernel.
  const auto g = make_matern_kernel(1, 1.5, 0.8);
  for (double xi : {0.0, 0.3, 1.1, 2.5}) {
    const double direct = 2.0 * simpson([&](double x) { return at(g, {x}) * std::cos(2 * kPi * x * xi); },
                                         0.0, 12.0, 24000);
    EXPECT_NEAR(fourier_at(g, {xi}), direct, 1e-10) << "xi = " << xi;
  }
  EXPECT_DOUBLE_EQ(g.g0(), 1.5);
}

TEST(MaternKernel, ThreeDimensionalTransformAtOrigin) {
  // ĝ(0) = ∫ g = 4π ∫ r² A(1 + a r) e^{-a r} dr = 4π A (2/a³ + 6/a³) = 32π A / a³.
  const double amplitude = 0.7;
  const double width = 1.3;
  const auto g = make_matern_kernel(3, amplitude, width);
  const double a = 2 * kPi / width;
  EXPECT_NEAR(fourier_at(g, {0.0, 0.0, 0.0}), 32 * kPi * amplitude / (a * a * a), 1e-12);
}

TEST(QuadraticPotential, DirectEvaluation) {
  const auto v1 = make_quadratic_potential(1, 1.0);
  EXPECT_DOUBLE_EQ(v1(std::vector<double>{2.0}), 4.0);
  EXPECT_DOUBLE_EQ(v1(std::vector<double>{0.0}), 0.0);
  for (double x : {-3.0, -0.1, 0.5, 7.0}) EXPECT_GE(v1(std::vector<double>{x}), 0.0);
  const auto v2 = make_quadratic_potential(2, 0.5);
  EXPECT_DOUBLE_EQ(v2(std::vector<double>{1.0, 1.0}), 1.0);
  EXPECT_THROW(make_quadratic_potential(1, 0.0), ParameterError);
  EXPECT_THROW(make_quadratic_potential(1, -2.0), ParameterError);
}

TEST(QuadraticPotential, TailEstimateMatchesQuadrature) {
  const auto v = make_quadratic_potential(1, 1.0);
  const double alpha = 0.8;
  const double direct =
      2.0 * simpson([&](double x) { return std::exp(-alpha * x * x); }, 1.0, 12.0, 20000);
  EXPECT_NEAR(v.tail_integral(alpha, 1.0), direct, 1e-12);
}

TEST(QuadraticPotential, IsAdmissible) {
  const auto v = make_quadratic_potential(2, 1.0);
  const auto report = validate_admissible_potential(v, Grid(2, 3.0, 64));
  EXPECT_TRUE(report.passed);
}

TEST(ValidateWeakInteraction, GaussianPassesOnAdequateGrid) {
  const auto g = make_gaussian_kernel(1, 1.0, 1.0);
  const auto report = validate_weak_interaction(g, Grid(1, 6.0, 1024));
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.fourier_mass_error, 1e-6);
}

TEST(ValidateWeakInteraction, CosineFailsPositivity) {
  const KernelSpec cosine(
      "cos", 1, [](std::span<const double> x) { return std::cos(x[0]); },
      [](std::span<const double>) { return 0.0; });
  const auto report = validate_weak_interaction(cosine, Grid(1, 6.0, 256));
  EXPECT_FALSE(report.passed);
  bool positivity_failed = false;
  for (const auto& c : report.checks)
    if (c.name == "positivity_g") positivity_failed = !c.passed;
  EXPECT_TRUE(positivity_failed);
}

TEST(ValidateWeakInteraction, SmallBoxIsInconclusive) {
  const auto g = make_gaussian_kernel(1, 1.0, 1.0);
  EXPECT_THROW(validate_weak_interaction(g, Grid(1, 1.0, 256)), InconclusiveValidation);
}

TEST(ValidateWeakInteraction, ZeroKernelIsNotWeaklyInteracting) {
  EXPECT_FALSE(validate_weak_interaction(make_zero_kernel(1), Grid(1, 2.0, 16)).passed);
}

TEST(ShippedKernels, PassOnDefaultGrid) {
  for (int d : {1, 2}) {
    for (const auto& k : {make_gaussian_kernel(d, 1.0, 1.0), make_matern_kernel(d, 1.0, 1.0)}) {
      const Grid grid = default_validation_grid(k);
      const auto report = validate_weak_interaction(k, grid);
      EXPECT_TRUE(report.passed) << k.name() << " d=" << d;
    }
  }
}

TEST(ShippedKernels, ClosedFormTransformMatchesSampledTransform) {
  for (const auto& k : {make_gaussian_kernel(1, 1.0, 1.0), make_matern_kernel(1, 1.0, 1.0),
                        make_gaussian_kernel(2, 1.0, 1.0)}) {
    const Grid grid = default_validation_grid(k);
    const auto sampled = sampled_fourier_transform(k, grid);
    const std::vector<double> origin(static_cast<std::size_t>(k.dimension()), 0.0);
    const double peak = k.fourier(origin);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
      worst = std::max(worst, std::abs(sampled[i] - k.fourier(box_frequency(grid, i))));
    EXPECT_LE(worst / peak, 1e-6) << k.name() << " d=" << k.dimension();
  }
}

TEST(ShippedKernels, G0IsTheGridMaximum) {
  for (const auto& k : {make_gaussian_kernel(1, 2.0, 0.7), make_matern_kernel(1, 1.0, 1.0)}) {
    const Grid grid(1, 4.0, 258);
    for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_LE(k(grid.node_point(i)), k.g0());
  }
}

TEST(KernelSpec, ScalingIsLinear) {
  const auto g = make_gaussian_kernel(1, 1.0, 1.0);
  const auto g3 = g.scaled(3.0);
  EXPECT_DOUBLE_EQ(g3.g0(), 3.0);
  EXPECT_DOUBLE_EQ(at(g3, {0.4}), 3.0 * at(g, {0.4}));
  EXPECT_DOUBLE_EQ(fourier_at(g3, {0.4}), 3.0 * fourier_at(g, {0.4}));
}

TEST(HalfWidthForTail, SolvesQuadraticExactly) {
  const auto v = make_quadratic_potential(1, 1.0);
  // θ L² = -log(tail)
  EXPECT_NEAR(half_width_for_tail(v, 10.0, 1e-12), std::sqrt(-std::log(1e-12) / 10.0), 1e-12);
}
