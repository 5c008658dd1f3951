#include "plab/kernels.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>

#include "plab/errors.hpp"
#include "plab/fftw_support.hpp"

namespace plab {
namespace {

double squared_norm(std::span<const double> x) {
  double s = 0.0;
  for (double c : x) s += c * c;
  return s;
}

void require_dimension(int dimension) {
  if (dimension < 1) throw ParameterError("dimension must be positive");
}

}  // namespace

KernelSpec::KernelSpec(std::string name, int dimension, Evaluator eval, Evaluator fourier_eval)
    : name_(std::move(name)),
      dimension_(dimension),
      eval_(std::move(eval)),
      fourier_eval_(std::move(fourier_eval)) {
  require_dimension(dimension);
  if (!eval_ || !fourier_eval_) throw ParameterError("kernel evaluators must be callable");
  const std::vector<double> origin(static_cast<std::size_t>(dimension), 0.0);
  g0_ = eval_(origin);
}

KernelSpec KernelSpec::radial(std::string name, int dimension, RadialProfile profile,
                              RadialProfile fourier_profile) {
  KernelSpec k(
      std::move(name), dimension,
      [profile](std::span<const double> x) { return profile(squared_norm(x)); },
      [fourier_profile](std::span<const double> xi) { return fourier_profile(squared_norm(xi)); });
  k.profile_ = std::move(profile);
  k.fourier_profile_ = std::move(fourier_profile);
  return k;
}

KernelSpec KernelSpec::scaled(double factor) const {
  KernelSpec k = *this;
  auto eval = eval_;
  auto fourier = fourier_eval_;
  k.eval_ = [eval, factor](std::span<const double> x) { return factor * eval(x); };
  k.fourier_eval_ = [fourier, factor](std::span<const double> xi) { return factor * fourier(xi); };
  if (profile_) {
    auto p = profile_;
    auto fp = fourier_profile_;
    k.profile_ = [p, factor](double r2) { return factor * p(r2); };
    k.fourier_profile_ = [fp, factor](double k2) { return factor * fp(k2); };
  }
  k.g0_ = factor * g0_;
  k.zero_ = zero_ || factor == 0.0;
  return k;
}

KernelSpec make_gaussian_kernel(int dimension, double amplitude, double width) {
  require_dimension(dimension);
  if (!(amplitude > 0.0)) throw ParameterError("gaussian kernel amplitude must be positive");
  if (!(width > 0.0)) throw ParameterError("gaussian kernel width must be positive");
  const double pi = std::numbers::pi;
  const double inv_w2 = 1.0 / (width * width);
  const double fourier_scale = amplitude * std::pow(width, dimension);
  const double w2 = width * width;
  return KernelSpec::radial(
      "gaussian", dimension,
      [amplitude, inv_w2, pi](double r2) { return amplitude * std::exp(-pi * r2 * inv_w2); },
      [fourier_scale, w2, pi](double k2) { return fourier_scale * std::exp(-pi * w2 * k2); });
}

KernelSpec make_matern_kernel(int dimension, double amplitude, double width) {
  require_dimension(dimension);
  if (!(amplitude > 0.0)) throw ParameterError("matern kernel amplitude must be positive");
  if (!(width > 0.0)) throw ParameterError("matern kernel width must be positive");
  const double pi = std::numbers::pi;
  const double a = 2.0 * pi / width;
  const double d = dimension;
  const double c_d = std::pow(2.0, d) * std::pow(pi, d / 2.0) *
                     boost::math::tgamma((d + 3.0) / 2.0) / boost::math::tgamma(1.5);
  const double fourier_scale = amplitude * c_d * a * a * a;
  const double power = (d + 3.0) / 2.0;
  return KernelSpec::radial(
      "matern", dimension,
      [amplitude, a](double r2) {
        const double ar = a * std::sqrt(r2);
        return amplitude * (1.0 + ar) * std::exp(-ar);
      },
      [fourier_scale, a, pi, power](double k2) {
        return fourier_scale / std::pow(a * a + 4.0 * pi * pi * k2, power);
      });
}

KernelSpec make_zero_kernel(int dimension) {
  KernelSpec k = KernelSpec::radial(
      "zero", dimension, [](double) { return 0.0; }, [](double) { return 0.0; });
  k.zero_ = true;
  return k;
}

PotentialSpec::PotentialSpec(std::string name, int dimension, Evaluator eval, double alpha0,
                             PotentialGrowth growth, TailEstimate tail)
    : name_(std::move(name)),
      dimension_(dimension),
      eval_(std::move(eval)),
      alpha0_(alpha0),
      growth_(growth),
      tail_(std::move(tail)) {
  require_dimension(dimension);
  if (!(alpha0 > 0.0)) throw ParameterError("alpha0 must be positive");
  if (!eval_) throw ParameterError("potential evaluator must be callable");
}

PotentialSpec PotentialSpec::shifted(double constant) const {
  auto eval = eval_;
  auto tail = tail_;
  return PotentialSpec(
      name_ + "+const", dimension_,
      [eval, constant](std::span<const double> x) { return eval(x) + constant; }, alpha0_,
      growth_,
      [tail, constant](double alpha, double radius) {
        return std::exp(-alpha * constant) * tail(alpha, radius);
      });
}

PotentialSpec make_quadratic_potential(int dimension, double stiffness) {
  require_dimension(dimension);
  if (!(stiffness > 0.0)) throw ParameterError("quadratic potential stiffness must be positive");
  const double d = dimension;
  // ∫_{|x|≥R} exp(-α s |x|²) dx = (π / (α s))^{d/2} Q(d/2, α s R²).
  auto tail = [stiffness, d](double alpha, double radius) {
    const double a = alpha * stiffness;
    return std::pow(std::numbers::pi / a, d / 2.0) *
           boost::math::gamma_q(d / 2.0, a * radius * radius);
  };
  return PotentialSpec(
      "quadratic", dimension,
      [stiffness](std::span<const double> x) { return stiffness * squared_norm(x); }, 1.0,
      PotentialGrowth{stiffness, 2.0, 0.0}, tail);
}

double half_width_for_tail(const PotentialSpec& potential, double theta, double tail) {
  if (!(theta > 0.0) || !(tail > 0.0 && tail < 1.0))
    throw ParameterError("half_width_for_tail needs theta > 0 and tail in (0, 1)");
  const double target = -std::log(tail);
  std::vector<double> x(static_cast<std::size_t>(potential.dimension()), 0.0);
  auto excess = [&](double r) {
    x[0] = r;
    return theta * potential(x) - target;
  };
  double hi = 1.0;
  while (excess(hi) < 0.0) {
    hi *= 2.0;
    if (hi > 1e12) throw ParameterError("potential does not grow enough to reach the tail");
  }
  double lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (excess(mid) < 0.0 ? lo : hi) = mid;
  }
  return hi;
}

namespace {

// First r > 0 with f(r e₁) <= level, by doubling then bisection.
double decay_radius(const std::function<double(std::span<const double>)>& f, int dimension,
                    double level) {
  std::vector<double> x(static_cast<std::size_t>(dimension), 0.0);
  auto above = [&](double r) {
    x[0] = r;
    return std::abs(f(x)) > level;
  };
  double hi = 1e-3;
  while (above(hi)) {
    hi *= 2.0;
    if (hi > 1e9) throw ParameterError("kernel does not decay");
  }
  double lo = 0.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (above(mid) ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace

Grid default_validation_grid(const KernelSpec& kernel) {
  if (kernel.is_zero()) throw ParameterError("the zero kernel has no validation grid");
  const int d = kernel.dimension();
  const std::vector<double> origin(static_cast<std::size_t>(d), 0.0);
  const double half_width = std::ceil(decay_radius(
      [&](std::span<const double> x) { return kernel(x); }, d, 1e-8 * kernel.g0()));
  const double cutoff = decay_radius([&](std::span<const double> xi) { return kernel.fourier(xi); },
                                     d, 1e-10 * kernel.fourier(origin));
  int m = 256;
  while (m < 4.0 * half_width * cutoff) m *= 2;
  return Grid(d, half_width, m);
}

std::vector<double> box_frequency(const Grid& grid, std::size_t flat) {
  const int d = grid.dimension();
  const int m = grid.points_per_axis();
  std::vector<int> idx(static_cast<std::size_t>(d));
  grid.unflatten(flat, idx);
  std::vector<double> xi(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const int signed_index = idx[static_cast<std::size_t>(k)] - m / 2;
    xi[static_cast<std::size_t>(k)] = signed_index / (2.0 * grid.half_width());
  }
  return xi;
}

std::vector<double> sampled_fourier_transform(const KernelSpec& kernel, const Grid& grid) {
  if (kernel.dimension() != grid.dimension())
    throw ShapeError("kernel and grid dimensions differ");
  const int d = grid.dimension();
  const int m = grid.points_per_axis();
  const std::size_t n = grid.size();

  // Sample with the frequency origin shifted to index M/2: multiplying node j
  // by (-1)^j moves DFT bin k to k + M/2 per axis.
  FftwComplexBuffer buffer(n);
  std::vector<double> x(static_cast<std::size_t>(d));
  std::vector<int> idx(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i) {
    grid.node_point(i, x);
    grid.unflatten(i, idx);
    int parity = 0;
    for (int v : idx) parity += v;
    const double sign = (parity % 2 == 0) ? 1.0 : -1.0;
    buffer[i][0] = sign * kernel(x);
    buffer[i][1] = 0.0;
  }
  std::vector<int> dims(static_cast<std::size_t>(d), m);
  FftwPlan plan = FftwPlan::dft(dims, buffer.data(), buffer.data(), FFTW_FORWARD);
  plan.execute();

  // Node j sits at -L + (j + 1/2) h, so bin k (signed, s = k - M/2) picks up
  // exp(-2πi s (-L + h/2) / (2L)) = exp(iπ s) · exp(-iπ s / M) per axis.
  std::vector<double> out(n);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    grid.unflatten(i, idx);
    double phase = 0.0;
    for (int v : idx) {
      const int s = v - m / 2;
      phase += pi * s - pi * s / m;
    }
    const std::complex<double> value(buffer[i][0], buffer[i][1]);
    out[i] = (value * std::polar(1.0, phase)).real() * grid.cell_volume();
  }
  return out;
}

ValidationReport validate_weak_interaction(const KernelSpec& kernel, const Grid& grid,
                                           double tail_tolerance) {
  if (kernel.dimension() != grid.dimension())
    throw ShapeError("kernel and grid dimensions differ");
  ValidationReport report;
  if (kernel.is_zero() || !(kernel.g0() > 0.0)) {
    report.checks.push_back({"positivity_g", false, kernel.g0()});
    return report;
  }
  const int d = grid.dimension();
  const std::size_t n = grid.size();
  const double g0 = kernel.g0();
  std::vector<double> x(static_cast<std::size_t>(d));
  std::vector<double> neg(static_cast<std::size_t>(d));
  std::vector<int> idx(static_cast<std::size_t>(d));

  double asymmetry = 0.0;
  double min_g = std::numeric_limits<double>::infinity();
  double boundary_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    grid.node_point(i, x);
    grid.unflatten(i, idx);
    for (int k = 0; k < d; ++k) neg[static_cast<std::size_t>(k)] = -x[static_cast<std::size_t>(k)];
    const double gx = kernel(x);
    asymmetry = std::max(asymmetry, std::abs(gx - kernel(neg)));
    min_g = std::min(min_g, gx);
    const bool on_face = std::any_of(idx.begin(), idx.end(), [&](int v) {
      return v == 0 || v == grid.points_per_axis() - 1;
    });
    if (on_face) boundary_max = std::max(boundary_max, std::abs(gx));
  }

  // ĝ on the box frequency lattice ξ_k = k / (2L); the lattice sum of ĝ is the
  // periodised g at 0, which equals g(0) up to the decayed tail.
  const double dxi_volume = std::pow(1.0 / (2.0 * grid.half_width()), d);
  double min_fourier = std::numeric_limits<double>::infinity();
  double fourier_mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = kernel.fourier(box_frequency(grid, i));
    min_fourier = std::min(min_fourier, f);
    fourier_mass += f;
  }
  fourier_mass *= dxi_volume;

  report.checks.push_back({"symmetry", asymmetry <= 1e-14 * g0, asymmetry});
  // Far tails of g and ĝ may underflow to exactly 0 in double precision; only
  // negative values (or a non-positive peak) count as violations.
  const std::vector<double> zero(static_cast<std::size_t>(d), 0.0);
  const double fourier_peak = kernel.fourier(zero);
  report.checks.push_back({"positivity_g", min_g >= 0.0, min_g});
  report.checks.push_back(
      {"positivity_fourier", min_fourier >= 0.0 && fourier_peak > 0.0, min_fourier});
  const bool pointwise_ok = std::all_of(report.checks.begin(), report.checks.end(),
                                        [](const ValidationCheck& c) { return c.passed; });

  // A pointwise violation is a definite failure whatever the box. A pass, and
  // the mass comparison, are only meaningful once g and ĝ have decayed.
  if (pointwise_ok) {
    std::vector<double> nyquist(static_cast<std::size_t>(d), 0.0);
    nyquist[0] = grid.points_per_axis() / (4.0 * grid.half_width());
    if (boundary_max > tail_tolerance * g0)
      throw InconclusiveValidation("kernel has not decayed at the box faces: max |g| = " +
                                   std::to_string(boundary_max));
    if (std::abs(kernel.fourier(nyquist)) > tail_tolerance * std::max(fourier_peak, g0))
      throw InconclusiveValidation("kernel transform has not decayed at the grid Nyquist frequency");
  }
  report.fourier_mass_error = std::abs(fourier_mass - g0) / g0;
  report.checks.push_back(
      {"fourier_mass", report.fourier_mass_error <= tail_tolerance, report.fourier_mass_error});
  report.passed = std::all_of(report.checks.begin(), report.checks.end(),
                              [](const ValidationCheck& c) { return c.passed; });
  return report;
}

ValidationReport validate_admissible_potential(const PotentialSpec& potential, const Grid& grid) {
  if (potential.dimension() != grid.dimension())
    throw ShapeError("potential and grid dimensions differ");
  const int d = grid.dimension();
  std::vector<double> x(static_cast<std::size_t>(d));

  double min_v = std::numeric_limits<double>::infinity();
  double inside = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid.node_point(i, x);
    const double v = potential(x);
    min_v = std::min(min_v, v);
    const double r2 = std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
    if (r2 >= 1.0 && r2 < grid.half_width() * grid.half_width())
      inside += std::exp(-potential.alpha0() * v);
  }
  inside *= grid.cell_volume();
  const double tail = potential.tail_integral(potential.alpha0(), std::max(1.0, grid.half_width()));
  const double integral = (grid.half_width() > 1.0 ? inside : 0.0) + tail;

  // Growth: V nondecreasing along each coordinate ray beyond the declared radius.
  double worst_drop = 0.0;
  const double r0 = potential.growth().monotone_radius;
  for (int axis = 0; axis < d; ++axis) {
    for (double sign : {-1.0, 1.0}) {
      double previous = -std::numeric_limits<double>::infinity();
      for (int step = 0; step <= 200; ++step) {
        const double r = r0 + (4.0 * std::max(1.0, grid.half_width()) - r0) * step / 200.0;
        std::fill(x.begin(), x.end(), 0.0);
        x[static_cast<std::size_t>(axis)] = sign * r;
        const double v = potential(x);
        worst_drop = std::max(worst_drop, previous - v);
        previous = v;
      }
    }
  }

  ValidationReport report;
  report.checks.push_back({"nonnegative", min_v >= 0.0, min_v});
  report.checks.push_back({"monotone_growth", worst_drop <= 0.0, worst_drop});
  report.checks.push_back({"exp_integrable", std::isfinite(integral), integral});
  report.passed = std::all_of(report.checks.begin(), report.checks.end(),
                              [](const ValidationCheck& c) { return c.passed; });
  return report;
}

}  // namespace plab
