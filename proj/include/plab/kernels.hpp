#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "plab/grid.hpp"

namespace plab {

/// Pair interaction g with its Fourier transform.
///
/// Fourier convention is ordinary frequency,
///   ĝ(ξ) = ∫ g(x) exp(-2πi x·ξ) dx,
/// so g(0) = ∫ ĝ and E(μ) = ∫ |μ̂|² ĝ carry no 2π factors.
///
/// Instances are immutable; evaluators may be called from many threads.
class KernelSpec {
 public:
  using Evaluator = std::function<double(std::span<const double>)>;
  /// Profile of a radial function as a function of the squared norm.
  using RadialProfile = std::function<double(double)>;

  KernelSpec(std::string name, int dimension, Evaluator eval, Evaluator fourier_eval);

  /// Radial kernel given by profiles of |x|² and |ξ|².
  static KernelSpec radial(std::string name, int dimension, RadialProfile profile,
                           RadialProfile fourier_profile);

  const std::string& name() const { return name_; }
  int dimension() const { return dimension_; }
  double g0() const { return g0_; }

  double operator()(std::span<const double> x) const { return eval_(x); }
  double fourier(std::span<const double> xi) const { return fourier_eval_(xi); }

  bool is_radial() const { return static_cast<bool>(profile_); }
  /// g as a function of |x|²; only valid when is_radial().
  double at_squared_distance(double r2) const { return profile_(r2); }
  double fourier_at_squared_frequency(double k2) const { return fourier_profile_(k2); }

  /// True for the g ≡ 0 control kernel; the sampler skips pair sums for it.
  bool is_zero() const { return zero_; }

  /// Kernel c·g (and c·ĝ).
  KernelSpec scaled(double factor) const;

 private:
  friend KernelSpec make_zero_kernel(int);

  std::string name_;
  int dimension_;
  Evaluator eval_;
  Evaluator fourier_eval_;
  RadialProfile profile_;
  RadialProfile fourier_profile_;
  double g0_ = 0.0;
  bool zero_ = false;
};

/// g(x) = amplitude · exp(-π |x / width|²), ĝ(ξ) = amplitude · width^d · exp(-π width² |ξ|²).
KernelSpec make_gaussian_kernel(int dimension, double amplitude, double width);

/// g(x) = amplitude · (1 + a|x|) exp(-a|x|) with a = 2π / width (Matérn ν = 3/2).
/// ĝ(ξ) = amplitude · c_d a³ / (a² + 4π²|ξ|²)^{(d+3)/2},
/// c_d = 2^d π^{d/2} Γ((d+3)/2) / Γ(3/2).
KernelSpec make_matern_kernel(int dimension, double amplitude, double width);

/// The g ≡ 0 control; not weakly interacting, used for closed-form oracles.
KernelSpec make_zero_kernel(int dimension);

/// Growth metadata used to pick truncation boxes and tail estimates.
struct PotentialGrowth {
  double coefficient = 1.0;  ///< V(x) ~ coefficient · |x|^exponent
  double exponent = 2.0;
  double monotone_radius = 0.0;  ///< V is nondecreasing along rays beyond this radius
};

/// Confining potential V ≥ 0 with integrability threshold α₀.
class PotentialSpec {
 public:
  using Evaluator = std::function<double(std::span<const double>)>;
  /// ∫_{|x| ≥ R} exp(-α V(x)) dx as a function of (α, R).
  using TailEstimate = std::function<double(double alpha, double radius)>;

  PotentialSpec(std::string name, int dimension, Evaluator eval, double alpha0,
                PotentialGrowth growth, TailEstimate tail);

  const std::string& name() const { return name_; }
  int dimension() const { return dimension_; }
  double alpha0() const { return alpha0_; }
  const PotentialGrowth& growth() const { return growth_; }
  double operator()(std::span<const double> x) const { return eval_(x); }
  double tail_integral(double alpha, double radius) const { return tail_(alpha, radius); }

  /// V + c (tail estimate scaled by exp(-α c)).
  PotentialSpec shifted(double constant) const;

 private:
  std::string name_;
  int dimension_;
  Evaluator eval_;
  double alpha0_;
  PotentialGrowth growth_;
  TailEstimate tail_;
};

/// V(x) = stiffness · |x|², α₀ = 1.
PotentialSpec make_quadratic_potential(int dimension, double stiffness);

/// Half-width L at which exp(-θ V(L e₁)) drops below `tail` (bisection along the first axis).
double half_width_for_tail(const PotentialSpec& potential, double theta, double tail);

struct ValidationCheck {
  std::string name;
  bool passed = false;
  double value = 0.0;  ///< worst observed violation or error for this check
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;
  double fourier_mass_error = 0.0;  ///< |∫ĝ - g(0)| / g(0)
  bool passed = false;
};

/// Grid-based check of symmetry, positivity of g and ĝ and ∫ĝ = g(0).
///
/// Throws InconclusiveValidation when g at the box faces or ĝ at the grid's
/// Nyquist frequency exceeds `tail_tolerance` relative to g(0) / max ĝ.
ValidationReport validate_weak_interaction(const KernelSpec& kernel, const Grid& grid,
                                           double tail_tolerance = 1e-6);

/// Nonnegativity on the grid, monotone growth beyond the declared radius, and
/// finiteness of ∫_{|x|≥1} exp(-α₀ V) (box quadrature plus analytic tail).
ValidationReport validate_admissible_potential(const PotentialSpec& potential, const Grid& grid);

/// Smallest comfortable validation grid for a kernel: the box reaches where g
/// has dropped to 1e-8 g(0) along the first axis and the Nyquist frequency
/// reaches where ĝ has dropped to 1e-10 ĝ(0); M is a power of two, at least 256.
Grid default_validation_grid(const KernelSpec& kernel);

/// Sampled transform Σ_j g(x_j) exp(-2πi x_j·ξ_k) h^d at the box frequencies
/// ξ_k = k / (2L), k = -M/2 .. M/2-1 per axis (real part; g is even).
std::vector<double> sampled_fourier_transform(const KernelSpec& kernel, const Grid& grid);

/// The box frequency of flat index `flat` in the layout of sampled_fourier_transform.
std::vector<double> box_frequency(const Grid& grid, std::size_t flat);

}  // namespace plab
