#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "plab/grid.hpp"
#include "plab/kernels.hpp"

namespace plab {

inline constexpr double kInfiniteTheta = std::numeric_limits<double>::infinity();

/// Linear (zero-padded) FFT convolution of grid masses with a kernel.
///
/// The padded transform has 2M points per axis, so every difference of two
/// nodes is represented once and no circular wraparound occurs. Holds FFTW
/// plans and scratch buffers: one instance per thread.
class FieldConvolver {
 public:
  FieldConvolver(const Grid& grid, const KernelSpec& kernel);
  ~FieldConvolver();
  FieldConvolver(FieldConvolver&&) noexcept;
  FieldConvolver& operator=(FieldConvolver&&) noexcept;

  const Grid& grid() const;

  /// h(x_i) = Σ_j g(x_i - x_j) ρ_j h^d for density values ρ (signed allowed).
  std::vector<double> potential(std::span<const double> density_values);

  /// ∫ |ρ̂|² ĝ dξ for the grid measure Σ_j ρ_j h^d δ_{x_j}, using the closed-form
  /// ĝ periodised over the grid's alias lattice. Equals the pair sum up to
  /// roundoff when ĝ is exact.
  double fourier_energy(std::span<const double> density_values);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Relative tolerance for the kernel tail at the box half-width.
inline constexpr double kDefaultKernelTailTolerance = 1e-6;

/// Throws AccuracyError if g along the first axis at distance L exceeds
/// `tail_tolerance` · g(0).
void require_kernel_decay(const KernelSpec& kernel, const Grid& grid,
                          double tail_tolerance = kDefaultKernelTailTolerance);

/// h^μ = g ∗ μ on the nodes of μ's grid.
PotentialField convolve_field(const DensityField& mu, const KernelSpec& kernel,
                              double tail_tolerance = kDefaultKernelTailTolerance);

struct InteractionEnergy {
  double value = 0.0;          ///< Σ_i ρ_i h^d (g ∗ ρ)(x_i)
  double fourier_value = 0.0;  ///< ∫ |ρ̂|² ĝ
};

InteractionEnergy interaction_energy(const DensityField& mu, const KernelSpec& kernel,
                                     double tail_tolerance = kDefaultKernelTailTolerance);

/// Same for a signed grid measure given by its density values.
InteractionEnergy interaction_energy(const GridField& signed_density, const KernelSpec& kernel);

/// Σ μ log μ h^d with 0 log 0 = 0.
double entropy(const DensityField& mu);

/// V sampled on every node.
std::vector<double> sample_potential(const PotentialSpec& potential, const Grid& grid);

/// E(μ) + ∫ V dμ + ent[μ] / θ; θ = kInfiniteTheta drops the entropy term.
double free_energy(const DensityField& mu, const KernelSpec& kernel, const PotentialSpec& potential,
                   double theta);

struct ThermalSolution {
  DensityField density;
  /// log L_θ with L_θ = Σ exp(-θ(2h + V)) h^d. Stored as a logarithm since
  /// L_θ itself underflows for large θ.
  double log_L_theta = 0.0;
  double theta = 0.0;
  int iterations = 0;
  double residual = 0.0;

  double L_theta() const;
};

struct ThermalOptions {
  double tol = 1e-8;
  double damping = 0.5;
  int max_iter = 500000;
  /// Start from the solution at this θ and double towards the target,
  /// warm-starting each stage. Ignored when the target is not above it.
  double continuation_start = 10.0;
  bool continuation = true;
  std::optional<DensityField> initial;
};

/// Damped Picard iteration for μ = Normalize(exp(-θ(2 g∗μ + V))).
///
/// The damping is halved whenever the L¹ residual increases and recovers by 5%
/// per non-increasing step, never above the smallest damping that has already
/// produced an increase.
/// Throws NonConvergenceError after max_iter iterations and UnderflowError if
/// any node of the iterate falls below the normal double range.
ThermalSolution solve_thermal_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                          double theta, const Grid& grid,
                                          const ThermalOptions& options = {});

ThermalSolution solve_thermal_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                          double theta, const Grid& grid, double tol,
                                          double damping, int max_iter);

/// L¹ residual ‖μ - Normalize(exp(-θ(2 g∗μ + V)))‖₁ of an arbitrary density.
double thermal_residual(const DensityField& mu, const KernelSpec& kernel,
                        const PotentialSpec& potential, double theta);

struct EquilibriumSolution {
  DensityField density;
  double c_infinity = 0.0;
  double el_residual = 0.0;
  double objective = 0.0;  ///< E_V(μ_V)
  int iterations = 0;
};

struct EquilibriumOptions {
  double tol = 1e-6;
  int max_iter = 200000;
  /// Nodes whose mass μ h^d exceeds this count as the support in the residual.
  double mass_threshold = 1e-7;
  bool accelerate = true;
  bool polish = true;
  /// Working-set size beyond which the active-set refinement gives up.
  std::size_t max_support = 1500;
  std::optional<DensityField> initial;
};

/// Projected gradient descent for E_V over the discrete probability simplex.
///
/// Works on node masses w = μ h^d: gradient 2h + V, Euclidean projection onto
/// {w ≥ 0, Σw = 1}, backtracking on the quadratic upper bound, optional
/// Nesterov momentum with function-value restart. At iterations 250, 1000,
/// 4000, ... and at the end, a primal active-set method solves the KKT system
/// exactly on a growing working set; its result replaces the iterate only if
/// it certifies a smaller Euler–Lagrange residual.
EquilibriumSolution solve_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                      const Grid& grid, const EquilibriumOptions& options = {});

EquilibriumSolution solve_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                      const Grid& grid, double tol);

/// c_∞ = E(μ) + ½ ∫ V dμ for a candidate minimiser.
double equilibrium_constant(const DensityField& mu, const KernelSpec& kernel,
                            const PotentialSpec& potential);

/// max( max_x (c_∞ - h - V/2)₊ , max_{μ h^d > threshold} |h + V/2 - c_∞| ).
double certify_equilibrium(const EquilibriumSolution& solution, const KernelSpec& kernel,
                           const PotentialSpec& potential, double mass_threshold = 1e-7);

/// Euclidean projection of `v` onto the probability simplex {w ≥ 0, Σ w = 1}.
std::vector<double> project_to_simplex(std::span<const double> v);

struct PhiCheck {
  double lower_bound = 0.0;       ///< 1 / g(0)
  double achieved = 0.0;          ///< E(δ/g(0)), pair-sum side
  double achieved_fourier = 0.0;  ///< same, Fourier side
  double field_at_center = 0.0;   ///< h^{δ/g(0)} at the mass node; equals 1
  std::vector<double> center;     ///< node carrying the mass
};

/// Equality witness for inf { E(ν) : h^ν(0) = 1 } = 1 / g(0): a single node of
/// signed mass 1/g(0) at the node containing the origin.
PhiCheck phi_variational_check(const KernelSpec& kernel, const Grid& grid);

/// ∑ |a - b| h^d; throws ShapeError on different grids.
double l1_distance(const DensityField& a, const DensityField& b);

/// Grid average of |μ(s) - value| over nodes s with |s - x| ≤ δ.
/// Throws DomainError if the ball leaves the box or δ < h.
double local_average_error(const DensityField& mu, double value, std::span<const double> x,
                           double delta);

struct LThetaRow {
  double theta = 0.0;
  double minus_log_L_over_theta = 0.0;  ///< -(1/θ) log L_θ
  double gap = 0.0;                     ///< |-(1/θ) log L_θ - 2 c_∞|
};

struct LThetaReport {
  double two_c_infinity = 0.0;
  std::vector<LThetaRow> rows;
  bool gap_strictly_decreasing = false;
};

/// Requires strictly increasing θ; throws ParameterError otherwise.
LThetaReport l_theta_asymptotics(std::span<const ThermalSolution> solutions, double c_infinity);

/// Finite-θ' proxy c_θ ≈ max_{θ' ≥ θ, solved} [-(1/(2θ')) log L_θ' + ‖h^{μ_V} - h^{μ_θ'}‖∞].
/// All solutions must share the equilibrium solution's grid. Under-approximates
/// the supremum over all θ' ≥ θ.
std::vector<double> c_theta_proxy(std::span<const ThermalSolution> solutions,
                                  const EquilibriumSolution& equilibrium, const KernelSpec& kernel);

}  // namespace plab
