#include "plab/fields.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <complex>
#include <numeric>
#include <string>

#include <Eigen/Dense>

#include "plab/errors.hpp"
#include "plab/fftw_support.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// FieldConvolver

struct FieldConvolver::Impl {
  Grid grid;
  KernelSpec kernel;
  int d;
  int m;
  int p;                   // padded points per axis
  std::size_t padded_size;  // p^d
  std::size_t half_size;    // p^{d-1} (p/2 + 1)
  FftwRealBuffer real;
  FftwComplexBuffer spectrum;
  FftwPlan forward;
  FftwPlan backward;
  std::vector<std::complex<double>> kernel_spectrum;
  std::vector<double> periodised_fourier;  // filled on first fourier_energy call
  std::vector<double> spectrum_weight;     // 1 or 2 for the half-spectrum layout

  Impl(const Grid& g, const KernelSpec& k)
      : grid(g),
        kernel(k),
        d(g.dimension()),
        m(g.points_per_axis()),
        p(2 * g.points_per_axis()),
        padded_size(ipow(static_cast<std::size_t>(2 * g.points_per_axis()), g.dimension())),
        half_size(ipow(static_cast<std::size_t>(2 * g.points_per_axis()), g.dimension() - 1) *
                  static_cast<std::size_t>(g.points_per_axis() + 1)),
        real(padded_size),
        spectrum(half_size),
        forward(FftwPlan::r2c(std::vector<int>(static_cast<std::size_t>(d), p), real.data(),
                              spectrum.data())),
        backward(FftwPlan::c2r(std::vector<int>(static_cast<std::size_t>(d), p), spectrum.data(),
                               real.data())) {
    if (kernel.dimension() != d) throw ShapeError("kernel and grid dimensions differ");
    // Kernel sampled at every node difference o·h with |o| < M per axis. The
    // offset -M never occurs between two nodes and is left at zero.
    std::vector<double> x(static_cast<std::size_t>(d));
    std::vector<int> q(static_cast<std::size_t>(d));
    const double h = grid.spacing();
    for (std::size_t i = 0; i < padded_size; ++i) {
      unflatten_padded(i, q);
      bool unused = false;
      for (int a = 0; a < d; ++a) {
        const int qa = q[static_cast<std::size_t>(a)];
        if (qa == m) unused = true;
        x[static_cast<std::size_t>(a)] = (qa < m ? qa : qa - p) * h;
      }
      real[i] = unused || kernel.is_zero() ? 0.0 : kernel(x);
    }
    forward.execute();
    kernel_spectrum.resize(half_size);
    for (std::size_t i = 0; i < half_size; ++i)
      kernel_spectrum[i] = {spectrum[i][0], spectrum[i][1]};
  }

  static std::size_t ipow(std::size_t b, int e) {
    std::size_t r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
  }

  void unflatten_padded(std::size_t flat, std::span<int> out) const {
    for (int a = d - 1; a >= 0; --a) {
      out[static_cast<std::size_t>(a)] = static_cast<int>(flat % static_cast<std::size_t>(p));
      flat /= static_cast<std::size_t>(p);
    }
  }

  // Copies masses ρ h^d into the zero-padded real buffer.
  void load(std::span<const double> density_values) {
    if (density_values.size() != grid.size()) throw ShapeError("field size does not match grid");
    std::fill(real.data(), real.data() + padded_size, 0.0);
    const double w = grid.cell_volume();
    std::vector<int> idx(static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      grid.unflatten(i, idx);
      std::size_t flat = 0;
      for (int a = 0; a < d; ++a)
        flat = flat * static_cast<std::size_t>(p) + static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]);
      real[flat] = density_values[i] * w;
    }
  }

  std::vector<double> potential(std::span<const double> density_values) {
    std::vector<double> out(grid.size(), 0.0);
    if (kernel.is_zero()) return out;
    load(density_values);
    forward.execute();
    for (std::size_t i = 0; i < half_size; ++i) {
      const std::complex<double> v =
          std::complex<double>(spectrum[i][0], spectrum[i][1]) * kernel_spectrum[i];
      spectrum[i][0] = v.real();
      spectrum[i][1] = v.imag();
    }
    backward.execute();
    const double scale = 1.0 / static_cast<double>(padded_size);
    std::vector<int> idx(static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      grid.unflatten(i, idx);
      std::size_t flat = 0;
      for (int a = 0; a < d; ++a)
        flat = flat * static_cast<std::size_t>(p) + static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]);
      out[i] = real[flat] * scale;
    }
    return out;
  }

  double fourier_value(std::span<const double> xi) const {
    if (kernel.is_radial()) {
      double k2 = 0.0;
      for (double c : xi) k2 += c * c;
      return kernel.fourier_at_squared_frequency(k2);
    }
    return kernel.fourier(xi);
  }

  // ĝ summed over the alias lattice ξ + n/h, n ∈ Z^d, shell by shell in the
  // max-norm until a shell contributes less than 1e-17 ĝ(0).
  void build_periodised_fourier() {
    periodised_fourier.assign(half_size, 0.0);
    spectrum_weight.assign(half_size, 1.0);
    if (kernel.is_zero()) return;
    const double h = grid.spacing();
    const double dxi = 1.0 / (p * h);
    const std::vector<double> origin(static_cast<std::size_t>(d), 0.0);
    const double floor = 1e-17 * fourier_value(origin);
    const int max_shell = d == 1 ? 20000 : (d == 2 ? 64 : 8);
    const int last = p / 2 + 1;

    std::vector<double> xi(static_cast<std::size_t>(d));
    std::vector<double> shifted(static_cast<std::size_t>(d));
    std::vector<int> n(static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < half_size; ++i) {
      std::size_t rest = i;
      const int q_last = static_cast<int>(rest % static_cast<std::size_t>(last));
      rest /= static_cast<std::size_t>(last);
      xi[static_cast<std::size_t>(d - 1)] = q_last * dxi;
      for (int a = d - 2; a >= 0; --a) {
        const int q = static_cast<int>(rest % static_cast<std::size_t>(p));
        rest /= static_cast<std::size_t>(p);
        xi[static_cast<std::size_t>(a)] = (q <= p / 2 ? q : q - p) * dxi;
      }
      spectrum_weight[i] = (q_last == 0 || q_last == p / 2) ? 1.0 : 2.0;

      double total = fourier_value(xi);
      for (int r = 1; r <= max_shell; ++r) {
        double shell = 0.0;
        // Enumerate n ∈ [-r, r]^d with max |n_a| = r.
        std::fill(n.begin(), n.end(), -r);
        while (true) {
          int norm = 0;
          for (int v : n) norm = std::max(norm, std::abs(v));
          if (norm == r) {
            for (int a = 0; a < d; ++a)
              shifted[static_cast<std::size_t>(a)] =
                  xi[static_cast<std::size_t>(a)] + n[static_cast<std::size_t>(a)] / h;
            shell += fourier_value(shifted);
          }
          int a = d - 1;
          while (a >= 0 && n[static_cast<std::size_t>(a)] == r) {
            n[static_cast<std::size_t>(a)] = -r;
            --a;
          }
          if (a < 0) break;
          ++n[static_cast<std::size_t>(a)];
        }
        total += shell;
        if (shell < floor) break;
      }
      periodised_fourier[i] = total;
    }
  }

  double fourier_energy(std::span<const double> density_values) {
    if (kernel.is_zero()) return 0.0;
    if (periodised_fourier.empty()) build_periodised_fourier();
    load(density_values);
    forward.execute();
    double sum = 0.0;
    for (std::size_t i = 0; i < half_size; ++i) {
      const double a2 = spectrum[i][0] * spectrum[i][0] + spectrum[i][1] * spectrum[i][1];
      sum += spectrum_weight[i] * a2 * periodised_fourier[i];
    }
    return sum * std::pow(1.0 / (p * grid.spacing()), d);
  }
};

FieldConvolver::FieldConvolver(const Grid& grid, const KernelSpec& kernel)
    : impl_(std::make_unique<Impl>(grid, kernel)) {}
FieldConvolver::~FieldConvolver() = default;
FieldConvolver::FieldConvolver(FieldConvolver&&) noexcept = default;
FieldConvolver& FieldConvolver::operator=(FieldConvolver&&) noexcept = default;

const Grid& FieldConvolver::grid() const { return impl_->grid; }

std::vector<double> FieldConvolver::potential(std::span<const double> density_values) {
  return impl_->potential(density_values);
}

double FieldConvolver::fourier_energy(std::span<const double> density_values) {
  return impl_->fourier_energy(density_values);
}

// ---------------------------------------------------------------------------
// Functionals

void require_kernel_decay(const KernelSpec& kernel, const Grid& grid, double tail_tolerance) {
  if (kernel.dimension() != grid.dimension()) throw ShapeError("kernel and grid dimensions differ");
  if (kernel.is_zero()) return;
  std::vector<double> x(static_cast<std::size_t>(grid.dimension()), 0.0);
  x[0] = grid.half_width();
  const double tail = std::abs(kernel(x));
  if (tail > tail_tolerance * kernel.g0())
    throw AccuracyError("kernel tail at the box half-width is " + std::to_string(tail / kernel.g0()) +
                        " of g(0); widen the box");
}

PotentialField convolve_field(const DensityField& mu, const KernelSpec& kernel,
                              double tail_tolerance) {
  require_kernel_decay(kernel, mu.grid(), tail_tolerance);
  FieldConvolver conv(mu.grid(), kernel);
  return PotentialField(mu.grid(), conv.potential(mu.values()));
}

namespace {

InteractionEnergy energy_with(FieldConvolver& conv, std::span<const double> values,
                              double cell_volume) {
  const auto h = conv.potential(values);
  double e = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) e += values[i] * h[i];
  return {e * cell_volume, conv.fourier_energy(values)};
}

double potential_average(std::span<const double> density, std::span<const double> v,
                         double cell_volume) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += density[i] * v[i];
  return s * cell_volume;
}

void require_same_dimension(const KernelSpec& kernel, const PotentialSpec& potential,
                            const Grid& grid) {
  if (kernel.dimension() != grid.dimension() || potential.dimension() != grid.dimension())
    throw ShapeError("kernel, potential and grid dimensions differ");
}

}  // namespace

InteractionEnergy interaction_energy(const DensityField& mu, const KernelSpec& kernel,
                                     double tail_tolerance) {
  require_kernel_decay(kernel, mu.grid(), tail_tolerance);
  FieldConvolver conv(mu.grid(), kernel);
  return energy_with(conv, mu.values(), mu.grid().cell_volume());
}

InteractionEnergy interaction_energy(const GridField& signed_density, const KernelSpec& kernel) {
  FieldConvolver conv(signed_density.grid, kernel);
  return energy_with(conv, signed_density.values, signed_density.grid.cell_volume());
}

double entropy(const DensityField& mu) {
  double s = 0.0;
  for (double v : mu.values())
    if (v > 0.0) s += v * std::log(v);
  return s * mu.grid().cell_volume();
}

std::vector<double> sample_potential(const PotentialSpec& potential, const Grid& grid) {
  if (potential.dimension() != grid.dimension())
    throw ShapeError("potential and grid dimensions differ");
  std::vector<double> out(grid.size());
  std::vector<double> x(static_cast<std::size_t>(grid.dimension()));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid.node_point(i, x);
    out[i] = potential(x);
  }
  return out;
}

double free_energy(const DensityField& mu, const KernelSpec& kernel, const PotentialSpec& potential,
                   double theta) {
  if (!(theta > 0.0)) throw ParameterError("theta must be positive");
  require_same_dimension(kernel, potential, mu.grid());
  FieldConvolver conv(mu.grid(), kernel);
  const auto h = conv.potential(mu.values());
  const auto v = sample_potential(potential, mu.grid());
  const double w = mu.grid().cell_volume();
  double value = potential_average(mu.values(), h, w) + potential_average(mu.values(), v, w);
  if (std::isfinite(theta)) value += entropy(mu) / theta;
  return value;
}

// ---------------------------------------------------------------------------
// Thermal equilibrium

double ThermalSolution::L_theta() const { return std::exp(log_L_theta); }

namespace {

struct PicardImage {
  std::vector<double> density;  // Normalize(exp(-θ(2h + V)))
  double log_L = 0.0;
};

PicardImage picard_image(FieldConvolver* conv, std::span<const double> mu,
                         std::span<const double> v, double theta, const Grid& grid) {
  const std::size_t n = mu.size();
  PicardImage out;
  out.density.resize(n);
  std::vector<double> phi(v.begin(), v.end());
  if (conv) {
    const auto h = conv->potential(mu);
    for (std::size_t i = 0; i < n; ++i) phi[i] += 2.0 * h[i];
  }
  const double lowest = *std::min_element(phi.begin(), phi.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = std::exp(-theta * (phi[i] - lowest));
    if (!(e >= DBL_MIN))
      throw UnderflowError("thermal iterate underflows at theta = " + std::to_string(theta) +
                           "; shrink the box or lower theta");
    out.density[i] = e;
    z += e;
  }
  z *= grid.cell_volume();
  for (double& e : out.density) e /= z;
  out.log_L = std::log(z) - theta * lowest;
  return out;
}

double l1(std::span<const double> a, std::span<const double> b, double cell_volume) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s * cell_volume;
}

}  // namespace

double thermal_residual(const DensityField& mu, const KernelSpec& kernel,
                        const PotentialSpec& potential, double theta) {
  require_same_dimension(kernel, potential, mu.grid());
  FieldConvolver conv(mu.grid(), kernel);
  const auto v = sample_potential(potential, mu.grid());
  const auto image = picard_image(kernel.is_zero() ? nullptr : &conv, mu.values(), v, theta, mu.grid());
  return l1(mu.values(), image.density, mu.grid().cell_volume());
}

ThermalSolution solve_thermal_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                          double theta, const Grid& grid,
                                          const ThermalOptions& options) {
  if (!(theta > 0.0) || !std::isfinite(theta)) throw ParameterError("theta must be positive and finite");
  if (theta < potential.alpha0())
    throw ParameterError("theta must be at least the potential's alpha0");
  if (!(options.tol > 0.0)) throw ParameterError("tolerance must be positive");
  if (!(options.damping > 0.0 && options.damping <= 1.0))
    throw ParameterError("damping must lie in (0, 1]");
  if (options.max_iter < 1) throw ParameterError("max_iter must be positive");
  require_same_dimension(kernel, potential, grid);

  const auto v = sample_potential(potential, grid);
  const double w = grid.cell_volume();
  std::optional<FieldConvolver> conv;
  if (!kernel.is_zero()) conv.emplace(grid, kernel);
  FieldConvolver* cp = conv ? &*conv : nullptr;

  std::vector<double> mu;
  if (options.initial) {
    if (options.initial->grid() != grid) throw ShapeError("initial density lives on a different grid");
    mu = options.initial->values();
  } else if (cp && options.continuation && theta > 2.0 * options.continuation_start) {
    // Warm start from a doubling sequence of smaller θ.
    ThermalOptions stage = options;
    stage.continuation = false;
    stage.tol = std::max(options.tol, 1e-7);
    double t = std::max(options.continuation_start, potential.alpha0());
    std::optional<DensityField> previous;
    while (t < theta) {
      stage.initial = previous;
      previous = solve_thermal_equilibrium(kernel, potential, t, grid, stage).density;
      t *= 2.0;
    }
    mu = previous->values();
  } else {
    mu = picard_image(nullptr, v, v, theta, grid).density;
  }

  double alpha = options.damping;
  double ceiling = options.damping;
  double previous_residual = std::numeric_limits<double>::infinity();
  double residual = previous_residual;
  for (int it = 0; it <= options.max_iter; ++it) {
    const auto image = picard_image(cp, mu, v, theta, grid);
    residual = l1(mu, image.density, w);
    if (residual <= options.tol) {
      // Return the Picard image rather than the damped iterate: damping leaves
      // stale mass from earlier iterates in the far tails, so only the image
      // satisfies log μ = -θ(2h + V) - log L pointwise.
      const auto check = picard_image(cp, image.density, v, theta, grid);
      const double image_residual = l1(image.density, check.density, w);
      if (image_residual <= options.tol) {
        ThermalSolution sol{DensityField::normalize(grid, image.density), image.log_L, theta, it,
                            image_residual};
        if (!(sol.density.min_value() > 0.0))
          throw UnderflowError("thermal solution has a nonpositive node");
        return sol;
      }
    }
    if (it == options.max_iter) break;
    // A residual increase marks the damping as unstable: halve it and never
    // grow back past the value that failed.
    if (residual > previous_residual) {
      ceiling = std::min(ceiling, alpha);
      alpha *= 0.5;
    } else {
      alpha = std::min(ceiling, alpha * 1.05);
    }
    previous_residual = residual;
    double total = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      mu[i] = (1.0 - alpha) * mu[i] + alpha * image.density[i];
      total += mu[i];
    }
    total *= w;
    for (double& x : mu) x /= total;
  }
  throw NonConvergenceError("thermal solver did not reach tolerance at theta = " +
                                std::to_string(theta),
                            residual, options.max_iter);
}

ThermalSolution solve_thermal_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                          double theta, const Grid& grid, double tol,
                                          double damping, int max_iter) {
  ThermalOptions options;
  options.tol = tol;
  options.damping = damping;
  options.max_iter = max_iter;
  return solve_thermal_equilibrium(kernel, potential, theta, grid, options);
}

// ---------------------------------------------------------------------------
// Equilibrium measure

std::vector<double> project_to_simplex(std::span<const double> v) {
  if (v.empty()) throw ParameterError("cannot project an empty vector");
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double tau = 0.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    cumulative += sorted[k];
    const double candidate = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (sorted[k] - candidate > 0.0) tau = candidate;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - tau, 0.0);
  return out;
}

namespace {

// Everything below works on node masses w (Σ w = 1); G w is the potential field.
struct MassProblem {
  FieldConvolver* conv;
  std::vector<double> v;
  double inv_cell;

  std::vector<double> apply(std::span<const double> w) const {
    if (!conv) return std::vector<double>(w.size(), 0.0);
    std::vector<double> rho(w.begin(), w.end());
    for (double& x : rho) x *= inv_cell;
    return conv->potential(rho);
  }
  double objective(std::span<const double> w, std::span<const double> gw) const {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * (gw[i] + v[i]);
    return s;
  }
};

struct Certificate {
  double energy = 0.0;
  double c_infinity = 0.0;
  double residual = 0.0;
};

Certificate certify_masses(std::span<const double> w, std::span<const double> gw,
                           std::span<const double> v, double mass_threshold) {
  Certificate c;
  double vbar = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    c.energy += w[i] * gw[i];
    vbar += w[i] * v[i];
  }
  c.c_infinity = c.energy + 0.5 * vbar;
  double below = 0.0;
  double on_support = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double q = gw[i] + 0.5 * v[i];
    below = std::max(below, c.c_infinity - q);
    if (w[i] > mass_threshold) on_support = std::max(on_support, std::abs(q - c.c_infinity));
  }
  c.residual = std::max(below, on_support);
  return c;
}

// Primal active-set method for min wᵀGw + vᵀw over the simplex. Starts either
// from `start` itself (warm: working set = its support) or from the vertex at
// its heaviest node, adds the node with the most negative reduced gradient,
// and solves the equality-constrained problem on the working set, stepping
// back to the boundary when a weight would turn negative. Gives up (nullopt)
// past `max_support` nodes.
std::optional<std::vector<double>> active_set_refine(const KernelSpec& kernel, const Grid& grid,
                                                     const MassProblem& problem,
                                                     std::span<const double> start,
                                                     std::size_t max_support, bool warm) {
  const std::size_t n = start.size();
  std::vector<std::size_t> working;
  std::vector<double> w(n, 0.0);
  if (warm) {
    for (std::size_t i = 0; i < n; ++i)
      if (start[i] > 0.0) working.push_back(i);
    if (working.size() > max_support) return std::nullopt;
    w.assign(start.begin(), start.end());
  } else {
    const auto heaviest = static_cast<std::size_t>(
        std::distance(start.begin(), std::max_element(start.begin(), start.end())));
    working.push_back(heaviest);
    w[heaviest] = 1.0;
  }

  std::vector<double> xi(static_cast<std::size_t>(grid.dimension()));
  std::vector<double> xj(xi.size());
  std::vector<double> diff(xi.size());
  auto solve_working_set = [&]() -> std::optional<Eigen::VectorXd> {
    const auto s = static_cast<Eigen::Index>(working.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(s + 1, s + 1);
    Eigen::VectorXd b(s + 1);
    for (Eigen::Index r = 0; r < s; ++r) {
      grid.node_point(working[static_cast<std::size_t>(r)], xi);
      for (Eigen::Index c = r; c < s; ++c) {
        grid.node_point(working[static_cast<std::size_t>(c)], xj);
        for (std::size_t k = 0; k < xi.size(); ++k) diff[k] = xi[k] - xj[k];
        a(r, c) = a(c, r) = kernel.is_zero() ? 0.0 : 2.0 * kernel(diff);
      }
      a(r, s) = -1.0;
      a(s, r) = 1.0;
      b(r) = -problem.v[working[static_cast<std::size_t>(r)]];
    }
    b(s) = 1.0;
    // Schur complement on the positive definite block: z = G⁻¹(λ1 - v) / 2
    // with λ fixed by Σz = 1. Falls back to a pivoted QR of the full system
    // when the block is numerically singular.
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(a.topLeftCorner(s, s));
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      const Eigen::VectorXd u = ldlt.solve(Eigen::VectorXd::Ones(s));
      const Eigen::VectorXd t = ldlt.solve(b.head(s));
      const double lambda = (1.0 - t.sum()) / u.sum();
      Eigen::VectorXd z(s + 1);
      z.head(s) = t + lambda * u;
      z(s) = lambda;
      const double err = (a * z - b).lpNorm<Eigen::Infinity>();
      if (z.allFinite() && err <= 1e-10 * (1.0 + b.lpNorm<Eigen::Infinity>())) return z;
    }
    Eigen::VectorXd z = a.colPivHouseholderQr().solve(b);
    if (!z.allFinite()) return std::nullopt;
    return z;
  };

  const std::size_t max_outer = 4 * max_support + 16;
  for (std::size_t outer = 0; outer < max_outer; ++outer) {
    const auto gw = problem.apply(w);
    double lambda = 0.0;
    for (std::size_t i : working) lambda += w[i] * (2.0 * gw[i] + problem.v[i]);
    std::size_t entering = n;
    double most_negative = -1e-14 * (1.0 + std::abs(lambda));
    for (std::size_t i = 0; i < n; ++i) {
      if (w[i] > 0.0) continue;
      const double reduced = 2.0 * gw[i] + problem.v[i] - lambda;
      if (reduced < most_negative) {
        most_negative = reduced;
        entering = i;
      }
    }
    if (entering == n && outer > 0) return w;
    if (entering != n) {
      if (working.size() >= max_support) return std::nullopt;
      working.push_back(entering);
    }

    for (std::size_t inner = 0; inner <= max_support + 4; ++inner) {
      const auto z = solve_working_set();
      if (!z) return std::nullopt;
      const auto s = working.size();
      double alpha = 1.0;
      std::size_t blocking = s;
      for (std::size_t r = 0; r < s; ++r) {
        const double zr = (*z)(static_cast<Eigen::Index>(r));
        const double wr = w[working[r]];
        if (zr <= 0.0 && wr - zr > 0.0 && wr / (wr - zr) < alpha) {
          alpha = wr / (wr - zr);
          blocking = r;
        }
      }
      for (std::size_t r = 0; r < s; ++r)
        w[working[r]] += alpha * ((*z)(static_cast<Eigen::Index>(r)) - w[working[r]]);
      if (blocking == s) break;
      // Drop the blocking node and anything else that reached zero.
      w[working[blocking]] = 0.0;
      std::vector<std::size_t> kept;
      for (std::size_t i : working)
        if (w[i] > 0.0) kept.push_back(i);
        else w[i] = 0.0;
      working = std::move(kept);
      if (working.empty()) return std::nullopt;
    }
  }
  return std::nullopt;
}

}  // namespace

EquilibriumSolution solve_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                      const Grid& grid, const EquilibriumOptions& options) {
  if (!(options.tol > 0.0)) throw ParameterError("tolerance must be positive");
  if (options.max_iter < 1) throw ParameterError("max_iter must be positive");
  require_same_dimension(kernel, potential, grid);

  const std::size_t n = grid.size();
  const double cell = grid.cell_volume();
  std::optional<FieldConvolver> conv;
  if (!kernel.is_zero()) conv.emplace(grid, kernel);
  MassProblem problem{conv ? &*conv : nullptr, sample_potential(potential, grid), 1.0 / cell};

  // Step from a Lipschitz bound on the gradient 2Gw + V: 2 max row sum of G.
  double lipschitz = 0.0;
  {
    const auto rows = problem.apply(std::vector<double>(n, 1.0));
    for (double r : rows) lipschitz = std::max(lipschitz, 2.0 * r);
  }
  double step = lipschitz > 0.0 ? 1.0 / lipschitz : 1e12;

  std::vector<double> x(n, 1.0 / static_cast<double>(n));
  if (options.initial) {
    if (options.initial->grid() != grid) throw ShapeError("initial density lives on a different grid");
    for (std::size_t i = 0; i < n; ++i) x[i] = (*options.initial)[i] * cell;
  }
  std::vector<double> gx = problem.apply(x);
  double fx = problem.objective(x, gx);
  std::vector<double> y = x;
  std::vector<double> gy = gx;
  double momentum = 1.0;
  Certificate cert = certify_masses(x, gx, problem.v, options.mass_threshold);

  // The active-set refinement replaces the iterate whenever it certifies a
  // smaller residual; returns true once the tolerance is met.
  int next_polish = 250;
  auto try_polish = [&]() {
    cert = certify_masses(x, gx, problem.v, options.mass_threshold);
    // Few-atom minimisers are found fastest from a vertex; spread-out ones
    // from the gradient iterate's own support.
    for (bool warm : {false, true}) {
      if (cert.residual <= options.tol) break;
      const std::size_t cap = warm ? options.max_support : std::min<std::size_t>(64, options.max_support);
      auto refined = active_set_refine(kernel, grid, problem, x, cap, warm);
      if (!refined) continue;
      auto gr = problem.apply(*refined);
      const Certificate rc = certify_masses(*refined, gr, problem.v, options.mass_threshold);
      if (rc.residual < cert.residual) {
        x = std::move(*refined);
        gx = std::move(gr);
        fx = problem.objective(x, gx);
        y = x;
        gy = gx;
        momentum = 1.0;
        cert = rc;
      }
    }
    return cert.residual <= options.tol;
  };

  int it = 0;
  std::vector<double> trial(n);
  while (cert.residual > options.tol && it < options.max_iter) {
    ++it;
    std::vector<double> xn;
    std::vector<double> gxn;
    double fn = 0.0;
    const double fy = problem.objective(y, gy);
    for (;;) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = y[i] - step * (2.0 * gy[i] + problem.v[i]);
      xn = project_to_simplex(trial);
      gxn = problem.apply(xn);
      fn = problem.objective(xn, gxn);
      double lin = 0.0;
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dlt = xn[i] - y[i];
        lin += (2.0 * gy[i] + problem.v[i]) * dlt;
        sq += dlt * dlt;
      }
      if (fn <= fy + lin + sq / (2.0 * step) + 1e-15 * std::abs(fy) || step < 1e-300) break;
      step *= 0.5;
    }
    if (options.accelerate && fn <= fx) {
      const double next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
      const double beta = (momentum - 1.0) / next;
      // G is linear, so G y follows from G xn and G x without another convolution.
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = xn[i] + beta * (xn[i] - x[i]);
        gy[i] = gxn[i] + beta * (gxn[i] - gx[i]);
      }
      momentum = next;
    } else {
      // Restart the momentum whenever the objective goes up.
      momentum = 1.0;
      y = xn;
      gy = gxn;
    }
    x = std::move(xn);
    gx = std::move(gxn);
    fx = fn;
    if (it % 25 == 0) cert = certify_masses(x, gx, problem.v, options.mass_threshold);
    if (options.polish && it == next_polish) {
      next_polish *= 4;
      if (try_polish()) break;
    }
  }
  cert = certify_masses(x, gx, problem.v, options.mass_threshold);
  if (options.polish && cert.residual > 0.0) try_polish();
  if (cert.residual > options.tol)
    throw NonConvergenceError("equilibrium solver stopped with Euler-Lagrange residual " +
                                  std::to_string(cert.residual),
                              cert.residual, it);

  std::vector<double> density(n);
  for (std::size_t i = 0; i < n; ++i) density[i] = x[i] / cell;
  EquilibriumSolution sol{DensityField::normalize(grid, std::move(density)), cert.c_infinity,
                          cert.residual, problem.objective(x, gx), it};
  return sol;
}

EquilibriumSolution solve_equilibrium(const KernelSpec& kernel, const PotentialSpec& potential,
                                      const Grid& grid, double tol) {
  EquilibriumOptions options;
  options.tol = tol;
  return solve_equilibrium(kernel, potential, grid, options);
}

double equilibrium_constant(const DensityField& mu, const KernelSpec& kernel,
                            const PotentialSpec& potential) {
  require_same_dimension(kernel, potential, mu.grid());
  FieldConvolver conv(mu.grid(), kernel);
  const auto h = conv.potential(mu.values());
  const auto v = sample_potential(potential, mu.grid());
  const double w = mu.grid().cell_volume();
  return potential_average(mu.values(), h, w) + 0.5 * potential_average(mu.values(), v, w);
}

double certify_equilibrium(const EquilibriumSolution& solution, const KernelSpec& kernel,
                           const PotentialSpec& potential, double mass_threshold) {
  const DensityField& mu = solution.density;
  require_same_dimension(kernel, potential, mu.grid());
  FieldConvolver conv(mu.grid(), kernel);
  const auto h = conv.potential(mu.values());
  const auto v = sample_potential(potential, mu.grid());
  const double cell = mu.grid().cell_volume();
  double below = 0.0;
  double on_support = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double q = h[i] + 0.5 * v[i];
    below = std::max(below, solution.c_infinity - q);
    if (mu[i] * cell > mass_threshold)
      on_support = std::max(on_support, std::abs(q - solution.c_infinity));
  }
  return std::max(below, on_support);
}

// ---------------------------------------------------------------------------
// Diagnostics

PhiCheck phi_variational_check(const KernelSpec& kernel, const Grid& grid) {
  if (kernel.dimension() != grid.dimension()) throw ShapeError("kernel and grid dimensions differ");
  if (!(kernel.g0() > 0.0)) throw ParameterError("phi check needs g(0) > 0");
  const std::vector<double> origin(static_cast<std::size_t>(grid.dimension()), 0.0);
  const std::size_t node = grid.nearest_node(origin);
  GridField nu(grid);
  nu.values[node] = 1.0 / (kernel.g0() * grid.cell_volume());

  FieldConvolver conv(grid, kernel);
  const auto h = conv.potential(nu.values);
  const auto energy = energy_with(conv, nu.values, grid.cell_volume());
  PhiCheck out;
  out.lower_bound = 1.0 / kernel.g0();
  out.achieved = energy.value;
  out.achieved_fourier = energy.fourier_value;
  out.field_at_center = h[node];
  out.center = grid.node_point(node);
  return out;
}

double l1_distance(const DensityField& a, const DensityField& b) {
  if (a.grid() != b.grid()) throw ShapeError("densities live on different grids");
  return l1(a.values(), b.values(), a.grid().cell_volume());
}

double local_average_error(const DensityField& mu, double value, std::span<const double> x,
                           double delta) {
  const Grid& grid = mu.grid();
  if (x.size() != static_cast<std::size_t>(grid.dimension()))
    throw ShapeError("point dimension does not match grid");
  if (!(delta >= grid.spacing()))
    throw DomainError("averaging radius is below the grid spacing");
  for (double c : x)
    if (c - delta < -grid.half_width() || c + delta > grid.half_width())
      throw DomainError("averaging ball leaves the grid box");
  std::vector<double> s(x.size());
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid.node_point(i, s);
    double r2 = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) r2 += (s[k] - x[k]) * (s[k] - x[k]);
    if (r2 > delta * delta) continue;
    sum += std::abs(mu[i] - value);
    ++count;
  }
  if (count == 0) throw DomainError("averaging ball contains no grid node");
  return sum / static_cast<double>(count);
}

LThetaReport l_theta_asymptotics(std::span<const ThermalSolution> solutions, double c_infinity) {
  LThetaReport report;
  report.two_c_infinity = 2.0 * c_infinity;
  for (std::size_t i = 0; i < solutions.size(); ++i) {
    if (i > 0 && !(solutions[i].theta > solutions[i - 1].theta))
      throw ParameterError("thermal solutions must be ordered by strictly increasing theta");
    const double value = -solutions[i].log_L_theta / solutions[i].theta;
    report.rows.push_back({solutions[i].theta, value, std::abs(value - report.two_c_infinity)});
  }
  report.gap_strictly_decreasing = report.rows.size() >= 2;
  for (std::size_t i = 1; i < report.rows.size(); ++i)
    if (!(report.rows[i].gap < report.rows[i - 1].gap)) report.gap_strictly_decreasing = false;
  return report;
}

std::vector<double> c_theta_proxy(std::span<const ThermalSolution> solutions,
                                  const EquilibriumSolution& equilibrium, const KernelSpec& kernel) {
  const Grid& grid = equilibrium.density.grid();
  FieldConvolver conv(grid, kernel);
  const auto hv = conv.potential(equilibrium.density.values());
  std::vector<double> value(solutions.size());
  for (std::size_t j = 0; j < solutions.size(); ++j) {
    if (solutions[j].density.grid() != grid)
      throw ShapeError("thermal solution and equilibrium live on different grids");
    const auto ht = conv.potential(solutions[j].density.values());
    double sup = 0.0;
    for (std::size_t i = 0; i < hv.size(); ++i) sup = std::max(sup, std::abs(hv[i] - ht[i]));
    value[j] = -solutions[j].log_L_theta / (2.0 * solutions[j].theta) + sup;
  }
  std::vector<double> out(value.size());
  double running = -std::numeric_limits<double>::infinity();
  for (std::size_t j = value.size(); j-- > 0;) {
    running = std::max(running, value[j]);
    out[j] = running;
  }
  return out;
}

}  // namespace plab
