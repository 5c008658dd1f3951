#include "plab/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "plab/errors.hpp"
#include "plab/rng.hpp"
#include "plab/stats.hpp"

namespace plab {
namespace {

static_assert(std::endian::native == std::endian::little, "binary records assume little-endian");

constexpr char kSampleMagic[8] = {'P', 'L', 'A', 'B', 'S', 'M', 'P', '1'};
constexpr std::uint64_t kCacheCheckInterval = 1000;
constexpr double kCacheTolerance = 1e-9;

// g(a - b) for two particles; radial kernels skip the difference vector.
class PairKernel {
 public:
  PairKernel(const KernelSpec& kernel, int dimension)
      : kernel_(kernel), d_(static_cast<std::size_t>(dimension)), diff_(d_) {
    if (kernel.dimension() != dimension)
      throw ShapeError("kernel dimension does not match the configuration");
  }

  bool zero() const { return kernel_.is_zero(); }

  double operator()(const double* a, const double* b) {
    if (kernel_.is_radial()) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < d_; ++k) r2 += (a[k] - b[k]) * (a[k] - b[k]);
      return kernel_.at_squared_distance(r2);
    }
    for (std::size_t k = 0; k < d_; ++k) diff_[k] = a[k] - b[k];
    return kernel_(diff_);
  }

 private:
  const KernelSpec& kernel_;
  std::size_t d_;
  std::vector<double> diff_;
};

double potential_sum(std::span<const double> positions, int dimension, const PotentialSpec& v) {
  const auto d = static_cast<std::size_t>(dimension);
  double s = 0.0;
  for (std::size_t i = 0; i < positions.size(); i += d) s += v(positions.subspan(i, d));
  return s;
}

std::string describe_state(const std::vector<double>& x, std::size_t particle, int dimension) {
  std::ostringstream os;
  os.precision(17);
  os << " (particle " << particle << " at";
  for (int k = 0; k < dimension; ++k) os << ' ' << x[particle * static_cast<std::size_t>(dimension) + static_cast<std::size_t>(k)];
  os << ')';
  return os.str();
}

struct ChainResult {
  std::vector<ParticleConfiguration> samples;
  std::vector<std::uint64_t> sweeps;
  ChainDiagnostics diagnostics;
};

ChainResult run_chain(const ChainConfig& cfg, const KernelSpec& kernel, const PotentialSpec& potential,
                      std::uint64_t chain) {
  const int d = kernel.dimension();
  const auto du = static_cast<std::size_t>(d);
  const auto n = static_cast<std::size_t>(cfg.N);
  const double big_n = static_cast<double>(cfg.N);
  Rng rng(cfg.seed, chain);

  std::vector<double> x;
  if (cfg.initial) {
    x = *cfg.initial;
  } else {
    x.resize(n * du);
    const double sd = 1.0 / std::sqrt(2.0 * cfg.theta);
    for (double& c : x) c = sd * rng.normal();
  }
  ParticleConfiguration state = make_configuration(d, x, kernel, potential);
  PairKernel g(kernel, d);

  ChainResult result;
  ChainDiagnostics& diag = result.diagnostics;
  double log_scale = std::log(cfg.proposal_scale);
  std::uint64_t accepts_since_check = 0;
  std::vector<double> proposal(du);

  auto check_cache = [&] {
    const double fresh_pair = pair_energy(state.positions, d, kernel);
    const double fresh_pot = potential_sum(state.positions, d, potential);
    const double fresh = fresh_pair + big_n * fresh_pot;
    const double cached = state.pair_energy + big_n * state.potential_sum;
    const double drift = std::abs(cached - fresh) / std::max(1.0, std::abs(fresh));
    ++diag.cache_checks;
    diag.max_cache_drift = std::max(diag.max_cache_drift, drift);
    if (!(drift <= kCacheTolerance))
      throw NumericalError("cached Hamiltonian drifted from recomputation by " +
                           std::to_string(drift) + " (relative)");
    state.pair_energy = fresh_pair;
    state.potential_sum = fresh_pot;
  };

  // One sweep of N single-particle proposals; returns the number accepted.
  auto sweep = [&](double scale) {
    std::uint64_t accepted = 0;
    for (std::size_t move = 0; move < n; ++move) {
      const auto i = std::min(n - 1, static_cast<std::size_t>(rng.uniform() * big_n));
      double* xi = state.positions.data() + i * du;
      for (std::size_t k = 0; k < du; ++k) proposal[k] = xi[k] + scale * rng.normal();

      double delta_pair = 0.0;
      if (!g.zero()) {
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          const double* xj = state.positions.data() + j * du;
          delta_pair += g(proposal.data(), xj) - g(xi, xj);
        }
        delta_pair *= 2.0;
      }
      const double v_new = potential(proposal);
      const double v_old = potential(std::span<const double>(xi, du));
      const double delta_h = delta_pair + big_n * (v_new - v_old);
      if (!std::isfinite(delta_h))
        throw NumericalError("non-finite energy change in chain " + std::to_string(chain) +
                             describe_state(state.positions, i, d));

      const bool accept =
          delta_h <= 0.0 || std::log(rng.uniform_open0()) < -cfg.beta * delta_h;
      if (!accept) continue;
      std::copy(proposal.begin(), proposal.end(), xi);
      state.pair_energy += delta_pair;
      state.potential_sum += v_new - v_old;
      ++accepted;
      if (++accepts_since_check == kCacheCheckInterval) {
        accepts_since_check = 0;
        check_cache();
      }
    }
    return accepted;
  };

  for (int s = 0; s < cfg.burn_in; ++s) {
    const auto accepted = sweep(std::exp(log_scale));
    if (cfg.tune) {
      const double rate = static_cast<double>(accepted) / big_n;
      log_scale += (rate - cfg.target_acceptance) / std::sqrt(1.0 + s);
    }
  }

  const double scale = std::exp(log_scale);
  diag.proposal_scale = scale;
  const auto total = static_cast<std::uint64_t>(cfg.samples) * static_cast<std::uint64_t>(cfg.thinning);
  diag.energy_trace.reserve(total);
  result.samples.reserve(static_cast<std::size_t>(cfg.samples));
  for (std::uint64_t s = 1; s <= total; ++s) {
    diag.accepted += sweep(scale);
    diag.proposed += n;
    const double h = state.pair_energy + big_n * state.potential_sum;
    if (!std::isfinite(h)) throw NumericalError("non-finite Hamiltonian in chain " + std::to_string(chain));
    diag.energy_trace.push_back(h);
    if (s % static_cast<std::uint64_t>(cfg.thinning) == 0) {
      result.samples.push_back(state);
      result.sweeps.push_back(static_cast<std::uint64_t>(cfg.burn_in) + s);
    }
  }
  diag.acceptance_rate =
      diag.proposed ? static_cast<double>(diag.accepted) / static_cast<double>(diag.proposed) : 0.0;
  diag.autocorrelation_time = integrated_autocorrelation_time(diag.energy_trace);
  return result;
}

void add_to_histogram(std::span<const double> point, const Grid& grid, std::vector<double>& counts,
                      double& inside) {
  if (!grid.contains(point)) return;
  counts[grid.nearest_node(point)] += 1.0;
  inside += 1.0;
}

DensityField histogram_density(const Grid& grid, std::vector<double> counts, double inside) {
  if (inside == 0.0) throw DomainError("no sampled coordinate falls inside the grid box");
  for (double& c : counts) c /= inside * grid.cell_volume();
  return DensityField::normalize(grid, std::move(counts));
}

template <class T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw IoError("truncated sample record: " + path.string());
  return value;
}

}  // namespace

ParticleConfiguration make_configuration(int dimension, std::vector<double> positions,
                                         const KernelSpec& kernel, const PotentialSpec& potential) {
  if (dimension < 1) throw ParameterError("dimension must be positive");
  if (positions.size() % static_cast<std::size_t>(dimension) != 0)
    throw ShapeError("coordinate count is not a multiple of the dimension");
  for (double c : positions)
    if (!std::isfinite(c)) throw NumericalError("non-finite particle coordinate");
  ParticleConfiguration x;
  x.dimension = dimension;
  x.positions = std::move(positions);
  x.pair_energy = pair_energy(x.positions, dimension, kernel);
  x.potential_sum = potential_sum(x.positions, dimension, potential);
  return x;
}

double pair_energy(std::span<const double> positions, int dimension, const KernelSpec& kernel) {
  PairKernel g(kernel, dimension);
  if (g.zero()) return 0.0;
  const auto d = static_cast<std::size_t>(dimension);
  const std::size_t n = positions.size() / d;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += g(&positions[i * d], &positions[j * d]);
  return 2.0 * s;
}

double hamiltonian(const ParticleConfiguration& x, const KernelSpec& kernel,
                   const PotentialSpec& potential, int n) {
  if (n < 1 || x.size() != static_cast<std::size_t>(n))
    throw ShapeError("configuration does not hold N points");
  return pair_energy(x.positions, x.dimension, kernel) +
         static_cast<double>(n) * potential_sum(x.positions, x.dimension, potential);
}

double next_order_energy(const ParticleConfiguration& x, const DensityField& mu,
                         const KernelSpec& kernel) {
  const Grid& grid = mu.grid();
  if (grid.dimension() != x.dimension) throw ShapeError("density and configuration dimensions differ");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!grid.contains(x.particle(i))) throw DomainError("particle lies outside the density's box");
  FieldConvolver conv(grid, kernel);
  const GridField h(grid, conv.potential(mu.values()));
  double energy = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) energy += mu[i] * h.values[i];
  energy *= grid.cell_volume();

  const double n = static_cast<double>(x.size());
  double field_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) field_sum += interpolate_cubic(h, x.particle(i));
  return pair_energy(x.positions, x.dimension, kernel) / (n * n) + energy - 2.0 * field_sum / n;
}

SplittingEvaluator::SplittingEvaluator(const ThermalSolution& solution, const KernelSpec& kernel,
                                       const PotentialSpec& potential)
    : kernel_(kernel),
      potential_(potential),
      theta_(solution.theta),
      field_(solution.density.grid()),
      log_density_(solution.density.grid()) {
  const DensityField& mu = solution.density;
  const Grid& grid = mu.grid();
  if (!(theta_ > 0.0) || !std::isfinite(theta_)) throw ParameterError("thermal solution has invalid theta");
  FieldConvolver conv(grid, kernel);
  field_.values = conv.potential(mu.values());
  const std::vector<double> v = sample_potential(potential, grid);
  double e = 0.0, pot = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(mu[i] > 0.0)) throw UnderflowError("thermal density is not strictly positive");
    e += mu[i] * field_.values[i];
    pot += mu[i] * v[i];
    log_density_.values[i] = std::log(mu[i]);
  }
  energy_ = e * grid.cell_volume();
  thermal_energy_ = energy_ + pot * grid.cell_volume() + entropy(mu) / theta_;
}

double SplittingEvaluator::field_at(std::span<const double> x) const {
  return interpolate_cubic(field_, x);
}

double SplittingEvaluator::zeta(std::span<const double> x) const {
  return -interpolate_cubic(log_density_, x) / theta_;
}

double SplittingEvaluator::next_order_energy(const ParticleConfiguration& x) const {
  const double n = static_cast<double>(x.size());
  double field_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) field_sum += field_at(x.particle(i));
  return pair_energy(x.positions, x.dimension, kernel_) / (n * n) + energy_ - 2.0 * field_sum / n;
}

SplittingReport SplittingEvaluator::residual(const ParticleConfiguration& x) const {
  const int n = static_cast<int>(x.size());
  const double nn = static_cast<double>(n);
  SplittingReport r;
  r.direct_H = hamiltonian(x, kernel_, potential_, n);
  const double f = next_order_energy(x);
  double zeta_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) zeta_sum += zeta(x.particle(i));
  r.reconstructed_H = nn * nn * (thermal_energy_ + f) + nn * zeta_sum;
  r.bracketed_H = nn * nn * (thermal_energy_ + f + nn * zeta_sum);
  const double scale = std::max(1.0, std::abs(r.direct_H));
  r.relative_gap = std::abs(r.direct_H - r.reconstructed_H) / scale;
  r.bracketed_gap = std::abs(r.direct_H - r.bracketed_H) / scale;
  return r;
}

SplittingReport splitting_residual(const ParticleConfiguration& x, const ThermalSolution& solution,
                                   const KernelSpec& kernel, const PotentialSpec& potential) {
  return SplittingEvaluator(solution, kernel, potential).residual(x);
}

ChainConfig ChainConfig::with_beta(int n, double beta) {
  ChainConfig c;
  c.N = n;
  c.beta = beta;
  c.theta = static_cast<double>(n) * beta;
  c.proposal_scale = 1.0 / std::sqrt(c.theta);
  return c;
}

ChainConfig ChainConfig::with_exponent(int n, double s) {
  return with_beta(n, std::pow(static_cast<double>(n), -s));
}

void ChainConfig::validate() const {
  if (N < 1) throw ConfigError("N must be at least 1");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive and finite");
  if (theta != static_cast<double>(N) * beta) throw ConfigError("theta must equal N * beta");
  if (!(proposal_scale > 0.0) || !std::isfinite(proposal_scale))
    throw ConfigError("proposal_scale must be positive");
  if (burn_in < 1) throw ConfigError("burn_in must be at least 1");
  if (thinning < 1) throw ConfigError("thinning must be at least 1");
  if (samples < 1) throw ConfigError("samples must be at least 1");
  if (chains < 1) throw ConfigError("chains must be at least 1");
  if (!(target_acceptance > 0.0 && target_acceptance < 1.0))
    throw ConfigError("target_acceptance must lie in (0, 1)");
}

double GibbsRun::acceptance_rate() const {
  std::uint64_t a = 0, p = 0;
  for (const auto& c : chains) {
    a += c.accepted;
    p += c.proposed;
  }
  return p ? static_cast<double>(a) / static_cast<double>(p) : 0.0;
}

double GibbsRun::autocorrelation_time() const {
  double tau = 1.0;
  for (const auto& c : chains) tau = std::max(tau, c.autocorrelation_time);
  return tau;
}

GibbsRun sample_gibbs(const ChainConfig& config, const KernelSpec& kernel,
                      const PotentialSpec& potential, int threads) {
  config.validate();
  if (kernel.dimension() != potential.dimension())
    throw ShapeError("kernel and potential dimensions differ");
  if (config.initial &&
      config.initial->size() != static_cast<std::size_t>(config.N * kernel.dimension()))
    throw ShapeError("initial configuration does not hold N points");

  const auto chains = static_cast<std::size_t>(config.chains);
  std::vector<ChainResult> results(chains);
  std::vector<std::exception_ptr> errors(chains);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < chains; c = next++) {
      try {
        results[c] = run_chain(config, kernel, potential, c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const auto workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, chains);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  GibbsRun run;
  for (std::size_t c = 0; c < chains; ++c) {
    auto& r = results[c];
    for (std::size_t s = 0; s < r.samples.size(); ++s) {
      run.samples.push_back(std::move(r.samples[s]));
      run.chain_of_sample.push_back(static_cast<int>(c));
      run.sweep_of_sample.push_back(r.sweeps[s]);
    }
    run.chains.push_back(std::move(r.diagnostics));
  }
  return run;
}

int pilot_burn_in(const ChainConfig& config, const KernelSpec& kernel, const PotentialSpec& potential,
                  int pilot_sweeps, int minimum) {
  ChainConfig pilot = config;
  pilot.burn_in = std::max(1, pilot_sweeps);
  pilot.thinning = 1;
  pilot.samples = std::max(1, pilot_sweeps);
  pilot.chains = 1;
  const GibbsRun run = sample_gibbs(pilot, kernel, potential);
  return std::max(minimum, static_cast<int>(std::ceil(10.0 * run.autocorrelation_time())));
}

DensityField estimate_marginal(std::span<const ParticleConfiguration> samples, const Grid& grid) {
  if (samples.empty()) throw ParameterError("marginal estimate needs at least one sample");
  std::vector<double> counts(grid.size(), 0.0);
  double inside = 0.0;
  for (const auto& x : samples) {
    if (x.dimension != grid.dimension()) throw ShapeError("sample and grid dimensions differ");
    for (std::size_t i = 0; i < x.size(); ++i) add_to_histogram(x.particle(i), grid, counts, inside);
  }
  return histogram_density(grid, std::move(counts), inside);
}

DensityField estimate_marginal_of_particle(std::span<const ParticleConfiguration> samples,
                                           const Grid& grid, std::size_t index) {
  if (samples.empty()) throw ParameterError("marginal estimate needs at least one sample");
  std::vector<double> counts(grid.size(), 0.0);
  double inside = 0.0;
  for (const auto& x : samples) {
    if (x.dimension != grid.dimension()) throw ShapeError("sample and grid dimensions differ");
    if (index >= x.size()) throw ShapeError("particle index out of range");
    add_to_histogram(x.particle(index), grid, counts, inside);
  }
  return histogram_density(grid, std::move(counts), inside);
}

double confinement_probability(std::span<const ParticleConfiguration> samples, double radius) {
  if (samples.empty()) throw ParameterError("confinement estimate needs at least one sample");
  std::size_t escaped = 0;
  for (const auto& x : samples) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      double r2 = 0.0;
      for (double c : x.particle(i)) r2 += c * c;
      if (std::sqrt(r2) > radius) {
        ++escaped;
        break;
      }
    }
  }
  return static_cast<double>(escaped) / static_cast<double>(samples.size());
}

void write_samples_binary(const std::filesystem::path& path, const GibbsRun& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::uint32_t n = run.samples.empty() ? 0 : static_cast<std::uint32_t>(run.samples[0].size());
  const std::uint32_t d = run.samples.empty() ? 0 : static_cast<std::uint32_t>(run.samples[0].dimension);
  out.write(kSampleMagic, sizeof(kSampleMagic));
  put<std::uint32_t>(out, n);
  put<std::uint32_t>(out, d);
  put<std::uint64_t>(out, run.samples.size());
  for (std::size_t s = 0; s < run.samples.size(); ++s) {
    const auto& x = run.samples[s];
    if (x.size() != n || static_cast<std::uint32_t>(x.dimension) != d)
      throw ShapeError("samples in one dump must share N and d");
    put<std::uint64_t>(out, static_cast<std::uint64_t>(run.chain_of_sample[s]));
    put<std::uint64_t>(out, run.sweep_of_sample[s]);
    out.write(reinterpret_cast<const char*>(x.positions.data()),
              static_cast<std::streamsize>(x.positions.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing sample dump: " + path.string());
}

SampleDump read_samples_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open sample dump: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kSampleMagic, sizeof(kSampleMagic)) != 0)
    throw IoError("not a sample dump: " + path.string());
  SampleDump dump;
  dump.N = static_cast<int>(get<std::uint32_t>(in, path));
  dump.dimension = static_cast<int>(get<std::uint32_t>(in, path));
  const auto count = get<std::uint64_t>(in, path);
  const std::size_t width = static_cast<std::size_t>(dump.N) * static_cast<std::size_t>(dump.dimension);
  for (std::uint64_t r = 0; r < count; ++r) {
    dump.chain.push_back(get<std::uint64_t>(in, path));
    dump.sweep.push_back(get<std::uint64_t>(in, path));
    std::vector<double> x(width);
    if (!in.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(width * sizeof(double))))
      throw IoError("truncated sample record: " + path.string());
    dump.positions.push_back(std::move(x));
  }
  return dump;
}

}  // namespace plab
