#include "plab/harness.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include <nlohmann/json.hpp>

#include "plab/analysis.hpp"
#include "plab/density_io.hpp"
#include "plab/errors.hpp"
#include "plab/fields.hpp"
#include "plab/rng.hpp"
#include "plab/sampler.hpp"

namespace plab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Runs fn(i) for i < n on up to `threads` threads; rethrows the exception of
/// the lowest failing index.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto count = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < count; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string number_text(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

json validation_json(const ValidationReport& r) {
  json checks = json::array();
  for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}});
  return {{"checks", checks}, {"fourier_mass_error", r.fourier_mass_error}, {"passed", r.passed}};
}

json interval_json(const Interval& i) { return json::array({i.lower, i.upper}); }

/// Configuration with positions drawn i.i.d. from a grid density (node by
/// cumulative mass, then uniform inside the cell).
std::vector<double> draw_from(const DensityField& mu, int n, Rng& rng) {
  const Grid& g = mu.grid();
  std::vector<double> cumulative(mu.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) cumulative[i] = (acc += mu[i] * g.cell_volume());
  const auto d = static_cast<std::size_t>(g.dimension());
  std::vector<double> out(static_cast<std::size_t>(n) * d), node(d);
  for (int p = 0; p < n; ++p) {
    const double u = rng.uniform() * acc;
    auto idx = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    idx = std::min(idx, mu.size() - 1);
    g.node_point(idx, node);
    for (std::size_t a = 0; a < d; ++a)
      out[static_cast<std::size_t>(p) * d + a] = node[a] + (rng.uniform() - 0.5) * g.spacing();
  }
  return out;
}

/// Cell averages of a density on a grid coarser by an integer factor per axis.
DensityField coarse_grain(const DensityField& mu, const Grid& coarse) {
  const Grid& fine = mu.grid();
  const int factor = fine.points_per_axis() / coarse.points_per_axis();
  std::vector<double> v(coarse.size(), 0.0);
  std::vector<int> idx(static_cast<std::size_t>(fine.dimension()));
  for (std::size_t i = 0; i < fine.size(); ++i) {
    fine.unflatten(i, idx);
    for (int& c : idx) c /= factor;
    v[coarse.flatten(idx)] += mu[i];
  }
  return DensityField::normalize(coarse, std::move(v));
}

std::uint64_t item_seed(std::uint64_t seed, int n) {
  std::uint64_t s = seed ^ (static_cast<std::uint64_t>(n) * 0x9e3779b97f4a7c15ULL);
  return splitmix64(s);
}

std::string sample_path(int n) { return "samples/N" + std::to_string(n) + ".bin"; }

class Run {
 public:
  Run(ExperimentConfig cfg, fs::path out, int threads, bool verbose)
      : cfg_(std::move(cfg)),
        kernel_(cfg_.make_kernel()),
        potential_(cfg_.make_potential()),
        grid_(cfg_.grid()),
        out_(std::move(out)),
        threads_(std::max(1, threads)),
        verbose_(verbose) {
    hash_ = config_hash(cfg_);
  }

  void open() {
    fs::create_directories(out_);
    const fs::path manifest = out_ / "manifest.json";
    if (fs::exists(manifest)) {
      json m;
      try {
        m = json::parse(read_file(manifest));
      } catch (const json::exception& e) {
        throw IoError("unreadable manifest " + manifest.string() + ": " + e.what());
      }
      const std::string recorded = m.value("config_hash", "");
      if (recorded != hash_)
        throw StalenessError("output directory " + out_.string() + " holds artifacts of config hash " + recorded +
                             ", not " + hash_ + "; use a fresh --out directory");
      commands_ = m.value("commands", std::vector<std::string>{});
      for (auto& [path, digest] : m.value("artifacts", json::object()).items()) artifacts_[path] = digest;
    }
  }

  void command(const std::string& name) {
    if (commands_.empty() || commands_.back() != name) commands_.push_back(name);
  }

  void close(RunResult& result) {
    // Parallel items report in completion order.
    std::stable_sort(failures_.begin(), failures_.end(), [](const Failure& a, const Failure& b) {
      return std::tie(a.check, a.detail) < std::tie(b.check, b.detail);
    });
    write_text("config.json", to_canonical_json(cfg_));
    json f = json::array();
    for (const auto& x : failures_)
      f.push_back({{"check", x.check}, {"detail", x.detail}, {"value", x.value}, {"threshold", x.threshold}});
    json fr = header();
    fr["failures"] = f;
    write_text("failures.json", fr.dump(2) + "\n");
    json m = header();
    m["seed"] = cfg_.chain.seed;
    m["commands"] = commands_;
    m["artifacts"] = artifacts_;
    std::ofstream(out_ / "manifest.json", std::ios::binary) << m.dump(2) << "\n";
    result.failures = failures_;
    for (const auto& [path, _] : artifacts_) result.artifacts.push_back(path);
  }

  void validate_kernel();
  void solve_thermal();
  void solve_equilibrium();
  void verify_identities();
  void sample();
  void analyze();

 private:
  json header() const { return {{"config_hash", hash_}, {"code_version", code_version()}}; }

  std::string csv_header() const {
    return "# config_hash=" + hash_ + " code_version=" + code_version() + "\n";
  }

  void log(const std::string& line) const {
    if (!verbose_) return;
    static std::mutex m;
    std::lock_guard<std::mutex> lock(m);
    std::cerr << "[plab] " << line << "\n";
  }

  void fail(std::string check, std::string detail, double value, double threshold) {
    std::lock_guard<std::mutex> lock(mutex_);
    log("FAIL " + check + ": " + detail);
    failures_.push_back({std::move(check), std::move(detail), value, threshold});
  }

  void record(const std::string& rel) {
    const std::string digest = sha256_hex(read_file(out_ / rel));
    std::lock_guard<std::mutex> lock(mutex_);
    artifacts_[rel] = digest;
  }

  void write_text(const std::string& rel, const std::string& text) {
    const fs::path p = out_ / rel;
    fs::create_directories(p.parent_path());
    {
      std::ofstream out(p, std::ios::binary);
      if (!out) throw IoError("cannot write " + p.string());
      out << text;
    }
    record(rel);
  }

  void write_json(const std::string& rel, json body) {
    json j = header();
    for (auto& [k, v] : body.items()) j[k] = v;
    write_text(rel, j.dump(2) + "\n");
  }

  void write_density(const std::string& stem, const DensityField& mu) {
    fs::create_directories(out_ / "density");
    write_field_binary(out_ / ("density/" + stem + ".bin"), mu.as_field());
    record("density/" + stem + ".bin");
    write_field_csv(out_ / ("density/" + stem + ".csv"), mu.as_field());
    record("density/" + stem + ".csv");
  }

  /// μ_θ on the configured grid or, if exp(-θ(2h + V)) underflows at its
  /// faces, on the largest box shrunk by factors of 0.9 at the same spacing.
  ThermalSolution thermal(double theta, const KernelSpec& kernel) const {
    ThermalOptions o;
    o.tol = cfg_.solver.tol;
    o.damping = cfg_.solver.damping;
    o.max_iter = cfg_.solver.max_iter;
    int m = grid_.points_per_axis();
    for (;;) {
      const Grid g(cfg_.dimension, 0.5 * m * grid_.spacing(), m);
      try {
        return solve_thermal_equilibrium(kernel, potential_, theta, g, o);
      } catch (const UnderflowError&) {
        const int next = 2 * static_cast<int>(std::floor(0.45 * m));
        if (next < 16) throw;
        m = next;
      }
    }
  }

  void require_regime() const {
    if (!cfg_.sweep.in_regime() && !cfg_.sweep.allow_out_of_regime)
      throw ConfigError("sweep.s = " + number_text(cfg_.sweep.s) +
                        " is out of regime; set sweep.allow_out_of_regime to run it as a contrast experiment");
    if (cfg_.sweep.N.empty()) throw ConfigError("sweep.N: no sweep points configured");
  }

  std::vector<ParticleConfiguration> load_samples(int n) const;

  ExperimentConfig cfg_;
  KernelSpec kernel_;
  PotentialSpec potential_;
  Grid grid_;
  fs::path out_;
  int threads_;
  bool verbose_;
  std::string hash_;
  std::vector<std::string> commands_;
  std::map<std::string, std::string> artifacts_;
  std::vector<Failure> failures_;
  std::mutex mutex_;
};

void Run::validate_kernel() {
  log("validate-kernel");
  json body;
  try {
    const Grid g = default_validation_grid(kernel_);
    const auto r = validate_weak_interaction(kernel_, g);
    body["kernel"] = validation_json(r);
    body["kernel"]["grid"] = {{"half_width", g.half_width()}, {"points", g.points_per_axis()}};
    if (!r.passed) fail("kernel_validation", kernel_.name() + " is not weakly interacting on the validation grid", 0, 0);
  } catch (const Error& e) {
    body["kernel"] = {{"passed", false}, {"error", e.what()}};
    fail("kernel_validation", e.what(), kNaN, kNaN);
  }
  try {
    const auto r = validate_admissible_potential(potential_, grid_);
    body["potential"] = validation_json(r);
    if (!r.passed) fail("potential_validation", "potential is not admissible on the grid", 0, 0);
  } catch (const Error& e) {
    body["potential"] = {{"passed", false}, {"error", e.what()}};
    fail("potential_validation", e.what(), kNaN, kNaN);
  }
  write_json("reports/validation.json", body);
}

void Run::solve_thermal() {
  log("solve-thermal");
  const auto& thetas = cfg_.thetas;
  std::vector<json> rows(thetas.size());
  parallel_for(thetas.size(), threads_, [&](std::size_t i) {
    const double theta = thetas[i];
    json row = {{"theta", theta}};
    try {
      const auto sol = thermal(theta, kernel_);
      write_density("thermal_" + std::to_string(i), sol.density);
      row["density"] = "density/thermal_" + std::to_string(i) + ".bin";
      row["grid"] = {{"half_width", sol.density.grid().half_width()}, {"points", sol.density.grid().points_per_axis()}};
      row["iterations"] = sol.iterations;
      row["residual"] = sol.residual;
      row["log_L_theta"] = sol.log_L_theta;
      // The padded convolution is exact on shrunk boxes too, so the unchecked
      // signed-measure overload is used here.
      const Grid& g = sol.density.grid();
      const double e = interaction_energy(sol.density.as_field(), kernel_).value;
      const auto v = sample_potential(potential_, g);
      double v_mean = 0.0;
      for (std::size_t j = 0; j < v.size(); ++j) v_mean += sol.density[j] * v[j] * g.cell_volume();
      const double ent = entropy(sol.density);
      row["interaction_energy"] = e;
      row["potential_energy"] = v_mean;
      row["entropy"] = ent;
      row["free_energy"] = e + v_mean + ent / theta;
      row["converged"] = sol.residual <= cfg_.solver.tol;
      if (sol.residual > cfg_.solver.tol)
        fail("thermal_residual", "theta = " + number_text(theta), sol.residual, cfg_.solver.tol);
      log("  theta " + number_text(theta) + ": residual " + number_text(sol.residual) + " after " +
          std::to_string(sol.iterations) + " iterations");
    } catch (const NonConvergenceError& e) {
      row["converged"] = false;
      row["error"] = e.what();
      fail("thermal_convergence", e.what(), e.last_residual(), cfg_.solver.tol);
    } catch (const Error& e) {
      row["converged"] = false;
      row["error"] = e.what();
      fail("thermal_solver", e.what(), kNaN, kNaN);
    }
    rows[i] = row;
  });
  write_json("reports/thermal.json", {{"solutions", rows}});
}

void Run::solve_equilibrium() {
  log("solve-equilibrium");
  json body;
  try {
    EquilibriumOptions o;
    o.tol = cfg_.solver.equilibrium_tol;
    const auto sol = plab::solve_equilibrium(kernel_, potential_, grid_, o);
    const double certificate = certify_equilibrium(sol, kernel_, potential_);
    write_density("equilibrium", sol.density);
    body = {{"density", "density/equilibrium.bin"},
            {"c_infinity", sol.c_infinity},
            {"objective", sol.objective},
            {"euler_lagrange_residual", sol.el_residual},
            {"certificate", certificate},
            {"iterations", sol.iterations}};
    if (certificate > cfg_.solver.equilibrium_tol)
      fail("equilibrium_certificate", "Euler-Lagrange certificate above tolerance", certificate,
           cfg_.solver.equilibrium_tol);
  } catch (const NonConvergenceError& e) {
    body = {{"error", e.what()}};
    fail("equilibrium_convergence", e.what(), e.last_residual(), cfg_.solver.equilibrium_tol);
  } catch (const Error& e) {
    body = {{"error", e.what()}};
    fail("equilibrium_solver", e.what(), kNaN, kNaN);
  }
  write_json("reports/equilibrium.json", body);
}

void Run::verify_identities() {
  log("verify-identities");
  const auto& thetas = cfg_.verify.thetas;
  const double tol = cfg_.verify.tolerance;
  json body;

  // Splitting identity and the thermal fixed point, one item per θ.
  std::vector<json> rows(thetas.size());
  std::vector<std::optional<ThermalSolution>> solutions(thetas.size());
  parallel_for(thetas.size(), threads_, [&](std::size_t t) {
    const double theta = thetas[t];
    json row = {{"theta", theta}};
    try {
      const auto sol = thermal(theta, kernel_);
      const double residual = thermal_residual(sol.density, kernel_, potential_, theta);
      const Grid& g = sol.density.grid();
      row["grid"] = {{"half_width", g.half_width()}, {"points", g.points_per_axis()}};
      row["thermal_residual"] = residual;
      if (residual > cfg_.solver.tol)
        fail("thermal_fixed_point", "theta = " + number_text(theta), residual, cfg_.solver.tol);

      const SplittingEvaluator eval(sol, kernel_, potential_);
      json per_n = json::array();
      for (std::size_t a = 0; a < cfg_.verify.N.size(); ++a) {
        const int n = cfg_.verify.N[a];
        Rng rng(cfg_.chain.seed, 1000 * t + a);
        double worst = 0.0, worst_bracketed = 0.0;
        for (int c = 0; c < cfg_.verify.configurations; ++c) {
          const auto x = make_configuration(cfg_.dimension, draw_from(sol.density, n, rng), kernel_, potential_);
          const auto r = eval.residual(x);
          worst = std::max(worst, r.relative_gap);
          worst_bracketed = std::max(worst_bracketed, r.bracketed_gap);
        }
        per_n.push_back({{"N", n}, {"max_relative_gap", worst}, {"max_bracketed_gap", worst_bracketed}});
        if (!(worst <= tol))
          fail("splitting_identity", "theta = " + number_text(theta) + ", N = " + std::to_string(n), worst, tol);
        log("  splitting theta " + number_text(theta) + " N " + std::to_string(n) + ": max gap " +
            number_text(worst));
      }
      row["splitting"] = per_n;

      // g ≡ 0 control: μ_θ ∝ exp(-θ V) exactly.
      const auto zero = thermal(theta, make_zero_kernel(cfg_.dimension));
      const auto gibbs = DensityField::from_function(
          zero.density.grid(), [&](std::span<const double> x) { return std::exp(-theta * potential_(x)); });
      const double l1 = l1_distance(zero.density, gibbs);
      row["zero_kernel_l1"] = l1;
      if (!(l1 <= 1e-6)) fail("zero_kernel_control", "theta = " + number_text(theta), l1, 1e-6);
      solutions[t] = sol;
    } catch (const Error& e) {
      row["error"] = e.what();
      fail("verify_theta", "theta = " + number_text(theta) + ": " + e.what(), kNaN, kNaN);
    }
    rows[t] = row;
  });
  body["thermal"] = rows;

  // Quadrature- and Fourier-side interaction energies of random densities.
  {
    Rng rng(cfg_.chain.seed, 999983);
    double worst = 0.0;
    for (int i = 0; i < cfg_.verify.densities; ++i) {
      std::vector<double> v(grid_.size());
      const double centre = rng.uniform(-0.5, 0.5) * grid_.half_width();
      const double width = rng.uniform(0.1, 0.4) * grid_.half_width();
      std::vector<double> x(static_cast<std::size_t>(grid_.dimension()));
      for (std::size_t j = 0; j < v.size(); ++j) {
        grid_.node_point(j, x);
        double r2 = 0.0;
        for (double c : x) r2 += (c - centre) * (c - centre);
        v[j] = std::exp(-r2 / (2 * width * width)) * (0.5 + rng.uniform());
      }
      const auto e = interaction_energy(DensityField::normalize(grid_, std::move(v)), kernel_);
      worst = std::max(worst, std::abs(e.value - e.fourier_value) / std::max(std::abs(e.value), 1e-300));
    }
    body["energy_duality"] = {{"densities", cfg_.verify.densities}, {"max_relative_gap", worst}};
    if (!(worst <= 1e-8) && !kernel_.is_zero()) fail("energy_duality", "quadrature vs Fourier", worst, 1e-8);
  }

  if (!kernel_.is_zero()) {
    const auto phi = phi_variational_check(kernel_, grid_);
    const double gap = std::abs(phi.achieved - phi.lower_bound) / phi.lower_bound;
    body["phi"] = {{"lower_bound", phi.lower_bound},
                   {"achieved", phi.achieved},
                   {"achieved_fourier", phi.achieved_fourier},
                   {"relative_gap", gap}};
    if (!(gap <= 1e-6)) fail("phi_witness", "E(delta/g(0)) vs 1/g(0)", gap, 1e-6);
  }

  // -(1/θ) log L_θ against 2 c_∞.
  bool all_solved = !thetas.empty();
  for (const auto& s : solutions) all_solved = all_solved && s.has_value();
  if (all_solved) {
    try {
      EquilibriumOptions o;
      o.tol = cfg_.solver.equilibrium_tol;
      const auto eq = plab::solve_equilibrium(kernel_, potential_, grid_, o);
      std::vector<ThermalSolution> sols;
      for (const auto& s : solutions) sols.push_back(*s);
      const auto report = l_theta_asymptotics(sols, eq.c_infinity);
      json lrows = json::array();
      for (const auto& r : report.rows)
        lrows.push_back({{"theta", r.theta}, {"minus_log_L_over_theta", r.minus_log_L_over_theta}, {"gap", r.gap}});
      body["l_theta"] = {{"two_c_infinity", report.two_c_infinity},
                         {"rows", lrows},
                         {"gap_strictly_decreasing", report.gap_strictly_decreasing}};
      if (sols.size() > 1 && !report.gap_strictly_decreasing)
        fail("l_theta_asymptotics", "gap to 2 c_infinity is not strictly decreasing in theta", report.rows.back().gap,
             kNaN);
    } catch (const Error& e) {
      body["l_theta"] = {{"error", e.what()}};
      fail("l_theta_asymptotics", e.what(), kNaN, kNaN);
    }
  }
  write_json("reports/identities.json", body);
}

void Run::sample() {
  require_regime();
  log("sample");
  const auto points = cfg_.sweep.points();
  std::vector<json> rows(points.size());
  // Items run in parallel; with a single item the chains get the threads.
  const int chain_threads = points.size() == 1 ? threads_ : 1;
  fs::create_directories(out_ / "samples");
  parallel_for(points.size(), threads_, [&](std::size_t i) {
    const auto& p = points[i];
    auto c = ChainConfig::with_beta(p.N, p.beta);
    c.burn_in = cfg_.chain.burn_in;
    c.thinning = cfg_.chain.thinning;
    c.samples = cfg_.chain.samples;
    c.chains = cfg_.chain.chains;
    c.tune = cfg_.chain.tune;
    c.seed = item_seed(cfg_.chain.seed, p.N);
    const auto run = sample_gibbs(c, kernel_, potential_, chain_threads);
    write_samples_binary(out_ / sample_path(p.N), run);
    record(sample_path(p.N));
    json chains = json::array();
    double drift = 0.0;
    for (const auto& d : run.chains) {
      chains.push_back({{"acceptance_rate", d.acceptance_rate},
                        {"accepted", d.accepted},
                        {"proposed", d.proposed},
                        {"autocorrelation_time", d.autocorrelation_time},
                        {"proposal_scale", d.proposal_scale},
                        {"cache_checks", d.cache_checks},
                        {"max_cache_drift", d.max_cache_drift},
                        {"mean_energy", mean(d.energy_trace)}});
      drift = std::max(drift, d.max_cache_drift);
    }
    rows[i] = {{"N", p.N},
               {"beta", p.beta},
               {"theta", p.theta},
               {"seed", c.seed},
               {"samples", sample_path(p.N)},
               {"retained", run.samples.size()},
               {"acceptance_rate", run.acceptance_rate()},
               {"autocorrelation_time", run.autocorrelation_time()},
               {"chains", chains}};
    if (drift > 1e-9) fail("energy_cache", "N = " + std::to_string(p.N), drift, 1e-9);
    log("  N " + std::to_string(p.N) + ": acceptance " + number_text(run.acceptance_rate()) + ", tau " +
        number_text(run.autocorrelation_time()));
  });
  write_json("reports/chains.json",
             {{"s", cfg_.sweep.s}, {"in_regime", cfg_.sweep.in_regime()}, {"sweep", rows}});
}

std::vector<ParticleConfiguration> Run::load_samples(int n) const {
  const fs::path path = out_ / sample_path(n);
  if (!fs::exists(path)) throw IoError("missing sample dump " + path.string() + "; run `sample` first");
  auto dump = read_samples_binary(path);
  if (dump.N != n || dump.dimension != cfg_.dimension)
    throw StalenessError("sample dump " + path.string() + " does not match the configured N and d");
  std::vector<ParticleConfiguration> out;
  out.reserve(dump.positions.size());
  for (auto& x : dump.positions) {
    // Analysis never reads the cached energies; recomputing them is O(N²) per sample.
    ParticleConfiguration c;
    c.dimension = dump.dimension;
    c.positions = std::move(x);
    c.pair_energy = kNaN;
    c.potential_sum = kNaN;
    out.push_back(std::move(c));
  }
  return out;
}

void Run::analyze() {
  require_regime();
  log("analyze");
  const auto points = cfg_.sweep.points();
  const auto& a = cfg_.analysis;
  const int d = cfg_.dimension;

  // Intensity of the limiting Poisson process: μ_θ at the largest θ of the sweep.
  double theta_max = 0.0;
  for (const auto& p : points) theta_max = std::max(theta_max, p.theta);
  const auto reference = thermal(theta_max, kernel_);
  const double intensity = interpolate_cubic(reference.density.as_field(), a.x_star);
  const double peak = *std::max_element(reference.density.values().begin(), reference.density.values().end());
  const bool interior = intensity >= 0.05 * peak;
  if (!interior) log("warning: x_star sits where mu_theta is below 5% of its maximum");

  const Grid coarse(d, cfg_.half_width, a.marginal_bins);
  std::vector<json> items(points.size());
  std::vector<std::vector<PoissonTestRow>> rows(points.size());
  std::vector<std::vector<json>> tests(points.size());
  std::vector<std::string> csv(points.size());

  parallel_for(points.size(), threads_, [&](std::size_t i) {
    const auto& p = points[i];
    const auto samples = load_samples(p.N);
    const auto sol = thermal(p.theta, kernel_);
    json item = {{"N", p.N}, {"beta", p.beta}, {"theta", p.theta}, {"samples", samples.size()}};
    std::ostringstream rows_csv;
    auto csv_row = [&](const std::string& window, const std::string& stat, double value, double se) {
      rows_csv << p.N << "," << number_text(p.beta) << "," << window << "," << stat << "," << number_text(value)
               << "," << number_text(se) << "\n";
    };
    auto test = [&](const std::string& name, json params, double statistic, double p_value, double bound,
                    bool verdict) {
      params["N"] = p.N;
      params["beta"] = p.beta;
      tests[i].push_back({{"name", name},
                          {"parameters", params},
                          {"statistic", statistic},
                          {"p_value", p_value},
                          {"bound", bound},
                          {"verdict", verdict ? "pass" : "fail"}});
    };

    if (sol.density.grid() != grid_)
      throw ConfigError("grid.half_width: mu_theta at theta = " + number_text(p.theta) +
                        " underflows on the configured box; shrink it");
    const auto hist = estimate_marginal(samples, coarse);
    const double l1 = l1_distance(hist, coarse_grain(sol.density, coarse));
    item["marginal_l1"] = l1;
    item["confinement_probability"] = confinement_probability(samples, a.confinement_radius);
    csv_row("", "marginal_l1", l1, kNaN);
    csv_row("", "confinement_probability", item["confinement_probability"], kNaN);

    // Field fluctuations at the first k test points.
    json conc = json::array(), lap = json::array();
    for (int k : a.k_orders) {
      std::vector<std::vector<double>> ys(a.y_points.begin(), a.y_points.begin() + k);
      const FluctuationProbe probe(p.N, p.beta, sol, kernel_, ys);
      std::vector<double> eps = a.epsilons;
      if (kernel_.g0() > 0.0)
        for (double lb : a.log_bounds) eps.push_back(epsilon_for_bound(p.N, p.beta, kernel_.g0(), k, std::exp(lb)));
      for (double e : eps) {
        const auto r = concentration_check(samples, probe, e);
        conc.push_back({{"k", k},
                        {"epsilon", e},
                        {"empirical_probability", r.empirical_probability},
                        {"upper_confidence", r.interval.upper},
                        {"exceedances", r.exceedances},
                        {"bound", r.theoretical_bound},
                        {"vacuous", r.vacuous},
                        {"deterministic", r.deterministic},
                        {"satisfied", r.satisfied},
                        {"max_abs_deviation", r.max_abs_deviation},
                        {"ceiling_violations", r.ceiling_violations}});
        test("concentration", {{"k", k}, {"epsilon", e}}, r.empirical_probability, kNaN, r.theoretical_bound,
             r.satisfied);
        csv_row("", "concentration_k" + std::to_string(k), r.empirical_probability,
                std::sqrt(r.empirical_probability * (1 - r.empirical_probability) / double(samples.size())));
        if (!r.satisfied)
          fail("concentration_bound",
               "N = " + std::to_string(p.N) + ", k = " + std::to_string(k) + ", epsilon = " + number_text(e),
               r.interval.upper, r.theoretical_bound);
      }
      const auto l = laplace_fluctuation_check(samples, probe);
      lap.push_back({{"k", k},
                     {"log_empirical", l.log_empirical},
                     {"log_reference", l.log_reference},
                     {"abs_log_ratio", l.abs_log_ratio},
                     {"bound", l.bound},
                     {"standard_error_log", l.standard_error_log},
                     {"satisfied", l.satisfied}});
      test("laplace_fluctuation", {{"k", k}}, l.abs_log_ratio, kNaN, l.bound, l.satisfied);
      csv_row("", "abs_log_laplace_ratio_k" + std::to_string(k), l.abs_log_ratio, l.standard_error_log);
      if (!l.satisfied)
        fail("laplace_fluctuation", "N = " + std::to_string(p.N) + ", k = " + std::to_string(k), l.abs_log_ratio,
             l.bound);
    }
    item["concentration"] = conc;
    item["laplace_fluctuation"] = lap;

    // Local Poisson statistics, one row per window.
    for (double side : a.windows) {
      const auto w = Window::centered(d, side);
      const auto local = extract_local_processes(samples, a.x_star, w);
      auto row = poisson_tests(local, w, intensity, a.correlation_bins);
      row.N = p.N;
      row.beta = p.beta;
      const std::string ws = number_text(side);
      const double n = static_cast<double>(row.counts.n_samples);
      json params = {{"window", side}, {"intensity", intensity}};
      test("count_chi_square", params, row.gof.statistic, row.gof.p_value, kNaN, row.gof.p_value >= 0.05);
      test("count_tv_distance", params, row.gof.tv_distance, kNaN, a.tv_threshold,
           row.gof.tv_distance <= a.tv_threshold);
      test("void_probability", params, row.void_estimate.value, row.void_p_value, kNaN, row.void_p_value >= 0.05);
      test("laplace_indicator", params, row.laplace.value, row.laplace.p_value, kNaN, row.laplace.p_value >= 0.05);
      test("correlation_k1", params, row.r1.hotelling_t2, row.r1.p_value, kNaN, !(row.r1.p_value < 0.05));
      test("correlation_k2", params, row.r2.hotelling_t2, row.r2.p_value, kNaN, !(row.r2.p_value < 0.05));
      csv_row(ws, "mean_count", row.counts.mean(), std::sqrt(row.counts.variance() / n));
      csv_row(ws, "poisson_mean", intensity * row.window_volume, kNaN);
      csv_row(ws, "tv_distance", row.gof.tv_distance, kNaN);
      csv_row(ws, "chi_square_p", row.gof.p_value, kNaN);
      csv_row(ws, "void_probability", row.void_estimate.value, row.void_estimate.standard_error);
      csv_row(ws, "laplace_indicator", row.laplace.value, row.laplace.standard_error);
      for (std::size_t b = 0; b < row.r1.values.size(); ++b)
        csv_row(ws, "r1_bin" + std::to_string(b), row.r1.values[b], row.r1.standard_errors[b]);
      for (std::size_t b = 0; b < row.r2.values.size(); ++b)
        csv_row(ws, "r2_bin" + std::to_string(b), row.r2.values[b], row.r2.standard_errors[b]);
      rows[i].push_back(std::move(row));
    }
    items[i] = item;
    csv[i] = rows_csv.str();
    log("  N " + std::to_string(p.N) + ": marginal L1 " + number_text(l1));
  });

  // Single-threaded summary, per window across N.
  json poisson = json::array();
  for (std::size_t w = 0; w < a.windows.size(); ++w) {
    std::vector<PoissonTestRow> across;
    for (const auto& r : rows) across.push_back(r[w]);
    const auto summary = summarize_poisson_convergence(across);
    json table = json::array();
    for (const auto& r : summary.rows)
      table.push_back({{"N", r.N},
                       {"beta", r.beta},
                       {"mean_count", r.counts.mean()},
                       {"poisson_mean", r.intensity * r.window_volume},
                       {"histogram", r.counts.histogram},
                       {"tv_distance", r.gof.tv_distance},
                       {"chi_square", r.gof.statistic},
                       {"chi_square_dof", r.gof.degrees_of_freedom},
                       {"chi_square_p", r.gof.p_value},
                       {"count_ess", r.count_ess},
                       {"void_probability", r.void_estimate.value},
                       {"void_standard_error", r.void_estimate.standard_error},
                       {"void_interval", interval_json(r.void_estimate.interval)},
                       {"void_prediction", r.void_prediction},
                       {"void_p", r.void_p_value},
                       {"laplace_indicator", r.laplace.value},
                       {"laplace_prediction", r.laplace.poisson_prediction},
                       {"laplace_p", r.laplace.p_value},
                       {"r1", r.r1.values},
                       {"r1_standard_errors", r.r1.standard_errors},
                       {"r1_p", r.r1.p_value},
                       {"r2", r.r2.values},
                       {"r2_standard_errors", r.r2.standard_errors},
                       {"r2_p", r.r2.p_value},
                       {"low_power", r.gof.low_power}});
    poisson.push_back({{"window", a.windows[w]},
                       {"rows", table},
                       {"tv_decreasing", summary.tv_decreasing},
                       {"final_tv", summary.final_tv}});
    if (a.require_poisson) {
      if (summary.final_tv > a.tv_threshold)
        fail("poisson_tv", "window " + number_text(a.windows[w]) + " at the largest N", summary.final_tv,
             a.tv_threshold);
      if (summary.rows.size() > 1 && !summary.tv_decreasing)
        fail("poisson_tv_trend", "window " + number_text(a.windows[w]) + ": TV not decreasing in N",
             summary.final_tv, kNaN);
    }
  }

  json all_tests = json::array();
  std::string csv_text = csv_header() + "N,beta,window,statistic,value,stderr\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (auto& t : tests[i]) all_tests.push_back(t);
    csv_text += csv[i];
  }
  write_json("reports/analysis.json", {{"x_star", a.x_star},
                                       {"theta_max", theta_max},
                                       {"intensity", intensity},
                                       {"x_star_interior", interior},
                                       {"in_regime", cfg_.sweep.in_regime()},
                                       {"items", items},
                                       {"poisson", poisson}});
  write_json("reports/tests.json", {{"tests", all_tests}});
  write_text("reports/tests.csv", csv_text);
}

void dispatch(Run& run, const std::string& name) {
  if (name == "validate-kernel") {
    run.validate_kernel();
  } else if (name == "solve-thermal") {
    run.solve_thermal();
  } else if (name == "solve-equilibrium") {
    run.solve_equilibrium();
  } else if (name == "verify-identities") {
    run.verify_identities();
  } else if (name == "sample") {
    run.sample();
  } else if (name == "analyze") {
    run.analyze();
  } else if (name == "sweep") {
    run.sample();
    run.analyze();
  } else if (name == "all" || name == "run") {
    run.validate_kernel();
    run.solve_thermal();
    run.solve_equilibrium();
    run.verify_identities();
    run.sample();
    run.analyze();
  } else {
    throw ConfigError("unknown subcommand '" + name + "'");
  }
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"validate-kernel", "solve-thermal", "solve-equilibrium",
                                                 "verify-identities", "sample", "analyze", "sweep", "all", "run"};
  return names;
}

RunResult run_command(const std::string& subcommand, ExperimentConfig config, const RunOptions& options) {
  if (std::find(subcommands().begin(), subcommands().end(), subcommand) == subcommands().end())
    throw ConfigError("unknown subcommand '" + subcommand + "'");
  if (options.seed) config.chain.seed = *options.seed;
  const fs::path out = options.out.empty() ? fs::path(config.output) : options.out;
  Run run(std::move(config), out, options.threads, options.verbose);
  run.open();
  run.command(subcommand == "run" ? "all" : subcommand);
  dispatch(run, subcommand);
  RunResult result;
  run.close(result);
  return result;
}

void reproduce(const fs::path& out_dir, int threads, bool verbose) {
  const fs::path manifest_path = out_dir / "manifest.json";
  const fs::path config_path = out_dir / "config.json";
  if (!fs::exists(manifest_path)) throw IoError("missing artifact: " + manifest_path.string());
  if (!fs::exists(config_path)) throw IoError("missing artifact: " + config_path.string());
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw IoError("unreadable manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto commands = manifest.value("commands", std::vector<std::string>{});
  const auto recorded = manifest.value("artifacts", json::object());
  for (auto& [path, _] : recorded.items())
    if (!fs::exists(out_dir / path)) throw IoError("missing artifact: " + path);

  const auto config = load_config(config_path);
  const fs::path scratch = fs::temp_directory_path() / ("plab-reproduce-" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  struct Cleanup {
    fs::path p;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  } cleanup{scratch};

  RunOptions o;
  o.out = scratch;
  o.threads = threads;
  o.verbose = verbose;
  for (const auto& c : commands) run_command(c, config, o);

  const auto fresh = json::parse(read_file(scratch / "manifest.json")).value("artifacts", json::object());
  // Raw data first, so the reported divergence is the root cause rather than
  // a report that merely embeds it.
  std::vector<std::string> order;
  for (auto& [path, _] : recorded.items()) order.push_back(path);
  auto rank = [](const std::string& p) {
    return p.rfind("samples/", 0) == 0 ? 0 : p.rfind("density/", 0) == 0 ? 1 : p.rfind("reports/", 0) == 0 ? 2 : 3;
  };
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });
  for (const auto& path : order) {
    if (!fs::exists(scratch / path)) throw ReproducibilityError("artifact not regenerated: " + path);
    if (read_file(out_dir / path) != read_file(scratch / path))
      throw ReproducibilityError("artifact differs on re-run: " + path);
  }
  for (auto& [path, _] : fresh.items())
    if (!recorded.contains(path)) throw ReproducibilityError("re-run produced an unrecorded artifact: " + path);
  if (read_file(manifest_path) != read_file(scratch / "manifest.json"))
    throw ReproducibilityError("artifact differs on re-run: manifest.json");
}

}  // namespace plab
