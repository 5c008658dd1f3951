#include "plab/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "plab/errors.hpp"

#ifndef PLAB_GIT_REVISION
#define PLAB_GIT_REVISION "unknown"
#endif

namespace plab {

using nlohmann::json;

namespace {

/// JSON object cursor that remembers its dotted path and which keys were read,
/// so unknown keys can be reported.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config must be an object" : "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Node object(const std::string& key) {
    return Node(require(key), sub(key));
  }

  double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
    if (!has(key)) return value_or_missing(key, fallback);
    const auto& v = take(key);
    if (!v.is_number()) fail_at(key, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail_at(key, "expected a finite number");
    return x;
  }

  double positive(const std::string& key, std::optional<double> fallback = std::nullopt) {
    const double x = number(key, fallback);
    if (!(x > 0.0)) fail_at(key, "expected a positive number");
    return x;
  }

  long long integer(const std::string& key, std::optional<long long> fallback = std::nullopt,
                    long long minimum = 0) {
    if (!has(key)) {
      if (!fallback) fail_at(key, "missing required field");
      return *fallback;
    }
    const auto& v = take(key);
    if (!v.is_number_integer()) fail_at(key, "expected an integer");
    const auto x = v.get<long long>();
    if (x < minimum) fail_at(key, "expected an integer >= " + std::to_string(minimum));
    return x;
  }

  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_number_unsigned()) fail_at(key, "expected an unsigned 64-bit integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_boolean()) fail_at(key, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
    if (!has(key)) {
      if (!fallback) fail_at(key, "missing required field");
      return *fallback;
    }
    const auto& v = take(key);
    if (!v.is_string()) fail_at(key, "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, std::optional<std::vector<double>> fallback = std::nullopt) {
    if (!has(key)) {
      if (!fallback) fail_at(key, "missing required field");
      return *fallback;
    }
    const auto& v = take(key);
    return number_array(v, sub(key));
  }

  std::vector<int> integers(const std::string& key, std::optional<std::vector<int>> fallback, int minimum) {
    if (!has(key)) {
      if (!fallback) fail_at(key, "missing required field");
      return *fallback;
    }
    const auto& v = take(key);
    if (!v.is_array()) fail_at(key, "expected an array of integers");
    std::vector<int> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_integer() || v[i].get<long long>() < minimum || v[i].get<long long>() > INT32_MAX)
        throw ConfigError(sub(key) + "[" + std::to_string(i) + "]: expected an integer >= " +
                          std::to_string(minimum));
      out.push_back(v[i].get<int>());
    }
    return out;
  }

  std::vector<std::vector<double>> points(const std::string& key, int dimension) {
    if (!has(key)) return {};
    const auto& v = take(key);
    if (!v.is_array()) fail_at(key, "expected an array of points");
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string p = sub(key) + "[" + std::to_string(i) + "]";
      auto x = number_array(v[i], p);
      if (static_cast<int>(x.size()) != dimension)
        throw ConfigError(p + ": expected " + std::to_string(dimension) + " coordinates");
      out.push_back(std::move(x));
    }
    return out;
  }

  /// Rejects keys that were never read (typos would otherwise be ignored).
  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(sub(key) + ": unknown field");
  }

  [[noreturn]] void fail_at(const std::string& key, const std::string& what) const {
    throw ConfigError(sub(key) + ": " + what);
  }
  const std::string& path() const { return path_; }

 private:
  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& require(const std::string& key) {
    if (!has(key)) fail_at(key, "missing required field");
    return take(key);
  }

  const json& take(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  double value_or_missing(const std::string& key, std::optional<double> fallback) const {
    if (!fallback) fail_at(key, "missing required field");
    return *fallback;
  }

  static std::vector<double> number_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number() || !std::isfinite(v[i].get<double>()))
        throw ConfigError(path + "[" + std::to_string(i) + "]: expected a finite number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(path_.empty() ? what : path_ + ": " + what);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require_positive_list(const std::vector<double>& v, const std::string& path) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!(v[i] > 0.0)) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a positive number");
}

json points_json(const std::vector<std::vector<double>>& p) {
  json out = json::array();
  for (const auto& x : p) out.push_back(x);
  return out;
}

}  // namespace

std::vector<SweepPoint> SweepConfig::points() const {
  std::vector<SweepPoint> out;
  for (int n : N) {
    const double beta = std::pow(static_cast<double>(n), -s);
    out.push_back({n, beta, n * beta});
  }
  return out;
}

Grid ExperimentConfig::grid() const { return Grid(dimension, half_width, points); }

KernelSpec ExperimentConfig::make_kernel() const {
  if (kernel.name == "gaussian") return make_gaussian_kernel(dimension, kernel.amplitude, kernel.width);
  if (kernel.name == "matern") return make_matern_kernel(dimension, kernel.amplitude, kernel.width);
  if (kernel.name == "zero") return make_zero_kernel(dimension);
  throw ConfigError("kernel.name: unknown kernel '" + kernel.name + "'");
}

PotentialSpec ExperimentConfig::make_potential() const {
  return make_quadratic_potential(dimension, potential.stiffness);
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Node root(doc, "");
  ExperimentConfig c;

  c.dimension = static_cast<int>(root.integer("dimension", std::nullopt, 1));
  if (c.dimension > 3) root.fail_at("dimension", "only d = 1, 2, 3 are supported");

  {
    Node k = root.object("kernel");
    c.kernel.name = k.string("name");
    if (c.kernel.name != "gaussian" && c.kernel.name != "matern" && c.kernel.name != "zero")
      k.fail_at("name", "unknown kernel '" + c.kernel.name + "' (gaussian, matern, zero)");
    if (c.kernel.name != "zero") {
      c.kernel.amplitude = k.positive("amplitude");
      c.kernel.width = k.positive("width");
    }
    k.finish();
  }
  {
    Node v = root.object("potential");
    c.potential.name = v.string("name");
    if (c.potential.name != "quadratic") v.fail_at("name", "unknown potential '" + c.potential.name + "' (quadratic)");
    c.potential.stiffness = v.positive("stiffness");
    v.finish();
  }
  {
    Node g = root.object("grid");
    c.half_width = g.positive("half_width");
    c.points = static_cast<int>(g.integer("points", std::nullopt, 4));
    if (c.points % 2 != 0) g.fail_at("points", "expected an even number of points per axis");
    g.finish();
  }
  if (root.has("solver")) {
    Node s = root.object("solver");
    c.solver.tol = s.positive("tol", c.solver.tol);
    c.solver.damping = s.positive("damping", c.solver.damping);
    if (c.solver.damping > 1.0) s.fail_at("damping", "expected a value in (0, 1]");
    c.solver.max_iter = static_cast<int>(s.integer("max_iter", c.solver.max_iter, 1));
    c.solver.equilibrium_tol = s.positive("equilibrium_tol", c.solver.equilibrium_tol);
    s.finish();
  }
  c.thetas = root.numbers("thetas", std::vector<double>{});
  require_positive_list(c.thetas, "thetas");
  for (std::size_t i = 1; i < c.thetas.size(); ++i)
    if (!(c.thetas[i] > c.thetas[i - 1])) throw ConfigError("thetas: expected strictly increasing values");

  if (root.has("sweep")) {
    Node s = root.object("sweep");
    c.sweep.N = s.integers("N", std::nullopt, 1);
    if (!s.has("s")) s.fail_at("s", "missing required field (the exponent in beta = N^-s)");
    c.sweep.s = s.number("s");
    c.sweep.allow_out_of_regime = s.boolean("allow_out_of_regime", false);
    if (s.has("theta")) {
      // Optional explicit θ per N, checked against θ = N β.
      const auto theta = s.numbers("theta");
      if (theta.size() != c.sweep.N.size()) s.fail_at("theta", "expected one value per entry of sweep.N");
      const auto pts = c.sweep.points();
      for (std::size_t i = 0; i < theta.size(); ++i)
        if (std::abs(theta[i] - pts[i].theta) > 1e-12 * pts[i].theta)
          throw ConfigError("sweep.theta[" + std::to_string(i) + "]: theta must equal N*beta = " +
                            std::to_string(pts[i].theta));
    }
    s.finish();
    if (!c.sweep.in_regime())
      std::cerr << "warning: sweep.s = " << c.sweep.s
                << " is outside (1/2, 1); the sweep is an out-of-regime contrast run\n";
  }
  if (root.has("chain")) {
    Node ch = root.object("chain");
    c.chain.seed = ch.unsigned_integer("seed", c.chain.seed);
    c.chain.chains = static_cast<int>(ch.integer("chains", c.chain.chains, 1));
    c.chain.burn_in = static_cast<int>(ch.integer("burn_in", c.chain.burn_in, 0));
    c.chain.thinning = static_cast<int>(ch.integer("thinning", c.chain.thinning, 1));
    c.chain.samples = static_cast<int>(ch.integer("samples", c.chain.samples, 1));
    c.chain.tune = ch.boolean("tune", c.chain.tune);
    ch.finish();
  }
  if (root.has("analysis")) {
    Node a = root.object("analysis");
    c.analysis.x_star = a.numbers("x_star", std::vector<double>(static_cast<std::size_t>(c.dimension), 0.0));
    if (static_cast<int>(c.analysis.x_star.size()) != c.dimension)
      a.fail_at("x_star", "expected " + std::to_string(c.dimension) + " coordinates");
    c.analysis.windows = a.numbers("windows", std::vector<double>{1.0});
    require_positive_list(c.analysis.windows, "analysis.windows");
    c.analysis.correlation_bins = static_cast<int>(a.integer("correlation_bins", 4, 1));
    c.analysis.marginal_bins = static_cast<int>(a.integer("marginal_bins", 64, 2));
    if (c.points % c.analysis.marginal_bins != 0)
      a.fail_at("marginal_bins", "must divide grid.points");
    c.analysis.confinement_radius = a.positive("confinement_radius", 2.0);
    c.analysis.y_points = a.points("y_points", c.dimension);
    c.analysis.k_orders = a.integers("k_orders", std::vector<int>{}, 1);
    for (int k : c.analysis.k_orders)
      if (k > static_cast<int>(c.analysis.y_points.size()))
        a.fail_at("k_orders", "k = " + std::to_string(k) + " exceeds the number of y_points");
    c.analysis.epsilons = a.numbers("epsilons", std::vector<double>{});
    require_positive_list(c.analysis.epsilons, "analysis.epsilons");
    c.analysis.log_bounds = a.numbers("log_bounds", std::vector<double>{});
    for (std::size_t i = 0; i < c.analysis.log_bounds.size(); ++i)
      if (!(c.analysis.log_bounds[i] < 0.0))
        throw ConfigError("analysis.log_bounds[" + std::to_string(i) + "]: expected a negative number");
    c.analysis.tv_threshold = a.positive("tv_threshold", 0.05);
    c.analysis.require_poisson = a.boolean("require_poisson", false);
    a.finish();
  } else {
    c.analysis.x_star.assign(static_cast<std::size_t>(c.dimension), 0.0);
    c.analysis.windows = {1.0};
  }
  if (root.has("verify")) {
    Node v = root.object("verify");
    c.verify.configurations = static_cast<int>(v.integer("configurations", 100, 1));
    c.verify.N = v.integers("N", std::vector<int>{3, 50, 500}, 1);
    c.verify.thetas = v.numbers("thetas", c.thetas);
    require_positive_list(c.verify.thetas, "verify.thetas");
    c.verify.tolerance = v.positive("tolerance", 1e-6);
    c.verify.densities = static_cast<int>(v.integer("densities", 20, 1));
    v.finish();
  } else {
    c.verify.N = {3, 50, 500};
    c.verify.thetas = c.thetas;
  }
  c.output = root.string("output", c.output);
  root.finish();

  try {
    (void)c.grid();
    (void)c.make_kernel();
    (void)c.make_potential();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid model parameters: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_canonical_json(const ExperimentConfig& c) {
  json kernel = {{"name", c.kernel.name}};
  if (c.kernel.name != "zero") {
    kernel["amplitude"] = c.kernel.amplitude;
    kernel["width"] = c.kernel.width;
  }
  json j = {
      {"kernel", kernel},
      {"potential", {{"name", c.potential.name}, {"stiffness", c.potential.stiffness}}},
      {"dimension", c.dimension},
      {"grid", {{"half_width", c.half_width}, {"points", c.points}}},
      {"solver",
       {{"tol", c.solver.tol},
        {"damping", c.solver.damping},
        {"max_iter", c.solver.max_iter},
        {"equilibrium_tol", c.solver.equilibrium_tol}}},
      {"thetas", c.thetas},
      {"sweep", {{"N", c.sweep.N}, {"s", c.sweep.s}, {"allow_out_of_regime", c.sweep.allow_out_of_regime}}},
      {"chain",
       {{"seed", c.chain.seed},
        {"chains", c.chain.chains},
        {"burn_in", c.chain.burn_in},
        {"thinning", c.chain.thinning},
        {"samples", c.chain.samples},
        {"tune", c.chain.tune}}},
      {"analysis",
       {{"x_star", c.analysis.x_star},
        {"windows", c.analysis.windows},
        {"correlation_bins", c.analysis.correlation_bins},
        {"marginal_bins", c.analysis.marginal_bins},
        {"confinement_radius", c.analysis.confinement_radius},
        {"y_points", points_json(c.analysis.y_points)},
        {"k_orders", c.analysis.k_orders},
        {"epsilons", c.analysis.epsilons},
        {"log_bounds", c.analysis.log_bounds},
        {"tv_threshold", c.analysis.tv_threshold},
        {"require_poisson", c.analysis.require_poisson}}},
      {"verify",
       {{"configurations", c.verify.configurations},
        {"N", c.verify.N},
        {"thetas", c.verify.thetas},
        {"tolerance", c.verify.tolerance},
        {"densities", c.verify.densities}}},
      {"output", c.output},
  };
  return j.dump(2) + "\n";
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string config_hash(const ExperimentConfig& config) {
  ExperimentConfig keyed = config;
  keyed.output.clear();
  return sha256_hex(to_canonical_json(keyed));
}

const std::string& code_version() {
  static const std::string v = std::string("plab 0.1.0+") + PLAB_GIT_REVISION;
  return v;
}

}  // namespace plab
