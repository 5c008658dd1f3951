#include "plab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>

#include "plab/errors.hpp"

namespace plab {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double log_poisson_pmf(double mean, std::uint64_t c) {
  const double k = static_cast<double>(c);
  if (mean == 0.0) return c == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return k * std::log(mean) - mean - std::lgamma(k + 1.0);
}

// Last category index used for the Poisson side: beyond both the observed
// maximum and the bulk of the law.
std::size_t poisson_support_end(const CountStatistics& stats, double mean) {
  const auto observed = stats.histogram.empty() ? std::size_t{0} : stats.histogram.size() - 1;
  const auto bulk = static_cast<std::size_t>(std::ceil(mean + 12.0 * std::sqrt(mean) + 12.0));
  return std::max(observed, bulk);
}

double kernel_between(const KernelSpec& kernel, std::span<const double> a, std::span<const double> b,
                      std::vector<double>& scratch) {
  if (kernel.is_radial()) {
    double r2 = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) r2 += (a[k] - b[k]) * (a[k] - b[k]);
    return kernel.at_squared_distance(r2);
  }
  for (std::size_t k = 0; k < a.size(); ++k) scratch[k] = a[k] - b[k];
  return kernel(scratch);
}

double distance(std::span<const double> a, std::span<const double> b) {
  double r2 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) r2 += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(r2);
}

int bin_of(double value, const std::vector<double>& edges) {
  if (value < edges.front() || value >= edges.back()) return -1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  return static_cast<int>(it - edges.begin()) - 1;
}

// ∫_{W²} 1{|p - q| ∈ [r1, r2)} via the difference density Π (a_k - |u_k|)₊.
double pair_reference_volume(const Window& w, double r1, double r2) {
  const int d = w.dimension();
  if (d == 1) {
    const double a = w.upper[0] - w.lower[0];
    auto primitive = [a](double r) { return 2.0 * (a * r - 0.5 * r * r); };
    return primitive(std::min(r2, a)) - primitive(std::min(r1, a));
  }
  const int q = d == 2 ? 400 : 60;
  std::vector<double> side(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) side[static_cast<std::size_t>(k)] = w.upper[static_cast<std::size_t>(k)] - w.lower[static_cast<std::size_t>(k)];
  std::size_t total = 1;
  for (int k = 0; k < d; ++k) total *= static_cast<std::size_t>(q);
  double acc = 0.0, cell = 1.0;
  for (int k = 0; k < d; ++k) cell *= 2.0 * side[static_cast<std::size_t>(k)] / q;
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rest = flat;
    double weight = 1.0, r2sum = 0.0;
    for (int k = 0; k < d; ++k) {
      const auto axis = static_cast<std::size_t>(k);
      const auto i = rest % static_cast<std::size_t>(q);
      rest /= static_cast<std::size_t>(q);
      const double u = -side[axis] + (static_cast<double>(i) + 0.5) * 2.0 * side[axis] / q;
      weight *= side[axis] - std::abs(u);
      r2sum += u * u;
    }
    const double r = std::sqrt(r2sum);
    if (r >= r1 && r < r2) acc += weight;
  }
  return acc * cell;
}

// ∫_{W³} 1{diameter ∈ [r1, r2)}.
double triple_reference_volume(const Window& w, double r1, double r2) {
  if (w.dimension() == 1) {
    const double a = w.upper[0] - w.lower[0];
    auto primitive = [a](double r) { return 3.0 * a * r * r - 2.0 * r * r * r; };
    return primitive(std::min(r2, a)) - primitive(std::min(r1, a));
  }
  // Fixed-seed Monte Carlo; only used for d ≥ 2.
  Rng rng(0x7e57, 3);
  const int d = w.dimension();
  const std::size_t draws = 400000;
  std::vector<double> p(3 * static_cast<std::size_t>(d));
  std::size_t hits = 0;
  for (std::size_t s = 0; s < draws; ++s) {
    for (int t = 0; t < 3; ++t)
      for (int k = 0; k < d; ++k) {
        const auto axis = static_cast<std::size_t>(k);
        p[static_cast<std::size_t>(t * d + k)] = rng.uniform(w.lower[axis], w.upper[axis]);
      }
    const auto du = static_cast<std::size_t>(d);
    std::span<const double> a(p.data(), du), b(p.data() + du, du), c(p.data() + 2 * du, du);
    const double diam = std::max({distance(a, b), distance(a, c), distance(b, c)});
    if (diam >= r1 && diam < r2) ++hits;
  }
  const double v = w.volume();
  return v * v * v * static_cast<double>(hits) / static_cast<double>(draws);
}

// Hotelling T² of per-sample vectors against a constant reference. Returns
// (T², p) with p = NaN when the covariance is singular or n ≤ dim.
std::pair<double, double> hotelling(const std::vector<std::vector<double>>& rows, double reference) {
  const std::size_t n = rows.size();
  if (n == 0) return {0.0, kNaN};
  const std::size_t p = rows[0].size();
  if (n <= p) return {0.0, kNaN};
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  for (const auto& r : rows)
    for (std::size_t b = 0; b < p; ++b) m(static_cast<Eigen::Index>(b)) += r[b];
  m /= static_cast<double>(n);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  Eigen::VectorXd dev(static_cast<Eigen::Index>(p));
  for (const auto& r : rows) {
    for (std::size_t b = 0; b < p; ++b) dev(static_cast<Eigen::Index>(b)) = r[b] - m(static_cast<Eigen::Index>(b));
    s.noalias() += dev * dev.transpose();
  }
  s /= static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
  const auto& ev = eig.eigenvalues();
  if (!(ev.minCoeff() > 1e-12 * std::max(ev.maxCoeff(), 1e-300))) return {0.0, kNaN};
  const Eigen::VectorXd diff = m - Eigen::VectorXd::Constant(static_cast<Eigen::Index>(p), reference);
  const Eigen::VectorXd proj = eig.eigenvectors().transpose() * diff;
  double t2 = 0.0;
  for (Eigen::Index i = 0; i < proj.size(); ++i) t2 += proj(i) * proj(i) / ev(i);
  t2 *= static_cast<double>(n);
  const double dp = static_cast<double>(p), dn = static_cast<double>(n);
  const double f = (dn - dp) / (dp * (dn - 1.0)) * t2;
  const boost::math::fisher_f_distribution<> dist(dp, dn - dp);
  return {t2, boost::math::cdf(boost::math::complement(dist, f))};
}

}  // namespace

Window Window::centered(int dimension, double side) {
  if (dimension < 1) throw ParameterError("window dimension must be positive");
  if (!(side >= 0.0)) throw ParameterError("window side must be nonnegative");
  Window w;
  w.lower.assign(static_cast<std::size_t>(dimension), -0.5 * side);
  w.upper.assign(static_cast<std::size_t>(dimension), 0.5 * side);
  return w;
}

double Window::volume() const {
  double v = 1.0;
  for (std::size_t k = 0; k < lower.size(); ++k) v *= std::max(0.0, upper[k] - lower[k]);
  return v;
}

bool Window::contains(std::span<const double> p) const {
  for (std::size_t k = 0; k < lower.size(); ++k)
    if (!(p[k] >= lower[k] && p[k] < upper[k])) return false;
  return true;
}

LocalProcessSample extract_local_process(const ParticleConfiguration& x,
                                         std::span<const double> center, const Window& window) {
  if (x.size() == 0) throw ParameterError("local process needs at least one particle");
  const int d = x.dimension;
  if (window.dimension() != d || center.size() != static_cast<std::size_t>(d))
    throw ShapeError("window, centre and configuration dimensions differ");
  LocalProcessSample out;
  out.center.assign(center.begin(), center.end());
  out.scale = std::pow(static_cast<double>(x.size()), 1.0 / d);
  out.window = window;
  std::vector<double> p(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto xi = x.particle(i);
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = out.scale * (xi[k] - center[k]);
    if (window.contains(p)) out.points.insert(out.points.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<LocalProcessSample> extract_local_processes(std::span<const ParticleConfiguration> xs,
                                                        std::span<const double> center,
                                                        const Window& window) {
  std::vector<LocalProcessSample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(extract_local_process(x, center, window));
  return out;
}

std::vector<LocalProcessSample> synthetic_poisson_samples(const Window& window, double intensity,
                                                          std::size_t n, Rng& rng) {
  if (!(intensity >= 0.0)) throw ParameterError("intensity must be nonnegative");
  const auto d = static_cast<std::size_t>(window.dimension());
  std::vector<LocalProcessSample> out(n);
  for (auto& s : out) {
    s.center.assign(d, 0.0);
    s.window = window;
    const auto count = rng.poisson(intensity * window.volume());
    s.points.resize(count * d);
    for (std::uint64_t i = 0; i < count; ++i)
      for (std::size_t k = 0; k < d; ++k) s.points[i * d + k] = rng.uniform(window.lower[k], window.upper[k]);
  }
  return out;
}

double CountStatistics::mean() const {
  if (n_samples == 0) return 0.0;
  double s = 0.0;
  for (std::size_t c = 0; c < histogram.size(); ++c) s += static_cast<double>(c) * static_cast<double>(histogram[c]);
  return s / static_cast<double>(n_samples);
}

double CountStatistics::variance() const {
  if (n_samples < 2) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (std::size_t c = 0; c < histogram.size(); ++c)
    s += (static_cast<double>(c) - m) * (static_cast<double>(c) - m) * static_cast<double>(histogram[c]);
  return s / static_cast<double>(n_samples - 1);
}

CountStatistics count_statistics(std::span<const LocalProcessSample> samples, const Window& window) {
  CountStatistics stats;
  stats.window_volume = window.volume();
  stats.n_samples = samples.size();
  stats.low_power = samples.size() < 30;
  stats.histogram.assign(1, 0);
  for (const auto& s : samples) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < s.count(); ++i)
      if (window.contains(s.point(i))) ++c;
    if (c >= stats.histogram.size()) stats.histogram.resize(c + 1, 0);
    ++stats.histogram[c];
  }
  return stats;
}

double poisson_tv_distance(const CountStatistics& stats, double mean) {
  if (stats.n_samples == 0) throw ParameterError("no samples");
  const std::size_t end = poisson_support_end(stats, mean);
  const double n = static_cast<double>(stats.n_samples);
  double tv = 0.0, covered = 0.0;
  for (std::size_t c = 0; c <= end; ++c) {
    const double pi = std::exp(log_poisson_pmf(mean, c));
    const double ph = c < stats.histogram.size() ? static_cast<double>(stats.histogram[c]) / n : 0.0;
    tv += std::abs(ph - pi);
    covered += pi;
  }
  tv += std::max(0.0, 1.0 - covered);
  return 0.5 * tv;
}

PoissonGofResult poisson_gof_test(const CountStatistics& stats, double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw ParameterError("Poisson mean must be nonnegative");
  if (stats.n_samples == 0) throw ParameterError("no samples");
  PoissonGofResult out;
  out.tv_distance = poisson_tv_distance(stats, mean);
  const double n = static_cast<double>(stats.n_samples);
  const std::size_t end = poisson_support_end(stats, mean);

  // Per-count expected and observed; the last entry is the open tail c ≥ end.
  std::vector<double> expected, observed;
  double cumulative = 0.0;
  for (std::size_t c = 0; c <= end; ++c) {
    const double pi = c < end ? std::exp(log_poisson_pmf(mean, c)) : std::max(0.0, 1.0 - cumulative);
    cumulative += pi;
    double obs = c < stats.histogram.size() ? static_cast<double>(stats.histogram[c]) : 0.0;
    if (c == end)
      for (std::size_t r = end + 1; r < stats.histogram.size(); ++r) obs += static_cast<double>(stats.histogram[r]);
    expected.push_back(n * pi);
    observed.push_back(obs);
  }

  std::vector<double> pooled_e, pooled_o;
  double e = 0.0, o = 0.0;
  for (std::size_t c = 0; c < expected.size(); ++c) {
    e += expected[c];
    o += observed[c];
    if (e >= 5.0) {
      pooled_e.push_back(e);
      pooled_o.push_back(o);
      e = o = 0.0;
    }
  }
  if (e > 0.0 || o > 0.0) {
    if (pooled_e.empty()) {
      pooled_e.push_back(e);
      pooled_o.push_back(o);
    } else {
      pooled_e.back() += e;
      pooled_o.back() += o;
    }
  }
  out.cells = static_cast<int>(pooled_e.size());
  out.low_power = out.cells < 2 || stats.low_power;
  if (out.cells < 2) return out;
  for (std::size_t i = 0; i < pooled_e.size(); ++i)
    out.statistic += (pooled_o[i] - pooled_e[i]) * (pooled_o[i] - pooled_e[i]) / pooled_e[i];
  out.degrees_of_freedom = out.cells - 1;
  out.p_value = chi_square_survival(out.statistic, out.degrees_of_freedom);
  return out;
}

ProportionEstimate void_probability(std::span<const LocalProcessSample> samples, const Window& window) {
  if (samples.empty()) throw ParameterError("void probability needs at least one sample");
  ProportionEstimate out;
  out.trials = samples.size();
  for (const auto& s : samples) {
    bool empty = true;
    for (std::size_t i = 0; i < s.count() && empty; ++i) empty = !window.contains(s.point(i));
    if (empty) ++out.successes;
  }
  const double n = static_cast<double>(out.trials);
  out.value = static_cast<double>(out.successes) / n;
  out.standard_error = std::sqrt(out.value * (1.0 - out.value) / n);
  out.interval = clopper_pearson_interval(out.successes, out.trials);
  return out;
}

double void_probability_p_value(const ProportionEstimate& estimate, double expected) {
  const double var = expected * (1.0 - expected) / static_cast<double>(estimate.trials);
  if (!(var > 0.0)) return estimate.value == expected ? 1.0 : 0.0;
  return normal_two_sided_p((estimate.value - expected) / std::sqrt(var));
}

LaplaceEstimate laplace_functional(std::span<const LocalProcessSample> samples, const TestFunction& f,
                                   const Window& window, std::optional<double> intensity,
                                   int quadrature_points) {
  if (samples.empty()) throw ParameterError("Laplace functional needs at least one sample");
  std::vector<double> values;
  values.reserve(samples.size());
  for (const auto& s : samples) {
    double sum = 0.0;
    for (std::size_t i = 0; i < s.count(); ++i)
      if (window.contains(s.point(i))) sum += f(s.point(i));
    values.push_back(std::exp(-sum));
  }
  LaplaceEstimate out;
  out.value = mean(values);
  out.standard_error = std::sqrt(variance(values) / static_cast<double>(values.size()));
  out.interval = {std::max(0.0, out.value - 1.96 * out.standard_error),
                  std::min(1.0, out.value + 1.96 * out.standard_error)};
  if (!intensity) return out;

  const int d = window.dimension();
  const int q = d == 1 ? quadrature_points : std::min(quadrature_points, d == 2 ? 400 : 60);
  std::size_t total = 1;
  for (int k = 0; k < d; ++k) total *= static_cast<std::size_t>(q);
  const double cell = window.volume() / static_cast<double>(total);
  double first = 0.0, second = 0.0;
  std::vector<double> p(static_cast<std::size_t>(d));
  for (std::size_t flat = 0; flat < total && cell > 0.0; ++flat) {
    std::size_t rest = flat;
    for (int k = d - 1; k >= 0; --k) {
      const auto axis = static_cast<std::size_t>(k);
      const auto i = rest % static_cast<std::size_t>(q);
      rest /= static_cast<std::size_t>(q);
      p[axis] = window.lower[axis] + (static_cast<double>(i) + 0.5) * (window.upper[axis] - window.lower[axis]) / q;
    }
    const double fv = f(p);
    first += std::exp(-fv) - 1.0;
    second += std::exp(-2.0 * fv) - 1.0;
  }
  out.poisson_prediction = std::exp(*intensity * cell * first);
  out.poisson_second_moment = std::exp(*intensity * cell * second);
  const double var = out.poisson_second_moment - out.poisson_prediction * out.poisson_prediction;
  if (var > 1e-300) {
    const double z = (out.value - out.poisson_prediction) / std::sqrt(var / static_cast<double>(values.size()));
    out.p_value = normal_two_sided_p(z);
  } else {
    out.p_value = std::abs(out.value - out.poisson_prediction) < 1e-12 ? 1.0 : 0.0;
  }
  return out;
}

CorrelationEstimate correlation_estimate(std::span<const LocalProcessSample> samples, const Window& window,
                                         int order, int bins, std::optional<double> reference) {
  if (order < 1 || order > 3) throw ParameterError("correlation order must be 1, 2 or 3");
  if (bins < 1) throw ParameterError("need at least one bin");
  if (samples.empty()) throw ParameterError("correlation estimate needs at least one sample");
  const int d = window.dimension();
  CorrelationEstimate out;
  out.order = order;
  out.n_samples = samples.size();
  out.reference = reference;

  double lo = 0.0, hi = 0.0;
  if (order == 1) {
    lo = window.lower[0];
    hi = window.upper[0];
  } else {
    hi = std::numeric_limits<double>::infinity();
    for (int k = 0; k < d; ++k)
      hi = std::min(hi, window.upper[static_cast<std::size_t>(k)] - window.lower[static_cast<std::size_t>(k)]);
  }
  const auto nb = static_cast<std::size_t>(bins);
  out.bin_edges.resize(nb + 1);
  for (std::size_t b = 0; b <= nb; ++b) out.bin_edges[b] = lo + (hi - lo) * static_cast<double>(b) / bins;
  out.bin_edges.back() = hi;

  out.reference_volume.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const double r1 = out.bin_edges[b], r2 = out.bin_edges[b + 1];
    if (order == 1)
      out.reference_volume[b] = hi > lo ? window.volume() * (r2 - r1) / (hi - lo) : 0.0;
    else if (order == 2)
      out.reference_volume[b] = pair_reference_volume(window, r1, r2);
    else
      out.reference_volume[b] = triple_reference_volume(window, r1, r2);
  }

  std::vector<std::vector<double>> rows;
  rows.reserve(samples.size());
  out.tuple_counts.assign(nb, 0.0);
  std::vector<std::size_t> inside;
  for (const auto& s : samples) {
    inside.clear();
    for (std::size_t i = 0; i < s.count(); ++i)
      if (window.contains(s.point(i))) inside.push_back(i);
    std::vector<double> counts(nb, 0.0);
    const std::size_t m = inside.size();
    if (order == 1) {
      for (auto i : inside) {
        const int b = bin_of(s.point(i)[0], out.bin_edges);
        if (b >= 0) counts[static_cast<std::size_t>(b)] += 1.0;
      }
    } else if (order == 2) {
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t c = a + 1; c < m; ++c) {
          const int b = bin_of(distance(s.point(inside[a]), s.point(inside[c])), out.bin_edges);
          if (b >= 0) counts[static_cast<std::size_t>(b)] += 2.0;  // both orders
        }
    } else {
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t c = a + 1; c < m; ++c)
          for (std::size_t e = c + 1; e < m; ++e) {
            const auto pa = s.point(inside[a]), pc = s.point(inside[c]), pe = s.point(inside[e]);
            const double diam = std::max({distance(pa, pc), distance(pa, pe), distance(pc, pe)});
            const int b = bin_of(diam, out.bin_edges);
            if (b >= 0) counts[static_cast<std::size_t>(b)] += 6.0;  // 3! orders
          }
    }
    for (std::size_t b = 0; b < nb; ++b) {
      out.tuple_counts[b] += counts[b];
      counts[b] = out.reference_volume[b] > 0.0 ? counts[b] / out.reference_volume[b] : 0.0;
    }
    rows.push_back(std::move(counts));
  }

  const double n = static_cast<double>(samples.size());
  out.values.assign(nb, 0.0);
  out.standard_errors.assign(nb, 0.0);
  out.undersampled.assign(nb, false);
  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<double> column(rows.size());
    for (std::size_t s = 0; s < rows.size(); ++s) column[s] = rows[s][b];
    out.values[b] = mean(column);
    out.standard_errors[b] = std::sqrt(variance(column) / n);
    out.undersampled[b] = out.tuple_counts[b] < 5.0;
  }
  if (reference) {
    // Sparse bins make T² heavy-tailed; adjacent bins are pooled until each
    // has at least kMinSupport samples contributing to it.
    constexpr std::size_t kMinSupport = 50;
    std::vector<std::size_t> support(nb, 0);
    for (const auto& r : rows)
      for (std::size_t b = 0; b < nb; ++b) support[b] += r[b] > 0.0 ? 1 : 0;
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> current;
    std::size_t acc = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      current.push_back(b);
      acc += support[b];
      if (acc >= kMinSupport) {
        groups.push_back(std::move(current));
        current.clear();
        acc = 0;
      }
    }
    if (!current.empty()) {
      if (groups.empty()) groups.push_back(current);
      else groups.back().insert(groups.back().end(), current.begin(), current.end());
    }
    std::size_t pooled_support = 0;
    for (auto x : support) pooled_support += x;
    out.test_bins = static_cast<int>(groups.size());
    if (pooled_support >= kMinSupport) {
      std::vector<std::vector<double>> pooled(rows.size(), std::vector<double>(groups.size(), 0.0));
      for (std::size_t g = 0; g < groups.size(); ++g) {
        double vol = 0.0;
        for (auto b : groups[g]) vol += out.reference_volume[b];
        for (std::size_t s = 0; s < rows.size(); ++s) {
          double c = 0.0;
          for (auto b : groups[g]) c += rows[s][b] * out.reference_volume[b];
          pooled[s][g] = vol > 0.0 ? c / vol : 0.0;
        }
      }
      const auto [t2, p] = hotelling(pooled, *reference);
      out.hotelling_t2 = t2;
      out.p_value = p;
    } else {
      out.p_value = kNaN;
    }
  }
  return out;
}

double finite_n_factor(int n, int k) {
  if (n == 0) return 1.0;
  if (n < 0 || k < 0) throw ParameterError("finite_n_factor needs nonnegative arguments");
  double f = 1.0;
  for (int i = 0; i < k; ++i) f *= static_cast<double>(n - i) / n;
  return f;
}

double empirical_field(const ParticleConfiguration& x, const KernelSpec& kernel,
                       std::span<const double> y) {
  if (x.size() == 0) throw ParameterError("empirical field of an empty configuration");
  if (kernel.is_zero()) return 0.0;
  std::vector<double> scratch(y.size());
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) s += kernel_between(kernel, y, x.particle(j), scratch);
  return s / static_cast<double>(x.size());
}

FluctuationProbe::FluctuationProbe(int n, double beta, const ThermalSolution& solution,
                                   const KernelSpec& kernel, std::vector<std::vector<double>> y_points)
    : n_(n), beta_(beta), kernel_(kernel), y_(std::move(y_points)) {
  if (n < 1 || !(beta > 0.0)) throw ConfigError("N must be positive and beta positive");
  const double theta = static_cast<double>(n) * beta;
  if (std::abs(solution.theta - theta) > 1e-12 * theta)
    throw ConfigError("thermal solution theta does not match N * beta");
  if (y_.empty()) throw ParameterError("need at least one test point");
  const Grid& grid = solution.density.grid();
  FieldConvolver conv(grid, kernel);
  const GridField h(grid, conv.potential(solution.density.values()));
  for (const auto& y : y_) {
    if (!grid.contains(y)) throw DomainError("test point lies outside the solution's grid");
    reference_.push_back(interpolate_cubic(h, y));
    reference_sum_ += reference_.back();
  }
}

std::vector<double> FluctuationProbe::empirical_values(const ParticleConfiguration& x) const {
  if (x.size() != static_cast<std::size_t>(n_))
    throw ConfigError("sample does not hold N particles");
  std::vector<double> out;
  out.reserve(y_.size());
  for (const auto& y : y_) out.push_back(empirical_field(x, kernel_, y));
  return out;
}

double epsilon_for_bound(int n, double beta, double g0, int k, double bound) {
  const double nb = static_cast<double>(n) * beta;
  const double rhs = nb * g0 - std::log(bound);
  if (!(rhs > 0.0)) return 0.0;
  return k * std::sqrt(g0 * rhs / (static_cast<double>(n) * nb));
}

BoundCheckReport concentration_check(std::span<const ParticleConfiguration> samples,
                                     const FluctuationProbe& probe, double epsilon) {
  if (samples.empty()) throw ParameterError("concentration check needs at least one sample");
  if (!(epsilon > 0.0)) throw ParameterError("epsilon must be positive");
  BoundCheckReport r;
  r.epsilon = epsilon;
  r.k = probe.k();
  r.n_samples = samples.size();
  const double g0 = probe.g0();
  bool reference_in_range = true;
  for (double v : probe.reference_values())
    reference_in_range = reference_in_range && v >= -1e-12 && v <= g0 * (1 + 1e-12);
  for (const auto& x : samples) {
    const auto values = probe.empirical_values(x);
    double dev = 0.0;
    bool in_range = true;
    for (std::size_t i = 0; i < values.size(); ++i) {
      dev += values[i] - probe.reference_values()[i];
      in_range = in_range && values[i] >= 0.0 && values[i] <= g0 * (1 + 1e-12);
    }
    if (!in_range) ++r.ceiling_violations;
    r.max_abs_deviation = std::max(r.max_abs_deviation, std::abs(dev));
    if (std::abs(dev) > epsilon) ++r.exceedances;
  }
  r.empirical_probability = static_cast<double>(r.exceedances) / static_cast<double>(r.n_samples);
  r.interval = clopper_pearson_interval(r.exceedances, r.n_samples);
  const double n = static_cast<double>(probe.n());
  const double nb = n * probe.beta();
  const double k = static_cast<double>(r.k);
  r.theoretical_bound = g0 > 0.0 ? std::exp(nb * g0 - n * nb * epsilon * epsilon / (g0 * k * k)) : 0.0;
  r.vacuous = r.theoretical_bound >= 1.0;
  r.deterministic = epsilon >= k * g0 && reference_in_range && r.ceiling_violations == 0;
  r.satisfied = r.vacuous || r.deterministic || r.interval.upper <= r.theoretical_bound;
  return r;
}

LaplaceFluctuationReport laplace_fluctuation_check(std::span<const ParticleConfiguration> samples,
                                                   const FluctuationProbe& probe) {
  if (samples.empty()) throw ParameterError("Laplace check needs at least one sample");
  const double n = static_cast<double>(probe.n());
  const double nb = n * probe.beta();
  std::vector<double> a;
  a.reserve(samples.size());
  for (const auto& x : samples) {
    const auto values = probe.empirical_values(x);
    double s = 0.0;
    for (double v : values) s += v;
    a.push_back(-nb * s);
  }
  const double amax = *std::max_element(a.begin(), a.end());
  std::vector<double> w(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) w[i] = std::exp(a[i] - amax);
  const double wm = mean(w);

  LaplaceFluctuationReport r;
  r.k = probe.k();
  r.log_empirical = amax + std::log(wm);
  r.log_reference = -nb * probe.reference_sum();
  r.abs_log_ratio = std::abs(r.log_empirical - r.log_reference);
  r.standard_error_log = std::sqrt(variance(w) / static_cast<double>(w.size())) / wm;
  const double g0 = probe.g0();
  r.bound = std::sqrt(2.0 * n) * g0 * r.k;
  r.a_n_allowance = std::exp(-nb * g0) * (1.0 + std::exp(r.bound));
  r.satisfied = r.abs_log_ratio <= r.bound;
  return r;
}

PoissonTestRow poisson_tests(std::span<const LocalProcessSample> samples, const Window& window,
                             double intensity, int correlation_bins) {
  PoissonTestRow row;
  row.intensity = intensity;
  row.window_side = window.upper[0] - window.lower[0];
  row.window_volume = window.volume();
  row.counts = count_statistics(samples, window);
  const double expected_count = intensity * row.window_volume;
  row.gof = poisson_gof_test(row.counts, expected_count);
  std::vector<double> series;
  series.reserve(samples.size());
  for (const auto& s : samples) {
    double c = 0.0;
    for (std::size_t i = 0; i < s.count(); ++i) c += window.contains(s.point(i)) ? 1.0 : 0.0;
    series.push_back(c);
  }
  row.count_ess = effective_sample_size(series);
  row.void_estimate = void_probability(samples, window);
  row.void_prediction = std::exp(-expected_count);
  row.void_p_value = void_probability_p_value(row.void_estimate, row.void_prediction);
  row.laplace = laplace_functional(
      samples, [](std::span<const double>) { return 1.0; }, window, intensity);
  row.r1 = correlation_estimate(samples, window, 1, correlation_bins, intensity);
  row.r2 = correlation_estimate(samples, window, 2, correlation_bins, intensity * intensity);

  // Consecutive sweeps share most of their local points, so every i.i.d.
  // standard error is inflated by √τ of the count series (and χ², T² deflated
  // by τ). Applied only when the lag-1 autocorrelation is significant: on
  // independent input the windowed τ estimate is biased above 1.
  const double n = static_cast<double>(samples.size());
  const bool correlated = lag1_autocorrelation(series) > 2.0 / std::sqrt(n);
  const double tau = correlated ? std::max(1.0, n / row.count_ess) : 1.0;
  row.design_effect = tau;
  if (tau > 1.0) {
    if (row.gof.degrees_of_freedom > 0) {
      row.gof.statistic /= tau;
      row.gof.p_value = chi_square_survival(row.gof.statistic, row.gof.degrees_of_freedom);
    }
    auto& v = row.void_estimate;
    v.standard_error *= std::sqrt(tau);
    v.interval = clopper_pearson_interval(static_cast<std::uint64_t>(std::llround(v.value * n / tau)),
                                          static_cast<std::uint64_t>(std::max(1.0, std::round(n / tau))));
    const double null_var = row.void_prediction * (1.0 - row.void_prediction) * tau / n;
    if (null_var > 0.0) row.void_p_value = normal_two_sided_p((v.value - row.void_prediction) / std::sqrt(null_var));
    auto& l = row.laplace;
    l.standard_error *= std::sqrt(tau);
    l.interval = {std::max(0.0, l.value - 1.96 * l.standard_error), std::min(1.0, l.value + 1.96 * l.standard_error)};
    const double lap_var = (l.poisson_second_moment - l.poisson_prediction * l.poisson_prediction) * tau / n;
    if (lap_var > 0.0) l.p_value = normal_two_sided_p((l.value - l.poisson_prediction) / std::sqrt(lap_var));
    for (auto* r : {&row.r1, &row.r2}) {
      for (double& se : r->standard_errors) se *= std::sqrt(tau);
      const double dp = static_cast<double>(r->test_bins);
      if (std::isfinite(r->p_value) && n > dp) {
        r->hotelling_t2 /= tau;
        const double f = (n - dp) / (dp * (n - 1.0)) * r->hotelling_t2;
        r->p_value = boost::math::cdf(boost::math::complement(boost::math::fisher_f_distribution<>(dp, n - dp), f));
      }
    }
  }
  return row;
}

PoissonConvergenceSummary summarize_poisson_convergence(std::vector<PoissonTestRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.N < b.N; });
  PoissonConvergenceSummary out;
  out.tv_decreasing = !rows.empty();
  for (std::size_t i = 1; i < rows.size(); ++i)
    out.tv_decreasing = out.tv_decreasing && rows[i].gof.tv_distance < rows[i - 1].gof.tv_distance;
  out.final_tv = rows.empty() ? 0.0 : rows.back().gof.tv_distance;
  out.rows = std::move(rows);
  return out;
}

CalibrationReport calibrate_on_synthetic_poisson(const Window& window, double intensity,
                                                 std::size_t samples_per_repetition, int repetitions,
                                                 std::uint64_t seed, double level) {
  CalibrationReport out;
  out.repetitions = repetitions;
  out.level = level;
  out.tests = {"count_chi_square", "void_probability", "laplace_functional", "correlation_k1",
               "correlation_k2"};
  out.rejection_rates.assign(out.tests.size(), 0.0);
  out.undecided.assign(out.tests.size(), 0);
  for (int r = 0; r < repetitions; ++r) {
    Rng rng(seed, static_cast<std::uint64_t>(r));
    const auto samples = synthetic_poisson_samples(window, intensity, samples_per_repetition, rng);
    const auto row = poisson_tests(samples, window, intensity);
    const double p[] = {row.gof.p_value, row.void_p_value, row.laplace.p_value, row.r1.p_value,
                        row.r2.p_value};
    for (std::size_t t = 0; t < out.tests.size(); ++t)
      if (std::isnan(p[t])) out.undecided[t] += 1;
      else if (p[t] < level) out.rejection_rates[t] += 1.0;
  }
  for (double& rate : out.rejection_rates) rate /= repetitions;
  return out;
}

}  // namespace plab
