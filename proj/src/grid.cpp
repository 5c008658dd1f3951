#include "plab/grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "plab/errors.hpp"

namespace plab {

Grid::Grid(int dimension, double half_width, int points_per_axis, std::size_t node_budget)
    : dimension_(dimension), half_width_(half_width), points_(points_per_axis) {
  if (dimension < 1) throw ParameterError("grid dimension must be positive");
  if (!(half_width > 0.0) || !std::isfinite(half_width))
    throw ParameterError("grid half-width must be positive and finite");
  if (points_per_axis < 2 || points_per_axis % 2 != 0)
    throw ParameterError("grid points per axis must be even and >= 2, got " +
                         std::to_string(points_per_axis));
  size_ = 1;
  for (int k = 0; k < dimension; ++k) {
    if (size_ > node_budget / static_cast<std::size_t>(points_per_axis))
      throw ParameterError("grid node count exceeds the memory budget");
    size_ *= static_cast<std::size_t>(points_per_axis);
  }
  spacing_ = 2.0 * half_width / points_per_axis;
  cell_volume_ = std::pow(spacing_, dimension);
}

void Grid::node_point(std::size_t flat, std::span<double> out) const {
  for (int k = dimension_ - 1; k >= 0; --k) {
    const auto i = static_cast<int>(flat % static_cast<std::size_t>(points_));
    flat /= static_cast<std::size_t>(points_);
    out[static_cast<std::size_t>(k)] = coordinate(i);
  }
}

std::vector<double> Grid::node_point(std::size_t flat) const {
  std::vector<double> x(static_cast<std::size_t>(dimension_));
  node_point(flat, x);
  return x;
}

void Grid::unflatten(std::size_t flat, std::span<int> out) const {
  for (int k = dimension_ - 1; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = static_cast<int>(flat % static_cast<std::size_t>(points_));
    flat /= static_cast<std::size_t>(points_);
  }
}

std::size_t Grid::flatten(std::span<const int> index) const {
  std::size_t flat = 0;
  for (int k = 0; k < dimension_; ++k)
    flat = flat * static_cast<std::size_t>(points_) + static_cast<std::size_t>(index[static_cast<std::size_t>(k)]);
  return flat;
}

bool Grid::contains(std::span<const double> point) const {
  if (point.size() != static_cast<std::size_t>(dimension_)) return false;
  return std::all_of(point.begin(), point.end(), [&](double c) {
    return c >= -half_width_ && c <= half_width_;
  });
}

std::size_t Grid::nearest_node(std::span<const double> point) const {
  if (!contains(point)) throw DomainError("point lies outside the grid box");
  std::size_t flat = 0;
  for (int k = 0; k < dimension_; ++k) {
    int i = static_cast<int>(std::floor((point[static_cast<std::size_t>(k)] + half_width_) / spacing_));
    i = std::clamp(i, 0, points_ - 1);
    flat = flat * static_cast<std::size_t>(points_) + static_cast<std::size_t>(i);
  }
  return flat;
}

bool Grid::operator==(const Grid& other) const {
  return dimension_ == other.dimension_ && half_width_ == other.half_width_ &&
         points_ == other.points_;
}

GridField::GridField(const Grid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
  if (values.size() != grid.size()) throw ShapeError("field size does not match grid");
}

double interpolate(const GridField& field, std::span<const double> point) {
  const Grid& grid = field.grid;
  if (!grid.contains(point)) throw DomainError("interpolation point lies outside the grid box");
  const int d = grid.dimension();
  const int m = grid.points_per_axis();
  const double h = grid.spacing();

  // Lower corner index and fractional offset per axis; the stencil is
  // clamped to [0, M-2] so edge points extrapolate from the last pair.
  int base[8];
  double frac[8];
  std::vector<int> base_dyn;
  std::vector<double> frac_dyn;
  int* b = base;
  double* t = frac;
  if (d > 8) {
    base_dyn.resize(static_cast<std::size_t>(d));
    frac_dyn.resize(static_cast<std::size_t>(d));
    b = base_dyn.data();
    t = frac_dyn.data();
  }
  for (int k = 0; k < d; ++k) {
    const double s = (point[static_cast<std::size_t>(k)] + grid.half_width()) / h - 0.5;
    int i = static_cast<int>(std::floor(s));
    i = std::clamp(i, 0, m - 2);
    b[k] = i;
    t[k] = s - i;
  }

  double result = 0.0;
  const int corners = 1 << d;
  for (int c = 0; c < corners; ++c) {
    double weight = 1.0;
    std::size_t flat = 0;
    for (int k = 0; k < d; ++k) {
      const int bit = (c >> (d - 1 - k)) & 1;
      weight *= bit ? t[k] : 1.0 - t[k];
      flat = flat * static_cast<std::size_t>(m) + static_cast<std::size_t>(b[k] + bit);
    }
    result += weight * field.values[flat];
  }
  return result;
}

double interpolate_cubic(const GridField& field, std::span<const double> point) {
  const Grid& grid = field.grid;
  if (!grid.contains(point)) throw DomainError("interpolation point lies outside the grid box");
  const int d = grid.dimension();
  const int m = grid.points_per_axis();
  if (m < 4) throw ParameterError("cubic interpolation needs at least 4 nodes per axis");
  const double h = grid.spacing();

  std::vector<int> start(static_cast<std::size_t>(d));
  std::vector<std::array<double, 4>> w(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const double s = (point[static_cast<std::size_t>(k)] + grid.half_width()) / h - 0.5;
    const int i = std::clamp(static_cast<int>(std::floor(s)) - 1, 0, m - 4);
    const double u = s - i;
    start[static_cast<std::size_t>(k)] = i;
    w[static_cast<std::size_t>(k)] = {-(u - 1) * (u - 2) * (u - 3) / 6.0, u * (u - 2) * (u - 3) / 2.0,
                                      -u * (u - 1) * (u - 3) / 2.0, u * (u - 1) * (u - 2) / 6.0};
  }

  double result = 0.0;
  std::size_t corners = 1;
  for (int k = 0; k < d; ++k) corners *= 4;
  for (std::size_t c = 0; c < corners; ++c) {
    double weight = 1.0;
    std::size_t flat = 0;
    std::size_t rest = c;
    std::size_t stride = 1;
    for (int k = d - 1; k >= 0; --k) {
      const auto axis = static_cast<std::size_t>(k);
      const auto digit = rest % 4;
      rest /= 4;
      weight *= w[axis][digit];
      flat += stride * (static_cast<std::size_t>(start[axis]) + digit);
      stride *= static_cast<std::size_t>(m);
    }
    result += weight * field.values[flat];
  }
  return result;
}

DensityField DensityField::normalize(const Grid& grid, std::vector<double> values) {
  if (values.size() != grid.size()) throw ShapeError("density size does not match grid");
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ParameterError("density values must be finite and nonnegative");
    total += v;
  }
  const double mass = total * grid.cell_volume();
  if (!(mass > 0.0)) throw ParameterError("density has zero mass");
  for (double& v : values) v /= mass;
  return DensityField(grid, std::move(values));
}

DensityField DensityField::checked(const Grid& grid, std::vector<double> values) {
  if (values.size() != grid.size()) throw ShapeError("density size does not match grid");
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ParameterError("density values must be finite and nonnegative");
    total += v;
  }
  if (std::abs(total * grid.cell_volume() - 1.0) > 1e-12)
    throw ParameterError("density mass differs from 1 by more than 1e-12");
  return DensityField(grid, std::move(values));
}

DensityField DensityField::delta(const Grid& grid, std::span<const double> point) {
  std::vector<double> v(grid.size(), 0.0);
  v[grid.nearest_node(point)] = 1.0 / grid.cell_volume();
  return DensityField(grid, std::move(v));
}

DensityField DensityField::uniform(const Grid& grid) {
  const double volume = std::pow(2.0 * grid.half_width(), grid.dimension());
  return DensityField(grid, std::vector<double>(grid.size(), 1.0 / volume));
}

double DensityField::mass() const {
  double total = 0.0;
  for (double v : values_) total += v;
  return total * grid_.cell_volume();
}

double DensityField::min_value() const {
  return *std::min_element(values_.begin(), values_.end());
}

}  // namespace plab
