#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace plab {

/// Regular cell-centred grid on the box [-L, L]^d.
///
/// Node i along an axis sits at -L + (i + 1/2) h with h = 2L / M, so the node
/// set is symmetric under x -> -x and every quadrature is the midpoint rule.
/// Flat indices are row-major with the last axis fastest.
class Grid {
 public:
  static constexpr std::size_t kDefaultNodeBudget = std::size_t{1} << 26;

  Grid(int dimension, double half_width, int points_per_axis,
       std::size_t node_budget = kDefaultNodeBudget);

  int dimension() const { return dimension_; }
  double half_width() const { return half_width_; }
  int points_per_axis() const { return points_; }
  double spacing() const { return spacing_; }
  double cell_volume() const { return cell_volume_; }
  std::size_t size() const { return size_; }

  double coordinate(int index) const { return -half_width_ + (index + 0.5) * spacing_; }

  /// Writes the coordinates of node `flat` into `out` (length d).
  void node_point(std::size_t flat, std::span<double> out) const;
  std::vector<double> node_point(std::size_t flat) const;

  /// Per-axis indices of a flat index.
  void unflatten(std::size_t flat, std::span<int> out) const;
  std::size_t flatten(std::span<const int> index) const;

  /// Node whose cell contains `point`; throws DomainError outside the box.
  std::size_t nearest_node(std::span<const double> point) const;

  bool contains(std::span<const double> point) const;

  bool operator==(const Grid& other) const;
  bool operator!=(const Grid& other) const { return !(*this == other); }

 private:
  int dimension_;
  double half_width_;
  int points_;
  double spacing_;
  double cell_volume_;
  std::size_t size_;
};

/// Real values on every node of a grid (potential fields, signed measures).
struct GridField {
  Grid grid;
  std::vector<double> values;

  explicit GridField(const Grid& g) : grid(g), values(g.size(), 0.0) {}
  GridField(const Grid& g, std::vector<double> v);
};

using PotentialField = GridField;

/// Multilinear interpolation of node values at `point`. Points between the
/// outermost node and the box face are extrapolated linearly from the last
/// two nodes; points outside the box throw DomainError.
double interpolate(const GridField& field, std::span<const double> point);

/// Tensor-product four-point Lagrange interpolation (exact for cubics along
/// each axis). Stencils are clamped to [0, M-4]; needs M >= 4.
double interpolate_cubic(const GridField& field, std::span<const double> point);

/// Nonnegative density normalised to unit midpoint-rule mass.
class DensityField {
 public:
  /// Rescales nonnegative `values` to unit mass. Throws ParameterError on
  /// negative, non-finite, or all-zero input.
  static DensityField normalize(const Grid& grid, std::vector<double> values);

  /// Checks nonnegativity and |mass - 1| <= 1e-12 without rescaling.
  static DensityField checked(const Grid& grid, std::vector<double> values);

  /// Single node of mass 1 (value 1 / h^d) at the node containing `point`.
  static DensityField delta(const Grid& grid, std::span<const double> point);
  static DensityField uniform(const Grid& grid);

  template <class F>
  static DensityField from_function(const Grid& grid, F&& density) {
    std::vector<double> v(grid.size());
    std::vector<double> x(static_cast<std::size_t>(grid.dimension()));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      grid.node_point(i, x);
      v[i] = density(std::span<const double>(x));
    }
    return normalize(grid, std::move(v));
  }

  const Grid& grid() const { return grid_; }
  const std::vector<double>& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t size() const { return values_.size(); }

  double mass() const;
  double min_value() const;

  GridField as_field() const { return GridField(grid_, values_); }

 private:
  DensityField(const Grid& grid, std::vector<double> values)
      : grid_(grid), values_(std::move(values)) {}

  Grid grid_;
  std::vector<double> values_;
};

}  // namespace plab
