#include "plab/density_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>

#include "plab/errors.hpp"

namespace plab {
namespace {

static_assert(std::endian::native == std::endian::little, "binary records assume little-endian");

constexpr char kMagic[8] = {'P', 'L', 'A', 'B', 'D', 'E', 'N', '1'};

template <class T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw IoError("truncated density record: " + path.string());
  return value;
}

}  // namespace

void write_field_binary(const std::filesystem::path& path, const GridField& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(field.grid.dimension()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(field.grid.points_per_axis()));
  put<double>(out, field.grid.half_width());
  put<std::uint64_t>(out, field.values.size());
  out.write(reinterpret_cast<const char*>(field.values.data()),
            static_cast<std::streamsize>(field.values.size() * sizeof(double)));
  if (!out) throw IoError("failed writing density record: " + path.string());
}

GridField read_field_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open density record: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a density record: " + path.string());
  const auto d = get<std::uint32_t>(in, path);
  const auto m = get<std::uint32_t>(in, path);
  const auto l = get<double>(in, path);
  const auto count = get<std::uint64_t>(in, path);
  Grid grid(static_cast<int>(d), l, static_cast<int>(m));
  if (count != grid.size()) throw IoError("density record node count mismatch: " + path.string());
  std::vector<double> values(count);
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(count * sizeof(double))))
    throw IoError("truncated density record: " + path.string());
  return GridField(grid, std::move(values));
}

DensityField read_density_binary(const std::filesystem::path& path) {
  GridField f = read_field_binary(path);
  return DensityField::checked(f.grid, std::move(f.values));
}

void write_field_csv(const std::filesystem::path& path, const GridField& field) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const int d = field.grid.dimension();
  for (int k = 0; k < d; ++k) out << 'x' << k << ',';
  out << "value\n";
  out << std::setprecision(17);
  std::vector<double> x(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < field.values.size(); ++i) {
    field.grid.node_point(i, x);
    for (double c : x) out << c << ',';
    out << field.values[i] << '\n';
  }
}

}  // namespace plab
