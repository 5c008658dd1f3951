#pragma once

#include <filesystem>

#include "plab/grid.hpp"

namespace plab {

/// Binary record: "PLABDEN1", u32 d, u32 M, f64 L, u64 node count, then the
/// node values as f64 in row-major order (last axis fastest). Little-endian.
void write_field_binary(const std::filesystem::path& path, const GridField& field);
GridField read_field_binary(const std::filesystem::path& path);

/// Reads a record and checks it is a normalized density.
DensityField read_density_binary(const std::filesystem::path& path);

/// CSV with header x0,...,x{d-1},value and one row per node.
void write_field_csv(const std::filesystem::path& path, const GridField& field);

}  // namespace plab
