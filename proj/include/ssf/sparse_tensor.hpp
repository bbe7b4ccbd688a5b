#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "ssf/matrix.hpp"

namespace ssf {

// Integer voxel coordinate. Canonical order is lexicographic (z, y, x), which
// is also the order of the packed 64-bit key.
struct VoxelCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
  friend std::strong_ordering operator<=>(const VoxelCoord& a, const VoxelCoord& b) {
    if (auto c = a.z <=> b.z; c != 0) return c;
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
};

inline constexpr int kCoordBits = 21;
inline constexpr std::int32_t kCoordLimit = 1 << kCoordBits;

// 21 bits per axis, z in the high bits. Coordinates must lie in [0, 2^21).
inline std::uint64_t pack_coord(const VoxelCoord& c) {
  return (static_cast<std::uint64_t>(c.z) << (2 * kCoordBits)) |
         (static_cast<std::uint64_t>(c.y) << kCoordBits) |
         static_cast<std::uint64_t>(c.x);
}

inline VoxelCoord unpack_coord(std::uint64_t key) {
  constexpr std::uint64_t mask = (std::uint64_t{1} << kCoordBits) - 1;
  return {static_cast<std::int32_t>(key & mask),
          static_cast<std::int32_t>((key >> kCoordBits) & mask),
          static_cast<std::int32_t>(key >> (2 * kCoordBits))};
}

inline bool coord_in_range(const VoxelCoord& c) {
  return c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < kCoordLimit &&
         c.y < kCoordLimit && c.z < kCoordLimit;
}

// Spatial extent of a grid level, in cells per axis.
struct Extent {
  std::int32_t x = 1;
  std::int32_t y = 1;
  std::int32_t z = 1;

  std::int64_t cells() const { return std::int64_t{x} * y * z; }
  bool contains(const VoxelCoord& c) const {
    return c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < x && c.y < y && c.z < z;
  }
  friend bool operator==(const Extent&, const Extent&) = default;
};

// Coordinate -> row lookup keyed on the packed coordinate.
class CoordIndex {
 public:
  CoordIndex() = default;
  explicit CoordIndex(std::span<const VoxelCoord> coords);

  // Row of `c`, or -1 if unoccupied.
  std::int32_t find(const VoxelCoord& c) const {
    if (!coord_in_range(c)) return -1;
    auto it = rows_.find(pack_coord(c));
    return it == rows_.end() ? -1 : it->second;
  }
  std::size_t size() const { return rows_.size(); }

 private:
  std::unordered_map<std::uint64_t, std::int32_t> rows_;
};

// Coordinate list with a row-aligned feature matrix.
template <typename T>
struct SparseFeatureMap {
  std::vector<VoxelCoord> coords;
  Matrix<T> features;

  std::size_t rows() const { return coords.size(); }
  std::size_t channels() const { return features.cols(); }
  bool operator==(const SparseFeatureMap&) const = default;
};

// True if coords are strictly increasing in canonical order.
bool is_canonical(std::span<const VoxelCoord> coords);

}  // namespace ssf
