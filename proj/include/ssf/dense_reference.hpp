#pragma once

#include <span>
#include <vector>

#include "ssf/spconv.hpp"

namespace ssf {

// Dense feature grid E^d over an extent, laid out [z][y][x][channel]. This is
// the reference path: straightforward loops, small grids only.
template <typename T>
struct DenseGrid {
  Extent extent;
  std::size_t channels = 0;
  std::vector<T> values;

  DenseGrid() = default;
  DenseGrid(const Extent& e, std::size_t c)
      : extent(e), channels(c), values(static_cast<std::size_t>(e.cells()) * c, T{0}) {}

  std::size_t offset(std::int32_t x, std::int32_t y, std::int32_t z) const {
    return ((static_cast<std::size_t>(z) * extent.y + y) * extent.x + x) * channels;
  }
  T* at(std::int32_t x, std::int32_t y, std::int32_t z) { return values.data() + offset(x, y, z); }
  const T* at(std::int32_t x, std::int32_t y, std::int32_t z) const {
    return values.data() + offset(x, y, z);
  }
  T* at(const VoxelCoord& c) { return at(c.x, c.y, c.z); }
  const T* at(const VoxelCoord& c) const { return at(c.x, c.y, c.z); }
};

template <typename T>
DenseGrid<T> densify(const SparseFeatureMap<T>& x, const Extent& extent);

// Feature rows at `coords`, in that order.
template <typename T>
Matrix<T> sample_dense(const DenseGrid<T>& grid, std::span<const VoxelCoord> coords);

// Padded correlation: out[o] = b + sum_k in[o*s + k - pad] * W[k].
template <typename T>
DenseGrid<T> dense_oracle_conv(const DenseGrid<T>& in, const ConvParams<T>& w,
                               const Stride& stride);

// Transposed correlation: out[o*s + k - pad] += in[o] * W[k], plus bias.
template <typename T>
DenseGrid<T> dense_oracle_conv_transpose(const DenseGrid<T>& in, const ConvParams<T>& w,
                                         const Stride& stride, const Extent& out_extent);

// Cells a dense pipeline would allocate per feature map for this extent.
inline std::int64_t dense_cell_count(const Extent& e) { return e.cells(); }

}  // namespace ssf
