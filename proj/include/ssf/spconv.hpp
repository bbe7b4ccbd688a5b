#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ssf/matrix.hpp"
#include "ssf/sparse_tensor.hpp"

namespace ssf {

// Kernel extent per axis. Offsets span [-(k-1)/2, k/2] around the centre.
struct KernelShape {
  std::int32_t x = 3;
  std::int32_t y = 3;
  std::int32_t z = 1;

  std::size_t volume() const { return static_cast<std::size_t>(x) * y * z; }
  bool odd() const { return (x % 2 == 1) && (y % 2 == 1) && (z % 2 == 1); }
  // Offset index for per-axis kernel taps, z-major.
  std::size_t index(std::int32_t kx, std::int32_t ky, std::int32_t kz) const {
    return (static_cast<std::size_t>(kz) * y + ky) * x + kx;
  }
  VoxelCoord padding() const { return {(x - 1) / 2, (y - 1) / 2, (z - 1) / 2}; }
  friend bool operator==(const KernelShape&, const KernelShape&) = default;
};

struct Stride {
  std::int32_t x = 1;
  std::int32_t y = 1;
  std::int32_t z = 1;
  friend bool operator==(const Stride&, const Stride&) = default;
};

// Output extent of a padded strided convolution: floor((D + 2p - K) / s) + 1.
Extent conv_output_extent(const Extent& in, const KernelShape& k, const Stride& s);

enum class ConvKind { kSubmanifold, kStrided, kInverse };

struct RulePair {
  std::int32_t input_row;
  std::int32_t output_row;
  friend bool operator==(const RulePair&, const RulePair&) = default;
};

// Per-offset (input row, output row) lists. Within one offset every output
// row and every input row appears at most once, and pairs are sorted by
// output row. Output coordinates are canonical.
struct Rulebook {
  ConvKind kind = ConvKind::kSubmanifold;
  KernelShape kernel;
  Stride stride;
  std::vector<VoxelCoord> input_coords;
  std::vector<VoxelCoord> output_coords;
  Extent input_extent;
  Extent output_extent;
  std::vector<std::vector<RulePair>> pairs;

  std::size_t pair_count() const;
};

// Output sites equal input sites; rejects even kernels.
Rulebook build_rulebook_submanifold(std::span<const VoxelCoord> coords,
                                    const KernelShape& kernel);

// A coarse site is active when its kernel footprint covers any input site and
// it lies inside the padded-convolution output extent.
Rulebook build_rulebook_strided(std::span<const VoxelCoord> coords, const Extent& extent,
                                const KernelShape& kernel, const Stride& stride);

// Transposed routing of a strided rulebook: outputs are the parent's inputs.
Rulebook invert_rulebook(const Rulebook& strided);

// Weights laid out [kz][ky][kx][in][out].
template <typename T>
struct ConvParams {
  KernelShape kernel;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<T> weight;
  std::vector<T> bias;  // empty or out_channels

  const T* slice(std::size_t offset) const {
    return weight.data() + offset * in_channels * out_channels;
  }
  T* slice(std::size_t offset) {
    return weight.data() + offset * in_channels * out_channels;
  }
  void validate() const;
};

template <typename T>
SparseFeatureMap<T> conv_forward(const SparseFeatureMap<T>& x, const Rulebook& rb,
                                 const ConvParams<T>& w);

template <typename T>
struct ConvGrads {
  Matrix<T> input;
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv_backward(const Matrix<T>& grad_out, const SparseFeatureMap<T>& x,
                           const Rulebook& rb, const ConvParams<T>& w);

// Inverse convolution through the transposed `parent` rulebook. x.coords must
// equal parent.output_coords.
template <typename T>
SparseFeatureMap<T> inverse_conv_forward(const SparseFeatureMap<T>& x,
                                         const Rulebook& parent, const ConvParams<T>& w);

}  // namespace ssf
