#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ssf/core.hpp"
#include "ssf/layers.hpp"
#include "ssf/sparse_tensor.hpp"

namespace ssf {

// Rasterisation of one cloud into the ego-centred pillar grid.
struct VoxelAssignment {
  std::vector<std::int32_t> kept_point_rows;       // rows of the source cloud
  std::vector<VoxelCoord> voxel_coord_per_point;   // per kept point
  std::vector<VoxelCoord> unique_voxels;           // canonical order
  std::vector<std::int32_t> point_to_voxel;        // per kept point, into unique_voxels

  std::size_t kept_count() const { return kept_point_rows.size(); }
};

// Extent of the finest grid level (D, D, z_cells).
Extent grid_extent(const GridConfig& grid);

// Cell of p, or nullopt when p lies outside the half-open grid box.
std::optional<VoxelCoord> voxel_of(const Vec3& p, const GridConfig& grid);

Vec3 voxel_center(const VoxelCoord& c, const GridConfig& grid);

VoxelAssignment voxelize(std::span<const Vec3> points, const GridConfig& grid);

inline constexpr std::size_t kPointFeatureWidth = 9;

// Per kept point: [x, y, z, p - voxel centre, mean of the voxel's points].
Matrix<double> augment_point_features(std::span<const Vec3> points,
                                      const VoxelAssignment& assignment,
                                      const GridConfig& grid);

enum class PoolMode { kMax, kMean };

// Two affine layers, each followed by optional normalisation and ReLU.
template <typename T>
struct VfeLayer {
  LinearParams<T> linear;
  std::optional<BatchNormParams<T>> norm;
};

template <typename T>
struct VfeParams {
  VfeLayer<T> layer0;  // 9 -> hidden
  VfeLayer<T> layer1;  // hidden -> C
  PoolMode pool = PoolMode::kMax;

  std::size_t hidden_width() const { return layer0.linear.out_features; }
  std::size_t out_width() const { return layer1.linear.out_features; }
};

template <typename T>
struct VfeLayerCache {
  Matrix<T> input;
  BatchNormCache<T> norm;
  Matrix<T> output;  // post-ReLU
};

template <typename T>
struct VfeCache {
  VfeLayerCache<T> layer0;
  VfeLayerCache<T> layer1;
  std::vector<std::int32_t> point_to_voxel;
  std::vector<std::int32_t> argmax;  // [voxel][channel] member row (max pooling)
  std::vector<std::int32_t> member_count;
};

template <typename T>
struct VfeOutput {
  SparseFeatureMap<T> voxels;   // rows follow `coords` order
  Matrix<T> point_features;     // per input row, before pooling
};

// Per-point MLP then per-voxel pooling into `coords.size()` rows. `stat_rows`
// selects the rows that contribute to train-phase normalisation statistics
// (empty: all). Max pooling reduces members in ascending row order; ties go
// to the lowest row.
template <typename T>
VfeOutput<T> vfe_forward(const Matrix<T>& point_features,
                         std::span<const std::int32_t> point_to_voxel,
                         std::span<const VoxelCoord> coords, const VfeParams<T>& params,
                         NormPhase phase, std::span<const std::uint8_t> stat_rows = {},
                         VfeCache<T>* cache = nullptr);

// Convenience overload over an assignment's own voxel set.
template <typename T>
VfeOutput<T> vfe_forward(const Matrix<T>& point_features, const VoxelAssignment& assignment,
                         const VfeParams<T>& params, NormPhase phase);

// Accumulates parameter gradients into `grads` (same layout as params).
// grad_points, when given, is an extra gradient on the per-point features.
template <typename T>
void vfe_backward(const Matrix<T>& grad_voxels, const Matrix<T>* grad_points,
                  const VfeCache<T>& cache, const VfeParams<T>& params,
                  VfeParams<T>& grads);

}  // namespace ssf
