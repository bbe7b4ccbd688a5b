#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ssf/voxelizer.hpp"

namespace ssf {

// Voxel set shared by both scans plus per-scan occupancy masks. The
// assignments' point_to_voxel and unique_voxels index union_coords.
struct JointVoxelization {
  std::vector<VoxelCoord> union_coords;
  std::vector<std::uint8_t> mask_t;
  std::vector<std::uint8_t> mask_t1;
  VoxelAssignment assignment_t;
  VoxelAssignment assignment_t1;

  std::size_t size() const { return union_coords.size(); }
};

JointVoxelization joint_voxelize(std::span<const Vec3> points_t,
                                 std::span<const Vec3> points_t1, const GridConfig& grid);

template <typename T>
struct VirtualVfeCache {
  VfeCache<T> vfe;
  std::size_t real_points = 0;
};

template <typename T>
struct VirtualVfeOutput {
  Matrix<T> voxel_features;   // U x C, zero on rows where the scan is absent
  Matrix<T> point_features;   // real points only, per-point VFE output
};

// Runs the VFE for one scan over all union voxels. Voxels the scan does not
// occupy get one virtual point at the voxel centre; their pooled rows are then
// zeroed. Virtual points are excluded from normalisation statistics.
template <typename T>
VirtualVfeOutput<T> vfe_scan_with_virtual(const JointVoxelization& jv, bool second_scan,
                                          const Matrix<T>& features, const GridConfig& grid,
                                          const VfeParams<T>& params, NormPhase phase,
                                          VirtualVfeCache<T>* cache = nullptr);

template <typename T>
void vfe_scan_with_virtual_backward(const Matrix<T>& grad_voxels,
                                    const Matrix<T>* grad_points,
                                    const JointVoxelization& jv, bool second_scan,
                                    const VirtualVfeCache<T>& cache,
                                    const VfeParams<T>& params, VfeParams<T>& grads);

template <typename T>
struct VirtualVfePair {
  VirtualVfeOutput<T> t;
  VirtualVfeOutput<T> t1;
};

// Both scans through the shared VFE; features are the 9-wide augmented rows of
// each scan's kept points.
template <typename T>
VirtualVfePair<T> vfe_with_virtual(const JointVoxelization& jv, const Matrix<T>& features_t,
                                   const Matrix<T>& features_t1, const GridConfig& grid,
                                   const VfeParams<T>& params, NormPhase phase);

// Row i = [E_t[i] | E_t1[i]] on the union coordinates.
template <typename T>
SparseFeatureMap<T> concat_fused(const Matrix<T>& e_t, const Matrix<T>& e_t1,
                                 std::span<const VoxelCoord> coords);

}  // namespace ssf
