#include "ssf/fusion.hpp"

#include <algorithm>
#include <iterator>
#include <string>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

void reindex(VoxelAssignment& a, std::span<const VoxelCoord> union_coords,
             std::span<const std::uint64_t> union_keys) {
  for (std::size_t i = 0; i < a.point_to_voxel.size(); ++i) {
    const std::uint64_t key = pack_coord(a.voxel_coord_per_point[i]);
    const auto it = std::lower_bound(union_keys.begin(), union_keys.end(), key);
    a.point_to_voxel[i] = static_cast<std::int32_t>(it - union_keys.begin());
  }
  a.unique_voxels.assign(union_coords.begin(), union_coords.end());
}

}  // namespace

JointVoxelization joint_voxelize(std::span<const Vec3> points_t,
                                 std::span<const Vec3> points_t1, const GridConfig& grid) {
  JointVoxelization jv;
  jv.assignment_t = voxelize(points_t, grid);
  jv.assignment_t1 = voxelize(points_t1, grid);

  std::vector<std::uint64_t> keys_t;
  std::vector<std::uint64_t> keys_t1;
  for (const auto& c : jv.assignment_t.unique_voxels) keys_t.push_back(pack_coord(c));
  for (const auto& c : jv.assignment_t1.unique_voxels) keys_t1.push_back(pack_coord(c));
  std::vector<std::uint64_t> keys;
  std::set_union(keys_t.begin(), keys_t.end(), keys_t1.begin(), keys_t1.end(),
                 std::back_inserter(keys));

  jv.union_coords.reserve(keys.size());
  jv.mask_t.assign(keys.size(), 0);
  jv.mask_t1.assign(keys.size(), 0);
  for (std::size_t i = 0, a = 0, b = 0; i < keys.size(); ++i) {
    jv.union_coords.push_back(unpack_coord(keys[i]));
    if (a < keys_t.size() && keys_t[a] == keys[i]) {
      jv.mask_t[i] = 1;
      ++a;
    }
    if (b < keys_t1.size() && keys_t1[b] == keys[i]) {
      jv.mask_t1[i] = 1;
      ++b;
    }
  }
  reindex(jv.assignment_t, jv.union_coords, keys);
  reindex(jv.assignment_t1, jv.union_coords, keys);
  return jv;
}

template <typename T>
VirtualVfeOutput<T> vfe_scan_with_virtual(const JointVoxelization& jv, bool second_scan,
                                          const Matrix<T>& features, const GridConfig& grid,
                                          const VfeParams<T>& params, NormPhase phase,
                                          VirtualVfeCache<T>* cache) {
  const VoxelAssignment& a = second_scan ? jv.assignment_t1 : jv.assignment_t;
  const auto& mask = second_scan ? jv.mask_t1 : jv.mask_t;
  SSF_REQUIRE(features.rows() == a.kept_count() && features.cols() == kPointFeatureWidth,
              "vfe_with_virtual: feature matrix does not match the assignment");
  std::size_t virtual_count = 0;
  for (std::uint8_t m : mask) virtual_count += m ? 0 : 1;

  const std::size_t real = a.kept_count();
  Matrix<T> rows(real + virtual_count, kPointFeatureWidth);
  std::copy(features.values().begin(), features.values().end(), rows.values().begin());
  std::vector<std::int32_t> to_voxel(a.point_to_voxel);
  to_voxel.reserve(rows.rows());
  std::vector<std::uint8_t> stat_rows(rows.rows(), 0);
  std::fill(stat_rows.begin(), stat_rows.begin() + static_cast<std::ptrdiff_t>(real), 1);
  std::size_t r = real;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (mask[v]) continue;
    // Virtual point: at the voxel centre, zero offset, cluster centre = centre.
    const Vec3 c = voxel_center(jv.union_coords[v], grid);
    auto row = rows.row(r++);
    row[0] = row[6] = static_cast<T>(c.x());
    row[1] = row[7] = static_cast<T>(c.y());
    row[2] = row[8] = static_cast<T>(c.z());
    to_voxel.push_back(static_cast<std::int32_t>(v));
  }

  VfeOutput<T> vfe = vfe_forward(rows, to_voxel, jv.union_coords, params, phase, stat_rows,
                                 cache ? &cache->vfe : nullptr);
  VirtualVfeOutput<T> out;
  out.voxel_features = std::move(vfe.voxels.features);
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) std::ranges::fill(out.voxel_features.row(v), T{0});
  }
  out.point_features = Matrix<T>(real, params.out_width());
  std::copy(vfe.point_features.data(),
            vfe.point_features.data() + real * params.out_width(),
            out.point_features.data());
  if (cache) cache->real_points = real;
  return out;
}

template <typename T>
void vfe_scan_with_virtual_backward(const Matrix<T>& grad_voxels,
                                    const Matrix<T>* grad_points,
                                    const JointVoxelization& jv, bool second_scan,
                                    const VirtualVfeCache<T>& cache,
                                    const VfeParams<T>& params, VfeParams<T>& grads) {
  const auto& mask = second_scan ? jv.mask_t1 : jv.mask_t;
  SSF_REQUIRE(grad_voxels.rows() == mask.size(), "vfe_with_virtual backward: row mismatch");
  Matrix<T> g = grad_voxels;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) std::ranges::fill(g.row(v), T{0});
  }
  const std::size_t c = params.out_width();
  const std::size_t all_points = cache.vfe.layer1.output.rows();
  Matrix<T> gp(all_points, c);
  if (grad_points) {
    SSF_REQUIRE(grad_points->rows() == cache.real_points && grad_points->cols() == c,
                "vfe_with_virtual backward: point gradient shape mismatch");
    std::copy(grad_points->values().begin(), grad_points->values().end(),
              gp.values().begin());
  }
  vfe_backward(g, &gp, cache.vfe, params, grads);
}

template <typename T>
VirtualVfePair<T> vfe_with_virtual(const JointVoxelization& jv, const Matrix<T>& features_t,
                                   const Matrix<T>& features_t1, const GridConfig& grid,
                                   const VfeParams<T>& params, NormPhase phase) {
  return {vfe_scan_with_virtual(jv, false, features_t, grid, params, phase),
          vfe_scan_with_virtual(jv, true, features_t1, grid, params, phase)};
}

template <typename T>
SparseFeatureMap<T> concat_fused(const Matrix<T>& e_t, const Matrix<T>& e_t1,
                                 std::span<const VoxelCoord> coords) {
  SSF_REQUIRE(e_t.rows() == e_t1.rows(),
              "concat_fused: sparse feature maps differ in size (" +
                  std::to_string(e_t.rows()) + " vs " + std::to_string(e_t1.rows()) + ")");
  SSF_REQUIRE(e_t.cols() == e_t1.cols(), "concat_fused: channel counts differ");
  SSF_REQUIRE(coords.size() == e_t.rows(), "concat_fused: coordinate count mismatch");
  SparseFeatureMap<T> out;
  out.coords.assign(coords.begin(), coords.end());
  out.features = concat_cols(e_t, e_t1);
  return out;
}

#define SSF_INSTANTIATE(T)                                                                \
  template VirtualVfeOutput<T> vfe_scan_with_virtual<T>(                                  \
      const JointVoxelization&, bool, const Matrix<T>&, const GridConfig&,                \
      const VfeParams<T>&, NormPhase, VirtualVfeCache<T>*);                               \
  template void vfe_scan_with_virtual_backward<T>(                                        \
      const Matrix<T>&, const Matrix<T>*, const JointVoxelization&, bool,                 \
      const VirtualVfeCache<T>&, const VfeParams<T>&, VfeParams<T>&);                     \
  template VirtualVfePair<T> vfe_with_virtual<T>(const JointVoxelization&,                \
                                                 const Matrix<T>&, const Matrix<T>&,      \
                                                 const GridConfig&, const VfeParams<T>&,  \
                                                 NormPhase);                              \
  template SparseFeatureMap<T> concat_fused<T>(const Matrix<T>&, const Matrix<T>&,        \
                                               std::span<const VoxelCoord>);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
