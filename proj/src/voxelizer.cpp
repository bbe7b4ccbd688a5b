#include "ssf/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

// Counting sort of rows by voxel; members of each voxel stay in row order.
struct Members {
  std::vector<std::int32_t> offsets;  // size voxels + 1
  std::vector<std::int32_t> rows;
};

Members group_members(std::span<const std::int32_t> point_to_voxel, std::size_t voxels) {
  Members m;
  m.offsets.assign(voxels + 1, 0);
  for (std::int32_t v : point_to_voxel) {
    SSF_REQUIRE(v >= 0 && static_cast<std::size_t>(v) < voxels,
                "point_to_voxel index out of range");
    ++m.offsets[static_cast<std::size_t>(v) + 1];
  }
  std::partial_sum(m.offsets.begin(), m.offsets.end(), m.offsets.begin());
  m.rows.resize(point_to_voxel.size());
  std::vector<std::int32_t> cursor(m.offsets.begin(), m.offsets.end() - 1);
  for (std::size_t i = 0; i < point_to_voxel.size(); ++i) {
    m.rows[static_cast<std::size_t>(cursor[point_to_voxel[i]]++)] =
        static_cast<std::int32_t>(i);
  }
  return m;
}

template <typename T>
Matrix<T> dense_layer_forward(const Matrix<T>& x, const VfeLayer<T>& layer, NormPhase phase,
                              std::span<const std::uint8_t> stat_rows,
                              VfeLayerCache<T>* cache, const char* name) {
  Matrix<T> h = linear_forward(x, layer.linear);
  if (layer.norm) {
    h = batchnorm_forward(h, *layer.norm, phase, stat_rows, cache ? &cache->norm : nullptr);
  }
  check_finite<T>(h.values(), name);
  relu_inplace(h);
  if (cache) {
    cache->input = x;
    cache->output = h;
  }
  return h;
}

template <typename T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
  SSF_REQUIRE(dst.size() == src.size(), "gradient accumulator shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void dense_layer_backward(Matrix<T> grad, const VfeLayerCache<T>& cache,
                          const VfeLayer<T>& layer, VfeLayer<T>& grads,
                          Matrix<T>* grad_input) {
  relu_backward_inplace(grad, cache.output);
  if (layer.norm) {
    BatchNormGrads<T> bn = batchnorm_backward(grad, cache.norm, *layer.norm);
    add_into(grads.norm->gamma, bn.gamma);
    add_into(grads.norm->beta, bn.beta);
    grad = std::move(bn.input);
  }
  LinearGrads<T> lg = linear_backward(grad, cache.input, layer.linear);
  add_into(grads.linear.weight, lg.weight);
  if (!layer.linear.bias.empty()) add_into(grads.linear.bias, lg.bias);
  if (grad_input) *grad_input = std::move(lg.input);
}

}  // namespace

Extent grid_extent(const GridConfig& grid) {
  return {grid.side_cells(), grid.side_cells(), grid.z_cells()};
}

std::optional<VoxelCoord> voxel_of(const Vec3& p, const GridConfig& grid) {
  const int d = grid.side_cells();
  const int zc = grid.z_cells();
  // (x / R + 1/2) * D rather than (x + R/2) / v keeps cell-centre coordinates
  // exact for power-of-two D.
  const double fx = std::floor((p.x() / grid.range_m + 0.5) * d);
  const double fy = std::floor((p.y() / grid.range_m + 0.5) * d);
  const double fz = std::floor((p.z() - grid.z_min) / (grid.z_max - grid.z_min) * zc);
  if (fx < 0 || fy < 0 || fz < 0 || fx >= d || fy >= d || fz >= zc) return std::nullopt;
  if (p.z() < grid.z_min || p.z() >= grid.z_max) return std::nullopt;
  return VoxelCoord{static_cast<std::int32_t>(fx), static_cast<std::int32_t>(fy),
                    static_cast<std::int32_t>(fz)};
}

Vec3 voxel_center(const VoxelCoord& c, const GridConfig& grid) {
  const double d = grid.side_cells();
  const double vz = (grid.z_max - grid.z_min) / grid.z_cells();
  return {((c.x + 0.5) / d - 0.5) * grid.range_m, ((c.y + 0.5) / d - 0.5) * grid.range_m,
          grid.z_min + (c.z + 0.5) * vz};
}

VoxelAssignment voxelize(std::span<const Vec3> points, const GridConfig& grid) {
  grid.validate();
  VoxelAssignment a;
  std::vector<std::uint64_t> keys;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto cell = voxel_of(points[i], grid);
    if (!cell) continue;
    a.kept_point_rows.push_back(static_cast<std::int32_t>(i));
    a.voxel_coord_per_point.push_back(*cell);
    keys.push_back(pack_coord(*cell));
  }
  std::vector<std::uint64_t> unique = keys;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  a.unique_voxels.reserve(unique.size());
  for (std::uint64_t k : unique) a.unique_voxels.push_back(unpack_coord(k));
  a.point_to_voxel.reserve(keys.size());
  for (std::uint64_t k : keys) {
    const auto it = std::lower_bound(unique.begin(), unique.end(), k);
    a.point_to_voxel.push_back(static_cast<std::int32_t>(it - unique.begin()));
  }
  return a;
}

Matrix<double> augment_point_features(std::span<const Vec3> points,
                                      const VoxelAssignment& assignment,
                                      const GridConfig& grid) {
  const std::size_t n = assignment.kept_count();
  SSF_REQUIRE(assignment.point_to_voxel.size() == n &&
                  assignment.voxel_coord_per_point.size() == n,
              "augment: malformed assignment");
  std::size_t voxels = 0;
  for (std::int32_t v : assignment.point_to_voxel) {
    voxels = std::max(voxels, static_cast<std::size_t>(v) + 1);
  }
  const Members members = group_members(assignment.point_to_voxel, voxels);

  // Cluster means summed in a value-sorted order so they do not depend on the
  // order points arrive in.
  std::vector<Vec3> cluster(voxels, Vec3::Zero());
  std::vector<Vec3> buffer;
  for (std::size_t v = 0; v < voxels; ++v) {
    const auto begin = members.offsets[v];
    const auto end = members.offsets[v + 1];
    if (begin == end) continue;
    buffer.clear();
    for (auto i = begin; i < end; ++i) {
      buffer.push_back(points[assignment.kept_point_rows[members.rows[i]]]);
    }
    std::sort(buffer.begin(), buffer.end(), [](const Vec3& a, const Vec3& b) {
      if (a.x() != b.x()) return a.x() < b.x();
      if (a.y() != b.y()) return a.y() < b.y();
      return a.z() < b.z();
    });
    Vec3 sum = Vec3::Zero();
    for (const Vec3& p : buffer) sum += p;
    cluster[v] = sum / static_cast<double>(end - begin);
  }

  Matrix<double> out(n, kPointFeatureWidth);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& p = points[assignment.kept_point_rows[i]];
    const Vec3 offset = p - voxel_center(assignment.voxel_coord_per_point[i], grid);
    const Vec3& c = cluster[assignment.point_to_voxel[i]];
    auto row = out.row(i);
    row[0] = p.x();
    row[1] = p.y();
    row[2] = p.z();
    row[3] = offset.x();
    row[4] = offset.y();
    row[5] = offset.z();
    row[6] = c.x();
    row[7] = c.y();
    row[8] = c.z();
  }
  return out;
}

template <typename T>
VfeOutput<T> vfe_forward(const Matrix<T>& point_features,
                         std::span<const std::int32_t> point_to_voxel,
                         std::span<const VoxelCoord> coords, const VfeParams<T>& params,
                         NormPhase phase, std::span<const std::uint8_t> stat_rows,
                         VfeCache<T>* cache) {
  SSF_REQUIRE(point_features.cols() == params.layer0.linear.in_features,
              "vfe: point feature width mismatch");
  SSF_REQUIRE(params.layer0.linear.out_features == params.layer1.linear.in_features,
              "vfe: layer widths do not chain");
  SSF_REQUIRE(point_to_voxel.size() == point_features.rows(),
              "vfe: point_to_voxel length mismatch");
  Matrix<T> h0 = dense_layer_forward(point_features, params.layer0, phase, stat_rows,
                                     cache ? &cache->layer0 : nullptr, "vfe.0");
  Matrix<T> h1 = dense_layer_forward(h0, params.layer1, phase, stat_rows,
                                     cache ? &cache->layer1 : nullptr, "vfe.1");

  const std::size_t voxels = coords.size();
  const std::size_t c = params.out_width();
  const Members members = group_members(point_to_voxel, voxels);
  VfeOutput<T> out;
  out.voxels.coords.assign(coords.begin(), coords.end());
  out.voxels.features = Matrix<T>(voxels, c);
  std::vector<std::int32_t> argmax;
  if (params.pool == PoolMode::kMax) argmax.assign(voxels * c, -1);
  std::vector<std::int32_t> counts(voxels, 0);
  for (std::size_t v = 0; v < voxels; ++v) {
    const auto begin = members.offsets[v];
    const auto end = members.offsets[v + 1];
    counts[v] = end - begin;
    if (begin == end) continue;
    auto dst = out.voxels.features.row(v);
    if (params.pool == PoolMode::kMax) {
      for (std::size_t j = 0; j < c; ++j) {
        std::int32_t best = members.rows[begin];
        T best_value = h1(static_cast<std::size_t>(best), j);
        for (auto i = begin + 1; i < end; ++i) {
          const T value = h1(static_cast<std::size_t>(members.rows[i]), j);
          if (value > best_value) {
            best_value = value;
            best = members.rows[i];
          }
        }
        dst[j] = best_value;
        argmax[v * c + j] = best;
      }
    } else {
      for (auto i = begin; i < end; ++i) {
        auto src = h1.row(static_cast<std::size_t>(members.rows[i]));
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
      for (std::size_t j = 0; j < c; ++j) dst[j] /= static_cast<T>(end - begin);
    }
  }
  if (cache) {
    cache->point_to_voxel.assign(point_to_voxel.begin(), point_to_voxel.end());
    cache->argmax = std::move(argmax);
    cache->member_count = std::move(counts);
  }
  out.point_features = std::move(h1);
  return out;
}

template <typename T>
VfeOutput<T> vfe_forward(const Matrix<T>& point_features, const VoxelAssignment& assignment,
                         const VfeParams<T>& params, NormPhase phase) {
  return vfe_forward(point_features, assignment.point_to_voxel, assignment.unique_voxels,
                     params, phase);
}

template <typename T>
void vfe_backward(const Matrix<T>& grad_voxels, const Matrix<T>* grad_points,
                  const VfeCache<T>& cache, const VfeParams<T>& params,
                  VfeParams<T>& grads) {
  const std::size_t c = params.out_width();
  const std::size_t points = cache.layer1.output.rows();
  SSF_REQUIRE(grad_voxels.cols() == c && grad_voxels.rows() == cache.member_count.size(),
              "vfe backward: voxel gradient shape mismatch");
  Matrix<T> g(points, c);
  if (grad_points) {
    SSF_REQUIRE(grad_points->rows() == points && grad_points->cols() == c,
                "vfe backward: point gradient shape mismatch");
    g = *grad_points;
  }
  if (params.pool == PoolMode::kMax) {
    for (std::size_t v = 0; v < grad_voxels.rows(); ++v) {
      if (cache.member_count[v] == 0) continue;
      for (std::size_t j = 0; j < c; ++j) {
        g(static_cast<std::size_t>(cache.argmax[v * c + j]), j) += grad_voxels(v, j);
      }
    }
  } else {
    for (std::size_t p = 0; p < points; ++p) {
      const auto v = static_cast<std::size_t>(cache.point_to_voxel[p]);
      const T scale = T{1} / static_cast<T>(cache.member_count[v]);
      for (std::size_t j = 0; j < c; ++j) g(p, j) += grad_voxels(v, j) * scale;
    }
  }
  Matrix<T> g0;
  dense_layer_backward(std::move(g), cache.layer1, params.layer1, grads.layer1, &g0);
  dense_layer_backward(std::move(g0), cache.layer0, params.layer0, grads.layer0, static_cast<Matrix<T>*>(nullptr));
}

#define SSF_INSTANTIATE(T)                                                               \
  template VfeOutput<T> vfe_forward<T>(const Matrix<T>&, std::span<const std::int32_t>, \
                                       std::span<const VoxelCoord>, const VfeParams<T>&, \
                                       NormPhase, std::span<const std::uint8_t>,         \
                                       VfeCache<T>*);                                    \
  template VfeOutput<T> vfe_forward<T>(const Matrix<T>&, const VoxelAssignment&,         \
                                       const VfeParams<T>&, NormPhase);                  \
  template void vfe_backward<T>(const Matrix<T>&, const Matrix<T>*, const VfeCache<T>&,  \
                                const VfeParams<T>&, VfeParams<T>&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
