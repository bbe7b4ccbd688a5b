#include "ssf/core.hpp"

#include <Eigen/LU>
#include <cmath>
#include <string>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

bool finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

}  // namespace

RigidTransform::RigidTransform(const Mat3& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  const Mat3 gram = rotation_.transpose() * rotation_;
  SSF_REQUIRE((gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9,
              "rotation is not orthonormal");
  SSF_REQUIRE(std::abs(rotation_.determinant() - 1.0) <= 1e-9,
              "rotation determinant is not +1");
  SSF_REQUIRE(finite(translation_), "translation is not finite");
}

RigidTransform RigidTransform::from_yaw(double yaw_rad, const Vec3& translation) {
  const double c = std::cos(yaw_rad);
  const double s = std::sin(yaw_rad);
  Mat3 r;
  r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return RigidTransform(r, translation);
}

RigidTransform RigidTransform::from_matrix(std::span<const double, 16> m) {
  SSF_REQUIRE(m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0,
              "homogeneous matrix has a non-affine last row");
  Mat3 r;
  r << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
  return RigidTransform(r, Vec3(m[3], m[7], m[11]));
}

RigidTransform RigidTransform::inverse() const {
  const Mat3 rt = rotation_.transpose();
  return RigidTransform(rt, -(rt * translation_));
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  return RigidTransform(rotation_ * other.rotation_,
                        rotation_ * other.translation_ + translation_);
}

std::array<double, 16> RigidTransform::to_matrix() const {
  std::array<double, 16> m{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r * 4 + c] = rotation_(r, c);
    m[r * 4 + 3] = translation_(r);
  }
  m[15] = 1.0;
  return m;
}

void PointCloud::validate() const {
  const std::size_t n = positions.size();
  SSF_REQUIRE(ground_mask.size() == n, "ground_mask length differs from point count");
  for (const Vec3& p : positions) SSF_REQUIRE(finite(p), "non-finite point position");
  if (gt_flow) {
    SSF_REQUIRE(gt_flow->size() == n, "gt_flow length differs from point count");
    for (const Vec3& f : *gt_flow) SSF_REQUIRE(finite(f), "non-finite gt_flow");
  }
  if (class_id) {
    SSF_REQUIRE(class_id->size() == n, "class_id length differs from point count");
  }
}

int GridConfig::side_cells() const {
  return static_cast<int>(std::lround(range_m / voxel_x));
}

int GridConfig::z_cells() const {
  return static_cast<int>(std::lround((z_max - z_min) / voxel_z));
}

void GridConfig::validate() const {
  SSF_REQUIRE(voxel_x > 0.0 && voxel_z > 0.0, "voxel sizes must be positive");
  SSF_REQUIRE(voxel_x == voxel_y, "pillar grids require voxel_x == voxel_y");
  SSF_REQUIRE(range_m > 0.0 && z_max > z_min, "grid extent must be positive");
  const double cells = range_m / voxel_x;
  SSF_REQUIRE(std::abs(cells - std::round(cells)) <= 1e-9,
              "range_m / voxel_x must be integral");
  const double zc = (z_max - z_min) / voxel_z;
  SSF_REQUIRE(std::abs(zc - std::round(zc)) <= 1e-9,
              "(z_max - z_min) / voxel_z must be integral");
  SSF_REQUIRE(side_cells() >= 1 && z_cells() >= 1, "grid has no cells");
  SSF_REQUIRE(side_cells() < (1 << 21) && z_cells() < (1 << 21),
              "grid exceeds 21-bit coordinate packing");
}

void FramePair::validate() const {
  SSF_REQUIRE(dt > 0.0 && std::isfinite(dt), "dt must be positive");
  cloud_t.validate();
  cloud_t1.validate();
}

std::vector<Vec3> apply_transform(std::span<const Vec3> points,
                                  const RigidTransform& transform) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(transform.apply(p));
  return out;
}

std::vector<Vec3> ego_flow(std::span<const Vec3> points,
                           const RigidTransform& transform) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(transform.apply(p) - p);
  return out;
}

FlowField compose_flow(const FlowField& ego, const FlowField& residual) {
  SSF_REQUIRE(ego.flow.size() == residual.flow.size() &&
                  ego.validity.size() == ego.flow.size() &&
                  residual.validity.size() == residual.flow.size(),
              "compose_flow: length mismatch");
  FlowField out = ego;
  for (std::size_t i = 0; i < out.flow.size(); ++i) {
    if (residual.validity[i]) out.flow[i] += residual.flow[i];
  }
  return out;
}

PointCloud select_rows(const PointCloud& cloud, std::span<const std::int32_t> rows) {
  PointCloud out;
  out.positions.reserve(rows.size());
  out.ground_mask.reserve(rows.size());
  if (cloud.gt_flow) out.gt_flow.emplace().reserve(rows.size());
  if (cloud.class_id) out.class_id.emplace().reserve(rows.size());
  for (std::int32_t r : rows) {
    out.positions.push_back(cloud.positions[r]);
    out.ground_mask.push_back(cloud.ground_mask[r]);
    if (cloud.gt_flow) out.gt_flow->push_back((*cloud.gt_flow)[r]);
    if (cloud.class_id) out.class_id->push_back((*cloud.class_id)[r]);
  }
  return out;
}

GroundRemoval remove_ground(const PointCloud& cloud) {
  SSF_REQUIRE(cloud.ground_mask.size() == cloud.size(),
              "remove_ground: ground_mask missing");
  GroundRemoval out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.ground_mask[i]) out.source_rows.push_back(static_cast<std::int32_t>(i));
  }
  out.cloud = select_rows(cloud, out.source_rows);
  return out;
}

}  // namespace ssf
