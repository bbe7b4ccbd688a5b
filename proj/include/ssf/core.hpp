#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ssf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Rigid motion p' = R p + t. Rotation must be orthonormal with det +1.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  RigidTransform(const Mat3& rotation, const Vec3& translation);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_yaw(double yaw_rad, const Vec3& translation);
  // Row-major 4x4 homogeneous matrix; last row must be (0, 0, 0, 1).
  static RigidTransform from_matrix(std::span<const double, 16> rows);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  RigidTransform inverse() const;
  // (this * other)(p) == this(other(p))
  RigidTransform operator*(const RigidTransform& other) const;
  std::array<double, 16> to_matrix() const;

  bool operator==(const RigidTransform& other) const {
    return rotation_ == other.rotation_ && translation_ == other.translation_;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<std::uint8_t> ground_mask;
  std::optional<std::vector<Vec3>> gt_flow;
  std::optional<std::vector<std::uint8_t>> class_id;

  std::size_t size() const { return positions.size(); }
  // Throws ContractError when array lengths disagree or values are non-finite.
  void validate() const;
  bool operator==(const PointCloud&) const = default;
};

// Ego-centred square grid of side range_m. Pillars require voxel_x == voxel_y.
struct GridConfig {
  double range_m = 102.4;
  double voxel_x = 0.1;
  double voxel_y = 0.1;
  double voxel_z = 6.0;
  double z_min = -3.0;
  double z_max = 3.0;

  int side_cells() const;
  int z_cells() const;
  void validate() const;
};

struct FramePair {
  PointCloud cloud_t;
  PointCloud cloud_t1;
  RigidTransform ego_motion;  // maps frame-t coordinates into frame t+1
  double dt = 0.1;

  void validate() const;
  bool operator==(const FramePair&) const = default;
};

struct FlowField {
  std::vector<Vec3> flow;
  std::vector<std::uint8_t> validity;

  std::size_t size() const { return flow.size(); }
};

std::vector<Vec3> apply_transform(std::span<const Vec3> points,
                                  const RigidTransform& transform);

// Per-point displacement caused by ego motion alone: T p - p.
std::vector<Vec3> ego_flow(std::span<const Vec3> points,
                           const RigidTransform& transform);

// Rows where the residual is invalid keep the ego value; validity follows ego.
FlowField compose_flow(const FlowField& ego, const FlowField& residual);

struct GroundRemoval {
  PointCloud cloud;
  std::vector<std::int32_t> source_rows;  // subset row -> original row
};

GroundRemoval remove_ground(const PointCloud& cloud);

// Subset of a cloud by row list, carrying every optional column.
PointCloud select_rows(const PointCloud& cloud, std::span<const std::int32_t> rows);

}  // namespace ssf
