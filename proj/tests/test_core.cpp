#include <doctest.h>

#include <cmath>

#include "ssf/core.hpp"
#include "ssf/errors.hpp"

using namespace ssf;

TEST_CASE("rigid transform composes and inverts") {
  const RigidTransform a = RigidTransform::from_yaw(0.3, Vec3(1.0, -2.0, 0.5));
  const RigidTransform b = RigidTransform::from_yaw(-1.1, Vec3(0.2, 0.0, 3.0));
  const Vec3 p(4.0, 5.0, -1.0);
  CHECK(((a * b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);
  CHECK((a.inverse().apply(a.apply(p)) - p).norm() < 1e-12);

  const auto m = a.to_matrix();
  const RigidTransform back = RigidTransform::from_matrix(m);
  CHECK(back == a);
}

TEST_CASE("rigid transform rejects non-rigid matrices") {
  std::array<double, 16> m{2, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  CHECK_THROWS_AS(RigidTransform::from_matrix(m), ContractError);
  std::array<double, 16> reflect{-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  CHECK_THROWS_AS(RigidTransform::from_matrix(reflect), ContractError);
  std::array<double, 16> last_row{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1};
  CHECK_THROWS_AS(RigidTransform::from_matrix(last_row), ContractError);
}

TEST_CASE("ego flow") {
  const std::vector<Vec3> pts{{1, 2, 3}, {-4, 0, 1}};
  SUBCASE("identity gives zero") {
    for (const Vec3& f : ego_flow(pts, RigidTransform::identity())) CHECK(f == Vec3::Zero());
  }
  SUBCASE("pure translation gives the translation") {
    const RigidTransform t(Mat3::Identity(), Vec3(0.5, -1.0, 0.0));
    for (const Vec3& f : ego_flow(pts, t)) CHECK(f == Vec3(0.5, -1.0, 0.0));
  }
  SUBCASE("yaw by 90 degrees about the origin") {
    const RigidTransform t = RigidTransform::from_yaw(M_PI / 2, Vec3::Zero());
    const auto f = ego_flow(std::vector<Vec3>{{1, 0, 0}}, t);
    CHECK((f[0] - Vec3(-1, 1, 0)).norm() < 1e-12);
  }
}

TEST_CASE("compose flow keeps ego where the residual is invalid") {
  FlowField ego{{{1, 0, 0}, {0, 1, 0}}, {1, 1}};
  FlowField res{{{0.5, 0, 0}, {9, 9, 9}}, {1, 0}};
  const FlowField out = compose_flow(ego, res);
  CHECK(out.flow[0] == Vec3(1.5, 0, 0));
  CHECK(out.flow[1] == Vec3(0, 1, 0));
  CHECK(out.validity == std::vector<std::uint8_t>{1, 1});
  FlowField short_res{{{0, 0, 0}}, {1}};
  CHECK_THROWS_AS(compose_flow(ego, short_res), ContractError);
}

TEST_CASE("ground removal keeps source rows and optional columns") {
  PointCloud c;
  c.positions = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  c.ground_mask = {1, 0, 1, 0};
  c.gt_flow = std::vector<Vec3>{{0, 0, 0}, {1, 1, 1}, {0, 0, 0}, {3, 3, 3}};
  c.class_id = std::vector<std::uint8_t>{0, 1, 0, 2};
  const GroundRemoval g = remove_ground(c);
  CHECK(g.source_rows == std::vector<std::int32_t>{1, 3});
  CHECK(g.cloud.positions[1] == Vec3(3, 0, 0));
  CHECK((*g.cloud.class_id)[1] == 2);
  CHECK((*g.cloud.gt_flow)[0] == Vec3(1, 1, 1));
  CHECK(g.cloud.ground_mask == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("point cloud validation") {
  PointCloud c;
  c.positions = {{0, 0, 0}};
  c.ground_mask = {};
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.ground_mask = {0};
  CHECK_NOTHROW(c.validate());
  c.positions[0].x() = NAN;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("grid config") {
  GridConfig g;
  CHECK(g.side_cells() == 1024);
  CHECK(g.z_cells() == 1);
  g.voxel_y = 0.2;
  CHECK_THROWS_AS(g.validate(), ContractError);
  g.voxel_y = 0.1;
  g.range_m = 102.45;
  CHECK_THROWS_AS(g.validate(), ContractError);
}
