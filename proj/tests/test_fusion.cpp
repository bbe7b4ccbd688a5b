#include <doctest.h>

#include <set>

#include "ssf/errors.hpp"
#include "ssf/fusion.hpp"
#include "support.hpp"

using namespace ssf;
using namespace ssf::testing;

namespace {

GridConfig fusion_grid() {
  GridConfig g;
  g.range_m = 6.4;
  g.voxel_x = g.voxel_y = 0.4;
  return g;
}

std::vector<Vec3> random_points(SplitMix64& rng, std::size_t n, double half) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-2, 2));
  }
  return pts;
}

VfeParams<double> test_vfe(SplitMix64& rng) {
  VfeParams<double> p;
  p.layer0.linear = {kPointFeatureWidth, 4, {}, {}};
  p.layer1.linear = {4, 3, {}, {}};
  for (std::size_t i = 0; i < kPointFeatureWidth * 4; ++i) p.layer0.linear.weight.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 4; ++i) p.layer0.linear.bias.push_back(rng.uniform(0, 1));
  for (int i = 0; i < 12; ++i) p.layer1.linear.weight.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 3; ++i) p.layer1.linear.bias.push_back(rng.uniform(0, 1));
  p.layer0.norm = make_batchnorm<double>(4);
  return p;
}

}  // namespace

TEST_CASE("joint voxelisation is the union of both scans") {
  const GridConfig g = fusion_grid();
  SplitMix64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_points(rng, 60, 3.5);
    const auto b = random_points(rng, 45, 3.5);
    const JointVoxelization jv = joint_voxelize(a, b, g);
    std::set<VoxelCoord> sa, sb;
    for (const auto& p : a) if (auto c = voxel_of(p, g)) sa.insert(*c);
    for (const auto& p : b) if (auto c = voxel_of(p, g)) sb.insert(*c);
    std::set<VoxelCoord> u = sa;
    u.insert(sb.begin(), sb.end());
    REQUIRE(jv.size() == u.size());
    CHECK(is_canonical(jv.union_coords));
    for (std::size_t i = 0; i < jv.size(); ++i) {
      CHECK(static_cast<bool>(jv.mask_t[i]) == sa.count(jv.union_coords[i]));
      CHECK(static_cast<bool>(jv.mask_t1[i]) == sb.count(jv.union_coords[i]));
    }
    for (std::size_t k = 0; k < jv.assignment_t1.kept_count(); ++k) {
      CHECK(jv.union_coords[jv.assignment_t1.point_to_voxel[k]] ==
            jv.assignment_t1.voxel_coord_per_point[k]);
    }
  }
}

TEST_CASE("virtual voxels are zero and do not leak into real rows") {
  const GridConfig g = fusion_grid();
  SplitMix64 rng(9);
  const auto a = random_points(rng, 40, 3.0);
  const auto b = random_points(rng, 40, 3.0);
  const JointVoxelization jv = joint_voxelize(a, b, g);
  VfeParams<double> p = test_vfe(rng);
  const Matrix<double> fa = augment_point_features(a, jv.assignment_t, g);
  const Matrix<double> fb = augment_point_features(b, jv.assignment_t1, g);
  const VirtualVfePair<double> out = vfe_with_virtual(jv, fa, fb, g, p, NormPhase::kTrain);
  REQUIRE(out.t.voxel_features.rows() == jv.size());
  REQUIRE(out.t1.voxel_features.rows() == jv.size());

  // Real rows equal a VFE over scan t alone: virtual points change neither the
  // pooled values nor the normalisation statistics.
  const VfeOutput<double> alone = vfe_forward(fa, jv.assignment_t.point_to_voxel,
                                              jv.union_coords, p, NormPhase::kTrain);
  for (std::size_t v = 0; v < jv.size(); ++v) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (jv.mask_t[v]) {
        CHECK(out.t.voxel_features(v, c) == doctest::Approx(alone.voxels.features(v, c)));
      } else {
        CHECK(out.t.voxel_features(v, c) == 0.0);
      }
      if (!jv.mask_t1[v]) CHECK(out.t1.voxel_features(v, c) == 0.0);
    }
  }
  const SparseFeatureMap<double> fused =
      concat_fused(out.t.voxel_features, out.t1.voxel_features, jv.union_coords);
  CHECK(fused.channels() == 6);
  CHECK(fused.coords == jv.union_coords);
}

TEST_CASE("concat rejects mismatched maps") {
  const Matrix<double> a(3, 2), b(4, 2), c(3, 3);
  const std::vector<VoxelCoord> coords{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  CHECK_THROWS_AS(concat_fused(a, b, coords), ContractError);
  CHECK_THROWS_AS(concat_fused(a, c, coords), ContractError);
  const std::vector<VoxelCoord> two{{0, 0, 0}, {1, 0, 0}};
  CHECK_THROWS_AS(concat_fused(a, a, two), ContractError);
}
