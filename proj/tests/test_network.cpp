#include <doctest.h>

#include <numeric>
#include <set>

#include "dense_unet.hpp"
#include "gradchecks.hpp"
#include "ssf/errors.hpp"
#include "ssf/network.hpp"

using namespace ssf;
using namespace ssf::testing;

namespace {

UnetConfig small_config(bool norm) {
  UnetConfig cfg;
  cfg.vfe_hidden = 4;
  cfg.vfe_channels = 3;
  cfg.stage_widths = {4, 5};
  cfg.final_width = 4;
  cfg.head_hidden = {6};
  cfg.use_norm = norm;
  return cfg;
}

void randomise_running_stats(SsfParams<double>& p, SplitMix64& rng) {
  for (auto& ref : tensor_refs(p)) {
    if (ref.trainable) continue;
    const bool var = ref.name.ends_with("running_var");
    for (double& v : *ref.values) v = var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3);
  }
}

SparseFeatureMap<double> random_fused(SplitMix64& rng, const Extent& e, std::size_t channels) {
  SparseFeatureMap<double> x;
  x.coords = random_coords(rng, e, 0.3);
  x.features = random_matrix<double>(rng, x.coords.size(), channels);
  return x;
}

}  // namespace

TEST_CASE("parameter layout") {
  const SsfParams<float> p = init_params<float>(small_config(true), 1);
  SsfParams<float> q = p;
  std::set<std::string> names;
  std::size_t trainable = 0;
  for (const auto& ref : tensor_refs(q)) {
    CHECK(names.insert(ref.name).second);
    const std::size_t n =
        std::accumulate(ref.shape.begin(), ref.shape.end(), std::size_t{1}, std::multiplies<>());
    CHECK(n == ref.values->size());
    if (ref.trainable) trainable += n;
  }
  CHECK(trainable == trainable_parameter_count(p));
  CHECK(names.count("enc.0.down.w"));
  CHECK(names.count("dec.1.reduce.w"));
  CHECK(names.count("vfe.0.norm.running_var"));
  CHECK(names.count("head.1.b"));

  const SsfParams<float> again = init_params<float>(small_config(true), 1);
  const SsfParams<float> other = init_params<float>(small_config(true), 2);
  SsfParams<float> a = again, o = other;
  CHECK(*tensor_refs(a)[0].values == *tensor_refs(q)[0].values);
  CHECK(*tensor_refs(o)[0].values != *tensor_refs(q)[0].values);
}

TEST_CASE("config validation") {
  UnetConfig cfg = small_config(false);
  cfg.kernel_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = small_config(false);
  cfg.stage_widths.clear();
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK_NOTHROW(UnetConfig::toy().validate());
}

TEST_CASE("sparse U-Net matches the dense reference") {
  for (bool norm : {false, true}) {
    SplitMix64 rng(norm ? 21 : 20);
    for (int trial = 0; trial < 5; ++trial) {
      const UnetConfig cfg = small_config(norm);
      SsfParams<double> p = init_params<double>(cfg, 100 + trial);
      if (norm) randomise_running_stats(p, rng);
      const Extent e{12, 10, 1};
      const SparseFeatureMap<double> x = random_fused(rng, e, 2 * cfg.vfe_channels);
      const SparseFeatureMap<double> y = unet_forward(x, e, p, NormPhase::kEval);
      const Matrix<double> ref = dense_unet(x, e, p);
      CHECK(y.coords == x.coords);
      CHECK(max_rel_diff(y.features.values(), ref.values(), 1e-6) <= 1e-9);
    }
  }
}

TEST_CASE("U-Net commutes with shifts by the coarsest stride") {
  SplitMix64 rng(4);
  const UnetConfig cfg = small_config(false);
  const SsfParams<double> p = init_params<double>(cfg, 8);
  const Extent e{10, 10, 1};
  const SparseFeatureMap<double> x = random_fused(rng, e, 2 * cfg.vfe_channels);
  SparseFeatureMap<double> shifted = x;
  for (auto& c : shifted.coords) {
    c.x += 4;
    c.y += 8;
  }
  const Extent big{32, 32, 1};
  const auto a = unet_forward(x, big, p, NormPhase::kEval);
  const auto b = unet_forward(shifted, big, p, NormPhase::kEval);
  CHECK(max_rel_diff(a.features.values(), b.features.values(), 1e-9) <= 1e-12);
}

TEST_CASE("full pipeline behaviour") {
  const GridConfig grid = tiny_grid();
  FramePair pair = tiny_pair(3, grid);
  pair.cloud_t.positions.push_back({50.0, 0.0, 0.0});  // outside the grid
  pair.cloud_t.ground_mask.push_back(0);
  pair.cloud_t.gt_flow->push_back({0, 0, 0});
  SsfParams<double> p = init_params<double>(small_config(false), 5);
  const FlowPrediction pred = ssf_forward(pair, p, grid);
  const auto ego = ego_flow(pair.cloud_t.positions, pair.ego_motion);
  REQUIRE(pred.flow.size() == pair.cloud_t.size());

  SUBCASE("ground and out-of-grid rows carry ego flow only") {
    for (std::size_t i = 0; i < pair.cloud_t.size(); ++i) {
      const bool skipped = pair.cloud_t.ground_mask[i] || i + 1 == pair.cloud_t.size();
      CHECK(static_cast<bool>(pred.processed[i]) == !skipped);
      if (skipped) {
        CHECK((pred.flow.flow[i] - ego[i]).norm() == 0.0);
      } else {
        CHECK((pred.flow.flow[i] - ego[i] - pred.residual[i]).norm() < 1e-12);
      }
    }
  }

  SUBCASE("zero head reduces to the ego baseline") {
    for (double& w : p.head.back().weight) w = 0.0;
    for (double& b : p.head.back().bias) b = 0.0;
    const FlowPrediction z = ssf_forward(pair, p, grid);
    for (std::size_t i = 0; i < z.flow.size(); ++i) {
      CHECK((z.flow.flow[i] - ego[i]).norm() == 0.0);
    }
  }

  SUBCASE("row order does not matter") {
    std::vector<std::int32_t> perm(pair.cloud_t.size());
    std::iota(perm.begin(), perm.end(), 0);
    SplitMix64 rng(6);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    FramePair permuted = pair;
    permuted.cloud_t = select_rows(pair.cloud_t, perm);
    const FlowPrediction q = ssf_forward(permuted, p, grid);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      CHECK((q.flow.flow[i] - pred.flow.flow[perm[i]]).norm() < 1e-9);
    }
  }

  SUBCASE("nothing inside the grid") {
    FramePair far = pair;
    for (auto& x : far.cloud_t.positions) x += Vec3(100, 0, 0);
    const FlowPrediction f = ssf_forward(far, p, grid);
    const auto far_ego = ego_flow(far.cloud_t.positions, far.ego_motion);
    for (std::size_t i = 0; i < f.flow.size(); ++i) {
      CHECK(f.processed[i] == 0);
      CHECK((f.flow.flow[i] - far_ego[i]).norm() == 0.0);
    }
  }
}

TEST_CASE("unpillar never reads virtual voxels") {
  const GridConfig grid = tiny_grid();
  const std::vector<Vec3> a{{0.1, 0.1, 0}}, b{{2.1, 2.1, 0}};
  const JointVoxelization jv = joint_voxelize(a, b, grid);
  SparseFeatureMap<double> feats{jv.union_coords, Matrix<double>(jv.size(), 2, 1.0)};
  CHECK(unpillar(feats, jv).rows() == 1);
  JointVoxelization broken = jv;
  broken.mask_t.assign(jv.size(), 0);
  CHECK_THROWS_AS(unpillar(feats, broken), ContractError);
  feats.coords.pop_back();
  CHECK_THROWS_AS(unpillar(feats, jv), ContractError);
}

TEST_CASE("non-finite weights name the layer") {
  const GridConfig grid = tiny_grid();
  const FramePair pair = tiny_pair(3, grid);
  SsfParams<double> p = init_params<double>(small_config(false), 5);
  p.encoder[1].sub0.conv.weight[0] = std::numeric_limits<double>::infinity();
  try {
    ssf_forward(pair, p, grid);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(e.where().starts_with("enc.1"));
  }
}

TEST_CASE("end-to-end gradient") {
  std::size_t count = 0;
  const GradReport r = gradcheck_end_to_end(1, &count);
  CHECK(count <= 300);
  CHECK(r.entries == count);
  CHECK(r.worst <= 1e-3);
}
