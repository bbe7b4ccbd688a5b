#include <doctest.h>

#include <filesystem>

#include "ssf/errors.hpp"
#include "ssf/network.hpp"
#include "ssf/scene_io.hpp"
#include "ssf/weights.hpp"
#include "support.hpp"

using namespace ssf;
using namespace ssf::testing;

namespace {

SyntheticSceneConfig small_scene(std::uint64_t seed) {
  SyntheticSceneConfig cfg;
  cfg.n_background_points = 600;
  cfg.n_boxes = 4;
  cfg.points_per_box = 40;
  cfg.grid.range_m = 25.6;
  cfg.grid.voxel_x = cfg.grid.voxel_y = 0.2;
  cfg.rng_seed = seed;
  return cfg;
}

ParseErrorKind decode_failure(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_frame_pair(bytes);
  } catch (const ParseError& e) {
    return e.kind();
  }
  FAIL("decode accepted corrupt bytes");
  return ParseErrorKind::kIo;
}

}  // namespace

TEST_CASE("synthetic scenes") {
  const SyntheticScene s = synth_scene(small_scene(3));
  const FramePair& p = s.pair;
  CHECK_NOTHROW(p.validate());
  CHECK(p.cloud_t.size() == 600 + 4 * 40);
  REQUIRE(p.cloud_t.gt_flow.has_value());
  REQUIRE(p.cloud_t.class_id.has_value());
  CHECK(synth_frame_pair(small_scene(3)) == p);
  CHECK_FALSE(synth_frame_pair(small_scene(4)) == p);

  const auto ego = ego_flow(p.cloud_t.positions, p.ego_motion);
  for (std::size_t i = 0; i < p.cloud_t.size(); ++i) {
    const Vec3& gt = (*p.cloud_t.gt_flow)[i];
    const std::int32_t b = s.box_of_point_t[i];
    if (b < 0) {
      CHECK((gt - ego[i]).norm() < 1e-12);
      CHECK((*p.cloud_t.class_id)[i] == 0);
    } else {
      const SyntheticBox& box = s.boxes[static_cast<std::size_t>(b)];
      const Vec3 expect = ego[i] + p.ego_motion.rotation() * (box.velocity * p.dt);
      CHECK((gt - expect).norm() < 1e-12);
      CHECK((*p.cloud_t.class_id)[i] == static_cast<std::uint8_t>(box.cls));
    }
  }
  // Positions are float-representable.
  for (const Vec3& x : p.cloud_t.positions) {
    CHECK(static_cast<double>(static_cast<float>(x.x())) == x.x());
  }

  SyntheticSceneConfig bad = small_scene(1);
  bad.pedestrian_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("a box moving alone under a still ego") {
  SyntheticSceneConfig cfg = small_scene(9);
  cfg.ego_speed_range = {0.0, 0.0};
  cfg.ego_yaw_rate_max = 0.0;
  cfg.n_boxes = 1;
  cfg.pedestrian_fraction = 0.0;
  cfg.box_speed_range = {1.0, 1.0};
  const SyntheticScene s = synth_scene(cfg);
  CHECK(s.pair.ego_motion == RigidTransform::identity());
  const double speed = s.boxes[0].velocity.norm();
  CHECK(speed == doctest::Approx(1.0));
  for (std::size_t i = 0; i < s.pair.cloud_t.size(); ++i) {
    const Vec3& gt = (*s.pair.cloud_t.gt_flow)[i];
    CHECK((gt - (s.box_of_point_t[i] < 0 ? Vec3::Zero() : Vec3(s.boxes[0].velocity * 0.1)))
              .norm() == 0.0);
  }
}

TEST_CASE("frame pair files") {
  const FramePair p = synth_frame_pair(small_scene(5));
  const auto bytes = encode_frame_pair(p);
  const FramePair q = decode_frame_pair(bytes);
  CHECK(q.cloud_t.positions == p.cloud_t.positions);
  CHECK(q.cloud_t1.positions == p.cloud_t1.positions);
  CHECK(q.cloud_t.ground_mask == p.cloud_t.ground_mask);
  CHECK(q.cloud_t.class_id == p.cloud_t.class_id);
  CHECK(q.ego_motion == p.ego_motion);
  CHECK(q.dt == static_cast<double>(static_cast<float>(p.dt)));
  for (std::size_t i = 0; i < p.cloud_t.size(); ++i) {
    CHECK(((*q.cloud_t.gt_flow)[i] - (*p.cloud_t.gt_flow)[i]).norm() < 1e-6);
  }
  // Encoding is a fixed point after one trip.
  CHECK(encode_frame_pair(q) == bytes);

  const auto dir = std::filesystem::temp_directory_path() / "ssf_scene_io_test";
  std::filesystem::create_directories(dir);
  write_frame_pair(q, dir / "a.sffp");
  CHECK(read_frame_pair(dir / "a.sffp") == q);

  SUBCASE("corruption") {
    auto magic = bytes;
    magic[0] = 'X';
    CHECK(decode_failure(magic) == ParseErrorKind::kMagic);
    auto version = bytes;
    version[4] = 9;
    CHECK(decode_failure(version) == ParseErrorKind::kVersion);
    auto cut = bytes;
    cut.resize(cut.size() - 5);
    CHECK(decode_failure(cut) == ParseErrorKind::kTruncated);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK(decode_failure(trailing) == ParseErrorKind::kStructure);
    CHECK_THROWS_AS(read_frame_pair(dir / "missing.sffp"), ParseError);
  }

  SUBCASE("scan t+1 ground truth is not storable") {
    FramePair r = p;
    r.cloud_t1.gt_flow = std::vector<Vec3>(r.cloud_t1.size());
    CHECK_THROWS_AS(encode_frame_pair(r), ContractError);
  }
}

TEST_CASE("weights round trip and shape inference") {
  UnetConfig cfg;
  cfg.vfe_hidden = 5;
  cfg.vfe_channels = 3;
  cfg.stage_widths = {4, 6};
  cfg.final_width = 7;
  cfg.head_hidden = {8, 2};
  const SsfParams<float> p = init_params<float>(cfg, 12);
  const WeightBundle b = to_weight_bundle(p);
  CHECK_NOTHROW(b.validate());
  const WeightBundle d = decode_weights(encode_weights(b));
  CHECK(d == b);

  const UnetConfig inferred = infer_config(d, UnetConfig{});
  CHECK(inferred.vfe_hidden == 5);
  CHECK(inferred.vfe_channels == 3);
  CHECK(inferred.stage_widths == std::vector<std::size_t>{4, 6});
  CHECK(inferred.final_width == 7);
  CHECK(inferred.head_hidden == std::vector<std::size_t>{8, 2});
  CHECK(inferred.use_norm);

  SsfParams<float> q = from_weight_bundle(d, UnetConfig{});
  SsfParams<float> pp = p;
  auto a = tensor_refs(pp);
  auto c = tensor_refs(q);
  REQUIRE(a.size() == c.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].values == *c[i].values);

  WeightBundle missing = b;
  missing.tensors.erase(missing.tensors.begin() + 3);
  CHECK_THROWS_AS(from_weight_bundle(missing, UnetConfig{}), ParseError);
  WeightBundle extra = b;
  extra.tensors.push_back({"unused", {1}, {0.f}});
  CHECK_THROWS_AS(from_weight_bundle(extra, UnetConfig{}), ParseError);
  WeightBundle dup = b;
  dup.tensors.push_back(b.tensors[0]);
  CHECK_THROWS_AS(dup.validate(), ContractError);
  auto bytes = encode_weights(b);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS_AS(decode_weights(bytes), ParseError);
}

TEST_CASE("flow files") {
  FlowFile f;
  f.flow = {{1.f, 2.f, 3.f}, {-1.f, 0.f, 0.5f}};
  f.processed = {1, 0};
  const auto path = std::filesystem::temp_directory_path() / "ssf_flow_test.ssfl";
  write_flow(f, path);
  CHECK(read_flow(path) == f);
}
