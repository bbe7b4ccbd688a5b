#include "ssf/scene_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <set>

#include "ssf/errors.hpp"
#include "ssf/rng.hpp"

namespace ssf {

// ---------------------------------------------------------------------------
// Generator

void SyntheticSceneConfig::validate() const {
  auto range_ok = [](const std::array<double, 2>& r) {
    return std::isfinite(r[0]) && std::isfinite(r[1]) && r[0] >= 0.0 && r[0] <= r[1];
  };
  SSF_REQUIRE(range_ok(box_size_range), "box_size_range must be 0 <= lo <= hi");
  SSF_REQUIRE(range_ok(box_speed_range), "box_speed_range must be 0 <= lo <= hi");
  SSF_REQUIRE(range_ok(pedestrian_speed_range), "pedestrian_speed_range must be 0 <= lo <= hi");
  SSF_REQUIRE(range_ok(ego_speed_range), "ego_speed_range must be 0 <= lo <= hi");
  SSF_REQUIRE(ego_yaw_rate_max >= 0.0, "ego_yaw_rate_max must be >= 0");
  for (double f : {pedestrian_fraction, parked_fraction, ground_fraction}) {
    SSF_REQUIRE(f >= 0.0 && f <= 1.0, "fractions must lie in [0, 1]");
  }
  SSF_REQUIRE(dt > 0.0 && std::isfinite(dt), "dt must be > 0");
  grid.validate();
}

namespace {

// The volatile store keeps the narrowing: GCC 11's SLP vectoriser at -O3 folds
// a plain double -> float -> double round trip away.
double round_to_float(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

Vec3 round_to_float(const Vec3& p) {
  return Vec3(round_to_float(p.x()), round_to_float(p.y()), round_to_float(p.z()));
}

Vec3 sample_in_box(SplitMix64& rng, const Vec3& center, const Vec3& size, double yaw) {
  const Vec3 local(rng.uniform(-0.5, 0.5) * size.x(), rng.uniform(-0.5, 0.5) * size.y(),
                   rng.uniform(-0.5, 0.5) * size.z());
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  return center + Vec3(c * local.x() - s * local.y(), s * local.x() + c * local.y(), local.z());
}

struct StaticBlock {
  Vec3 center;
  Vec3 size;
  double yaw;
};

}  // namespace

SyntheticScene synth_scene(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  SplitMix64 root(cfg.rng_seed);
  SplitMix64 ego_rng = root.fork(0);
  SplitMix64 layout_rng = root.fork(1);
  SplitMix64 sample_t = root.fork(2);
  SplitMix64 sample_t1 = root.fork(3);

  SyntheticScene scene;
  FramePair& pair = scene.pair;
  pair.dt = cfg.dt;

  const double speed = ego_rng.uniform(cfg.ego_speed_range[0], cfg.ego_speed_range[1]);
  const double yaw_rate = ego_rng.uniform(-cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max);
  const double yaw = yaw_rate * cfg.dt;
  scene.ego_pose_t1 = RigidTransform::from_yaw(
      yaw, Vec3(speed * cfg.dt * std::cos(0.5 * yaw), speed * cfg.dt * std::sin(0.5 * yaw), 0.0));
  pair.ego_motion = scene.ego_pose_t1.inverse();
  const RigidTransform& ego = pair.ego_motion;

  const double half = 0.45 * cfg.grid.range_m;
  const std::size_t n_ground = static_cast<std::size_t>(
      std::llround(cfg.ground_fraction * static_cast<double>(cfg.n_background_points)));
  const std::size_t n_struct_points = cfg.n_background_points - n_ground;

  std::vector<StaticBlock> blocks;
  if (n_struct_points > 0) {
    const std::size_t n_blocks = std::max<std::size_t>(1, n_struct_points / 200);
    for (std::size_t i = 0; i < n_blocks; ++i) {
      StaticBlock b;
      b.size = Vec3(layout_rng.uniform(0.3, 4.0), layout_rng.uniform(0.3, 4.0),
                    layout_rng.uniform(1.0, 4.0));
      b.center = Vec3(layout_rng.uniform(-half, half), layout_rng.uniform(-half, half),
                      cfg.ground_z + 0.5 * b.size.z() + 0.05);
      b.yaw = layout_rng.uniform(0.0, std::numbers::pi);
      blocks.push_back(b);
    }
  }
  for (std::size_t i = 0; i < cfg.n_boxes; ++i) {
    SyntheticBox box;
    const bool pedestrian = layout_rng.uniform() < cfg.pedestrian_fraction;
    box.cls = pedestrian ? SceneClass::kPedestrian : SceneClass::kVehicle;
    if (pedestrian) {
      box.size = Vec3(0.6, 0.6, 1.7);
    } else {
      const double length = layout_rng.uniform(cfg.box_size_range[0], cfg.box_size_range[1]);
      box.size = Vec3(length, std::clamp(0.42 * length, 0.8, 2.5), 1.5);
    }
    box.center = Vec3(layout_rng.uniform(-half, half), layout_rng.uniform(-half, half),
                      cfg.ground_z + 0.5 * box.size.z() + 0.05);
    box.yaw = layout_rng.uniform(-std::numbers::pi, std::numbers::pi);
    const auto& range = pedestrian ? cfg.pedestrian_speed_range : cfg.box_speed_range;
    const bool parked = layout_rng.uniform() < cfg.parked_fraction;
    const double v = layout_rng.uniform(range[0], range[1]);
    box.velocity = parked ? Vec3::Zero()
                          : Vec3(v * std::cos(box.yaw), v * std::sin(box.yaw), 0.0);
    scene.boxes.push_back(box);
  }

  PointCloud& ct = pair.cloud_t;
  PointCloud& ct1 = pair.cloud_t1;
  std::vector<Vec3> gt;
  std::vector<std::uint8_t> cls;

  // Static surfaces, sampled independently for each scan.
  for (int scan = 0; scan < 2; ++scan) {
    SplitMix64& rng = scan == 0 ? sample_t : sample_t1;
    PointCloud& cloud = scan == 0 ? ct : ct1;
    for (std::size_t i = 0; i < n_ground; ++i) {
      const Vec3 w(rng.uniform(-half, half), rng.uniform(-half, half),
                   cfg.ground_z + rng.uniform(-0.02, 0.02));
      cloud.positions.push_back(round_to_float(scan == 0 ? w : ego.apply(w)));
      cloud.ground_mask.push_back(1);
    }
    for (std::size_t i = 0; i < n_struct_points; ++i) {
      const StaticBlock& b = blocks[i % blocks.size()];
      const Vec3 w = sample_in_box(rng, b.center, b.size, b.yaw);
      cloud.positions.push_back(round_to_float(scan == 0 ? w : ego.apply(w)));
      cloud.ground_mask.push_back(0);
    }
  }
  {
    const std::vector<Vec3> ef = ego_flow(ct.positions, ego);
    gt.assign(ef.begin(), ef.end());
    cls.assign(ct.size(), static_cast<std::uint8_t>(SceneClass::kBackground));
    scene.box_of_point_t.assign(ct.size(), -1);
  }

  // Moving boxes: the same rigid body observed twice.
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    const SyntheticBox& box = scene.boxes[b];
    const Vec3 motion = box.velocity * cfg.dt;
    const Vec3 moved_motion = ego.rotation() * motion;
    for (std::size_t i = 0; i < cfg.points_per_box; ++i) {
      const Vec3 p = round_to_float(sample_in_box(sample_t, box.center, box.size, box.yaw));
      ct.positions.push_back(p);
      ct.ground_mask.push_back(0);
      const Vec3 f = ego_flow(std::span<const Vec3>(&p, 1), ego)[0];
      gt.push_back(f + moved_motion);
      cls.push_back(static_cast<std::uint8_t>(box.cls));
      scene.box_of_point_t.push_back(static_cast<std::int32_t>(b));

      const Vec3 q = sample_in_box(sample_t1, box.center + motion, box.size, box.yaw);
      ct1.positions.push_back(round_to_float(ego.apply(q)));
      ct1.ground_mask.push_back(0);
    }
  }
  ct.gt_flow = std::move(gt);
  ct.class_id = std::move(cls);
  pair.validate();
  return scene;
}

FramePair synth_frame_pair(const SyntheticSceneConfig& cfg) { return synth_scene(cfg).pair; }

// ---------------------------------------------------------------------------
// Little-endian byte streams

namespace {

class ByteWriter {
 public:
  std::vector<std::uint8_t> bytes;

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string section)
      : data_(data), size_(size), section_(std::move(section)) {}

  std::size_t remaining() const { return size_ - pos_; }
  bool done() const { return pos_ == size_; }
  const std::string& section() const { return section_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw ParseError(ParseErrorKind::kTruncated, section_,
                       "truncated data in section " + section_);
    }
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  template <typename U>
  U uint() {
    const std::uint8_t* p = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string section_;
};

[[noreturn]] void structure_error(const std::string& section, const std::string& what) {
  throw ParseError(ParseErrorKind::kStructure, section, section + ": " + what);
}

void check_magic(ByteReader& r, const char* magic) {
  r.need(4);
  const std::uint8_t* p = r.take(4);
  if (std::memcmp(p, magic, 4) != 0) {
    throw ParseError(ParseErrorKind::kMagic, "header",
                     std::string("bad magic, expected ") + magic);
  }
}

using Tag = std::array<char, 8>;

Tag make_tag(const char* name) {
  Tag t{};
  std::memcpy(t.data(), name, std::min(std::strlen(name), t.size()));
  return t;
}

std::string tag_name(const Tag& t) {
  std::string s(t.data(), t.size());
  s.erase(s.find_last_not_of('\0') + 1);
  return s;
}

void put_section(ByteWriter& w, const char* name, const ByteWriter& payload) {
  const Tag t = make_tag(name);
  w.raw(t.data(), t.size());
  w.u64(payload.bytes.size());
  w.raw(payload.bytes.data(), payload.bytes.size());
}

ByteWriter vec3_payload(const std::vector<Vec3>& v) {
  ByteWriter w;
  for (const Vec3& p : v) {
    w.f32(static_cast<float>(p.x()));
    w.f32(static_cast<float>(p.y()));
    w.f32(static_cast<float>(p.z()));
  }
  return w;
}

ByteWriter u8_payload(const std::vector<std::uint8_t>& v) {
  ByteWriter w;
  w.raw(v.data(), v.size());
  return w;
}

std::vector<Vec3> read_vec3(ByteReader& r) {
  if (r.remaining() % 12 != 0) structure_error(r.section(), "length is not a multiple of 12");
  std::vector<Vec3> out(r.remaining() / 12);
  for (Vec3& p : out) {
    const double x = r.f32();
    const double y = r.f32();
    const double z = r.f32();
    p = Vec3(x, y, z);
  }
  return out;
}

std::vector<std::uint8_t> read_u8(ByteReader& r) {
  const std::size_t n = r.remaining();
  const std::uint8_t* p = r.take(n);
  return std::vector<std::uint8_t>(p, p + n);
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseErrorKind::kIo, "file", "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw ParseError(ParseErrorKind::kIo, "file", "read failed: " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(ParseErrorKind::kIo, "file", "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError(ParseErrorKind::kIo, "file", "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// SFFP

std::vector<std::uint8_t> encode_frame_pair(const FramePair& pair) {
  pair.validate();
  SSF_REQUIRE(!pair.cloud_t1.gt_flow && !pair.cloud_t1.class_id,
              "frame pair files carry ground truth for scan t only");
  const bool has_gt = pair.cloud_t.gt_flow.has_value();
  const bool has_cls = pair.cloud_t.class_id.has_value();

  ByteWriter w;
  w.raw("SFFP", 4);
  w.u32(kFramePairVersion);
  w.u32(6 + (has_gt ? 1 : 0) + (has_cls ? 1 : 0));
  put_section(w, "PT0", vec3_payload(pair.cloud_t.positions));
  put_section(w, "PT1", vec3_payload(pair.cloud_t1.positions));
  put_section(w, "GM0", u8_payload(pair.cloud_t.ground_mask));
  put_section(w, "GM1", u8_payload(pair.cloud_t1.ground_mask));
  ByteWriter ego;
  for (double v : pair.ego_motion.to_matrix()) ego.f64(v);
  put_section(w, "EGO", ego);
  ByteWriter dt;
  dt.f32(static_cast<float>(pair.dt));
  put_section(w, "DT", dt);
  if (has_gt) put_section(w, "GF0", vec3_payload(*pair.cloud_t.gt_flow));
  if (has_cls) put_section(w, "CL0", u8_payload(*pair.cloud_t.class_id));
  return std::move(w.bytes);
}

FramePair decode_frame_pair(const std::vector<std::uint8_t>& bytes) {
  ByteReader head(bytes.data(), bytes.size(), "header");
  check_magic(head, "SFFP");
  const std::uint32_t version = head.u32();
  if (version != kFramePairVersion) {
    throw ParseError(ParseErrorKind::kVersion, "header",
                     "unsupported SFFP version " + std::to_string(version));
  }
  const std::uint32_t count = head.u32();

  std::optional<std::vector<Vec3>> pt0, pt1, gf0;
  std::optional<std::vector<std::uint8_t>> gm0, gm1, cl0;
  std::optional<std::array<double, 16>> ego;
  std::optional<double> dt;
  std::set<std::string> seen;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string where = "section header #" + std::to_string(s);
    ByteReader hdr(bytes.data() + (bytes.size() - head.remaining()), head.remaining(), where);
    Tag tag;
    std::memcpy(tag.data(), hdr.take(8), 8);
    const std::string name = tag_name(tag);
    const std::uint64_t len = hdr.u64();
    head.take(16);
    if (len > head.remaining()) {
      throw ParseError(ParseErrorKind::kTruncated, name, "truncated section " + name);
    }
    ByteReader r(head.take(static_cast<std::size_t>(len)), static_cast<std::size_t>(len), name);
    if (!seen.insert(name).second) structure_error(name, "duplicate section");

    if (name == "PT0") {
      pt0 = read_vec3(r);
    } else if (name == "PT1") {
      pt1 = read_vec3(r);
    } else if (name == "GF0") {
      gf0 = read_vec3(r);
    } else if (name == "GM0") {
      gm0 = read_u8(r);
    } else if (name == "GM1") {
      gm1 = read_u8(r);
    } else if (name == "CL0") {
      cl0 = read_u8(r);
    } else if (name == "EGO") {
      if (len != 128) structure_error(name, "expected 16 f64 values");
      std::array<double, 16> m{};
      for (double& v : m) v = r.f64();
      ego = m;
    } else if (name == "DT") {
      if (len != 4) structure_error(name, "expected one f32 value");
      dt = r.f32();
    }
    // Unknown sections are skipped.
  }
  if (!head.done()) structure_error("trailer", "bytes after the last section");
  for (const char* req : {"PT0", "PT1", "GM0", "GM1", "EGO", "DT"}) {
    if (!seen.count(req)) structure_error(req, "required section missing");
  }

  FramePair pair;
  pair.cloud_t.positions = std::move(*pt0);
  pair.cloud_t1.positions = std::move(*pt1);
  pair.cloud_t.ground_mask = std::move(*gm0);
  pair.cloud_t1.ground_mask = std::move(*gm1);
  if (pair.cloud_t.ground_mask.size() != pair.cloud_t.size()) {
    structure_error("GM0", "length differs from PT0");
  }
  if (pair.cloud_t1.ground_mask.size() != pair.cloud_t1.size()) {
    structure_error("GM1", "length differs from PT1");
  }
  if (gf0) {
    if (gf0->size() != pair.cloud_t.size()) structure_error("GF0", "length differs from PT0");
    pair.cloud_t.gt_flow = std::move(*gf0);
  }
  if (cl0) {
    if (cl0->size() != pair.cloud_t.size()) structure_error("CL0", "length differs from PT0");
    pair.cloud_t.class_id = std::move(*cl0);
  }
  try {
    pair.ego_motion = RigidTransform::from_matrix(*ego);
  } catch (const ContractError& e) {
    structure_error("EGO", e.what());
  }
  pair.dt = *dt;
  if (!(pair.dt > 0.0) || !std::isfinite(pair.dt)) structure_error("DT", "dt must be > 0");
  try {
    pair.validate();
  } catch (const ContractError& e) {
    structure_error("pair", e.what());
  }
  return pair;
}

void write_frame_pair(const FramePair& pair, const std::filesystem::path& path) {
  write_file_bytes(path, encode_frame_pair(pair));
}

FramePair read_frame_pair(const std::filesystem::path& path) {
  return decode_frame_pair(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// SSFW

const NamedTensor* WeightBundle::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void WeightBundle::validate() const {
  std::set<std::string> names;
  for (const NamedTensor& t : tensors) {
    SSF_REQUIRE(!t.name.empty(), "weight tensor with empty name");
    SSF_REQUIRE(names.insert(t.name).second, "duplicate weight tensor name: " + t.name);
    std::size_t n = 1;
    for (std::size_t d : t.shape) n *= d;
    SSF_REQUIRE(n == t.values.size(), "value count differs from shape for " + t.name);
  }
}

std::vector<std::uint8_t> encode_weights(const WeightBundle& bundle) {
  bundle.validate();
  ByteWriter w;
  w.raw("SSFW", 4);
  w.u32(static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const NamedTensor& t : bundle.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values) w.f32(v);
  }
  return std::move(w.bytes);
}

WeightBundle decode_weights(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes.data(), bytes.size(), "header");
  check_magic(r, "SSFW");
  const std::uint32_t count = r.u32();
  WeightBundle bundle;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor #" + std::to_string(i);
    ByteReader sub(bytes.data() + (bytes.size() - r.remaining()), r.remaining(), where);
    NamedTensor t;
    const std::uint32_t name_len = sub.u32();
    const std::uint8_t* name = sub.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    ByteReader body(bytes.data() + (bytes.size() - sub.remaining()), sub.remaining(), t.name);
    const std::uint32_t ndim = body.u32();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint32_t dim = body.u32();
      t.shape.push_back(dim);
      n *= dim;
      if (n > body.remaining()) {
        throw ParseError(ParseErrorKind::kTruncated, t.name, "truncated tensor " + t.name);
      }
    }
    body.need(static_cast<std::size_t>(n) * 4);
    t.values.resize(static_cast<std::size_t>(n));
    for (float& v : t.values) v = body.f32();
    if (!names.insert(t.name).second) structure_error(t.name, "duplicate tensor name");
    r.take(r.remaining() - body.remaining());
    bundle.tensors.push_back(std::move(t));
  }
  if (!r.done()) structure_error("trailer", "bytes after the last tensor");
  return bundle;
}

void write_weights(const WeightBundle& bundle, const std::filesystem::path& path) {
  write_file_bytes(path, encode_weights(bundle));
}

WeightBundle read_weights(const std::filesystem::path& path) {
  return decode_weights(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// SSFL

void write_flow(const FlowFile& flow, const std::filesystem::path& path) {
  SSF_REQUIRE(flow.flow.size() == flow.processed.size(),
              "flow and processed mask lengths differ");
  ByteWriter w;
  w.raw("SSFL", 4);
  w.u32(static_cast<std::uint32_t>(flow.flow.size()));
  for (const auto& f : flow.flow) {
    for (float v : f) w.f32(v);
  }
  w.raw(flow.processed.data(), flow.processed.size());
  write_file_bytes(path, w.bytes);
}

FlowFile read_flow(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  ByteReader r(bytes.data(), bytes.size(), "header");
  check_magic(r, "SSFL");
  const std::uint32_t n = r.u32();
  ByteReader body(bytes.data() + 8, bytes.size() - 8, "flow");
  FlowFile out;
  body.need(static_cast<std::size_t>(n) * 13);
  out.flow.resize(n);
  for (auto& f : out.flow) {
    for (float& v : f) v = body.f32();
  }
  const std::uint8_t* mask = body.take(n);
  out.processed.assign(mask, mask + n);
  if (!body.done()) structure_error("trailer", "bytes after the processed mask");
  return out;
}

}  // namespace ssf
