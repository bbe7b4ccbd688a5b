#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssf/core.hpp"

namespace ssf {

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class SceneClass : std::uint8_t { kBackground = 0, kVehicle = 1, kPedestrian = 2 };

struct SyntheticSceneConfig {
  std::size_t n_background_points = 4000;  // ground plus static structures
  std::size_t n_boxes = 8;
  std::size_t points_per_box = 120;
  std::array<double, 2> box_size_range{2.0, 5.0};     // vehicle length, m
  std::array<double, 2> box_speed_range{2.0, 10.0};   // vehicles, m/s
  std::array<double, 2> pedestrian_speed_range{0.5, 2.0};
  double pedestrian_fraction = 0.25;
  double parked_fraction = 0.0;  // boxes with zero velocity
  std::array<double, 2> ego_speed_range{0.0, 10.0};
  double ego_yaw_rate_max = 0.2;  // rad/s, drawn symmetric around zero
  double ground_fraction = 0.5;   // share of background points on the ground
  double ground_z = -1.8;
  GridConfig grid;
  double dt = 0.1;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct SyntheticBox {
  Vec3 center;  // at time t, frame t
  Vec3 size;    // length, width, height
  double yaw = 0.0;
  Vec3 velocity;  // frame t, m/s
  SceneClass cls = SceneClass::kBackground;
};

// A generated pair with the ground truth it was built from.
struct SyntheticScene {
  FramePair pair;
  std::vector<SyntheticBox> boxes;
  std::vector<std::int32_t> box_of_point_t;  // -1 for static points
  RigidTransform ego_pose_t1;                // pose of the ego at t+1 in frame t
};

// Positions are rounded to single precision so that the scene survives a
// file round trip unchanged; ground-truth flow stays in double.
SyntheticScene synth_scene(const SyntheticSceneConfig& cfg);
FramePair synth_frame_pair(const SyntheticSceneConfig& cfg);

// ---------------------------------------------------------------------------
// Files

enum class ParseErrorKind { kIo, kMagic, kVersion, kTruncated, kStructure };

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorKind kind, std::string section, const std::string& what)
      : std::runtime_error(what), kind_(kind), section_(std::move(section)) {}

  ParseErrorKind kind() const { return kind_; }
  const std::string& section() const { return section_; }

 private:
  ParseErrorKind kind_;
  std::string section_;
};

inline constexpr std::uint32_t kFramePairVersion = 1;

// Positions, flow and dt are stored as f32, the ego transform as f64.
void write_frame_pair(const FramePair& pair, const std::filesystem::path& path);
FramePair read_frame_pair(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_frame_pair(const FramePair& pair);
FramePair decode_frame_pair(const std::vector<std::uint8_t>& bytes);

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

// Ordered list of tensors; names must be unique.
struct WeightBundle {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  void validate() const;
  bool operator==(const WeightBundle&) const = default;
};

void write_weights(const WeightBundle& bundle, const std::filesystem::path& path);
WeightBundle read_weights(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_weights(const WeightBundle& bundle);
WeightBundle decode_weights(const std::vector<std::uint8_t>& bytes);

// Per-point flow plus processed mask, as written by `infer`.
struct FlowFile {
  std::vector<std::array<float, 3>> flow;
  std::vector<std::uint8_t> processed;

  bool operator==(const FlowFile&) const = default;
};

void write_flow(const FlowFile& flow, const std::filesystem::path& path);
FlowFile read_flow(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ssf
