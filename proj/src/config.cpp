#include "ssf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "ssf/errors.hpp"

namespace ssf {

void RunConfig::validate() const {
  grid.validate();
  network.validate();
  metrics.validate();
  SSF_REQUIRE(threads >= 1, "threads must be >= 1");
  SSF_REQUIRE(bench.points > 0 && bench.reps > 0, "bench needs points and reps");
  for (double r : bench.ranges) SSF_REQUIRE(r > 0.0, "bench ranges must be > 0");
}

RunConfig toy_run_config() {
  RunConfig cfg;
  cfg.grid.range_m = 25.6;
  cfg.grid.voxel_x = 0.2;
  cfg.grid.voxel_y = 0.2;
  cfg.network = UnetConfig::toy();
  cfg.synth.n_background_points = 4000;
  cfg.synth.n_boxes = 8;
  cfg.synth.points_per_box = 120;
  return cfg;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    contract_failure("config " + key + ": not a number: '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    contract_failure("config " + key + ": not a non-negative integer: '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  contract_failure("config " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_uint(key, trim(item)));
  return out;
}

std::array<double, 2> to_pair(const std::string& key, const std::string& v) {
  const std::vector<double> d = parse_double_list(v);
  if (d.size() != 2) contract_failure("config " + key + ": expected 'lo,hi'");
  return {d[0], d[1]};
}

}  // namespace

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item == "inf" || item == "+inf") continue;  // the last bin is always open
    out.push_back(to_double("list", item));
  }
  return out;
}

void apply_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  using Setter = std::function<void()>;
  const std::map<std::string, Setter> setters{
      {"grid.range_m", [&] { c.grid.range_m = to_double(key, v); }},
      {"grid.voxel_x", [&] { c.grid.voxel_x = to_double(key, v); }},
      {"grid.voxel_y", [&] { c.grid.voxel_y = to_double(key, v); }},
      {"grid.voxel_z", [&] { c.grid.voxel_z = to_double(key, v); }},
      {"grid.z_min", [&] { c.grid.z_min = to_double(key, v); }},
      {"grid.z_max", [&] { c.grid.z_max = to_double(key, v); }},
      {"network.vfe_hidden", [&] { c.network.vfe_hidden = to_uint(key, v); }},
      {"network.vfe_channels", [&] { c.network.vfe_channels = to_uint(key, v); }},
      {"network.stage_widths", [&] { c.network.stage_widths = to_sizes(key, v); }},
      {"network.kernel_size",
       [&] { c.network.kernel_size = static_cast<std::int32_t>(to_uint(key, v)); }},
      {"network.stride", [&] { c.network.stride = static_cast<std::int32_t>(to_uint(key, v)); }},
      {"network.final_width", [&] { c.network.final_width = to_uint(key, v); }},
      {"network.head_hidden", [&] { c.network.head_hidden = to_sizes(key, v); }},
      {"network.use_norm", [&] { c.network.use_norm = to_bool(key, v); }},
      {"network.collapse_z", [&] { c.network.collapse_z = to_bool(key, v); }},
      {"network.pool",
       [&] {
         if (v == "max") {
           c.network.pool = PoolMode::kMax;
         } else if (v == "mean") {
           c.network.pool = PoolMode::kMean;
         } else {
           contract_failure("config " + key + ": expected max or mean");
         }
       }},
      {"metrics.threeway_threshold", [&] { c.metrics.threeway_threshold_mps = to_double(key, v); }},
      {"metrics.dynamic_threshold", [&] { c.metrics.dynamic_threshold_mps = to_double(key, v); }},
      {"metrics.bucket_width", [&] { c.metrics.bucket_width_mps = to_double(key, v); }},
      {"metrics.bins", [&] { c.metrics.bin_edges = parse_double_list(v); }},
      {"metrics.strict", [&] { c.metrics.strict = to_bool(key, v); }},
      {"synth.n_background_points", [&] { c.synth.n_background_points = to_uint(key, v); }},
      {"synth.n_boxes", [&] { c.synth.n_boxes = to_uint(key, v); }},
      {"synth.points_per_box", [&] { c.synth.points_per_box = to_uint(key, v); }},
      {"synth.box_size_range", [&] { c.synth.box_size_range = to_pair(key, v); }},
      {"synth.box_speed_range", [&] { c.synth.box_speed_range = to_pair(key, v); }},
      {"synth.pedestrian_speed_range", [&] { c.synth.pedestrian_speed_range = to_pair(key, v); }},
      {"synth.pedestrian_fraction", [&] { c.synth.pedestrian_fraction = to_double(key, v); }},
      {"synth.parked_fraction", [&] { c.synth.parked_fraction = to_double(key, v); }},
      {"synth.ego_speed_range", [&] { c.synth.ego_speed_range = to_pair(key, v); }},
      {"synth.ego_yaw_rate_max", [&] { c.synth.ego_yaw_rate_max = to_double(key, v); }},
      {"synth.dt", [&] { c.synth.dt = to_double(key, v); }},
      {"synth.ground_fraction", [&] { c.synth.ground_fraction = to_double(key, v); }},
      {"synth.ground_z", [&] { c.synth.ground_z = to_double(key, v); }},
      {"train.steps", [&] { c.train.steps = to_uint(key, v); }},
      {"train.lr", [&] { c.train.lr = to_double(key, v); }},
      {"bench.ranges", [&] { c.bench.ranges = parse_double_list(v); }},
      {"bench.points", [&] { c.bench.points = to_uint(key, v); }},
      {"bench.reps", [&] { c.bench.reps = to_uint(key, v); }},
      {"run.seed", [&] { c.seed = to_uint(key, v); }},
      {"run.threads", [&] { c.threads = static_cast<int>(to_uint(key, v)); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) contract_failure("config: unknown key '" + key + "'");
  it->second();
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      contract_failure("config line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      apply_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ContractError& e) {
      contract_failure("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) contract_failure("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

}  // namespace ssf
