#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ssf/core.hpp"
#include "ssf/metrics.hpp"
#include "ssf/network.hpp"
#include "ssf/scene_io.hpp"

namespace ssf {

struct TrainSettings {
  std::size_t steps = 2000;
  double lr = 1e-3;
};

struct BenchSettings {
  std::vector<double> ranges{51.2, 102.4, 204.8, 409.6};
  std::size_t points = 50000;
  std::size_t reps = 3;
};

// Everything a command needs; defaults are the full-size pillar setup.
struct RunConfig {
  GridConfig grid;
  UnetConfig network;
  MetricConfig metrics;
  SyntheticSceneConfig synth;  // synth.grid and synth.rng_seed are filled from grid/seed
  TrainSettings train;
  BenchSettings bench;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

// Settings used by train-toy when no config file is given.
RunConfig toy_run_config();

// `section.key = value` lines; `#` starts a comment. Unknown keys and
// malformed values raise ContractError naming the line.
void apply_config_text(RunConfig& cfg, const std::string& text);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

std::vector<double> parse_double_list(const std::string& text);

}  // namespace ssf
