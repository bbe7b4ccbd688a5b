#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ssf/config.hpp"

namespace ssf::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumeric = 3 };

struct BenchRow {
  double range_m = 0.0;
  std::size_t peak_feature_rows = 0;
  std::size_t rulebook_pairs = 0;
  std::size_t union_voxels = 0;
  double wall_ms = 0.0;  // median over reps
  std::int64_t dense_cells = 0;
};

// One fixed synthetic frame pair (bench.points points, placed inside the
// smallest range) evaluated under every grid range.
std::vector<BenchRow> run_bench(const RunConfig& cfg);
void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out);

// Seed of the i-th scene written by `synth`.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

// Full command line without the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssf::cli
