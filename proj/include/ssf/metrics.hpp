#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ssf/core.hpp"

namespace ssf {

struct MetricConfig {
  double threeway_threshold_mps = 0.5;  // three-way split
  double dynamic_threshold_mps = 1.4;   // range-wise split, strict >
  double bucket_width_mps = 0.4;
  std::vector<double> bin_edges{35.0, 50.0, 75.0, 100.0};  // last bin is unbounded
  bool strict = false;  // empty range-wise cells raise instead of being skipped

  void validate() const;
};

// Flows are ego-compensated residuals, so speed means motion relative to the
// static world.
struct EvalFrame {
  std::vector<Vec3> pred_flow;
  std::vector<Vec3> gt_flow;
  std::vector<double> range_m;
  std::vector<std::uint8_t> is_foreground;
  std::vector<std::uint8_t> class_id;
  double dt = 0.1;

  std::size_t size() const { return gt_flow.size(); }
  void validate() const;
};

// Residuals of `pred_total` and the pair's ground truth against ego flow, on
// the rows of cloud_t. Ground rows are dropped unless include_ground is set.
// Class ids default to background when the pair has none.
EvalFrame make_eval_frame(const FramePair& pair, std::span<const Vec3> pred_total,
                          bool include_ground = false);

struct EpeCell {
  std::optional<double> value;  // absent when count == 0
  std::size_t count = 0;
};

// Mean of ||pred - gt|| over rows with mask != 0 (all rows for an empty mask span).
std::optional<double> epe(std::span<const Vec3> pred, std::span<const Vec3> gt,
                          std::span<const std::uint8_t> mask);

// 1 where ||flow|| / dt > threshold.
std::vector<std::uint8_t> classify_speed(std::span<const Vec3> gt_flow, double dt,
                                         double threshold_mps);

struct ThreeWayReport {
  EpeCell fd;
  EpeCell fs;
  EpeCell bs;
  std::optional<double> mean;
};

ThreeWayReport three_way_epe(const EvalFrame& frame, double threshold_mps = 0.5);

struct BucketCell {
  std::uint8_t cls = 0;
  std::size_t bucket = 0;  // [bucket * w, (bucket + 1) * w)
  EpeCell epe;
  double mean_speed = 0.0;
  std::optional<double> normalized;  // dynamic buckets only
};

struct BucketClassSummary {
  std::uint8_t cls = 0;
  EpeCell static_epe;
  std::optional<double> dynamic_score;
  std::size_t dynamic_buckets = 0;
};

struct BucketReport {
  double bucket_width = 0.4;
  std::vector<BucketCell> cells;  // non-empty cells, by class then bucket
  std::vector<BucketClassSummary> classes;
  std::optional<double> static_mean;
  std::optional<double> dynamic_normalized_mean;
};

BucketReport bucket_normalized_epe(const EvalFrame& frame, double bucket_width_mps = 0.4);

struct RangeBin {
  double lower = 0.0;
  double upper = 0.0;  // +inf for the last bin
  EpeCell static_epe;
  EpeCell dynamic_epe;
};

struct RangeReport {
  std::vector<double> edges;
  std::vector<RangeBin> bins;
  std::optional<double> static_mean;
  std::optional<double> dynamic_mean;
};

RangeReport range_wise_epe(const EvalFrame& frame, std::span<const double> bin_edges,
                           double threshold_mps = 1.4, bool strict = false);

struct MetricsReport {
  ThreeWayReport threeway;
  BucketReport bucket;
  RangeReport rangewise;
};

MetricsReport evaluate(const EvalFrame& frame, const MetricConfig& cfg);

// Columns metric,class,bin,value,count; absent values are written as NA.
void write_metrics_csv(const MetricsReport& report, std::ostream& out);
std::string format_metrics_table(const MetricsReport& report);

}  // namespace ssf
