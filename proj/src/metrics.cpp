#include "ssf/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "ssf/errors.hpp"

namespace ssf {

void MetricConfig::validate() const {
  SSF_REQUIRE(threeway_threshold_mps >= 0.0 && dynamic_threshold_mps >= 0.0,
              "speed thresholds must be >= 0");
  SSF_REQUIRE(bucket_width_mps > 0.0, "bucket width must be > 0");
  for (std::size_t i = 0; i < bin_edges.size(); ++i) {
    SSF_REQUIRE(std::isfinite(bin_edges[i]) && bin_edges[i] > 0.0,
                "range bin edges must be finite and > 0");
    SSF_REQUIRE(i == 0 || bin_edges[i] > bin_edges[i - 1],
                "range bin edges must be strictly ascending");
  }
}

void EvalFrame::validate() const {
  const std::size_t n = gt_flow.size();
  SSF_REQUIRE(pred_flow.size() == n && range_m.size() == n && is_foreground.size() == n &&
                  class_id.size() == n,
              "eval frame columns differ in length");
  SSF_REQUIRE(dt > 0.0, "eval frame dt must be > 0");
  for (double r : range_m) SSF_REQUIRE(r >= 0.0, "range must be >= 0");
}

EvalFrame make_eval_frame(const FramePair& pair, std::span<const Vec3> pred_total,
                          bool include_ground) {
  pair.validate();
  const PointCloud& c = pair.cloud_t;
  SSF_REQUIRE(c.gt_flow.has_value(), "evaluation needs ground-truth flow");
  SSF_REQUIRE(pred_total.size() == c.size(), "prediction length differs from scan t");
  const std::vector<Vec3> ego = ego_flow(c.positions, pair.ego_motion);
  EvalFrame f;
  f.dt = pair.dt;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c.ground_mask[i] && !include_ground) continue;
    f.pred_flow.push_back(pred_total[i] - ego[i]);
    f.gt_flow.push_back((*c.gt_flow)[i] - ego[i]);
    f.range_m.push_back(std::hypot(c.positions[i].x(), c.positions[i].y()));
    const std::uint8_t cls = c.class_id ? (*c.class_id)[i] : 0;
    f.class_id.push_back(cls);
    f.is_foreground.push_back(cls != 0 ? 1 : 0);
  }
  return f;
}

std::optional<double> epe(std::span<const Vec3> pred, std::span<const Vec3> gt,
                          std::span<const std::uint8_t> mask) {
  SSF_REQUIRE(pred.size() == gt.size(), "epe: prediction and ground truth differ in length");
  SSF_REQUIRE(mask.empty() || mask.size() == gt.size(), "epe: mask length mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sum += (pred[i] - gt[i]).norm();
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<std::uint8_t> classify_speed(std::span<const Vec3> gt_flow, double dt,
                                         double threshold_mps) {
  SSF_REQUIRE(dt > 0.0, "classify_speed: dt must be > 0");
  std::vector<std::uint8_t> out(gt_flow.size());
  for (std::size_t i = 0; i < gt_flow.size(); ++i) {
    out[i] = gt_flow[i].norm() / dt > threshold_mps ? 1 : 0;
  }
  return out;
}

namespace {

struct Acc {
  double sum = 0.0;
  std::size_t n = 0;

  void add(double v) {
    sum += v;
    ++n;
  }
  EpeCell cell() const {
    EpeCell c;
    c.count = n;
    if (n > 0) c.value = sum / static_cast<double>(n);
    return c;
  }
};

std::optional<double> mean_present(std::initializer_list<std::optional<double>> vals) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : vals) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

}  // namespace

ThreeWayReport three_way_epe(const EvalFrame& frame, double threshold_mps) {
  frame.validate();
  const auto dynamic = classify_speed(frame.gt_flow, frame.dt, threshold_mps);
  Acc fd, fs, bs;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double e = (frame.pred_flow[i] - frame.gt_flow[i]).norm();
    if (frame.is_foreground[i]) {
      (dynamic[i] ? fd : fs).add(e);
    } else if (!dynamic[i]) {
      bs.add(e);
    }
  }
  ThreeWayReport r{fd.cell(), fs.cell(), bs.cell(), std::nullopt};
  r.mean = mean_present({r.fd.value, r.fs.value, r.bs.value});
  return r;
}

BucketReport bucket_normalized_epe(const EvalFrame& frame, double bucket_width_mps) {
  frame.validate();
  SSF_REQUIRE(bucket_width_mps > 0.0, "bucket width must be > 0");
  struct Cell {
    Acc err;
    double speed_sum = 0.0;
  };
  std::map<std::pair<std::uint8_t, std::size_t>, Cell> cells;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double speed = frame.gt_flow[i].norm() / frame.dt;
    const auto bucket = static_cast<std::size_t>(std::floor(speed / bucket_width_mps));
    Cell& c = cells[{frame.class_id[i], bucket}];
    c.err.add((frame.pred_flow[i] - frame.gt_flow[i]).norm());
    c.speed_sum += speed;
  }

  BucketReport r;
  r.bucket_width = bucket_width_mps;
  std::map<std::uint8_t, std::vector<double>> dynamic_scores;
  std::map<std::uint8_t, BucketClassSummary> classes;
  for (const auto& [key, c] : cells) {
    BucketCell out;
    out.cls = key.first;
    out.bucket = key.second;
    out.epe = c.err.cell();
    out.mean_speed = c.speed_sum / static_cast<double>(c.err.n);
    BucketClassSummary& summary = classes[key.first];
    summary.cls = key.first;
    if (key.second == 0) {
      summary.static_epe = out.epe;
    } else {
      out.normalized = *out.epe.value / out.mean_speed;
      dynamic_scores[key.first].push_back(*out.normalized);
    }
    r.cells.push_back(out);
  }
  std::vector<double> statics;
  std::vector<double> dynamics;
  for (auto& [cls, summary] : classes) {
    if (summary.static_epe.value) statics.push_back(*summary.static_epe.value);
    const auto it = dynamic_scores.find(cls);
    if (it != dynamic_scores.end()) {
      summary.dynamic_buckets = it->second.size();
      summary.dynamic_score = mean_of(it->second);
      dynamics.push_back(*summary.dynamic_score);
    }
    r.classes.push_back(summary);
  }
  r.static_mean = mean_of(statics);
  r.dynamic_normalized_mean = mean_of(dynamics);
  return r;
}

RangeReport range_wise_epe(const EvalFrame& frame, std::span<const double> bin_edges,
                           double threshold_mps, bool strict) {
  frame.validate();
  MetricConfig check;
  check.bin_edges.assign(bin_edges.begin(), bin_edges.end());
  check.validate();

  RangeReport r;
  r.edges.assign(bin_edges.begin(), bin_edges.end());
  const std::size_t nbins = bin_edges.size() + 1;
  std::vector<Acc> stat(nbins), dyn(nbins);
  const auto dynamic = classify_speed(frame.gt_flow, frame.dt, threshold_mps);
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), frame.range_m[i]);
    const auto b = static_cast<std::size_t>(it - bin_edges.begin());
    const double e = (frame.pred_flow[i] - frame.gt_flow[i]).norm();
    (dynamic[i] ? dyn : stat)[b].add(e);
  }
  std::vector<double> statics;
  std::vector<double> dynamics;
  for (std::size_t b = 0; b < nbins; ++b) {
    RangeBin bin;
    bin.lower = b == 0 ? 0.0 : bin_edges[b - 1];
    bin.upper = b + 1 == nbins ? std::numeric_limits<double>::infinity() : bin_edges[b];
    bin.static_epe = stat[b].cell();
    bin.dynamic_epe = dyn[b].cell();
    if (strict && (!bin.static_epe.value || !bin.dynamic_epe.value)) {
      contract_failure("range-wise EPE: empty " +
                       std::string(!bin.static_epe.value ? "static" : "dynamic") +
                       " cell in range bin " + std::to_string(b));
    }
    if (bin.static_epe.value) statics.push_back(*bin.static_epe.value);
    if (bin.dynamic_epe.value) dynamics.push_back(*bin.dynamic_epe.value);
    r.bins.push_back(bin);
  }
  r.static_mean = mean_of(statics);
  r.dynamic_mean = mean_of(dynamics);
  return r;
}

MetricsReport evaluate(const EvalFrame& frame, const MetricConfig& cfg) {
  cfg.validate();
  return {three_way_epe(frame, cfg.threeway_threshold_mps),
          bucket_normalized_epe(frame, cfg.bucket_width_mps),
          range_wise_epe(frame, cfg.bin_edges, cfg.dynamic_threshold_mps, cfg.strict)};
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

std::string bin_label(double lo, double hi) {
  return std::isinf(hi) ? num(lo) + "+" : num(lo) + "-" + num(hi);
}

void row(std::ostream& out, const std::string& metric, const std::string& cls,
         const std::string& bin, const std::optional<double>& value, std::size_t count) {
  out << metric << ',' << cls << ',' << bin << ',' << num(value) << ',' << count << '\n';
}

}  // namespace

void write_metrics_csv(const MetricsReport& r, std::ostream& out) {
  out << "metric,class,bin,value,count\n";
  const auto& t = r.threeway;
  row(out, "threeway", "FD", "all", t.fd.value, t.fd.count);
  row(out, "threeway", "FS", "all", t.fs.value, t.fs.count);
  row(out, "threeway", "BS", "all", t.bs.value, t.bs.count);
  row(out, "threeway", "mean", "all", t.mean, t.fd.count + t.fs.count + t.bs.count);

  const double w = r.bucket.bucket_width;
  for (const BucketCell& c : r.bucket.cells) {
    const std::string label =
        bin_label(static_cast<double>(c.bucket) * w, static_cast<double>(c.bucket + 1) * w);
    if (c.bucket == 0) {
      row(out, "bucket_static", std::to_string(c.cls), label, c.epe.value, c.epe.count);
    } else {
      row(out, "bucket_dynamic", std::to_string(c.cls), label, c.normalized, c.epe.count);
    }
  }
  for (const BucketClassSummary& s : r.bucket.classes) {
    row(out, "bucket_class_dynamic", std::to_string(s.cls), "all", s.dynamic_score,
        s.dynamic_buckets);
  }
  row(out, "bucket_mean", "static", "all", r.bucket.static_mean, r.bucket.classes.size());
  row(out, "bucket_mean", "dynamic", "all", r.bucket.dynamic_normalized_mean,
      r.bucket.classes.size());

  for (const RangeBin& b : r.rangewise.bins) {
    const std::string label = bin_label(b.lower, b.upper);
    row(out, "rangewise", "static", label, b.static_epe.value, b.static_epe.count);
    row(out, "rangewise", "dynamic", label, b.dynamic_epe.value, b.dynamic_epe.count);
  }
  row(out, "rangewise_mean", "static", "all", r.rangewise.static_mean, r.rangewise.bins.size());
  row(out, "rangewise_mean", "dynamic", "all", r.rangewise.dynamic_mean,
      r.rangewise.bins.size());
}

std::string format_metrics_table(const MetricsReport& r) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) {
      std::snprintf(buf, sizeof buf, "%10.4f", *v);
    } else {
      std::snprintf(buf, sizeof buf, "%10s", "-");
    }
    return std::string(buf);
  };
  auto head = [](const std::string& s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%10s", s.c_str());
    return std::string(buf);
  };
  out << "Range-wise EPE (m)\n" << head("");
  for (const RangeBin& b : r.rangewise.bins) out << head(bin_label(b.lower, b.upper));
  out << head("mean") << '\n' << head("Static");
  for (const RangeBin& b : r.rangewise.bins) out << cell(b.static_epe.value);
  out << cell(r.rangewise.static_mean) << '\n' << head("Dynamic");
  for (const RangeBin& b : r.rangewise.bins) out << cell(b.dynamic_epe.value);
  out << cell(r.rangewise.dynamic_mean) << "\n\n";

  out << "Three-way EPE (m)\n"
      << head("FD") << head("FS") << head("BS") << head("mean") << '\n'
      << cell(r.threeway.fd.value) << cell(r.threeway.fs.value) << cell(r.threeway.bs.value)
      << cell(r.threeway.mean) << "\n\n";

  out << "Bucket-normalized EPE\n"
      << head("class") << head("static") << head("dynamic") << '\n';
  for (const BucketClassSummary& s : r.bucket.classes) {
    out << head(std::to_string(s.cls)) << cell(s.static_epe.value) << cell(s.dynamic_score)
        << '\n';
  }
  out << head("mean") << cell(r.bucket.static_mean) << cell(r.bucket.dynamic_normalized_mean)
      << '\n';
  return out.str();
}

}  // namespace ssf
