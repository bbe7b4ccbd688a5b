#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "ssf/dense_reference.hpp"
#include "ssf/errors.hpp"
#include "ssf/metrics.hpp"
#include "ssf/parallel.hpp"
#include "ssf/rng.hpp"
#include "ssf/scene_io.hpp"
#include "ssf/train.hpp"
#include "ssf/weights.hpp"

namespace fs = std::filesystem;

namespace ssf::cli {

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  return SplitMix64(seed).fork(index).next();
}

std::vector<BenchRow> run_bench(const RunConfig& cfg) {
  cfg.validate();
  SSF_REQUIRE(!cfg.bench.ranges.empty(), "bench: no ranges");
  SyntheticSceneConfig sc = cfg.synth;
  sc.grid = cfg.grid;
  sc.grid.range_m = *std::min_element(cfg.bench.ranges.begin(), cfg.bench.ranges.end());
  sc.rng_seed = cfg.seed;
  const std::size_t box_points = sc.n_boxes * sc.points_per_box;
  SSF_REQUIRE(cfg.bench.points >= box_points, "bench: fewer points than box points");
  sc.n_background_points = cfg.bench.points - box_points;
  const FramePair pair = synth_frame_pair(sc);
  const SsfParams<float> params = init_params<float>(cfg.network, cfg.seed);

  std::vector<BenchRow> rows;
  std::vector<GridConfig> grids;
  for (double range : cfg.bench.ranges) {
    GridConfig grid = cfg.grid;
    grid.range_m = range;
    BenchRow row;
    row.range_m = range;
    row.dense_cells = dense_cell_count(grid_extent(grid));
    const FlowPrediction warm = ssf_forward(pair, params, grid);
    row.peak_feature_rows = warm.stats.peak_feature_rows;
    row.rulebook_pairs = warm.stats.rulebook_pairs;
    row.union_voxels = warm.stats.union_voxels;
    rows.push_back(row);
    grids.push_back(grid);
  }
  // Repetitions cycle through the ranges so that drift in machine load
  // affects every range alike.
  std::vector<std::vector<double>> times(rows.size());
  for (std::size_t r = 0; r < cfg.bench.reps; ++r) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const FlowPrediction pred = ssf_forward(pair, params, grids[i]);
      const auto t1 = std::chrono::steady_clock::now();
      SSF_REQUIRE(pred.stats.peak_feature_rows == rows[i].peak_feature_rows,
                  "bench: counters changed between repetitions");
      times[i].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::sort(times[i].begin(), times[i].end());
    rows[i].wall_ms = times[i][times[i].size() / 2];
  }
  return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out) {
  out << "range_m,peak_feature_rows,rulebook_pairs,wall_ms,dense_cells\n";
  char buf[160];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%zu,%zu,%.3f,%lld\n", r.range_m, r.peak_feature_rows,
                  r.rulebook_pairs, r.wall_ms, static_cast<long long>(r.dense_cells));
    out << buf;
  }
}

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> grid_range;
  std::optional<double> voxel_size;
  std::optional<std::string> bins;
  std::optional<double> dynamic_threshold;
};

RunConfig build_config(const Common& c, RunConfig base) {
  if (!c.config.empty()) apply_config_file(base, c.config);
  if (c.seed) base.seed = *c.seed;
  if (c.threads) base.threads = *c.threads;
  if (c.grid_range) base.grid.range_m = *c.grid_range;
  if (c.voxel_size) base.grid.voxel_x = base.grid.voxel_y = *c.voxel_size;
  if (c.bins) base.metrics.bin_edges = parse_double_list(*c.bins);
  if (c.dynamic_threshold) base.metrics.dynamic_threshold_mps = *c.dynamic_threshold;
  base.validate();
  set_thread_count(base.threads);
  return base;
}

std::vector<fs::path> pair_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) contract_failure("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".sffp") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

int cmd_synth(const RunConfig& cfg, const fs::path& out_dir, std::size_t count,
              std::ostream& out) {
  fs::create_directories(out_dir);
  SyntheticSceneConfig sc = cfg.synth;
  sc.grid = cfg.grid;
  for (std::size_t i = 0; i < count; ++i) {
    sc.rng_seed = scene_seed(cfg.seed, i);
    char name[32];
    std::snprintf(name, sizeof name, "pair_%04zu.sffp", i);
    write_frame_pair(synth_frame_pair(sc), out_dir / name);
  }
  out << "wrote " << count << " frame pairs to " << out_dir.string() << '\n';
  return kOk;
}

int cmd_infer(const RunConfig& cfg, const fs::path& weights, const fs::path& pair_path,
              const fs::path& out_path, std::ostream& out) {
  const SsfParams<float> params = from_weight_bundle(read_weights(weights), cfg.network);
  const FramePair pair = read_frame_pair(pair_path);
  const FlowPrediction pred = ssf_forward(pair, params, cfg.grid);
  FlowFile file;
  for (const Vec3& f : pred.flow.flow) {
    file.flow.push_back({static_cast<float>(f.x()), static_cast<float>(f.y()),
                         static_cast<float>(f.z())});
  }
  file.processed = pred.processed;
  write_flow(file, out_path);
  const auto processed = std::count(file.processed.begin(), file.processed.end(), 1);
  out << "wrote flow for " << file.flow.size() << " points (" << processed
      << " processed) to " << out_path.string() << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const fs::path& pred_path, const fs::path& pair_path,
             const std::string& out_csv, bool include_ground, std::ostream& out) {
  const FlowFile pred = read_flow(pred_path);
  const FramePair pair = read_frame_pair(pair_path);
  if (pred.flow.size() != pair.cloud_t.size()) {
    contract_failure("prediction has " + std::to_string(pred.flow.size()) +
                     " points, frame pair has " + std::to_string(pair.cloud_t.size()));
  }
  std::vector<Vec3> flow;
  for (const auto& f : pred.flow) flow.emplace_back(f[0], f[1], f[2]);
  const EvalFrame frame = make_eval_frame(pair, flow, include_ground);
  const MetricsReport report = evaluate(frame, cfg.metrics);
  if (!out_csv.empty()) {
    std::ofstream csv(out_csv);
    if (!csv) contract_failure("cannot create " + out_csv);
    write_metrics_csv(report, csv);
  }
  out << format_metrics_table(report);
  return kOk;
}

int cmd_train_toy(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_weights,
                  std::string loss_csv, std::ostream& out) {
  const std::vector<fs::path> files = pair_files(data_dir);
  if (files.empty()) contract_failure("no .sffp files in " + data_dir.string());
  std::vector<FramePair> pairs;
  for (const fs::path& f : files) pairs.push_back(read_frame_pair(f));
  FitConfig fc;
  fc.steps = cfg.train.steps;
  fc.adam.lr = cfg.train.lr;
  fc.grid = cfg.grid;
  const std::size_t every = std::max<std::size_t>(1, fc.steps / 10);
  fc.on_step = [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == fc.steps) {
      out << "step " << step << " loss " << loss << '\n';
    }
  };
  FitResult<float> result = fit(pairs, init_params<float>(cfg.network, cfg.seed), fc);
  write_weights(to_weight_bundle(result.params), out_weights);
  if (loss_csv.empty()) loss_csv = fs::path(out_weights).replace_extension(".loss.csv").string();
  std::ofstream csv(loss_csv);
  if (!csv) contract_failure("cannot create " + loss_csv);
  write_loss_csv(result.loss_trace, csv);
  out << "wrote " << out_weights.string() << " and " << loss_csv << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse scene-flow engine"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key = value config file");
    sub->add_option("--seed", common.seed, "random seed");
    sub->add_option("--threads", common.threads, "worker threads");
    sub->add_option("--grid-range", common.grid_range, "grid side length in metres");
    sub->add_option("--voxel-size", common.voxel_size, "horizontal voxel size in metres");
    sub->add_option("--bins", common.bins, "range bin edges, e.g. 35,50,75,100");
    sub->add_option("--dynamic-threshold", common.dynamic_threshold,
                    "range-wise dynamic threshold in m/s");
  };

  std::string out_dir;
  std::size_t count = 5;
  auto* synth = app.add_subcommand("synth", "write synthetic frame pairs");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", count, "number of pairs");
  add_common(synth);

  std::string weights, pair_path, flow_out;
  auto* infer = app.add_subcommand("infer", "predict flow for one frame pair");
  infer->add_option("--weights", weights)->required();
  infer->add_option("--pair", pair_path)->required();
  infer->add_option("--out", flow_out)->required();
  add_common(infer);

  std::string pred_path, eval_pair, metrics_csv;
  bool include_ground = false;
  auto* eval = app.add_subcommand("eval", "score a flow file against ground truth");
  eval->add_option("--pred", pred_path)->required();
  eval->add_option("--pair", eval_pair)->required();
  eval->add_option("--out", metrics_csv, "metrics CSV path");
  eval->add_flag("--include-ground", include_ground, "score ground points too");
  add_common(eval);

  std::string data_dir, train_out, loss_csv;
  std::optional<std::size_t> steps;
  auto* train = app.add_subcommand("train-toy", "overfit the toy network on a directory of pairs");
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", train_out, "output weights")->required();
  train->add_option("--loss-csv", loss_csv);
  train->add_option("--steps", steps);
  add_common(train);

  std::string bench_out, ranges;
  std::optional<std::size_t> points, reps;
  auto* bench = app.add_subcommand("bench", "memory and runtime versus grid range");
  bench->add_option("--out", bench_out, "CSV path (stdout if omitted)");
  bench->add_option("--ranges", ranges, "comma-separated grid ranges");
  bench->add_option("--points", points);
  bench->add_option("--reps", reps);
  add_common(bench);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(build_config(common, RunConfig{}), out_dir, count, out);
    if (*infer) return cmd_infer(build_config(common, RunConfig{}), weights, pair_path, flow_out, out);
    if (*eval) {
      return cmd_eval(build_config(common, RunConfig{}), pred_path, eval_pair, metrics_csv,
                      include_ground, out);
    }
    if (*train) {
      RunConfig cfg = build_config(common, toy_run_config());
      if (steps) cfg.train.steps = *steps;
      return cmd_train_toy(cfg, data_dir, train_out, loss_csv, out);
    }
    if (*bench) {
      RunConfig cfg = build_config(common, RunConfig{});
      if (!ranges.empty()) cfg.bench.ranges = parse_double_list(ranges);
      if (points) cfg.bench.points = *points;
      if (reps) cfg.bench.reps = *reps;
      const std::vector<BenchRow> rows = run_bench(cfg);
      if (bench_out.empty()) {
        write_bench_csv(rows, out);
      } else {
        std::ofstream csv(bench_out);
        if (!csv) contract_failure("cannot create " + bench_out);
        write_bench_csv(rows, csv);
      }
      return kOk;
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const ParseError& e) {
    err << "input error: " << e.what() << '\n';
    return kUsage;
  } catch (const ContractError& e) {
    err << "input error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace ssf::cli
