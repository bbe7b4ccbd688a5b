#pragma once

// Helpers shared by the unit tests and the acceptance runner: random
// instances, central differences and brute-force reference implementations
// written independently of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "ssf/core.hpp"
#include "ssf/dense_reference.hpp"
#include "ssf/layers.hpp"
#include "ssf/metrics.hpp"
#include "ssf/rng.hpp"
#include "ssf/spconv.hpp"

namespace ssf::testing {

inline std::vector<VoxelCoord> random_coords(SplitMix64& rng, const Extent& e, double density) {
  std::vector<VoxelCoord> out;
  for (std::int32_t z = 0; z < e.z; ++z) {
    for (std::int32_t y = 0; y < e.y; ++y) {
      for (std::int32_t x = 0; x < e.x; ++x) {
        if (rng.uniform() < density) out.push_back({x, y, z});
      }
    }
  }
  if (out.empty()) {
    out.push_back({static_cast<std::int32_t>(rng.below(e.x)),
                   static_cast<std::int32_t>(rng.below(e.y)),
                   static_cast<std::int32_t>(rng.below(e.z))});
  }
  return out;
}

template <typename T>
Matrix<T> random_matrix(SplitMix64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix<T> m(rows, cols);
  for (T& v : m.values()) v = static_cast<T>(rng.uniform(-scale, scale));
  return m;
}

template <typename T>
ConvParams<T> random_conv(SplitMix64& rng, const KernelShape& k, std::size_t in, std::size_t out,
                          bool bias = true) {
  ConvParams<T> p;
  p.kernel = k;
  p.in_channels = in;
  p.out_channels = out;
  for (std::size_t i = 0; i < k.volume() * in * out; ++i) {
    p.weight.push_back(static_cast<T>(rng.uniform(-1.0, 1.0)));
  }
  if (bias) {
    for (std::size_t i = 0; i < out; ++i) p.bias.push_back(static_cast<T>(rng.uniform(-1.0, 1.0)));
  }
  return p;
}

// Max |a - b| / max(|b|, floor) over aligned values.
inline double max_rel_diff(std::span<const double> a, std::span<const double> b,
                           double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
  }
  return worst;
}

inline double max_rel_diff(std::span<const float> a, std::span<const float> b, double floor = 1e-6) {
  std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
  return max_rel_diff(da, db, floor);
}

// Symmetric relative error of an analytic gradient against a numeric one.
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences of `loss` with respect to every entry of `values`;
// returns the worst relative error against `analytic`.
inline double check_gradient(std::vector<double>& values, std::span<const double> analytic,
                             const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = loss();
    values[i] = keep - h;
    const double down = loss();
    values[i] = keep;
    worst = std::max(worst, grad_rel_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

// Normalisation forward without saved state.
inline Matrix<double> bn_forward(const Matrix<double>& x, const BatchNormParams<double>& p,
                                 NormPhase phase, std::span<const std::uint8_t> rows = {}) {
  return batchnorm_forward(x, p, phase, rows, static_cast<BatchNormCache<double>*>(nullptr));
}

// sum(x .* w), the usual probe loss for layer gradient checks.
inline double probe(const Matrix<double>& x, const Matrix<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.values().size(); ++i) s += x.values()[i] * w.values()[i];
  return s;
}

// ---------------------------------------------------------------------------
// Sparse convolution by direct neighbour lookup.

template <typename T>
Matrix<T> brute_conv(const std::vector<VoxelCoord>& in_coords, const Matrix<T>& in,
                     const std::vector<VoxelCoord>& out_coords, const ConvParams<T>& w,
                     const Stride& s) {
  std::map<VoxelCoord, std::size_t> lookup;
  for (std::size_t i = 0; i < in_coords.size(); ++i) lookup[in_coords[i]] = i;
  const KernelShape& k = w.kernel;
  const VoxelCoord pad{(k.x - 1) / 2, (k.y - 1) / 2, (k.z - 1) / 2};
  Matrix<T> out(out_coords.size(), w.out_channels);
  for (std::size_t o = 0; o < out_coords.size(); ++o) {
    for (std::size_t c = 0; c < w.out_channels; ++c) out(o, c) = w.bias.empty() ? T{0} : w.bias[c];
    for (std::int32_t kz = 0; kz < k.z; ++kz) {
      for (std::int32_t ky = 0; ky < k.y; ++ky) {
        for (std::int32_t kx = 0; kx < k.x; ++kx) {
          const VoxelCoord src{out_coords[o].x * s.x + kx - pad.x,
                               out_coords[o].y * s.y + ky - pad.y,
                               out_coords[o].z * s.z + kz - pad.z};
          const auto it = lookup.find(src);
          if (it == lookup.end()) continue;
          const std::size_t tap = (static_cast<std::size_t>(kz) * k.y + ky) * k.x + kx;
          for (std::size_t ci = 0; ci < w.in_channels; ++ci) {
            for (std::size_t co = 0; co < w.out_channels; ++co) {
              out(o, co) += in(it->second, ci) *
                            w.weight[(tap * w.in_channels + ci) * w.out_channels + co];
            }
          }
        }
      }
    }
  }
  return out;
}

// Coarse sites reached by a padded strided correlation from `fine`.
inline std::vector<VoxelCoord> brute_coarse_sites(const std::vector<VoxelCoord>& fine,
                                                  const Extent& fine_extent,
                                                  const KernelShape& k, const Stride& s) {
  const VoxelCoord pad{(k.x - 1) / 2, (k.y - 1) / 2, (k.z - 1) / 2};
  const Extent oe{(fine_extent.x + 2 * pad.x - k.x) / s.x + 1,
                  (fine_extent.y + 2 * pad.y - k.y) / s.y + 1,
                  (fine_extent.z + 2 * pad.z - k.z) / s.z + 1};
  const std::set<VoxelCoord> active(fine.begin(), fine.end());
  std::vector<VoxelCoord> out;
  for (std::int32_t z = 0; z < oe.z; ++z) {
    for (std::int32_t y = 0; y < oe.y; ++y) {
      for (std::int32_t x = 0; x < oe.x; ++x) {
        bool hit = false;
        for (std::int32_t kz = 0; kz < k.z && !hit; ++kz) {
          for (std::int32_t ky = 0; ky < k.y && !hit; ++ky) {
            for (std::int32_t kx = 0; kx < k.x && !hit; ++kx) {
              hit = active.count({x * s.x + kx - pad.x, y * s.y + ky - pad.y,
                                  z * s.z + kz - pad.z}) > 0;
            }
          }
        }
        if (hit) out.push_back({x, y, z});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics written directly from their definitions, one subset at a time.

inline double naive_norm(const Vec3& v) {
  return std::sqrt(v.x() * v.x() + v.y() * v.y() + v.z() * v.z());
}

inline std::optional<double> naive_epe(const EvalFrame& f, const std::function<bool(std::size_t)>& in) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!in(i)) continue;
    sum += naive_norm(f.pred_flow[i] - f.gt_flow[i]);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline std::optional<double> naive_mean(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : v) {
    if (x) {
      s += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

struct NaiveThreeWay {
  std::optional<double> fd, fs, bs, mean;
};

inline NaiveThreeWay naive_three_way(const EvalFrame& f, double th) {
  auto speed = [&](std::size_t i) { return naive_norm(f.gt_flow[i]) / f.dt; };
  NaiveThreeWay r;
  r.fd = naive_epe(f, [&](std::size_t i) { return f.is_foreground[i] && speed(i) > th; });
  r.fs = naive_epe(f, [&](std::size_t i) { return f.is_foreground[i] && !(speed(i) > th); });
  r.bs = naive_epe(f, [&](std::size_t i) { return !f.is_foreground[i] && !(speed(i) > th); });
  r.mean = naive_mean({r.fd, r.fs, r.bs});
  return r;
}

struct NaiveBucket {
  std::optional<double> static_mean, dynamic_mean;
};

inline NaiveBucket naive_bucket(const EvalFrame& f, double width) {
  std::set<int> classes(f.class_id.begin(), f.class_id.end());
  auto speed = [&](std::size_t i) { return naive_norm(f.gt_flow[i]) / f.dt; };
  std::vector<std::optional<double>> statics, dynamics;
  for (int c : classes) {
    statics.push_back(naive_epe(f, [&](std::size_t i) {
      return f.class_id[i] == c && std::floor(speed(i) / width) == 0.0;
    }));
    std::size_t max_bucket = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f.class_id[i] == c) {
        max_bucket = std::max(max_bucket, static_cast<std::size_t>(speed(i) / width));
      }
    }
    std::vector<std::optional<double>> scores;
    for (std::size_t b = 1; b <= max_bucket; ++b) {
      auto in = [&](std::size_t i) {
        return f.class_id[i] == c && std::floor(speed(i) / width) == static_cast<double>(b);
      };
      const auto e = naive_epe(f, in);
      if (!e) continue;
      double ssum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (in(i)) {
          ssum += speed(i);
          ++n;
        }
      }
      scores.push_back(*e / (ssum / static_cast<double>(n)));
    }
    dynamics.push_back(naive_mean(scores));
  }
  return {naive_mean(statics), naive_mean(dynamics)};
}

struct NaiveRange {
  std::vector<std::optional<double>> statics, dynamics;
  std::optional<double> static_mean, dynamic_mean;
};

inline NaiveRange naive_range(const EvalFrame& f, const std::vector<double>& edges, double th) {
  NaiveRange r;
  std::vector<double> lo{0.0}, hi;
  for (double e : edges) {
    hi.push_back(e);
    lo.push_back(e);
  }
  hi.push_back(INFINITY);
  for (std::size_t b = 0; b < lo.size(); ++b) {
    auto in_bin = [&](std::size_t i) { return f.range_m[i] >= lo[b] && f.range_m[i] < hi[b]; };
    auto dyn = [&](std::size_t i) { return naive_norm(f.gt_flow[i]) / f.dt > th; };
    r.statics.push_back(naive_epe(f, [&](std::size_t i) { return in_bin(i) && !dyn(i); }));
    r.dynamics.push_back(naive_epe(f, [&](std::size_t i) { return in_bin(i) && dyn(i); }));
  }
  r.static_mean = naive_mean(r.statics);
  r.dynamic_mean = naive_mean(r.dynamics);
  return r;
}

inline EvalFrame random_eval_frame(SplitMix64& rng, std::size_t n) {
  EvalFrame f;
  f.dt = 0.1;
  for (std::size_t i = 0; i < n; ++i) {
    const double speed = rng.uniform() < 0.4 ? rng.uniform(0.0, 0.6) : rng.uniform(0.0, 12.0);
    const double a = rng.uniform(0.0, 2.0 * M_PI);
    Vec3 gt(std::cos(a) * speed * f.dt, std::sin(a) * speed * f.dt, 0.0);
    // Exact-boundary speeds: 1.4 m/s and bucket edges must be represented.
    if (rng.uniform() < 0.05) gt = Vec3(0.14, 0.0, 0.0);
    if (rng.uniform() < 0.05) gt = Vec3(0.0, 0.08, 0.0);
    f.gt_flow.push_back(gt);
    f.pred_flow.push_back(gt + Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                    rng.uniform(-0.1, 0.1)));
    double range = rng.uniform(0.0, 130.0);
    if (rng.uniform() < 0.05) range = 35.0;
    if (rng.uniform() < 0.03) range = 100.0;
    f.range_m.push_back(range);
    const auto cls = static_cast<std::uint8_t>(rng.below(3));
    f.class_id.push_back(cls);
    f.is_foreground.push_back(cls != 0);
  }
  return f;
}

}  // namespace ssf::testing
