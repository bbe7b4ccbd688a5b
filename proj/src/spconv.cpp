#include "ssf/spconv.hpp"

#include <algorithm>
#include <string>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int32_t axis_output_extent(std::int32_t d, std::int32_t k, std::int32_t s) {
  const std::int32_t pad = (k - 1) / 2;
  const std::int32_t span = d + 2 * pad - k;
  return span < 0 ? 0 : span / s + 1;
}

template <typename T>
void gather_into(const Matrix<T>& src, std::span<const RulePair> pairs, bool by_input,
                 Matrix<T>& dst) {
  const std::size_t cols = src.cols();
  dst = Matrix<T>(pairs.size(), cols);
  const auto n = static_cast<std::int64_t>(pairs.size());
#pragma omp parallel for schedule(static) if (n * cols > 65536)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto row = by_input ? pairs[i].input_row : pairs[i].output_row;
    auto s = src.row(static_cast<std::size_t>(row));
    std::copy(s.begin(), s.end(), dst.row(static_cast<std::size_t>(i)).begin());
  }
}

template <typename T>
void scatter_add(const Matrix<T>& src, std::span<const RulePair> pairs, bool by_input,
                 Matrix<T>& dst) {
  const std::size_t cols = src.cols();
  const auto n = static_cast<std::int64_t>(pairs.size());
  // Rows are distinct within one offset, so the writes never collide.
#pragma omp parallel for schedule(static) if (n * cols > 65536)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto row = by_input ? pairs[i].input_row : pairs[i].output_row;
    auto d = dst.row(static_cast<std::size_t>(row));
    auto s = src.row(static_cast<std::size_t>(i));
    for (std::size_t c = 0; c < cols; ++c) d[c] += s[c];
  }
}

}  // namespace

Extent conv_output_extent(const Extent& in, const KernelShape& k, const Stride& s) {
  return {axis_output_extent(in.x, k.x, s.x), axis_output_extent(in.y, k.y, s.y),
          axis_output_extent(in.z, k.z, s.z)};
}

std::size_t Rulebook::pair_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.size();
  return n;
}

Rulebook build_rulebook_submanifold(std::span<const VoxelCoord> coords,
                                    const KernelShape& kernel) {
  SSF_REQUIRE(kernel.x >= 1 && kernel.y >= 1 && kernel.z >= 1, "kernel must be positive");
  SSF_REQUIRE(kernel.odd(), "submanifold convolution needs an odd kernel");
  SSF_REQUIRE(is_canonical(coords), "submanifold rulebook: coords not canonical");
  Rulebook rb;
  rb.kind = ConvKind::kSubmanifold;
  rb.kernel = kernel;
  rb.input_coords.assign(coords.begin(), coords.end());
  rb.output_coords = rb.input_coords;
  rb.pairs.resize(kernel.volume());

  const CoordIndex index(coords);
  const VoxelCoord pad = kernel.padding();
  for (std::int32_t kz = 0; kz < kernel.z; ++kz) {
    for (std::int32_t ky = 0; ky < kernel.y; ++ky) {
      for (std::int32_t kx = 0; kx < kernel.x; ++kx) {
        auto& list = rb.pairs[kernel.index(kx, ky, kz)];
        for (std::size_t o = 0; o < coords.size(); ++o) {
          const VoxelCoord src{coords[o].x + kx - pad.x, coords[o].y + ky - pad.y,
                               coords[o].z + kz - pad.z};
          const std::int32_t i = index.find(src);
          if (i >= 0) list.push_back({i, static_cast<std::int32_t>(o)});
        }
      }
    }
  }
  return rb;
}

Rulebook build_rulebook_strided(std::span<const VoxelCoord> coords, const Extent& extent,
                                const KernelShape& kernel, const Stride& stride) {
  SSF_REQUIRE(kernel.x >= 1 && kernel.y >= 1 && kernel.z >= 1, "kernel must be positive");
  SSF_REQUIRE(stride.x >= 1 && stride.y >= 1 && stride.z >= 1, "stride must be >= 1");
  SSF_REQUIRE(is_canonical(coords), "strided rulebook: coords not canonical");
  Rulebook rb;
  rb.kind = ConvKind::kStrided;
  rb.kernel = kernel;
  rb.stride = stride;
  rb.input_coords.assign(coords.begin(), coords.end());
  rb.input_extent = extent;
  rb.output_extent = conv_output_extent(extent, kernel, stride);
  rb.pairs.resize(kernel.volume());

  // Input at c feeds output o through tap k when o * s + k - pad == c.
  const VoxelCoord pad = kernel.padding();
  std::vector<std::uint64_t> keys;
  keys.reserve(coords.size() * 4);
  for (const VoxelCoord& c : coords) {
    SSF_REQUIRE(extent.contains(c), "strided rulebook: coordinate outside extent");
    for (std::int32_t kz = 0; kz < kernel.z; ++kz) {
      const std::int32_t nz = c.z - kz + pad.z;
      if (nz % stride.z != 0) continue;
      for (std::int32_t ky = 0; ky < kernel.y; ++ky) {
        const std::int32_t ny = c.y - ky + pad.y;
        if (ny % stride.y != 0) continue;
        for (std::int32_t kx = 0; kx < kernel.x; ++kx) {
          const std::int32_t nx = c.x - kx + pad.x;
          if (nx % stride.x != 0) continue;
          const VoxelCoord o{floor_div(nx, stride.x), floor_div(ny, stride.y),
                             floor_div(nz, stride.z)};
          if (rb.output_extent.contains(o)) keys.push_back(pack_coord(o));
        }
      }
    }
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  rb.output_coords.reserve(keys.size());
  for (std::uint64_t k : keys) rb.output_coords.push_back(unpack_coord(k));

  const CoordIndex index(coords);
  for (std::int32_t kz = 0; kz < kernel.z; ++kz) {
    for (std::int32_t ky = 0; ky < kernel.y; ++ky) {
      for (std::int32_t kx = 0; kx < kernel.x; ++kx) {
        auto& list = rb.pairs[kernel.index(kx, ky, kz)];
        for (std::size_t o = 0; o < rb.output_coords.size(); ++o) {
          const VoxelCoord& oc = rb.output_coords[o];
          const VoxelCoord src{oc.x * stride.x + kx - pad.x, oc.y * stride.y + ky - pad.y,
                               oc.z * stride.z + kz - pad.z};
          const std::int32_t i = index.find(src);
          if (i >= 0) list.push_back({i, static_cast<std::int32_t>(o)});
        }
      }
    }
  }
  return rb;
}

Rulebook invert_rulebook(const Rulebook& strided) {
  SSF_REQUIRE(strided.kind == ConvKind::kStrided, "only strided rulebooks can be inverted");
  Rulebook rb;
  rb.kind = ConvKind::kInverse;
  rb.kernel = strided.kernel;
  rb.stride = strided.stride;
  rb.input_coords = strided.output_coords;
  rb.output_coords = strided.input_coords;
  rb.input_extent = strided.output_extent;
  rb.output_extent = strided.input_extent;
  rb.pairs.resize(strided.pairs.size());
  for (std::size_t k = 0; k < strided.pairs.size(); ++k) {
    auto& list = rb.pairs[k];
    list.reserve(strided.pairs[k].size());
    for (const RulePair& p : strided.pairs[k]) list.push_back({p.output_row, p.input_row});
    std::sort(list.begin(), list.end(), [](const RulePair& a, const RulePair& b) {
      return a.output_row < b.output_row;
    });
  }
  return rb;
}

template <typename T>
void ConvParams<T>::validate() const {
  SSF_REQUIRE(weight.size() == kernel.volume() * in_channels * out_channels,
              "conv weight size does not match kernel and channel widths");
  SSF_REQUIRE(bias.empty() || bias.size() == out_channels,
              "conv bias size does not match output channels");
}

template <typename T>
SparseFeatureMap<T> conv_forward(const SparseFeatureMap<T>& x, const Rulebook& rb,
                                 const ConvParams<T>& w) {
  w.validate();
  SSF_REQUIRE(x.features.rows() == x.coords.size(), "feature rows differ from coords");
  SSF_REQUIRE(x.channels() == w.in_channels,
              "conv input width " + std::to_string(x.channels()) + " != " +
                  std::to_string(w.in_channels));
  SSF_REQUIRE(rb.kernel == w.kernel, "rulebook kernel differs from weights");
  SSF_REQUIRE(x.coords == rb.input_coords, "rulebook was not built on these coordinates");

  SparseFeatureMap<T> out;
  out.coords = rb.output_coords;
  out.features = Matrix<T>(rb.output_coords.size(), w.out_channels);
  if (!w.bias.empty()) {
    for (std::size_t r = 0; r < out.features.rows(); ++r) {
      std::copy(w.bias.begin(), w.bias.end(), out.features.row(r).begin());
    }
  }
  Matrix<T> gathered;
  for (std::size_t k = 0; k < rb.pairs.size(); ++k) {
    const auto& pairs = rb.pairs[k];
    if (pairs.empty()) continue;
    gather_into(x.features, pairs, /*by_input=*/true, gathered);
    Matrix<T> product(pairs.size(), w.out_channels);
    gemm_nn(gathered.data(), w.slice(k), product.data(), pairs.size(), w.in_channels,
            w.out_channels);
    scatter_add(product, pairs, /*by_input=*/false, out.features);
  }
  check_finite<T>(out.features.values(), "sparse conv");
  return out;
}

template <typename T>
ConvGrads<T> conv_backward(const Matrix<T>& grad_out, const SparseFeatureMap<T>& x,
                           const Rulebook& rb, const ConvParams<T>& w) {
  w.validate();
  SSF_REQUIRE(grad_out.rows() == rb.output_coords.size() &&
                  grad_out.cols() == w.out_channels,
              "conv backward: grad_out shape mismatch");
  SSF_REQUIRE(x.features.rows() == rb.input_coords.size() &&
                  x.channels() == w.in_channels,
              "conv backward: saved input shape mismatch");
  ConvGrads<T> g;
  g.input = Matrix<T>(x.features.rows(), w.in_channels);
  g.weight.assign(w.weight.size(), T{0});
  if (!w.bias.empty()) {
    g.bias.assign(w.out_channels, T{0});
    for (std::size_t r = 0; r < grad_out.rows(); ++r) {
      auto row = grad_out.row(r);
      for (std::size_t c = 0; c < w.out_channels; ++c) g.bias[c] += row[c];
    }
  }
  Matrix<T> g_rows;
  Matrix<T> x_rows;
  for (std::size_t k = 0; k < rb.pairs.size(); ++k) {
    const auto& pairs = rb.pairs[k];
    if (pairs.empty()) continue;
    gather_into(grad_out, pairs, /*by_input=*/false, g_rows);
    gather_into(x.features, pairs, /*by_input=*/true, x_rows);
    T* gw = g.weight.data() + k * w.in_channels * w.out_channels;
    gemm_tn(x_rows.data(), g_rows.data(), gw, pairs.size(), w.in_channels, w.out_channels);
    Matrix<T> dx(pairs.size(), w.in_channels);
    gemm_nt(g_rows.data(), w.slice(k), dx.data(), pairs.size(), w.out_channels,
            w.in_channels);
    scatter_add(dx, pairs, /*by_input=*/true, g.input);
  }
  return g;
}

template <typename T>
SparseFeatureMap<T> inverse_conv_forward(const SparseFeatureMap<T>& x,
                                         const Rulebook& parent, const ConvParams<T>& w) {
  SSF_REQUIRE(parent.kind == ConvKind::kStrided, "inverse conv needs a strided parent");
  SSF_REQUIRE(x.coords == parent.output_coords,
              "inverse conv: input coordinates differ from parent output sites");
  return conv_forward(x, invert_rulebook(parent), w);
}

#define SSF_INSTANTIATE(T)                                                           \
  template struct ConvParams<T>;                                                     \
  template SparseFeatureMap<T> conv_forward<T>(const SparseFeatureMap<T>&,           \
                                               const Rulebook&, const ConvParams<T>&); \
  template ConvGrads<T> conv_backward<T>(const Matrix<T>&, const SparseFeatureMap<T>&, \
                                         const Rulebook&, const ConvParams<T>&);     \
  template SparseFeatureMap<T> inverse_conv_forward<T>(                              \
      const SparseFeatureMap<T>&, const Rulebook&, const ConvParams<T>&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
