#include "ssf/dense_reference.hpp"

#include "ssf/errors.hpp"

namespace ssf {

template <typename T>
DenseGrid<T> densify(const SparseFeatureMap<T>& x, const Extent& extent) {
  DenseGrid<T> grid(extent, x.channels());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    SSF_REQUIRE(extent.contains(x.coords[r]), "densify: coordinate outside extent");
    auto row = x.features.row(r);
    std::copy(row.begin(), row.end(), grid.at(x.coords[r]));
  }
  return grid;
}

template <typename T>
Matrix<T> sample_dense(const DenseGrid<T>& grid, std::span<const VoxelCoord> coords) {
  Matrix<T> out(coords.size(), grid.channels);
  for (std::size_t r = 0; r < coords.size(); ++r) {
    const T* cell = grid.at(coords[r]);
    std::copy(cell, cell + grid.channels, out.row(r).begin());
  }
  return out;
}

template <typename T>
DenseGrid<T> dense_oracle_conv(const DenseGrid<T>& in, const ConvParams<T>& w,
                               const Stride& stride) {
  SSF_REQUIRE(in.channels == w.in_channels, "dense conv: channel mismatch");
  const KernelShape& k = w.kernel;
  const Extent oe = conv_output_extent(in.extent, k, stride);
  const VoxelCoord pad = k.padding();
  DenseGrid<T> out(oe, w.out_channels);
  for (std::int32_t oz = 0; oz < oe.z; ++oz) {
    for (std::int32_t oy = 0; oy < oe.y; ++oy) {
      for (std::int32_t ox = 0; ox < oe.x; ++ox) {
        T* dst = out.at(ox, oy, oz);
        for (std::size_t co = 0; co < w.out_channels; ++co) {
          dst[co] = w.bias.empty() ? T{0} : w.bias[co];
        }
        for (std::int32_t kz = 0; kz < k.z; ++kz) {
          for (std::int32_t ky = 0; ky < k.y; ++ky) {
            for (std::int32_t kx = 0; kx < k.x; ++kx) {
              const std::int32_t ix = ox * stride.x + kx - pad.x;
              const std::int32_t iy = oy * stride.y + ky - pad.y;
              const std::int32_t iz = oz * stride.z + kz - pad.z;
              if (!in.extent.contains({ix, iy, iz})) continue;
              const T* src = in.at(ix, iy, iz);
              const T* wk = w.slice(k.index(kx, ky, kz));
              for (std::size_t ci = 0; ci < w.in_channels; ++ci) {
                for (std::size_t co = 0; co < w.out_channels; ++co) {
                  dst[co] += src[ci] * wk[ci * w.out_channels + co];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
DenseGrid<T> dense_oracle_conv_transpose(const DenseGrid<T>& in, const ConvParams<T>& w,
                                         const Stride& stride, const Extent& out_extent) {
  SSF_REQUIRE(in.channels == w.in_channels, "dense transposed conv: channel mismatch");
  const KernelShape& k = w.kernel;
  const VoxelCoord pad = k.padding();
  DenseGrid<T> out(out_extent, w.out_channels);
  if (!w.bias.empty()) {
    for (std::int64_t c = 0; c < out_extent.cells(); ++c) {
      for (std::size_t co = 0; co < w.out_channels; ++co) {
        out.values[static_cast<std::size_t>(c) * w.out_channels + co] = w.bias[co];
      }
    }
  }
  for (std::int32_t iz = 0; iz < in.extent.z; ++iz) {
    for (std::int32_t iy = 0; iy < in.extent.y; ++iy) {
      for (std::int32_t ix = 0; ix < in.extent.x; ++ix) {
        const T* src = in.at(ix, iy, iz);
        for (std::int32_t kz = 0; kz < k.z; ++kz) {
          for (std::int32_t ky = 0; ky < k.y; ++ky) {
            for (std::int32_t kx = 0; kx < k.x; ++kx) {
              const VoxelCoord o{ix * stride.x + kx - pad.x, iy * stride.y + ky - pad.y,
                                 iz * stride.z + kz - pad.z};
              if (!out_extent.contains(o)) continue;
              T* dst = out.at(o);
              const T* wk = w.slice(k.index(kx, ky, kz));
              for (std::size_t ci = 0; ci < w.in_channels; ++ci) {
                for (std::size_t co = 0; co < w.out_channels; ++co) {
                  dst[co] += src[ci] * wk[ci * w.out_channels + co];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

#define SSF_INSTANTIATE(T)                                                             \
  template DenseGrid<T> densify<T>(const SparseFeatureMap<T>&, const Extent&);        \
  template Matrix<T> sample_dense<T>(const DenseGrid<T>&, std::span<const VoxelCoord>); \
  template DenseGrid<T> dense_oracle_conv<T>(const DenseGrid<T>&, const ConvParams<T>&, \
                                             const Stride&);                           \
  template DenseGrid<T> dense_oracle_conv_transpose<T>(                                \
      const DenseGrid<T>&, const ConvParams<T>&, const Stride&, const Extent&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
