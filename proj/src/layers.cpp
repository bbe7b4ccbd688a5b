#include "ssf/layers.hpp"

#include <cmath>

#include "ssf/errors.hpp"

namespace ssf {

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const LinearParams<T>& p) {
  SSF_REQUIRE(x.cols() == p.in_features, "linear: input width mismatch");
  SSF_REQUIRE(p.weight.size() == p.in_features * p.out_features,
              "linear: weight size mismatch");
  Matrix<T> y(x.rows(), p.out_features);
  if (!p.bias.empty()) {
    for (std::size_t r = 0; r < y.rows(); ++r) {
      std::copy(p.bias.begin(), p.bias.end(), y.row(r).begin());
    }
  }
  gemm_nn(x.data(), p.weight.data(), y.data(), x.rows(), p.in_features, p.out_features);
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Matrix<T>& grad_out, const Matrix<T>& x,
                               const LinearParams<T>& p) {
  SSF_REQUIRE(grad_out.rows() == x.rows() && grad_out.cols() == p.out_features,
              "linear backward: shape mismatch");
  LinearGrads<T> g;
  g.input = Matrix<T>(x.rows(), p.in_features);
  g.weight.assign(p.weight.size(), T{0});
  gemm_tn(x.data(), grad_out.data(), g.weight.data(), x.rows(), p.in_features,
          p.out_features);
  gemm_nt(grad_out.data(), p.weight.data(), g.input.data(), x.rows(), p.out_features,
          p.in_features);
  if (!p.bias.empty()) {
    g.bias.assign(p.out_features, T{0});
    for (std::size_t r = 0; r < grad_out.rows(); ++r) {
      auto row = grad_out.row(r);
      for (std::size_t c = 0; c < p.out_features; ++c) g.bias[c] += row[c];
    }
  }
  return g;
}

template <typename T>
BatchNormParams<T> make_batchnorm(std::size_t channels) {
  BatchNormParams<T> p;
  p.channels = channels;
  p.gamma.assign(channels, T{1});
  p.beta.assign(channels, T{0});
  p.running_mean.assign(channels, T{0});
  p.running_var.assign(channels, T{1});
  return p;
}

template <typename T>
Matrix<T> batchnorm_forward(const Matrix<T>& x, const BatchNormParams<T>& p,
                            NormPhase phase, std::span<const std::uint8_t> stat_rows,
                            BatchNormCache<T>* cache) {
  const std::size_t c = p.channels;
  SSF_REQUIRE(x.cols() == c, "batchnorm: channel mismatch");
  SSF_REQUIRE(stat_rows.empty() || stat_rows.size() == x.rows(),
              "batchnorm: stat mask length mismatch");
  std::vector<T> mean(c, T{0});
  std::vector<T> var(c, T{0});
  std::size_t n = 0;
  if (phase == NormPhase::kTrain) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      if (!stat_rows.empty() && !stat_rows[r]) continue;
      ++n;
      auto row = x.row(r);
      for (std::size_t j = 0; j < c; ++j) mean[j] += row[j];
    }
    if (n == 0) {
      std::fill(var.begin(), var.end(), T{1});
    } else {
      for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<T>(n);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        if (!stat_rows.empty() && !stat_rows[r]) continue;
        auto row = x.row(r);
        for (std::size_t j = 0; j < c; ++j) {
          const T d = row[j] - mean[j];
          var[j] += d * d;
        }
      }
      for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<T>(n);
    }
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }
  std::vector<T> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T{1} / std::sqrt(var[j] + p.eps);

  Matrix<T> normalized(x.rows(), c);
  Matrix<T> y(x.rows(), c);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xi = x.row(r);
    auto ni = normalized.row(r);
    auto yi = y.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      ni[j] = (xi[j] - mean[j]) * inv_std[j];
      yi[j] = p.gamma[j] * ni[j] + p.beta[j];
    }
  }
  if (cache) {
    cache->phase = phase;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
    cache->stat_rows.assign(stat_rows.begin(), stat_rows.end());
    cache->stat_count = n;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Matrix<T>& grad_out,
                                     const BatchNormCache<T>& cache,
                                     const BatchNormParams<T>& p) {
  const std::size_t c = p.channels;
  const Matrix<T>& xhat = cache.normalized;
  SSF_REQUIRE(grad_out.rows() == xhat.rows() && grad_out.cols() == c,
              "batchnorm backward: shape mismatch");
  BatchNormGrads<T> g;
  g.gamma.assign(c, T{0});
  g.beta.assign(c, T{0});
  for (std::size_t r = 0; r < grad_out.rows(); ++r) {
    auto dy = grad_out.row(r);
    auto xh = xhat.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      g.gamma[j] += dy[j] * xh[j];
      g.beta[j] += dy[j];
    }
  }
  g.input = Matrix<T>(grad_out.rows(), c);
  const bool batch_stats = cache.phase == NormPhase::kTrain && cache.stat_count > 0;
  const auto n = static_cast<T>(cache.stat_count);
  for (std::size_t r = 0; r < grad_out.rows(); ++r) {
    auto dy = grad_out.row(r);
    auto xh = xhat.row(r);
    auto dx = g.input.row(r);
    const bool in_stats = batch_stats && (cache.stat_rows.empty() || cache.stat_rows[r]);
    for (std::size_t j = 0; j < c; ++j) {
      T v = dy[j];
      if (in_stats) v -= (g.beta[j] + xh[j] * g.gamma[j]) / n;
      dx[j] = p.gamma[j] * cache.inv_std[j] * v;
    }
  }
  return g;
}

template <typename T>
void update_running_stats(BatchNormParams<T>& p, const BatchNormCache<T>& cache) {
  if (cache.phase != NormPhase::kTrain || cache.stat_count == 0) return;
  const T m = p.momentum;
  const T n = static_cast<T>(cache.stat_count);
  const T unbias = cache.stat_count > 1 ? n / (n - T{1}) : T{1};
  for (std::size_t j = 0; j < p.channels; ++j) {
    p.running_mean[j] = (T{1} - m) * p.running_mean[j] + m * cache.batch_mean[j];
    p.running_var[j] = (T{1} - m) * p.running_var[j] + m * cache.batch_var[j] * unbias;
  }
}

template <typename T>
void relu_inplace(Matrix<T>& x) {
  for (T& v : x.values()) v = v > T{0} ? v : T{0};
}

template <typename T>
void relu_backward_inplace(Matrix<T>& grad, const Matrix<T>& output) {
  SSF_REQUIRE(grad.rows() == output.rows() && grad.cols() == output.cols(),
              "relu backward: shape mismatch");
  auto& g = grad.values();
  const auto& y = output.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(y[i] > T{0})) g[i] = T{0};
  }
}

#define SSF_INSTANTIATE(T)                                                              \
  template Matrix<T> linear_forward<T>(const Matrix<T>&, const LinearParams<T>&);      \
  template LinearGrads<T> linear_backward<T>(const Matrix<T>&, const Matrix<T>&,        \
                                             const LinearParams<T>&);                   \
  template BatchNormParams<T> make_batchnorm<T>(std::size_t);                           \
  template Matrix<T> batchnorm_forward<T>(const Matrix<T>&, const BatchNormParams<T>&, \
                                          NormPhase, std::span<const std::uint8_t>,     \
                                          BatchNormCache<T>*);                          \
  template BatchNormGrads<T> batchnorm_backward<T>(                                     \
      const Matrix<T>&, const BatchNormCache<T>&, const BatchNormParams<T>&);           \
  template void update_running_stats<T>(BatchNormParams<T>&, const BatchNormCache<T>&); \
  template void relu_inplace<T>(Matrix<T>&);                                            \
  template void relu_backward_inplace<T>(Matrix<T>&, const Matrix<T>&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
