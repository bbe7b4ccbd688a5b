#include "ssf/matrix.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

constexpr std::size_t kBlockK = 64;
constexpr std::size_t kBlockN = 256;

}  // namespace

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::int64_t i = 0; i < rows; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t j0 = 0; j0 < n; j0 += kBlockN) {
      const std::size_t j1 = std::min(n, j0 + kBlockN);
      for (std::size_t p0 = 0; p0 < k; p0 += kBlockK) {
        const std::size_t p1 = std::min(k, p0 + kBlockK);
        for (std::size_t p = p0; p < p1; ++p) {
          const T av = arow[p];
          const T* brow = b + p * n;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(k);
  // Blocks of a's rows keep the matching rows of b in cache; each output
  // element still accumulates over i in ascending order.
  constexpr std::size_t kBlockI = 64;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlockI) {
    const std::size_t i1 = std::min(m, i0 + kBlockI);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
    for (std::int64_t p = 0; p < rows; ++p) {
      T* crow = c + p * n;
      for (std::size_t i = i0; i < i1; ++i) {
        const T av = a[i * k + p];
        const T* brow = b + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  // c += a * b^T through an explicit transpose of b, so the inner loop runs
  // over output columns; the sum over j keeps ascending order.
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(a, bt.data(), c, m, n, k);
}

template <typename T>
Matrix<T> concat_cols(const Matrix<T>& a, const Matrix<T>& b) {
  SSF_REQUIRE(a.rows() == b.rows(), "concat: row counts differ (" +
                                        std::to_string(a.rows()) + " vs " +
                                        std::to_string(b.rows()) + ")");
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto dst = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + a.cols());
  }
  return out;
}

template <typename T>
void split_cols(const Matrix<T>& m, std::size_t left_cols, Matrix<T>& left,
                Matrix<T>& right) {
  SSF_REQUIRE(left_cols <= m.cols(), "split: column index out of range");
  left = Matrix<T>(m.rows(), left_cols);
  right = Matrix<T>(m.rows(), m.cols() - left_cols);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    std::copy(src.begin(), src.begin() + left_cols, left.row(r).begin());
    std::copy(src.begin() + left_cols, src.end(), right.row(r).begin());
  }
}

template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::int32_t> rows) {
  Matrix<T> out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(static_cast<std::size_t>(rows[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
void check_finite(std::span<const T> values, const std::string& where) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(where, "non-finite activation");
  }
}

#define SSF_INSTANTIATE(T)                                                          \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t,          \
                           std::size_t);                                              \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t,          \
                           std::size_t);                                              \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t,          \
                           std::size_t);                                              \
  template Matrix<T> concat_cols<T>(const Matrix<T>&, const Matrix<T>&);              \
  template void split_cols<T>(const Matrix<T>&, std::size_t, Matrix<T>&, Matrix<T>&); \
  template Matrix<T> gather_rows<T>(const Matrix<T>&, std::span<const std::int32_t>); \
  template void check_finite<T>(std::span<const T>, const std::string&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
