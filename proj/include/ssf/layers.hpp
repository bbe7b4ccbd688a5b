#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ssf/matrix.hpp"

namespace ssf {

enum class NormPhase { kTrain, kEval };

// y = x W + b, W laid out [in][out].
template <typename T>
struct LinearParams {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::vector<T> weight;
  std::vector<T> bias;  // empty or out_features
};

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const LinearParams<T>& p);

template <typename T>
struct LinearGrads {
  Matrix<T> input;
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Matrix<T>& grad_out, const Matrix<T>& x,
                               const LinearParams<T>& p);

// Per-channel normalisation over rows. Running statistics are buffers, not
// trainable parameters; the forward pass never mutates them.
template <typename T>
struct BatchNormParams {
  std::size_t channels = 0;
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
BatchNormParams<T> make_batchnorm(std::size_t channels);

template <typename T>
struct BatchNormCache {
  NormPhase phase = NormPhase::kEval;
  Matrix<T> normalized;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;
  std::vector<std::uint8_t> stat_rows;  // empty: every row contributes
  std::size_t stat_count = 0;
};

// In train phase, statistics come from rows with stat_rows[i] != 0 (all rows
// when stat_rows is empty); excluded rows are still normalised with them.
template <typename T>
Matrix<T> batchnorm_forward(const Matrix<T>& x, const BatchNormParams<T>& p,
                            NormPhase phase, std::span<const std::uint8_t> stat_rows,
                            BatchNormCache<T>* cache);

template <typename T>
struct BatchNormGrads {
  Matrix<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Matrix<T>& grad_out,
                                     const BatchNormCache<T>& cache,
                                     const BatchNormParams<T>& p);

// Exponential moving update of running statistics from a train-phase cache.
template <typename T>
void update_running_stats(BatchNormParams<T>& p, const BatchNormCache<T>& cache);

template <typename T>
void relu_inplace(Matrix<T>& x);

// Zeroes grad where the forward output was not positive.
template <typename T>
void relu_backward_inplace(Matrix<T>& grad, const Matrix<T>& output);

}  // namespace ssf
