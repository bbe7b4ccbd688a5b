#pragma once

#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "ssf/network.hpp"

namespace ssf {

struct LossValue {
  double value = 0.0;
  bool empty = false;  // no processed points; value is 0
};

// Mean over processed rows of ||pred - gt||.
LossValue flow_loss(const FlowField& pred, const FlowField& gt,
                    std::span<const std::uint8_t> processed);

// Loss of one forward pass together with its gradient with respect to the
// residual rows of the trace (trace.processed_rows order).
template <typename T>
struct LossAndGrad {
  LossValue loss;
  Matrix<T> grad_residual;
};

template <typename T>
LossAndGrad<T> flow_loss_and_grad(const FlowPrediction& pred, const SsfTrace<T>& trace,
                                  const std::vector<Vec3>& gt_flow);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  AdamConfig cfg;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;  // one per trainable tensor, tensor_refs order
  std::vector<std::vector<double>> v;
};

template <typename T>
OptimState<T> make_optim_state(const SsfParams<T>& params, const AdamConfig& cfg);

// One bias-corrected Adam update of every trainable tensor.
template <typename T>
void adam_step(SsfParams<T>& params, const SsfParams<T>& grads, OptimState<T>& state);

struct FitConfig {
  std::size_t steps = 2000;
  AdamConfig adam;
  GridConfig grid;
  // Called after each step with (step, loss before the update).
  std::function<void(std::size_t, double)> on_step;
};

template <typename T>
struct FitResult {
  SsfParams<T> params;
  std::vector<double> loss_trace;  // loss at each step, before its update
};

// Full-batch training: each step runs every pair in train phase, averages the
// per-pair losses and applies one Adam update. A non-finite loss raises
// NumericError naming the step.
template <typename T>
FitResult<T> fit(const std::vector<FramePair>& pairs, SsfParams<T> params,
                 const FitConfig& cfg);

void write_loss_csv(std::span<const double> trace, std::ostream& out);

}  // namespace ssf
