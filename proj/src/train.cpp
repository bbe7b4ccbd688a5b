#include "ssf/train.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "ssf/errors.hpp"

namespace ssf {

LossValue flow_loss(const FlowField& pred, const FlowField& gt,
                    std::span<const std::uint8_t> processed) {
  SSF_REQUIRE(pred.size() == gt.size() && processed.size() == gt.size(),
              "flow_loss: lengths differ");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!processed[i]) continue;
    sum += (pred.flow[i] - gt.flow[i]).norm();
    ++n;
  }
  if (n == 0) return {0.0, true};
  return {sum / static_cast<double>(n), false};
}

template <typename T>
LossAndGrad<T> flow_loss_and_grad(const FlowPrediction& pred, const SsfTrace<T>& trace,
                                  const std::vector<Vec3>& gt_flow) {
  SSF_REQUIRE(gt_flow.size() == pred.flow.size(), "loss: ground truth length differs");
  const std::size_t n = trace.processed_rows.size();
  LossAndGrad<T> out;
  out.grad_residual = Matrix<T>(n, 3);
  if (n == 0) {
    out.loss = {0.0, true};
    return out;
  }
  double sum = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<std::size_t>(trace.processed_rows[i]);
    const Vec3 d = pred.flow.flow[row] - gt_flow[row];
    const double len = d.norm();
    sum += len;
    if (len > 0.0) {
      for (int k = 0; k < 3; ++k) out.grad_residual(i, k) = static_cast<T>(d[k] / len * inv_n);
    }
  }
  out.loss = {sum * inv_n, false};
  return out;
}

template <typename T>
OptimState<T> make_optim_state(const SsfParams<T>& params, const AdamConfig& cfg) {
  OptimState<T> s;
  s.cfg = cfg;
  for (const auto& ref : tensor_refs(const_cast<SsfParams<T>&>(params))) {
    if (!ref.trainable) continue;
    s.m.emplace_back(ref.values->size(), 0.0);
    s.v.emplace_back(ref.values->size(), 0.0);
  }
  return s;
}

template <typename T>
void adam_step(SsfParams<T>& params, const SsfParams<T>& grads, OptimState<T>& state) {
  auto prefs = tensor_refs(params);
  auto grefs = tensor_refs(const_cast<SsfParams<T>&>(grads));
  SSF_REQUIRE(prefs.size() == grefs.size(), "adam: gradient structure differs");
  ++state.step;
  const AdamConfig& c = state.cfg;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  std::size_t k = 0;
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    if (!prefs[i].trainable) continue;
    SSF_REQUIRE(k < state.m.size(), "adam: state does not match parameters");
    std::vector<T>& p = *prefs[i].values;
    const std::vector<T>& g = *grefs[i].values;
    std::vector<double>& m = state.m[k];
    std::vector<double>& v = state.v[k];
    SSF_REQUIRE(g.size() == p.size() && m.size() == p.size(), "adam: tensor size mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      const double step = c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - step);
    }
    ++k;
  }
}

namespace {

template <typename T>
void accumulate(SsfParams<T>& acc, const SsfParams<T>& g) {
  auto a = tensor_refs(acc);
  auto b = tensor_refs(const_cast<SsfParams<T>&>(g));
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<T>& x = *a[i].values;
    const std::vector<T>& y = *b[i].values;
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += y[j];
  }
}

}  // namespace

template <typename T>
FitResult<T> fit(const std::vector<FramePair>& pairs, SsfParams<T> params,
                 const FitConfig& cfg) {
  SSF_REQUIRE(!pairs.empty(), "fit: no training pairs");
  for (const FramePair& p : pairs) {
    SSF_REQUIRE(p.cloud_t.gt_flow.has_value(), "fit: training pair without ground truth");
  }
  FitResult<T> result;
  OptimState<T> state = make_optim_state(params, cfg.adam);
  const T scale = static_cast<T>(1.0 / static_cast<double>(pairs.size()));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    SsfParams<T> grads = zeros_like(params);
    double loss = 0.0;
    for (const FramePair& pair : pairs) {
      SsfTrace<T> trace;
      FlowPrediction pred;
      try {
        pred = ssf_forward(pair, params, cfg.grid, NormPhase::kTrain, &trace);
      } catch (const NumericError& e) {
        throw NumericError(e.where(), "non-finite activation at step " + std::to_string(step));
      }
      LossAndGrad<T> lg = flow_loss_and_grad(pred, trace, *pair.cloud_t.gt_flow);
      loss += lg.loss.value;
      for (T& g : lg.grad_residual.values()) g *= scale;
      accumulate(grads, backward_pipeline(trace, params, lg.grad_residual));
      update_running_stats(params, trace);
    }
    loss /= static_cast<double>(pairs.size());
    if (!std::isfinite(loss)) {
      throw NumericError("fit", "loss diverged at step " + std::to_string(step));
    }
    result.loss_trace.push_back(loss);
    if (cfg.on_step) cfg.on_step(step, loss);
    adam_step(params, grads, state);
  }
  result.params = std::move(params);
  return result;
}

void write_loss_csv(std::span<const double> trace, std::ostream& out) {
  out << "step,loss\n";
  char buf[48];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g\n", i, trace[i]);
    out << buf;
  }
}

#define SSF_INSTANTIATE(T)                                                                  \
  template LossAndGrad<T> flow_loss_and_grad<T>(const FlowPrediction&, const SsfTrace<T>&,  \
                                                const std::vector<Vec3>&);                  \
  template OptimState<T> make_optim_state<T>(const SsfParams<T>&, const AdamConfig&);       \
  template void adam_step<T>(SsfParams<T>&, const SsfParams<T>&, OptimState<T>&);           \
  template FitResult<T> fit<T>(const std::vector<FramePair>&, SsfParams<T>, const FitConfig&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

}  // namespace ssf
