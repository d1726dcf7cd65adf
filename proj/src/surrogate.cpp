#include "rttdp/surrogate.hpp"

#include <cmath>

#include "rttdp/errors.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

namespace {
constexpr double kProbFloor = 1e-12;
}

Tensor symmetric_kld_loss(const Tensor& p, const Tensor& q) {
  if (p.rank() != 2 || q.rank() != 2 || p.shape() != q.shape()) {
    throw ContractError("symmetric_kld_loss: posterior shapes " + shape_str(p.shape()) + " and " +
                        shape_str(q.shape()));
  }
  Tensor pf = clamp(p, kProbFloor, 1.0), qf = clamp(q, kProbFloor, 1.0);
  Tensor diff = sub(log(pf), log(qf));
  // KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)
  Tensor both = sum_axis(mul(sub(pf, qf), diff), 1);
  return scale(mean(both), 0.5);
}

std::vector<double> distill(SurrogateState& s, const Tensor& batch, const Tensor& online) {
  std::vector<double> trace;
  if (s.iterations == 0) return trace;
  if (batch.rank() == 0 || batch.dim(0) == 0) throw ContractError("distill: empty batch");
  const Tensor target = online.detach();
  Model& m = s.model;
  m.set_grad_scope(GradScope::Learnable);
  for (std::size_t it = 0; it <= s.iterations; ++it) {
    m.zero_grad();
    const bool last = it == s.iterations;
    Tensor loss;
    if (last) {
      NoGradGuard guard;
      loss = symmetric_kld_loss(softmax(m.forward(batch, StatsMode::Train).logits), target);
    } else {
      loss = symmetric_kld_loss(softmax(m.forward(batch, StatsMode::Train).logits), target);
    }
    if (!std::isfinite(loss.item())) {
      throw NumericsError("distill: non-finite loss at iteration " + std::to_string(it));
    }
    trace.push_back(loss.item());
    if (last) break;
    backward(loss);
    for (auto& p : m.parameters()) {
      if (p.role == ParamRole::BnStat) continue;
      auto g = p.value.grad();
      if (g.empty()) continue;
      auto v = p.value.values_mut();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= s.lr * g[i];
    }
  }
  m.set_grad_scope(GradScope::None);
  ++s.feedback_batches;
  s.feedback_samples += batch.dim(0);
  return trace;
}

}  // namespace rttdp
