#pragma once

#include <vector>

#include "rttdp/nn.hpp"

namespace rttdp {

struct SurrogateState {
  Model model;  // starts as a copy of θ₀
  double lr = 0.1;
  std::size_t iterations = 10;
  std::size_t feedback_batches = 0;
  std::size_t feedback_samples = 0;
};

// mean_i ½[KL(p_i‖q_i) + KL(q_i‖p_i)], probabilities floored at 1e-12 before logs.
Tensor symmetric_kld_loss(const Tensor& p, const Tensor& q);

// Gradient steps on every learnable surrogate parameter toward the fixed
// online posteriors. The trace holds the loss before each step followed by the
// loss after the last one (empty when no iterations are configured).
std::vector<double> distill(SurrogateState& surrogate, const Tensor& adversary_batch,
                            const Tensor& online_posteriors);

}  // namespace rttdp
