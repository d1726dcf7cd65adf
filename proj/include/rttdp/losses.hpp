#pragma once

#include <span>
#include <vector>

#include "rttdp/tensor.hpp"

namespace rttdp {

// Per-row Shannon entropy (natural log) of softmax(logits) -> [N].
Tensor softmax_entropy(const Tensor& logits);

// Per-row cross-entropy -Σ_k target_k log softmax(logits)_k -> [N]. `target`
// is a constant [N,K] distribution.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target);

// Per-row cross-entropy against hard labels -> [N].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor one_hot(std::span<const int> labels, std::size_t classes);

// Plain-double helpers for telemetry and masks.
std::vector<double> row_entropy(std::span<const double> probs, std::size_t classes,
                                double log_base = 0.0);
std::vector<int> row_argmax(std::span<const double> values, std::size_t classes);

}  // namespace rttdp
