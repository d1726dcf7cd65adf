#include "rttdp/losses.hpp"

#include <algorithm>
#include <cmath>

#include "rttdp/errors.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

Tensor softmax_entropy(const Tensor& logits) {
  Tensor logp = log_softmax(logits);
  Tensor p = exp(logp);
  return scale(sum_axis(mul(p, logp), 1), -1.0);
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target) {
  if (target.shape() != logits.shape()) {
    throw ShapeError("soft_cross_entropy: target " + shape_str(target.shape()) + " vs logits " +
                     shape_str(logits.shape()));
  }
  return scale(sum_axis(mul(target, log_softmax(logits)), 1), -1.0);
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes}, 0.0);
  auto v = t.values_mut();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " outside [0," +
                          std::to_string(classes) + ")");
    }
    v[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  return soft_cross_entropy(logits, one_hot(labels, logits.dim(1)));
}

std::vector<double> row_entropy(std::span<const double> probs, std::size_t classes,
                                double log_base) {
  const double div = log_base > 0.0 ? std::log(log_base) : 1.0;
  const std::size_t n = probs.size() / classes;
  std::vector<double> h(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = probs[i * classes + k];
      if (p > 0.0) s -= p * std::log(p);
    }
    h[i] = s / div;
  }
  return h;
}

std::vector<int> row_argmax(std::span<const double> values, std::size_t classes) {
  const std::size_t n = values.size() / classes;
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto first = values.begin() + static_cast<std::ptrdiff_t>(i * classes);
    out[i] = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(classes)) - first);
  }
  return out;
}

}  // namespace rttdp
