#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "rttdp/tensor.hpp"

namespace rttdp {

// Elementwise arithmetic with NumPy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

// x [N,C,H,W], w [O,C,kh,kw], optional bias [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor clamp(const Tensor& x, double lo, double hi);

// Row-wise over the last axis of a rank-2 tensor.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
// Concatenation along axis 0.
Tensor concat(std::span<const Tensor> parts);

struct BatchNormResult {
  Tensor out;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (1/n) estimator, as used to normalize
};

// x [N,C] or [N,C,H,W]; statistics per channel over every other axis.
// Gradients flow through the batch statistics.
BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double eps);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var,
                       double eps);

// Per-sample Gaussian over spatial positions of z [N,C,H,W]:
// mean [N,C] and biased covariance [N,C,C].
std::pair<Tensor, Tensor> spatial_moments(const Tensor& z);
// One Gaussian over the rows of z [N,D]: mean [1,D] and biased covariance [1,D,D].
std::pair<Tensor, Tensor> batch_moments(const Tensor& z);

enum class OpKind {
  Add,
  Sub,
  Mul,
  Scale,
  Matmul,
  Conv2d,
  Relu,
  Exp,
  Log,
  Pow,
  Clamp,
  Softmax,
  LogSoftmax,
  Sum,
  Mean,
  SumAxis,
  Reshape,
  Slice,
  Concat,
  BatchNormTrain,
  BatchNormEval,
  SpatialMean,
  SpatialCov,
  GaussianKld,
};

std::string_view op_kind_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

// Attributes consumed by forward_op; each kind reads only the fields it needs.
struct OpAttrs {
  double scalar = 1.0;  // Scale factor, Pow exponent
  double lo = 0.0;
  double hi = 1.0;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double eps = 1e-5;
  Shape shape;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

/// Uniform dispatch over the registered op kinds. Argument order follows the
/// named function for each kind (BatchNorm: x, gamma, beta; Conv2d: x, w, bias;
/// GaussianKld: mu0, cov0, mu1, cov1).
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace rttdp
