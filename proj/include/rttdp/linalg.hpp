#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rttdp/tensor.hpp"

namespace rttdp {

inline constexpr double kCovarianceJitter = 1e-5;

/// Dense row-major square matrix used by the small Gaussian kernels.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t dim, double fill = 0.0) : n(dim), a(dim * dim, fill) {}
  SquareMatrix(std::size_t dim, std::vector<double> values) : n(dim), a(std::move(values)) {}
  static SquareMatrix identity(std::size_t dim);

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

// Lower-triangular L with L Lᵀ = m. Throws SingularCovarianceError when m is
// not numerically positive definite.
SquareMatrix cholesky(const SquareMatrix& m);
double log_det_from_cholesky(const SquareMatrix& l);
// Solves L y = b in place.
void forward_substitute(const SquareMatrix& l, std::span<double> b);
// Solves Lᵀ x = y in place.
void back_substitute(const SquareMatrix& l, std::span<double> y);
SquareMatrix inverse_from_cholesky(const SquareMatrix& l);

/// KL(N(mu0,cov0) ‖ N(mu1,cov1)) in plain doubles. Covariances are
/// symmetrized and receive `jitter`·I before factorization.
double gaussian_kld(std::span<const double> mu0, const SquareMatrix& cov0,
                    std::span<const double> mu1, const SquareMatrix& cov1,
                    double jitter = kCovarianceJitter);

/// Differentiable KL divergence between Gaussians. Accepts either a single
/// pair (mu [D], cov [D,D]) producing a scalar, or a batch (mu [N,D],
/// cov [N,D,D]) producing one divergence per row.
Tensor gaussian_kld(const Tensor& mu0, const Tensor& cov0, const Tensor& mu1, const Tensor& cov1,
                    double jitter = kCovarianceJitter);

}  // namespace rttdp
