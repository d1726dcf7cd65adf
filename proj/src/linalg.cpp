#include "rttdp/linalg.hpp"

#include <cmath>
#include <string>

#include "rttdp/errors.hpp"

namespace rttdp {

SquareMatrix SquareMatrix::identity(std::size_t dim) {
  SquareMatrix m(dim);
  for (std::size_t i = 0; i < dim; ++i) m(i, i) = 1.0;
  return m;
}

SquareMatrix cholesky(const SquareMatrix& m) {
  const std::size_t n = m.n;
  SquareMatrix l(n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!std::isfinite(d)) throw NumericsError("cholesky: non-finite pivot at column " + std::to_string(j));
    if (!(d > 0.0)) {
      throw SingularCovarianceError("cholesky: non-positive pivot " + std::to_string(d) +
                                    " at column " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

double log_det_from_cholesky(const SquareMatrix& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.n; ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

void forward_substitute(const SquareMatrix& l, std::span<double> b) {
  for (std::size_t i = 0; i < l.n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * b[k];
    b[i] = s / l(i, i);
  }
}

void back_substitute(const SquareMatrix& l, std::span<double> y) {
  for (std::size_t i = l.n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < l.n; ++k) s -= l(k, i) * y[k];
    y[i] = s / l(i, i);
  }
}

SquareMatrix inverse_from_cholesky(const SquareMatrix& l) {
  const std::size_t n = l.n;
  SquareMatrix inv(n);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[j] = 1.0;
    forward_substitute(l, col);
    back_substitute(l, col);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  // Symmetrize away round-off.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = inv(j, i) = v;
    }
  }
  return inv;
}

namespace {

SquareMatrix regularized(const double* raw, std::size_t d, double jitter) {
  SquareMatrix s(d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) s(i, j) = 0.5 * (raw[i * d + j] + raw[j * d + i]);
    s(i, i) += jitter;
  }
  return s;
}

// Value and (optionally) gradients of one KL term. Gradients are with respect
// to the symmetrized, jittered covariances, which equal the gradients with
// respect to the raw inputs because the map is linear and the results symmetric.
struct KldParts {
  double value = 0.0;
  std::vector<double> g_mu0, g_mu1, g_cov0, g_cov1;
};

KldParts kld_parts(const double* mu0, const double* cov0, const double* mu1, const double* cov1,
                   std::size_t d, double jitter, bool want_grad) {
  const SquareMatrix s0 = regularized(cov0, d, jitter);
  const SquareMatrix s1 = regularized(cov1, d, jitter);
  const SquareMatrix l0 = cholesky(s0);
  const SquareMatrix l1 = cholesky(s1);
  const SquareMatrix inv1 = inverse_from_cholesky(l1);

  std::vector<double> diff(d), w(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) diff[i] = mu1[i] - mu0[i];
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) w[i] += inv1(i, j) * diff[j];
  }
  double trace = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) trace += inv1(i, j) * s0(j, i);
    quad += diff[i] * w[i];
  }
  KldParts r;
  r.value = 0.5 * (trace + quad - static_cast<double>(d) + log_det_from_cholesky(l1) -
                   log_det_from_cholesky(l0));
  if (!want_grad) return r;

  const SquareMatrix inv0 = inverse_from_cholesky(l0);
  r.g_mu0.resize(d);
  r.g_mu1.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    r.g_mu1[i] = w[i];
    r.g_mu0[i] = -w[i];
  }
  // inv1 · s0 · inv1
  SquareMatrix t(d), a(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double x = inv1(i, k);
      for (std::size_t j = 0; j < d; ++j) t(i, j) += x * s0(k, j);
    }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double x = t(i, k);
      for (std::size_t j = 0; j < d; ++j) a(i, j) += x * inv1(k, j);
    }
  r.g_cov0.resize(d * d);
  r.g_cov1.resize(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      r.g_cov0[i * d + j] = 0.5 * (inv1(i, j) - inv0(i, j));
      r.g_cov1[i * d + j] = 0.5 * (inv1(i, j) - a(i, j) - w[i] * w[j]);
    }
  }
  return r;
}

}  // namespace

double gaussian_kld(std::span<const double> mu0, const SquareMatrix& cov0,
                    std::span<const double> mu1, const SquareMatrix& cov1, double jitter) {
  const std::size_t d = mu0.size();
  if (mu1.size() != d || cov0.n != d || cov1.n != d) {
    throw ShapeError("gaussian_kld: dimension mismatch");
  }
  return kld_parts(mu0.data(), cov0.a.data(), mu1.data(), cov1.a.data(), d, jitter, false).value;
}

Tensor gaussian_kld(const Tensor& mu0, const Tensor& cov0, const Tensor& mu1, const Tensor& cov1,
                    double jitter) {
  const bool batched = mu0.rank() == 2;
  if (!batched && mu0.rank() != 1) {
    throw ShapeError("gaussian_kld: mean must be [D] or [N,D], got " + shape_str(mu0.shape()));
  }
  const std::size_t n = batched ? mu0.dim(0) : 1;
  const std::size_t d = batched ? mu0.dim(1) : mu0.dim(0);
  const Shape mu_shape = batched ? Shape{n, d} : Shape{d};
  const Shape cov_shape = batched ? Shape{n, d, d} : Shape{d, d};
  for (const Tensor* t : {&mu0, &mu1}) {
    if (t->shape() != mu_shape) throw ShapeError("gaussian_kld: mean shape " + shape_str(t->shape()) +
                                                 ", expected " + shape_str(mu_shape));
  }
  for (const Tensor* t : {&cov0, &cov1}) {
    if (t->shape() != cov_shape) throw ShapeError("gaussian_kld: covariance shape " + shape_str(t->shape()) +
                                                  ", expected " + shape_str(cov_shape));
  }
  const bool want_grad = grad_enabled() && (mu0.requires_grad() || cov0.requires_grad() ||
                                            mu1.requires_grad() || cov1.requires_grad());
  std::vector<double> out(n);
  auto grads = std::make_shared<std::vector<KldParts>>();
  if (want_grad) grads->reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    KldParts p = kld_parts(mu0.values().data() + i * d, cov0.values().data() + i * d * d,
                           mu1.values().data() + i * d, cov1.values().data() + i * d * d, d, jitter,
                           want_grad);
    out[i] = p.value;
    if (want_grad) grads->push_back(std::move(p));
  }
  Shape out_shape = batched ? Shape{n} : Shape{};
  return Tensor::make_result(std::move(out_shape), std::move(out), "gaussian_kld",
                             {mu0, cov0, mu1, cov1}, [grads, n, d](detail::Node& self) {
    auto& pm0 = *self.parents[0];
    auto& pc0 = *self.parents[1];
    auto& pm1 = *self.parents[2];
    auto& pc1 = *self.parents[3];
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i];
      const KldParts& k = (*grads)[i];
      for (std::size_t j = 0; j < d; ++j) {
        if (pm0.requires_grad) pm0.grad[i * d + j] += g * k.g_mu0[j];
        if (pm1.requires_grad) pm1.grad[i * d + j] += g * k.g_mu1[j];
      }
      for (std::size_t j = 0; j < d * d; ++j) {
        if (pc0.requires_grad) pc0.grad[i * d * d + j] += g * k.g_cov0[j];
        if (pc1.requires_grad) pc1.grad[i * d * d + j] += g * k.g_cov1[j];
      }
    }
  });
}

}  // namespace rttdp
