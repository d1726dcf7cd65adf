#include "rttdp/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "rttdp/errors.hpp"
#include "rttdp/linalg.hpp"

namespace rttdp {

namespace {

using detail::Node;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Flat-index maps from the broadcast output into each operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
  bool same = false;
};

Broadcast broadcast(std::string_view op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape ap(rank, 1), bp(rank, 1);
  std::copy(a.begin(), a.end(), ap.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + (rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] == bp[i] || bp[i] == 1) {
      bc.out[i] = ap[i];
    } else if (ap[i] == 1) {
      bc.out[i] = bp[i];
    } else {
      shape_fail(op, a, b);
    }
  }
  std::vector<std::size_t> as(rank, 0), bs(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    as[i] = ap[i] == 1 ? 0 : sa;
    bs[i] = bp[i] == 1 ? 0 : sb;
    sa *= ap[i];
    sb *= bp[i];
  }
  const std::size_t n = numel_of(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < n; ++k) {
    bc.a_index[k] = ia;
    bc.b_index[k] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += as[d];
      ib += bs[d];
      if (idx[d] < bc.out[d]) break;
      ia -= as[d] * idx[d];
      ib -= bs[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

enum class Arith { Add, Sub, Mul };

Tensor arith(Arith kind, const Tensor& a, const Tensor& b) {
  static constexpr std::array<const char*, 3> names{"add", "sub", "mul"};
  const char* name = names[static_cast<int>(kind)];
  auto bc = std::make_shared<Broadcast>(broadcast(name, a.shape(), b.shape()));
  const std::size_t n = numel_of(bc->out);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double x = av[bc->same ? k : bc->a_index[k]];
    const double y = bv[bc->same ? k : bc->b_index[k]];
    switch (kind) {
      case Arith::Add: out[k] = x + y; break;
      case Arith::Sub: out[k] = x - y; break;
      case Arith::Mul: out[k] = x * y; break;
    }
  }
  return Tensor::make_result(bc->out, std::move(out), name, {a, b}, [kind, bc](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.values.size();
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t ia = bc->same ? k : bc->a_index[k];
      const std::size_t ib = bc->same ? k : bc->b_index[k];
      const double g = self.grad[k];
      switch (kind) {
        case Arith::Add:
          if (pa.requires_grad) pa.grad[ia] += g;
          if (pb.requires_grad) pb.grad[ib] += g;
          break;
        case Arith::Sub:
          if (pa.requires_grad) pa.grad[ia] += g;
          if (pb.requires_grad) pb.grad[ib] -= g;
          break;
        case Arith::Mul:
          if (pa.requires_grad) pa.grad[ia] += g * pb.values[ib];
          if (pb.requires_grad) pb.grad[ib] += g * pa.values[ia];
          break;
      }
    }
  });
}

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* name, F f, D df) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), name, {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      p.grad[i] += self.grad[i] * df(p.values[i], self.values[i]);
    }
  });
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Strided description of (group, channel, position) triples for moment ops.
struct MomentLayout {
  std::size_t groups, channels, positions;
  std::size_t group_stride, channel_stride, position_stride;
  std::size_t at(std::size_t g, std::size_t c, std::size_t p) const {
    return g * group_stride + c * channel_stride + p * position_stride;
  }
};

std::vector<double> group_means(std::span<const double> z, const MomentLayout& L) {
  std::vector<double> mu(L.groups * L.channels, 0.0);
  for (std::size_t g = 0; g < L.groups; ++g) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < L.positions; ++p) s += z[L.at(g, c, p)];
      mu[g * L.channels + c] = s / static_cast<double>(L.positions);
    }
  }
  return mu;
}

std::pair<Tensor, Tensor> moments(const Tensor& z, const MomentLayout& L, Shape mu_shape,
                                  Shape cov_shape, const char* mean_name, const char* cov_name) {
  auto zv = z.values();
  const std::size_t C = L.channels;
  const double inv_p = 1.0 / static_cast<double>(L.positions);
  auto mu = group_means(zv, L);
  std::vector<double> cov(L.groups * C * C, 0.0);
  std::vector<double> centered(C);
  for (std::size_t g = 0; g < L.groups; ++g) {
    double* S = cov.data() + g * C * C;
    for (std::size_t p = 0; p < L.positions; ++p) {
      for (std::size_t c = 0; c < C; ++c) centered[c] = zv[L.at(g, c, p)] - mu[g * C + c];
      for (std::size_t c = 0; c < C; ++c) {
        const double zc = centered[c];
        for (std::size_t d = 0; d <= c; ++d) S[c * C + d] += zc * centered[d];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t d = 0; d <= c; ++d) {
        S[c * C + d] *= inv_p;
        S[d * C + c] = S[c * C + d];
      }
    }
  }

  Tensor mean_t = Tensor::make_result(std::move(mu_shape), mu, mean_name, {z}, [L, inv_p](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t g = 0; g < L.groups; ++g) {
      for (std::size_t c = 0; c < L.channels; ++c) {
        const double gv = self.grad[g * L.channels + c] * inv_p;
        for (std::size_t q = 0; q < L.positions; ++q) p.grad[L.at(g, c, q)] += gv;
      }
    }
  });

  // Centering contributes nothing to dΣ/dz because centered columns sum to zero.
  Tensor cov_t = Tensor::make_result(std::move(cov_shape), std::move(cov), cov_name, {z},
                                     [L, inv_p, mu = std::move(mu)](Node& self) {
    Node& p = *self.parents[0];
    const std::size_t C = L.channels;
    std::vector<double> sym(C * C), zc(C);
    for (std::size_t g = 0; g < L.groups; ++g) {
      const double* G = self.grad.data() + g * C * C;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t d = 0; d < C; ++d) sym[c * C + d] = (G[c * C + d] + G[d * C + c]) * inv_p;
      }
      for (std::size_t q = 0; q < L.positions; ++q) {
        for (std::size_t c = 0; c < C; ++c) zc[c] = p.values[L.at(g, c, q)] - mu[g * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t d = 0; d < C; ++d) acc += sym[c * C + d] * zc[d];
          p.grad[L.at(g, c, q)] += acc;
        }
      }
    }
  });
  return {mean_t, cov_t};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return arith(Arith::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return arith(Arith::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return arith(Arith::Mul, a, b); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) shape_fail("matmul", a.shape(), b.shape());
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double x = av[i * K + k];
      const double* brow = bv.data() + k * N;
      double* orow = out.data() + i * N;
      for (std::size_t j = 0; j < N; ++j) orow[j] += x * brow[j];
    }
  }
  return Tensor::make_result({M, N}, std::move(out), "matmul", {a, b}, [M, K, N](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < N; ++j) acc += G[i * N + j] * pb.values[k * N + j];
          pa.grad[i * K + k] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const double x = pa.values[i * K + k];
          for (std::size_t j = 0; j < N; ++j) pb.grad[k * N + j] += x * G[i * N + j];
        }
      }
    }
  });
}

namespace {

// im2col layout: row r = (c, kh, kw), column p = (oh, ow). Out-of-bounds taps stay zero.
struct ConvGeometry {
  std::size_t N, C, H, W, O, KH, KW, OH, OW, stride, padding;
  std::size_t rows() const { return C * KH * KW; }
  std::size_t cols() const { return OH * OW; }
  template <typename F>
  void each_tap(F&& f) const {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t kh = 0; kh < KH; ++kh)
        for (std::size_t kw = 0; kw < KW; ++kw) {
          const std::size_t r = (c * KH + kh) * KW + kw;
          for (std::size_t oh = 0; oh < OH; ++oh) {
            const std::size_t ih = oh * stride + kh;
            if (ih < padding || ih >= padding + H) continue;
            for (std::size_t ow = 0; ow < OW; ++ow) {
              const std::size_t iw = ow * stride + kw;
              if (iw < padding || iw >= padding + W) continue;
              f(r * OH * OW + oh * OW + ow, (c * H + ih - padding) * W + iw - padding);
            }
          }
        }
  }
  void im2col(const double* img, std::vector<double>& col) const {
    std::fill(col.begin(), col.end(), 0.0);
    each_tap([&](std::size_t ci, std::size_t xi) { col[ci] = img[xi]; });
  }
};

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != C) shape_fail("conv2d", x.shape(), w.shape());
  if (H + 2 * padding < KH || W + 2 * padding < KW) shape_fail("conv2d", x.shape(), w.shape());
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != O)) shape_fail("conv2d", w.shape(), bias.shape());
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;

  const ConvGeometry g{N, C, H, W, O, KH, KW, OH, OW, stride, padding};
  const std::size_t R = g.rows(), P = g.cols();

  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> out(N * O * P, 0.0);
  std::vector<double> col(R * P);
  for (std::size_t n = 0; n < N; ++n) {
    g.im2col(xv.data() + n * C * H * W, col);
    for (std::size_t o = 0; o < O; ++o) {
      double* op = out.data() + (n * O + o) * P;
      if (has_bias) std::fill(op, op + P, bias.values()[o]);
      const double* wr = wv.data() + o * R;
      for (std::size_t r = 0; r < R; ++r) {
        const double wt = wr[r];
        const double* cr = col.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) op[p] += wt * cr[p];
      }
    }
  }
  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return Tensor::make_result({N, O, OH, OW}, std::move(out), "conv2d", std::move(parents),
                             [g, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const double* G = self.grad.data();
    const std::size_t R = g.rows(), P = g.cols();
    if (has_bias && self.parents[2]->requires_grad) {
      Node& pb = *self.parents[2];
      for (std::size_t n = 0; n < g.N; ++n) {
        for (std::size_t o = 0; o < g.O; ++o) {
          const double* gp = G + (n * g.O + o) * P;
          double s = 0.0;
          for (std::size_t k = 0; k < P; ++k) s += gp[k];
          pb.grad[o] += s;
        }
      }
    }
    std::vector<double> col(R * P), dcol(R * P);
    for (std::size_t n = 0; n < g.N; ++n) {
      const double* gn = G + n * g.O * P;
      if (pw.requires_grad) {
        g.im2col(px.values.data() + n * g.C * g.H * g.W, col);
        for (std::size_t o = 0; o < g.O; ++o) {
          const double* gp = gn + o * P;
          double* dw = pw.grad.data() + o * R;
          for (std::size_t r = 0; r < R; ++r) {
            const double* cr = col.data() + r * P;
            double acc = 0.0;
            for (std::size_t p = 0; p < P; ++p) acc += gp[p] * cr[p];
            dw[r] += acc;
          }
        }
      }
      if (px.requires_grad) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        for (std::size_t o = 0; o < g.O; ++o) {
          const double* gp = gn + o * P;
          const double* wr = pw.values.data() + o * R;
          for (std::size_t r = 0; r < R; ++r) {
            const double wt = wr[r];
            double* dr = dcol.data() + r * P;
            for (std::size_t p = 0; p < P; ++p) dr[p] += wt * gp[p];
          }
        }
        double* dx = px.grad.data() + n * g.C * g.H * g.W;
        g.each_tap([&](std::size_t ci, std::size_t xi) { dx[xi] += dcol[ci]; });
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor pow(const Tensor& x, double e) {
  return unary(x, "pow", [e](double v) { return std::pow(v, e); },
               [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& x) {
  require_rank("softmax", x, 2);
  const std::size_t N = x.dim(0), K = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(N * K);
  for (std::size_t i = 0; i < N; ++i) {
    const double* r = xv.data() + i * K;
    const double m = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (out[i * K + k] = std::exp(r[k] - m));
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] /= z;
  }
  return Tensor::make_result({N, K}, std::move(out), "softmax", {x}, [N, K](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < N; ++i) {
      const double* y = self.values.data() + i * K;
      const double* g = self.grad.data() + i * K;
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += g[k] * y[k];
      for (std::size_t k = 0; k < K; ++k) p.grad[i * K + k] += y[k] * (g[k] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::size_t N = x.dim(0), K = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(N * K);
  for (std::size_t i = 0; i < N; ++i) {
    const double* r = xv.data() + i * K;
    const double m = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(r[k] - m);
    const double lz = m + std::log(z);
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] = r[k] - lz;
  }
  return Tensor::make_result({N, K}, std::move(out), "log_softmax", {x}, [N, K](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < N; ++i) {
      const double* y = self.values.data() + i * K;
      const double* g = self.grad.data() + i * K;
      double gs = 0.0;
      for (std::size_t k = 0; k < K; ++k) gs += g[k];
      for (std::size_t k = 0; k < K; ++k) p.grad[i * K + k] += g[k] - std::exp(y[k]) * gs;
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_result({}, {s}, "sum", {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  auto xv = x.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
    }
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), "sum_axis", {x},
                             [outer, len, inner](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t i = 0; i < inner; ++i) p.grad[(o * len + l) * inner + i] += self.grad[o * inner + i];
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const std::size_t len = x.dim(axis);
  if (len == 0) throw ShapeError("mean_axis: empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(len));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis], span_len = end - begin;
  Shape out_shape = s;
  out_shape[axis] = span_len;
  auto xv = x.values();
  std::vector<double> out;
  out.reserve(outer * span_len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    auto first = xv.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(span_len * inner));
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), "slice", {x},
                             [outer, len, inner, begin, span_len](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < span_len * inner; ++k) {
        p.grad[(o * len + begin) * inner + k] += self.grad[o * span_len * inner + k];
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (out_shape.empty()) throw ShapeError("concat: scalar input");
  out_shape[0] = 0;
  std::vector<std::size_t> sizes;
  for (const auto& t : parts) {
    Shape s = t.shape();
    if (s.size() != out_shape.size() || !std::equal(s.begin() + 1, s.end(), out_shape.begin() + 1)) {
      shape_fail("concat", parts[0].shape(), s);
    }
    out_shape[0] += s[0];
    sizes.push_back(t.numel());
  }
  std::vector<double> out;
  out.reserve(numel_of(out_shape));
  for (const auto& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
  return Tensor::make_result(std::move(out_shape), std::move(out), "concat",
                             std::vector<Tensor>(parts.begin(), parts.end()), [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) {
        for (std::size_t k = 0; k < sizes[i]; ++k) p.grad[k] += self.grad[off + k];
      }
      off += sizes[i];
    }
  });
}

namespace {

struct ChannelLayout {
  std::size_t N, C, P;  // samples, channels, spatial positions per channel
  std::size_t at(std::size_t n, std::size_t c, std::size_t p) const { return (n * C + c) * P + p; }
};

ChannelLayout channel_layout(std::string_view op, const Tensor& x, const Tensor& gamma,
                             const Tensor& beta) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
  }
  ChannelLayout L{x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
  if (gamma.numel() != L.C || beta.numel() != L.C) shape_fail(op, x.shape(), gamma.shape());
  return L;
}

}  // namespace

BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double eps) {
  const ChannelLayout L = channel_layout("batch_norm_train", x, gamma, beta);
  const std::size_t m = L.N * L.P;
  if (m < 2) throw DegenerateBatchError("batch_norm_train: need at least 2 values per channel");
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> mean(L.C, 0.0), var(L.C, 0.0), inv_std(L.C);
  for (std::size_t c = 0; c < L.C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < L.N; ++n)
      for (std::size_t p = 0; p < L.P; ++p) s += xv[L.at(n, c, p)];
    mean[c] = s / static_cast<double>(m);
    double v = 0.0;
    for (std::size_t n = 0; n < L.N; ++n)
      for (std::size_t p = 0; p < L.P; ++p) {
        const double d = xv[L.at(n, c, p)] - mean[c];
        v += d * d;
      }
    var[c] = v / static_cast<double>(m);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t n = 0; n < L.N; ++n)
    for (std::size_t c = 0; c < L.C; ++c)
      for (std::size_t p = 0; p < L.P; ++p) {
        const std::size_t i = L.at(n, c, p);
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        out[i] = gv[c] * xhat[i] + bv[c];
      }
  BatchNormResult r;
  r.out = Tensor::make_result(x.shape(), std::move(out), "batch_norm_train", {x, gamma, beta},
                              [L, m, xhat = std::move(xhat), inv_std](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const double dm = static_cast<double>(m);
    for (std::size_t c = 0; c < L.C; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < L.N; ++n)
        for (std::size_t p = 0; p < L.P; ++p) {
          const std::size_t i = L.at(n, c, p);
          sum_g += self.grad[i];
          sum_gx += self.grad[i] * xhat[i];
        }
      if (pg.requires_grad) pg.grad[c] += sum_gx;
      if (pb.requires_grad) pb.grad[c] += sum_g;
      if (px.requires_grad) {
        const double gam = pg.values[c];
        const double k = gam * inv_std[c] / dm;
        for (std::size_t n = 0; n < L.N; ++n)
          for (std::size_t p = 0; p < L.P; ++p) {
            const std::size_t i = L.at(n, c, p);
            px.grad[i] += k * (dm * self.grad[i] - sum_g - xhat[i] * sum_gx);
          }
      }
    }
  });
  r.batch_mean = std::move(mean);
  r.batch_var = std::move(var);
  return r;
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var,
                       double eps) {
  const ChannelLayout L = channel_layout("batch_norm_eval", x, gamma, beta);
  if (running_mean.size() != L.C || running_var.size() != L.C) {
    throw ShapeError("batch_norm_eval: running statistics do not match channel count " +
                     std::to_string(L.C));
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> inv_std(L.C), mu(running_mean.begin(), running_mean.end());
  for (std::size_t c = 0; c < L.C; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  std::vector<double> out(xv.size());
  for (std::size_t n = 0; n < L.N; ++n)
    for (std::size_t c = 0; c < L.C; ++c)
      for (std::size_t p = 0; p < L.P; ++p) {
        const std::size_t i = L.at(n, c, p);
        out[i] = gv[c] * (xv[i] - mu[c]) * inv_std[c] + bv[c];
      }
  return Tensor::make_result(x.shape(), std::move(out), "batch_norm_eval", {x, gamma, beta},
                             [L, inv_std, mu](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    for (std::size_t n = 0; n < L.N; ++n)
      for (std::size_t c = 0; c < L.C; ++c)
        for (std::size_t p = 0; p < L.P; ++p) {
          const std::size_t i = L.at(n, c, p);
          const double g = self.grad[i];
          if (px.requires_grad) px.grad[i] += g * pg.values[c] * inv_std[c];
          if (pg.requires_grad) pg.grad[c] += g * (px.values[i] - mu[c]) * inv_std[c];
          if (pb.requires_grad) pb.grad[c] += g;
        }
  });
}

std::pair<Tensor, Tensor> spatial_moments(const Tensor& z) {
  require_rank("spatial_moments", z, 4);
  const std::size_t N = z.dim(0), C = z.dim(1), P = z.dim(2) * z.dim(3);
  if (P == 0) throw ShapeError("spatial_moments: empty spatial extent");
  const MomentLayout L{N, C, P, C * P, P, 1};
  return moments(z, L, {N, C}, {N, C, C}, "spatial_mean", "spatial_cov");
}

std::pair<Tensor, Tensor> batch_moments(const Tensor& z) {
  require_rank("batch_moments", z, 2);
  const std::size_t N = z.dim(0), D = z.dim(1);
  if (N == 0) throw ShapeError("batch_moments: empty batch");
  const MomentLayout L{1, D, N, 0, 1, D};
  return moments(z, L, {1, D}, {1, D, D}, "batch_mean", "batch_cov");
}

std::string_view op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Pow: return "pow";
    case OpKind::Clamp: return "clamp";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::Reshape: return "reshape";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
    case OpKind::BatchNormTrain: return "batch_norm_train";
    case OpKind::BatchNormEval: return "batch_norm_eval";
    case OpKind::SpatialMean: return "spatial_mean";
    case OpKind::SpatialCov: return "spatial_cov";
    case OpKind::GaussianKld: return "gaussian_kld";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() {
  static constexpr std::array kinds{
      OpKind::Add,     OpKind::Sub,        OpKind::Mul,        OpKind::Scale,
      OpKind::Matmul,  OpKind::Conv2d,     OpKind::Relu,       OpKind::Exp,
      OpKind::Log,     OpKind::Pow,        OpKind::Clamp,      OpKind::Softmax,
      OpKind::LogSoftmax, OpKind::Sum,     OpKind::Mean,       OpKind::SumAxis,
      OpKind::Reshape, OpKind::Slice,      OpKind::Concat,     OpKind::BatchNormTrain,
      OpKind::BatchNormEval, OpKind::SpatialMean, OpKind::SpatialCov, OpKind::GaussianKld,
  };
  return kinds;
}

Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpAttrs& a) {
  auto need = [&](std::size_t n) {
    if (in.size() < n) {
      throw ContractError(std::string(op_kind_name(kind)) + ": expected " + std::to_string(n) +
                          " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Sub: need(2); return sub(in[0], in[1]);
    case OpKind::Mul: need(2); return mul(in[0], in[1]);
    case OpKind::Scale: need(1); return scale(in[0], a.scalar);
    case OpKind::Matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::Conv2d:
      need(2);
      return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor(), a.stride, a.padding);
    case OpKind::Relu: need(1); return relu(in[0]);
    case OpKind::Exp: need(1); return exp(in[0]);
    case OpKind::Log: need(1); return log(in[0]);
    case OpKind::Pow: need(1); return pow(in[0], a.scalar);
    case OpKind::Clamp: need(1); return clamp(in[0], a.lo, a.hi);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::LogSoftmax: need(1); return log_softmax(in[0]);
    case OpKind::Sum: need(1); return sum(in[0]);
    case OpKind::Mean: need(1); return mean(in[0]);
    case OpKind::SumAxis: need(1); return sum_axis(in[0], a.axis);
    case OpKind::Reshape: need(1); return reshape(in[0], a.shape);
    case OpKind::Slice: need(1); return slice(in[0], a.axis, a.begin, a.end);
    case OpKind::Concat: need(1); return concat(in);
    case OpKind::BatchNormTrain: need(3); return batch_norm_train(in[0], in[1], in[2], a.eps).out;
    case OpKind::BatchNormEval:
      need(3);
      return batch_norm_eval(in[0], in[1], in[2], a.running_mean, a.running_var, a.eps);
    case OpKind::SpatialMean: need(1); return spatial_moments(in[0]).first;
    case OpKind::SpatialCov: need(1); return spatial_moments(in[0]).second;
    case OpKind::GaussianKld: need(4); return gaussian_kld(in[0], in[1], in[2], in[3], a.eps);
  }
  throw ContractError("forward_op: unknown op kind");
}

}  // namespace rttdp
