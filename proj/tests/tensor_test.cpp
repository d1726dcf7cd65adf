#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "rttdp/errors.hpp"
#include "rttdp/linalg.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/ops.hpp"

using namespace rttdp;
using rttdp::testing::grad_check;
using rttdp::testing::make_op_case;
using rttdp::testing::random_tensor;

TEST(Tensor, SoftmaxOfEqualLogitsIsUniform) {
  Tensor x({1, 3}, std::vector<double>{0.0, 0.0, 0.0});
  auto p = softmax(x);
  for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Tensor, MatmulByIdentity) {
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  auto c = matmul(a, eye);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(Tensor, ConvWithOnesKernelSumsWindows) {
  Tensor x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, w, Tensor(), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{12, 16, 24, 28}));
}

TEST(Tensor, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 6, 5}, rng, -1, 1, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  Tensor b = random_tensor({4}, rng, -1, 1, false);
  const std::size_t s = 2, p = 1;
  auto y = conv2d(x, w, b, s, p);
  const std::size_t oh = (6 + 2 * p - 3) / s + 1, ow = (5 + 2 * p - 3) / s + 1;
  ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b.values()[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 3; ++kj) {
                const long r = static_cast<long>(i * s + ki) - static_cast<long>(p);
                const long q = static_cast<long>(j * s + kj) - static_cast<long>(p);
                if (r < 0 || q < 0 || r >= 6 || q >= 5) continue;
                acc += x.values()[((n * 3 + c) * 6 + r) * 5 + q] *
                       w.values()[((o * 3 + c) * 3 + ki) * 3 + kj];
              }
          EXPECT_NEAR(y.values()[((n * 4 + o) * oh + i) * ow + j], acc, 1e-12);
        }
}

TEST(Tensor, SumOfSquaresGradient) {
  Tensor x({3}, std::vector<double>{1, 2, 3}, true);
  backward(sum(mul(x, x)));
  auto g = x.grad();
  ASSERT_EQ(g.size(), 3u);
  EXPECT_DOUBLE_EQ(g[0], 2);
  EXPECT_DOUBLE_EQ(g[1], 4);
  EXPECT_DOUBLE_EQ(g[2], 6);
}

TEST(Tensor, EntropyGradientVanishesAtUniform) {
  Tensor x({1, 4}, 0.7, true);
  backward(sum(softmax_entropy(x)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(Tensor, TwoLayerNetworkFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({5, 4}, rng, -1, 1, false);
  Tensor w1 = random_tensor({4, 6}, rng), b1 = random_tensor({6}, rng);
  Tensor w2 = random_tensor({6, 3}, rng), b2 = random_tensor({3}, rng);
  std::array<int, 5> labels{0, 2, 1, 1, 0};
  auto loss = [&] {
    // tanh-like smooth hidden layer avoids relu kinks under perturbation
    Tensor h = exp(scale(add(matmul(x, w1), b1), -1.0));
    return mean(cross_entropy(add(matmul(h, w2), b2), labels));
  };
  auto r = grad_check(loss, {w1, b1, w2, b2}, 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Tensor, EveryRegisteredOpPassesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (OpKind kind : all_op_kinds()) {
    for (int rep = 0; rep < 3; ++rep) {
      auto c = make_op_case(kind, rng);
      auto r = grad_check(c.loss, c.leaves, 1e-4);
      EXPECT_LT(r.max_rel_error, c.tolerance) << op_kind_name(kind) << ": " << r.worst;
    }
  }
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = random_tensor({4, 7}, rng, -30, 30, false);
    auto p = softmax(x);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) {
        EXPECT_GE(p.values()[i * 7 + k], 0.0);
        s += p.values()[i * 7 + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Tensor, BackwardIsDeterministic) {
  std::mt19937_64 rng(9);
  auto c = make_op_case(OpKind::Conv2d, rng);
  backward(c.loss());
  std::vector<double> first = c.leaves[0].grad_or_zeros();
  c.leaves[0].zero_grad();
  backward(c.loss());
  std::vector<double> second = c.leaves[0].grad_or_zeros();
  EXPECT_EQ(first, second);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor x({2}, std::vector<double>{1, -1}, true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(Tensor, SharedSubexpressionAccumulates) {
  Tensor x({1}, std::vector<double>{3.0}, true);
  Tensor y = mul(x, x);
  backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor x({2}, 1.0, true);
  NoGradGuard guard;
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, ShapeMismatchThrows) {
  Tensor a({2, 3}, 1.0), b({4, 2}, 1.0);
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(add(a, Tensor({2}, 1.0)), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
}

TEST(Tensor, BackwardFromNonScalarThrows) {
  Tensor a({2}, 1.0, true);
  EXPECT_THROW(backward(mul(a, a)), ContractError);
}

TEST(Tensor, StrictNumericsRejectsNonFinite) {
  StrictNumericsGuard strict;
  Tensor a({2}, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(exp(a), NumericsError);
}

TEST(Tensor, BatchNormNeedsTwoValuesPerChannel) {
  Tensor x({1, 3}, 1.0), g({3}, 1.0), b({3}, 0.0);
  EXPECT_THROW(batch_norm_train(x, g, b, 1e-5), DegenerateBatchError);
}

TEST(Tensor, BatchNormTrainNormalizes) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({16, 3}, rng, -5, 5, false);
  auto r = batch_norm_train(x, Tensor({3}, 1.0), Tensor({3}, 0.0), 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += r.out.values()[i * 3 + c];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += std::pow(r.out.values()[i * 3 + c] - m, 2);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Kld, IdenticalGaussiansGiveZero) {
  std::mt19937_64 rng(4);
  auto s = rttdp::testing::random_spd(3, rng);
  SquareMatrix c{3, s};
  std::vector<double> mu{0.3, -1.0, 2.0};
  EXPECT_NEAR(gaussian_kld(mu, c, mu, c), 0.0, 1e-12);
}

TEST(Kld, UnitShiftInOneDimension) {
  SquareMatrix one{1, {1.0}};
  std::vector<double> a{0.0}, b{1.0};
  // Jitter shifts both variances equally; with jitter the value stays within 1e-5.
  EXPECT_NEAR(gaussian_kld(a, one, b, one), 0.5, 1e-5);
  EXPECT_NEAR(gaussian_kld(a, one, b, one, 0.0), 0.5, 1e-15);
}

TEST(Kld, MatchesMonteCarloEstimate) {
  SquareMatrix c0{2, {1.0, 0.3, 0.3, 0.8}}, c1{2, {1.5, -0.2, -0.2, 0.6}};
  std::vector<double> m0{0.0, 0.5}, m1{0.4, -0.3};
  const double exact = gaussian_kld(m0, c0, m1, c1, 0.0);

  auto logpdf = [](const std::vector<double>& x, const std::vector<double>& m,
                   const SquareMatrix& c) {
    const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
    const double d0 = x[0] - m[0], d1 = x[1] - m[1];
    const double q = (c(1, 1) * d0 * d0 - 2 * c(0, 1) * d0 * d1 + c(0, 0) * d1 * d1) / det;
    return -0.5 * q - 0.5 * std::log(det) - std::log(2 * M_PI);
  };
  const double l00 = std::sqrt(c0(0, 0)), l10 = c0(1, 0) / l00,
               l11 = std::sqrt(c0(1, 1) - l10 * l10);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n(0, 1);
  double acc = 0;
  const int samples = 1000000;
  for (int i = 0; i < samples; ++i) {
    const double z0 = n(rng), z1 = n(rng);
    std::vector<double> x{m0[0] + l00 * z0, m0[1] + l10 * z0 + l11 * z1};
    acc += logpdf(x, m0, c0) - logpdf(x, m1, c1);
  }
  EXPECT_NEAR(acc / samples, exact, 0.02 * exact);
}

TEST(Kld, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t d = 1 + rep % 4;
    SquareMatrix a{d, rttdp::testing::random_spd(d, rng, 0.05)};
    SquareMatrix b{d, rttdp::testing::random_spd(d, rng, 0.05)};
    std::vector<double> m0(d), m1(d);
    for (auto& v : m0) v = n(rng);
    for (auto& v : m1) v = n(rng);
    EXPECT_GE(gaussian_kld(m0, a, m1, b), -1e-12);
  }
}

TEST(Kld, IndefiniteCovarianceThrows) {
  SquareMatrix bad{2, {1.0, 2.0, 2.0, 1.0}};
  std::vector<double> m{0, 0};
  EXPECT_THROW(gaussian_kld(m, bad, m, SquareMatrix::identity(2)), SingularCovarianceError);
}

TEST(Kld, TensorMatchesScalarPath) {
  std::mt19937_64 rng(10);
  auto s0 = rttdp::testing::random_spd(3, rng), s1 = rttdp::testing::random_spd(3, rng);
  std::vector<double> m0{0.1, 0.2, 0.3}, m1{-0.5, 0.0, 1.0};
  auto t = gaussian_kld(Tensor({3}, m0), Tensor({3, 3}, s0), Tensor({3}, m1), Tensor({3, 3}, s1));
  EXPECT_NEAR(t.item(), gaussian_kld(m0, SquareMatrix{3, s0}, m1, SquareMatrix{3, s1}), 1e-12);
}
