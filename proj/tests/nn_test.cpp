#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "gradcheck.hpp"
#include "rttdp/errors.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/nn.hpp"
#include "rttdp/ops.hpp"

using namespace rttdp;
using rttdp::testing::random_tensor;

namespace {

ArchSpec small_cnn() {
  ArchSpec s = ArchSpec::cnn(3, 8, 8, 5);
  s.hidden = {4, 6};
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rttdp_nn_" + name);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ArchSpec, TagRoundTrips) {
  for (const ArchSpec& s : {ArchSpec::mlp(12, 4), small_cnn(), ArchSpec::cnn(3, 16, 16, 10)}) {
    ArchSpec back = ArchSpec::from_tag(s.tag());
    EXPECT_EQ(back.tag(), s.tag());
  }
  EXPECT_THROW(ArchSpec::from_tag("cnn:garbage"), FormatError);
}

TEST(Model, ZeroHeadGivesUniformPosteriors) {
  Model m(small_cnn(), 1);
  for (auto& p : m.parameters())
    if (p.name.rfind("head.", 0) == 0)
      for (auto& v : p.value.values_mut()) v = 0.0;
  std::mt19937_64 rng(2);
  Tensor x = random_tensor(m.arch().input_shape(4), rng, -1, 1, false);
  auto post = posteriors(m.forward(x, StatsMode::Eval).logits);
  for (double v : post.values()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(Model, TrainForwardWithFullMomentumThenEvalIsIdentical) {
  for (const ArchSpec& spec : {small_cnn(), ArchSpec::mlp(7, 3)}) {
    Model m(spec, 5);
    std::mt19937_64 rng(6);
    Tensor x = random_tensor(spec.input_shape(6), rng, -2, 2, false);
    auto train = m.forward(x, StatsMode::Train).logits;
    auto eval = m.forward(x, StatsMode::Eval).logits;
    EXPECT_LT(max_abs_diff(train.values(), eval.values()), 1e-8) << spec.tag();
  }
}

TEST(Model, TraceHasOneEntryPerBatchNorm) {
  Model m(small_cnn(), 1);
  std::mt19937_64 rng(2);
  Tensor x = random_tensor(m.arch().input_shape(3), rng, -1, 1, false);
  auto r = m.forward(x, StatsMode::Eval, true);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->layers.size(), m.bn_layer_count());
  EXPECT_EQ(r.trace->layers[0].shape(), (Shape{3, 4, 8, 8}));
  EXPECT_EQ(r.trace->layers[1].shape(), (Shape{3, 6, 4, 4}));
  EXPECT_FALSE(m.forward(x, StatsMode::Eval).trace.has_value());
}

TEST(Model, WrongInputShapeThrows) {
  Model m(small_cnn(), 1);
  EXPECT_THROW(m.forward(Tensor({2, 3, 7, 8}), StatsMode::Eval), ShapeError);
  EXPECT_THROW(m.forward(Tensor({1, 3, 8, 8}), StatsMode::Train), DegenerateBatchError);
}

TEST(Model, PartitionCoversEveryScalarExactlyOnce) {
  for (auto scope : {UpdateScope::BnAffine, UpdateScope::Full}) {
    Model m(small_cnn(), 1, scope);
    std::size_t total = 0;
    for (const auto& p : m.parameters()) total += p.value.numel();
    EXPECT_EQ(m.scalar_count(ParamRole::Updatable) + m.scalar_count(ParamRole::BnStat) +
                  m.scalar_count(ParamRole::Frozen),
              total);
    for (const auto& p : m.parameters()) {
      const bool stat = p.name.find("running_") != std::string::npos;
      EXPECT_EQ(p.role == ParamRole::BnStat, stat) << p.name;
    }
  }
  Model affine(small_cnn(), 1);
  EXPECT_EQ(affine.scalar_count(ParamRole::Updatable), 2u * (4 + 6));
}

TEST(Model, EvalForwardLeavesStatisticsUntouched) {
  Model m(small_cnn(), 1);
  const Model before = m;
  std::mt19937_64 rng(3);
  m.forward(random_tensor(m.arch().input_shape(5), rng, -1, 1, false), StatsMode::Eval);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(max_abs_diff(m.parameters()[i].value.values(), before.parameters()[i].value.values()),
              0.0);
  }
}

TEST(Model, FrozenSurrogateForwardDoesNotRefreshStats) {
  Model m(small_cnn(), 1);
  const Model before = m;
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(m.arch().input_shape(5), rng, -1, 1, false);
  m.forward(x, ForwardOptions{StatsMode::Train, false, false});
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(max_abs_diff(m.parameters()[i].value.values(), before.parameters()[i].value.values()),
              0.0);
  }
}

TEST(Model, CopyIsDeep) {
  Model a(small_cnn(), 1);
  Model b = a;
  b.parameter("bn1.gamma").value.values_mut()[0] = 42.0;
  EXPECT_EQ(a.parameter("bn1.gamma").value.values()[0], 1.0);
}

TEST(Model, GradScopeRestrictsLeaves) {
  Model m(small_cnn(), 1);
  m.set_grad_scope(GradScope::Updatable);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor(m.arch().input_shape(4), rng, -1, 1, false);
  backward(mean(softmax_entropy(m.forward(x, StatsMode::Train).logits)));
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(!p.value.grad().empty(), p.role == ParamRole::Updatable) << p.name;
  }
}

TEST(Model, AffineGradientsMatchFiniteDifferences) {
  Model m(ArchSpec::mlp(5, 3), 8);
  m.set_grad_scope(GradScope::Updatable);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor(m.arch().input_shape(6), rng, -1, 1, false);
  std::vector<Tensor> leaves;
  for (auto& p : m.parameters())
    if (p.role == ParamRole::Updatable) leaves.push_back(p.value);
  auto loss = [&] {
    return mean(softmax_entropy(m.forward(x, ForwardOptions{StatsMode::Train, false, false}).logits));
  };
  auto r = rttdp::testing::grad_check(loss, leaves, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Ema, MomentumExtremes) {
  Model online(small_cnn(), 1), other(small_cnn(), 2);
  EmaModel keep{other, 1.0};
  ema_update(keep, online);
  EmaModel copy{other, 0.0};
  ema_update(copy, online);
  for (std::size_t i = 0; i < online.parameters().size(); ++i) {
    EXPECT_EQ(max_abs_diff(keep.shadow.parameters()[i].value.values(),
                           other.parameters()[i].value.values()),
              0.0);
    EXPECT_EQ(max_abs_diff(copy.shadow.parameters()[i].value.values(),
                           online.parameters()[i].value.values()),
              0.0);
  }
}

TEST(Ema, ContractsTowardOnlineModel) {
  Model online(small_cnn(), 1);
  EmaModel ema{Model(small_cnn(), 2), 0.999};
  auto dist = [&] {
    double d = 0;
    for (std::size_t i = 0; i < online.parameters().size(); ++i)
      d = std::max(d, max_abs_diff(ema.shadow.parameters()[i].value.values(),
                                   online.parameters()[i].value.values()));
    return d;
  };
  const double d0 = dist();
  ema_update(ema, online);
  EXPECT_NEAR(dist(), 0.999 * d0, 1e-12);
  EXPECT_THROW(ema_update(ema, Model(ArchSpec::mlp(3, 2), 1)), ContractError);
}

TEST(Restore, ProbabilityExtremesAndBinomialCount) {
  Model source(small_cnn(), 1);
  auto perturb = [](Model& m) {
    for (auto& p : m.parameters())
      for (auto& v : p.value.values_mut()) v += 1.0;
  };
  std::mt19937_64 rng(12);

  Model m = source;
  perturb(m);
  EXPECT_EQ(stochastic_restore(m, source, 0.0, rng), 0u);

  perturb(m);
  const std::size_t nu = m.scalar_count(ParamRole::Updatable);
  EXPECT_EQ(stochastic_restore(m, source, 1.0, rng), nu);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& p = m.parameters()[i];
    const double d = max_abs_diff(p.value.values(), source.parameters()[i].value.values());
    if (p.role == ParamRole::Updatable) EXPECT_EQ(d, 0.0);
    else EXPECT_GT(d, 0.5);
  }

  // Large θᵘ so the binomial spread is meaningful.
  ArchSpec wide = ArchSpec::mlp(4, 3);
  wide.hidden = {500, 500};
  Model big(wide, 1, UpdateScope::Full), big_src = big;
  const std::size_t n = big.scalar_count(ParamRole::Updatable);
  const double p = 0.01, expected = p * n, sd = std::sqrt(n * p * (1 - p));
  const auto k = static_cast<double>(stochastic_restore(big, big_src, p, rng));
  EXPECT_LT(std::abs(k - expected), 4 * sd) << "n=" << n;
  EXPECT_THROW(stochastic_restore(big, big_src, 1.5, rng), ContractError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m(small_cnn(), 9);
  std::mt19937_64 rng(1);
  m.forward(random_tensor(m.arch().input_shape(4), rng, -1, 1, false), StatsMode::Train);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  ASSERT_EQ(back.tag(), m.tag());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].role, m.parameters()[i].role);
    EXPECT_EQ(max_abs_diff(back.parameters()[i].value.values(), m.parameters()[i].value.values()),
              0.0);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileRejectedWithoutPartialLoad) {
  Model m(small_cnn(), 9);
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(m, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 13);
  Model target(small_cnn(), 3);
  const Model before = target;
  EXPECT_THROW(load_checkpoint(target, path), FormatError);
  for (std::size_t i = 0; i < target.parameters().size(); ++i)
    EXPECT_EQ(max_abs_diff(target.parameters()[i].value.values(),
                           before.parameters()[i].value.values()),
              0.0);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ArchitectureMismatchRejected) {
  Model m(small_cnn(), 9);
  const auto path = temp_path("tag.ckpt");
  save_checkpoint(m, path);
  Model other(ArchSpec::mlp(4, 5), 1);
  EXPECT_THROW(load_checkpoint(other, path), FormatError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
