#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "rttdp/errors.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/protocol.hpp"

namespace rttdp {
namespace {

TEST(Schedule, ZeroBudgetHasNoAdversarySlots) {
  for (auto mode : {FrequencyMode::Uniform, FrequencyMode::NonUniform}) {
    for (std::size_t ts : {1u, 7u, 20u}) {
      const auto s = build_schedule(3, {ts, 8, 0.0, mode});
      EXPECT_EQ(s.slots.size(), 3 * ts);
      EXPECT_EQ(s.adversary_slots(), 0u);
    }
  }
}

TEST(Schedule, RealizedFractionWithinOneOverT) {
  for (auto mode : {FrequencyMode::Uniform, FrequencyMode::NonUniform}) {
    for (std::size_t segments = 1; segments <= 4; ++segments) {
      for (std::size_t ts = 1; ts <= 12; ++ts) {
        for (int i = 0; i <= 100; ++i) {
          const double r = i / 100.0;
          const auto s = build_schedule(segments, {ts, 4, r, mode});
          const double t = static_cast<double>(segments * ts);
          ASSERT_LE(std::abs(s.realized_fraction() - r), 1.0 / t + 1e-12)
              << mode_name(mode) << " r=" << r << " T=" << t;
        }
      }
    }
  }
}

TEST(Schedule, UniformHalfBudgetAlternates) {
  const auto s = build_schedule(2, {10, 4, 0.5, FrequencyMode::Uniform});
  for (std::size_t t = 0; t < s.slots.size(); ++t) EXPECT_EQ(s.slots[t].adversary, t % 2 == 1) << t;
}

TEST(Schedule, UniformSpacingDiffersByAtMostOne) {
  for (double r : {0.2, 0.3, 0.45, 0.7}) {
    const std::size_t ts = 20;
    const auto s = build_schedule(1, {ts, 4, r, FrequencyMode::Uniform});
    std::vector<std::size_t> at;
    for (std::size_t j = 0; j < ts; ++j)
      if (s.slots[j].adversary) at.push_back(j);
    ASSERT_GE(at.size(), 2u);
    std::size_t lo = ts, hi = 0;
    for (std::size_t i = 1; i < at.size(); ++i) {
      lo = std::min(lo, at[i] - at[i - 1]);
      hi = std::max(hi, at[i] - at[i - 1]);
    }
    EXPECT_LE(hi - lo, 1u) << "r=" << r;
  }
}

TEST(Schedule, NonUniformFrontLoadsEachSegment) {
  const std::size_t ts = 9;
  const auto s = build_schedule(3, {ts, 4, 0.4, FrequencyMode::NonUniform});
  for (std::size_t seg = 0; seg < 3; ++seg) {
    bool seen_benign = false;
    for (std::size_t j = 0; j < ts; ++j) {
      const Slot& slot = s.slots[seg * ts + j];
      EXPECT_EQ(slot.segment, seg);
      if (!slot.adversary) seen_benign = true;
      else EXPECT_FALSE(seen_benign) << "segment " << seg << " slot " << j;
    }
  }
}

TEST(Schedule, PoolBatchesCountUpPerOrigin) {
  const auto s = build_schedule(2, {7, 4, 0.6, FrequencyMode::Uniform});
  for (std::size_t seg = 0; seg < 2; ++seg) {
    std::size_t adv = 0, ben = 0;
    for (const auto& slot : s.slots) {
      if (slot.segment != seg) continue;
      EXPECT_EQ(slot.pool_batch, slot.adversary ? adv++ : ben++);
    }
  }
}

TEST(Schedule, RejectsBadConfig) {
  EXPECT_THROW(build_schedule(1, {4, 4, 1.5, FrequencyMode::Uniform}), ConfigError);
  EXPECT_THROW(build_schedule(1, {4, 4, -0.1, FrequencyMode::Uniform}), ConfigError);
  EXPECT_THROW(build_schedule(1, {0, 4, 0.5, FrequencyMode::Uniform}), ConfigError);
  EXPECT_THROW(mode_from_name("bursty"), ConfigError);
}

TEST(Auditor, CleanRecordPasses) {
  QueryAuditor a;
  std::vector<std::size_t> benign{1, 3};
  a.register_benign(benign);
  std::vector<std::size_t> adv{0, 2};
  a.open(0, Origin::Adversary);
  a.surrogate_use(adv, 5);
  a.online_query(1);
  a.open(1, Origin::Benign);
  a.online_query(2);
  EXPECT_NO_THROW(a.verify());
  const auto s = a.summary();
  EXPECT_TRUE(s.passed);
  EXPECT_EQ(s.batches, 2u);
  EXPECT_EQ(s.online_queries, 2u);
  EXPECT_EQ(s.surrogate_forwards, 5u);
}

TEST(Auditor, EachViolationIsCaught) {
  std::vector<std::size_t> benign{7};
  auto fresh = [&] {
    QueryAuditor a;
    a.register_benign(benign);
    return a;
  };
  {
    QueryAuditor a = fresh();
    a.open(0, Origin::Benign);
    a.online_query(1);
    a.parameter_read();
    EXPECT_THROW(a.verify(), AuditError);
    EXPECT_FALSE(a.summary().passed);
  }
  {
    QueryAuditor a = fresh();
    a.parameter_read();  // before the stream starts
    a.open(0, Origin::Benign);
    a.online_query(1);
    EXPECT_THROW(a.verify(), AuditError);
  }
  {
    QueryAuditor a = fresh();
    a.open(0, Origin::Adversary);
    a.online_query(1);
    a.online_query(1);
    EXPECT_THROW(a.verify(), AuditError);
  }
  {
    QueryAuditor a = fresh();
    a.open(0, Origin::Adversary);
    EXPECT_THROW(a.verify(), AuditError);  // no query at all
  }
  {
    QueryAuditor a = fresh();
    a.open(0, Origin::Adversary);
    a.online_query(1);
    a.surrogate_use(benign, 1);
    EXPECT_THROW(a.verify(), AuditError);
  }
  {
    QueryAuditor a = fresh();
    a.open(0, Origin::Benign);
    a.online_query(1);
    std::vector<std::size_t> adv{0};
    a.surrogate_use(adv, 1);
    EXPECT_THROW(a.verify(), AuditError);
  }
  {
    QueryAuditor a = fresh();
    EXPECT_THROW(a.online_query(1), AuditError);
    std::vector<std::size_t> adv{0};
    EXPECT_THROW(a.surrogate_use(adv, 1), AuditError);
  }
}

TEST(Auditor, EndpointParameterReadIsLogged) {
  const Model source(ArchSpec::mlp(4, 3), 1);
  QueryAuditor a;
  OnlineEndpoint online(source, TtaConfig{}, 0, a);
  a.open(0, Origin::Benign);
  online.query(Tensor({4, 4}, 0.5));
  EXPECT_NO_THROW(a.verify());
  online.read_parameters();
  EXPECT_THROW(a.verify(), AuditError);
}

// Small image world: random-init source, short PGD. Fast enough to run many streams.
class StreamFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticSpec s;
    s.classes = 4;
    s.form = InputForm{true, 3, 8, 8, 0};
    s.noise = 0.2;
    s.samples_per_segment = 2 * kTs * kNb;
    s.segments = {{CorruptionKind::GaussianNoise, 5}, {CorruptionKind::Contrast, 3}};
    s.seed = 11;
    data = generate(s);
    source = Model(default_arch(s), 5);
  }

  RunSpec spec(std::optional<AttackKind> attack, FrequencyMode mode = FrequencyMode::Uniform,
               std::uint64_t seed = 0) {
    RunSpec r;
    r.data = &data;
    r.source = &source;
    r.victim.lr = 0.1;
    if (attack) {
      AttackConfig a = AttackConfig::defaults_for(*attack);
      a.pgd.steps = 3;
      a.pgd.alpha = 0.1;
      r.attack = a;
    }
    r.schedule = {kTs, kNb, 0.5, mode};
    r.surrogate.iterations = 2;
    r.seed = seed;
    return r;
  }

  static constexpr std::size_t kTs = 4, kNb = 6;
  Dataset data;
  Model source{ArchSpec::mlp(1, 2), 0};
};

TEST_F(StreamFixture, UniformAndNonUniformPoisonTheSameBatches) {
  const RunReport u = run_stream(spec(AttackKind::Nhe, FrequencyMode::Uniform, 3));
  const RunReport n = run_stream(spec(AttackKind::Nhe, FrequencyMode::NonUniform, 3));
  EXPECT_TRUE(u.audit.passed);
  EXPECT_TRUE(n.audit.passed);
  auto sorted = [](std::vector<std::vector<std::size_t>> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  ASSERT_EQ(u.adversary_batches.size(), 4u);
  EXPECT_EQ(sorted(u.adversary_batches), sorted(n.adversary_batches));
  // Same contents, different slots: uniform interleaves, non-uniform front-loads.
  const auto su = build_schedule(2, {kTs, kNb, 0.5, FrequencyMode::Uniform});
  const auto sn = build_schedule(2, {kTs, kNb, 0.5, FrequencyMode::NonUniform});
  bool differ = false;
  for (std::size_t t = 0; t < su.slots.size(); ++t) differ |= su.slots[t].adversary != sn.slots[t].adversary;
  EXPECT_TRUE(differ);
}

TEST_F(StreamFixture, GreyBoxAuditAndBudgetHold) {
  for (AttackKind k : {AttackKind::Nhe, AttackKind::Ble, AttackKind::Dia}) {
    const RunReport r = run_stream(spec(k));
    EXPECT_TRUE(r.audit.passed) << attack_name(k);
    EXPECT_EQ(r.audit.parameter_reads, 0u);
    EXPECT_EQ(r.audit.benign_leaks, 0u);
    EXPECT_EQ(r.audit.batches, 2 * kTs);
    EXPECT_EQ(r.audit.min_queries_per_batch, 1u);
    EXPECT_EQ(r.audit.max_queries_per_batch, 1u);
    EXPECT_GT(r.audit.surrogate_forwards, 0u);
    EXPECT_LE(r.max_abs_eps, 0.3 + 1e-9);
    EXPECT_TRUE(r.box_ok);
    EXPECT_EQ(r.poisoned_batches, 4u);
  }
}

TEST_F(StreamFixture, AdversaryNeverTouchesBenignPool) {
  const RunReport r = run_stream(spec(AttackKind::Nhe));
  const auto pools = split_pools(data);
  std::set<std::size_t> benign;
  for (const auto& p : pools) benign.insert(p.benign.begin(), p.benign.end());
  for (const auto& batch : r.adversary_batches)
    for (auto id : batch) EXPECT_EQ(benign.count(id), 0u) << id;
}

TEST_F(StreamFixture, ErrorCountsBenignSamplesOnly) {
  const RunReport r = run_stream(spec(AttackKind::Nhe));
  std::size_t total = 0, wrong = 0;
  for (const auto& s : r.segments) {
    EXPECT_EQ(s.benign_samples, 2 * kNb);  // two benign slots per segment
    total += s.benign_samples;
    wrong += s.benign_errors;
  }
  EXPECT_EQ(total, 4 * kNb);
  EXPECT_DOUBLE_EQ(r.error, 100.0 * wrong / total);
  EXPECT_DOUBLE_EQ(r.realized_fraction, 0.5);
}

TEST_F(StreamFixture, NoAttackMatchesCleanContinualReplay) {
  const std::uint64_t seed = 4;
  const RunReport r = run_stream(spec(std::nullopt, FrequencyMode::Uniform, seed));
  EXPECT_EQ(r.attack, "none");
  EXPECT_EQ(r.poisoned_batches, 0u);

  // Independent replay: same shuffles, clean adversary batches, online predictions.
  auto pools = split_pools(data);
  std::mt19937_64 rng(seed);
  for (auto& p : pools) {
    std::shuffle(p.adversary.begin(), p.adversary.end(), rng);
    std::shuffle(p.benign.begin(), p.benign.end(), rng);
  }
  TtaConfig victim;
  victim.lr = 0.1;
  TtaState state = make_tta_state(source, victim, seed);
  std::size_t wrong = 0, total = 0;
  for (std::size_t seg = 0; seg < 2; ++seg) {
    std::size_t adv = 0, ben = 0;
    for (std::size_t j = 0; j < kTs; ++j) {
      const bool adversary = j % 2 == 1;
      const auto& pool = adversary ? pools[seg].adversary : pools[seg].benign;
      std::size_t& k = adversary ? adv : ben;
      std::span<const std::size_t> ids(pool.data() + k * kNb, kNb);
      ++k;
      const AdaptResult res = adapt_step(state, data.batch(ids), victim);
      if (adversary) continue;
      const auto pred = row_argmax(res.posteriors.values(), data.classes);
      for (std::size_t i = 0; i < kNb; ++i) {
        wrong += pred[i] != data.labels[ids[i]];
        ++total;
      }
    }
  }
  EXPECT_DOUBLE_EQ(r.error, 100.0 * wrong / total);
}

TEST_F(StreamFixture, DeterministicPerSeed) {
  const RunReport a = run_stream(spec(AttackKind::Ble, FrequencyMode::Uniform, 9));
  const RunReport b = run_stream(spec(AttackKind::Ble, FrequencyMode::Uniform, 9));
  EXPECT_EQ(a.error, b.error);
  EXPECT_EQ(a.adversary_batches, b.adversary_batches);
  EXPECT_EQ(a.mean_feature_kld, b.mean_feature_kld);
}

TEST_F(StreamFixture, RejectsUndersizedPools) {
  RunSpec r = spec(AttackKind::Nhe);
  r.schedule.batch_size = kNb * 3;
  EXPECT_THROW(run_stream(r), ContractError);
  r = spec(AttackKind::Nhe);
  r.source = nullptr;
  EXPECT_THROW(run_stream(r), ContractError);
}

TEST(AverageRank, TotalOrder) {
  EXPECT_EQ(average_rank({{30.0}, {20.0}, {10.0}}), (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(AverageRank, TiesShareTheMeanRank) {
  EXPECT_EQ(average_rank({{20.0}, {20.0}, {5.0}}), (std::vector<double>{1.5, 1.5, 3.0}));
  EXPECT_EQ(average_rank({{7.0}, {7.0}, {7.0}}), (std::vector<double>{2.0, 2.0, 2.0}));
}

TEST(AverageRank, MatchesBruteForceCounting) {
  // Rank of a = 1 + #(strictly larger) + #(equal others)/2, averaged over columns.
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> u(0, 4);  // coarse values so ties occur
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::vector<double>> e(3, std::vector<double>(3));
    for (auto& row : e)
      for (auto& v : row) v = u(rng);
    const auto got = average_rank(e);
    for (std::size_t a = 0; a < 3; ++a) {
      double expect = 0.0;
      for (std::size_t v = 0; v < 3; ++v) {
        double rank = 1.0;
        for (std::size_t b = 0; b < 3; ++b) {
          if (b == a) continue;
          if (e[b][v] > e[a][v]) rank += 1.0;
          else if (e[b][v] == e[a][v]) rank += 0.5;
        }
        expect += rank / 3.0;
      }
      EXPECT_NEAR(got[a], expect, 1e-12);
    }
  }
}

TEST(AverageRank, IncompleteTableRejected) {
  EXPECT_THROW(average_rank({{1.0, 2.0}, {3.0}}), ContractError);
  EXPECT_THROW(average_rank({}), ContractError);
  EXPECT_THROW(average_rank({{1.0}, {std::nan("")}}), ContractError);
}

}  // namespace
}  // namespace rttdp
