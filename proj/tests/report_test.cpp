#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "rttdp/errors.hpp"
#include "rttdp/report.hpp"

namespace rttdp {
namespace {

namespace fs = std::filesystem;

RunReport fake_run(const std::string& victim, const std::string& attack, std::uint64_t seed,
                   std::size_t wrong0, std::size_t wrong1) {
  RunReport r;
  r.victim = victim;
  r.attack = attack;
  r.mode = "uniform";
  r.r = 0.5;
  r.seed = seed;
  r.segments = {{"gaussian-noise", 5, 40, wrong0}, {"contrast", 5, 40, wrong1}};
  r.error = 100.0 * static_cast<double>(wrong0 + wrong1) / 80.0;
  r.audit.passed = true;
  return r;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("rttdp_report_test_" + std::to_string(::getpid()) + "_" + name);
}

void write(const fs::path& p, const std::string& body) {
  std::ofstream os(p);
  os << body;
}

TEST(Csv, RowsPerSegmentPlusOverall) {
  const std::string csv = to_csv({fake_run("tent-lite", "nhe", 0, 10, 30)});
  EXPECT_EQ(csv,
            "victim,attack,mode,r,seed,segment,error,benign_errors,benign_samples\n"
            "tent-lite,nhe,uniform,0.5,0,gaussian-noise-5,25.0000,10,40\n"
            "tent-lite,nhe,uniform,0.5,0,contrast-5,75.0000,30,40\n"
            "tent-lite,nhe,uniform,0.5,0,all,50.0000,40,80\n");
}

TEST(Csv, QuotedFieldsRoundTrip) {
  const auto path = temp_path("quoted.csv");
  write(path, to_csv({fake_run("tent, \"odd\"", "nhe", 4, 1, 2)}));
  const auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].victim, "tent, \"odd\"");
  EXPECT_EQ(rows[2].segment, "all");
  EXPECT_EQ(rows[2].benign_errors, 3u);
  EXPECT_EQ(rows[2].benign_samples, 80u);
  fs::remove(path);
}

TEST(Csv, MalformedFilesRejected) {
  const auto path = temp_path("bad.csv");
  write(path, "victim,attack\n");
  EXPECT_THROW(read_csv(path), FormatError);
  write(path, "victim,attack,mode,r,seed,segment,error,benign_errors,benign_samples\na,b,c,d,e,f,g,x,1\n");
  EXPECT_THROW(read_csv(path), FormatError);
  write(path, "victim,attack,mode,r,seed,segment,error,benign_errors,benign_samples\na,b,c,d,e,f,g,5,1\n");
  EXPECT_THROW(read_csv(path), FormatError);
  fs::remove(path);
  EXPECT_THROW(read_csv(path), FormatError);
}

GridResult fake_grid(const std::vector<std::string>& victims, const std::vector<std::string>& attacks,
                     std::size_t seeds) {
  GridResult g{victims, attacks, {}};
  std::size_t k = 0;
  for (const auto& v : victims)
    for (const auto& a : attacks)
      for (std::size_t s = 0; s < seeds; ++s, ++k) g.runs.push_back(fake_run(v, a, s, (k * 7) % 40, (k * 13) % 40));
  return g;
}

TEST(RankTable, MeansOverSeedsAndRanksPerVictim) {
  GridResult g{{"v1", "v2"}, {"none", "nhe"}, {}};
  g.runs = {fake_run("v1", "none", 0, 4, 4), fake_run("v1", "none", 1, 8, 8), fake_run("v1", "nhe", 0, 20, 20),
            fake_run("v1", "nhe", 1, 20, 20), fake_run("v2", "none", 0, 30, 30), fake_run("v2", "none", 1, 30, 30),
            fake_run("v2", "nhe", 0, 2, 2),   fake_run("v2", "nhe", 1, 2, 2)};
  const RankTable t = rank_table(g);
  EXPECT_DOUBLE_EQ(t.mean_error[0][0], 15.0);
  EXPECT_DOUBLE_EQ(t.mean_error[1][0], 50.0);
  EXPECT_EQ(t.average_rank, (std::vector<double>{1.5, 1.5}));
  const std::string md = format_rank_table(t);
  EXPECT_EQ(md,
            "| attack | v1 | v2 | avg. rank |\n"
            "|---|---:|---:|---:|\n"
            "| none | 15.00 | 75.00 | 1.50 |\n"
            "| nhe | 50.00 | 5.00 | 1.50 |\n");
}

TEST(RankTable, IncompleteGridIsContractError) {
  GridResult g = fake_grid({"v1", "v2"}, {"none", "nhe"}, 1);
  g.runs.pop_back();
  EXPECT_THROW(rank_table(g), ContractError);
}

TEST(Merge, DisjointGridsEqualTheUnion) {
  const GridResult all = fake_grid({"v1", "v2", "v3"}, {"none", "nhe", "ble"}, 2);
  // Split by attack: {none, nhe} and {ble}.
  GridResult a{all.victims, {"none", "nhe"}, {}}, b{all.victims, {"ble"}, {}};
  for (const auto& r : all.runs) (r.attack == "ble" ? b : a).runs.push_back(r);
  const auto pa = temp_path("a.csv"), pb = temp_path("b.csv");
  write(pa, to_csv(a.runs));
  write(pb, to_csv(b.runs));
  const MergeResult m = merge_reports({pa, pb});
  const RankTable expect = rank_table(all);
  ASSERT_EQ(m.ranks.attacks, (std::vector<std::string>{"none", "nhe", "ble"}));
  EXPECT_EQ(m.ranks.victims, expect.victims);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(m.ranks.average_rank[i], expect.average_rank[i]);
    for (std::size_t v = 0; v < 3; ++v) EXPECT_DOUBLE_EQ(m.ranks.mean_error[i][v], expect.mean_error[i][v]);
  }
  // Same rows, possibly reordered.
  auto lines = [](const std::string& s) {
    std::multiset<std::string> out;
    std::istringstream is(s);
    for (std::string l; std::getline(is, l);) out.insert(l);
    return out;
  };
  EXPECT_EQ(lines(m.csv), lines(to_csv(all.runs)));
  EXPECT_THROW(merge_reports({pa, pa}), ContractError);  // duplicated runs
  fs::remove(pa);
  fs::remove(pb);
}

TEST(Merge, MixedSchedulesRejected) {
  RunReport x = fake_run("v", "none", 0, 1, 1), y = fake_run("v", "nhe", 0, 1, 1);
  y.mode = "non-uniform";
  const auto pa = temp_path("m1.csv"), pb = temp_path("m2.csv");
  write(pa, to_csv({x}));
  write(pb, to_csv({y}));
  EXPECT_THROW(merge_reports({pa, pb}), ContractError);
  fs::remove(pa);
  fs::remove(pb);
}

TEST(Json, ReportValidatesAgainstSchema) {
  const GridResult g = fake_grid({"v1"}, {"none", "nhe"}, 2);
  const std::string text = to_json(g, rank_table(g), R"({"schema_version":1})");
  EXPECT_NO_THROW(validate_report_json(text));
  EXPECT_THROW(validate_report_json("{}"), FormatError);
  EXPECT_THROW(validate_report_json("not json"), FormatError);
  GridResult bad = g;
  bad.runs[0].audit.passed = false;
  EXPECT_THROW(validate_report_json(to_json(bad, rank_table(bad), "{}")), FormatError);
}

TEST(Workers, EnvironmentVariable) {
  ::setenv("RTTDP_WORKERS", "3", 1);
  EXPECT_EQ(worker_count_from_env(), 3u);
  ::setenv("RTTDP_WORKERS", "zero", 1);
  EXPECT_THROW(worker_count_from_env(), ConfigError);
  ::setenv("RTTDP_WORKERS", "0", 1);
  EXPECT_THROW(worker_count_from_env(), ConfigError);
  ::unsetenv("RTTDP_WORKERS");
  EXPECT_GE(worker_count_from_env(), 1u);
}

TEST(Grid, WorkerCountDoesNotChangeResults) {
  ExperimentConfig cfg;
  SyntheticSpec s;
  s.classes = 3;
  s.form = InputForm{false, 0, 0, 0, 5};
  s.samples_per_segment = 48;
  s.segments = {{CorruptionKind::GaussianNoise, 4}};
  const Dataset data = generate(s);
  const Model source(default_arch(s), 2);
  cfg.victims = {{"tent-lite", TtaConfig{}}};
  AttackConfig nhe = AttackConfig::defaults_for(AttackKind::Nhe);
  nhe.pgd.steps = 2;
  cfg.attacks = {{"none", std::nullopt}, {"nhe", nhe}};
  cfg.schedule = {4, 6, 0.5, FrequencyMode::Uniform};
  cfg.surrogate.iterations = 1;
  cfg.seeds = {0, 1, 2};
  const GridResult one = run_grid(cfg, data, source, 1);
  const GridResult three = run_grid(cfg, data, source, 3);
  ASSERT_EQ(one.runs.size(), 6u);
  EXPECT_EQ(to_csv(one.runs), to_csv(three.runs));
  EXPECT_EQ(one.runs[3].attack, "nhe");
  EXPECT_EQ(one.runs[3].seed, 0u);
}

}  // namespace
}  // namespace rttdp
