#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>

#include "rttdp/config.hpp"
#include "rttdp/errors.hpp"

namespace rttdp {
namespace {

namespace fs = std::filesystem;

// Line numbers below refer to this layout; keep one key per line where a test points.
const char* kBase = R"({
  "schema_version": 1,
  "data": {
    "generate": {
      "classes": 4,
      "form": "vector",
      "dim": 6,
      "samples_per_segment": 64,
      "segments": [
        {"kind": "gaussian-noise", "severity": 3},
        {"kind": "contrast", "severity": 5}
      ]
    }
  },
  "source": {"checkpoint": "src.ckpt"},
  "victims": [
    {"method": "tent-lite", "lr": 0.2},
    {"method": "eata-lite", "defenses": ["thresh"]}
  ],
  "attacks": ["none", "nhe", {"kind": "ble", "solver": "exact"}],
  "schedule": {"r": 0.5, "mode": "non-uniform", "batches_per_segment": 4, "batch_size": 8},
  "pgd": {"steps": 5},
  "surrogate": {"iterations": 3},
  "seeds": [3, 1]
})";

ExperimentConfig parse(const std::string& text, std::vector<ConfigOverride> ov = {}) {
  return parse_config(text, "cfg.json", "/base", {false, false}, ov);
}

// Returns the ConfigError message, or "" when parsing succeeds.
std::string error_of(const std::string& text, std::vector<ConfigOverride> ov = {}) {
  try {
    parse(text, ov);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  EXPECT_NE(at, std::string::npos) << from;
  return s.replace(at, from.size(), to);
}

TEST(Config, ParsesEverySection) {
  const ExperimentConfig c = parse(kBase);
  ASSERT_TRUE(c.synthetic);
  EXPECT_EQ(c.synthetic->classes, 4u);
  EXPECT_FALSE(c.synthetic->form.image);
  EXPECT_EQ(c.synthetic->form.dim, 6u);
  ASSERT_EQ(c.synthetic->segments.size(), 2u);
  EXPECT_EQ(c.synthetic->segments[1].kind, CorruptionKind::Contrast);
  EXPECT_EQ(c.checkpoint, fs::path("/base/src.ckpt"));
  ASSERT_EQ(c.victims.size(), 2u);
  EXPECT_EQ(c.victims[0].name, "tent-lite");
  EXPECT_DOUBLE_EQ(c.victims[0].tta.lr, 0.2);
  EXPECT_EQ(c.victims[1].name, "eata-lite+thresh");
  EXPECT_TRUE(c.victims[1].tta.defenses.entropy_threshold);
  ASSERT_EQ(c.attacks.size(), 3u);
  EXPECT_FALSE(c.attacks[0].attack);
  EXPECT_EQ(c.attacks[1].name, "nhe");
  EXPECT_EQ(c.attacks[1].attack->pgd.steps, 5u);
  EXPECT_EQ(c.attacks[2].name, "ble+exact");
  EXPECT_EQ(c.schedule.mode, FrequencyMode::NonUniform);
  EXPECT_EQ(c.surrogate.iterations, 3u);
  EXPECT_DOUBLE_EQ(c.surrogate.lr, 0.1);  // default
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 1}));
  EXPECT_EQ(c.output_dir, fs::path("/base/reports"));
  EXPECT_NE(c.echo.find("\"schema_version\":1"), std::string::npos);
}

TEST(Config, DiagnosticsCarryTheLine) {
  EXPECT_EQ(error_of(replace(kBase, "\"lr\": 0.2", "\"lr\": -0.2")), "cfg.json:17: /victims/0/lr: must be > 0");
  EXPECT_EQ(error_of(replace(kBase, "\"contrast\"", "\"fog\"")),
            "cfg.json:11: /data/generate/segments/1/kind: unknown corruption 'fog'");
  EXPECT_EQ(error_of(replace(kBase, "\"steps\": 5", "\"steps\": 5, \"stepz\": 2")),
            "cfg.json:22: /pgd/stepz: unknown key 'stepz'");
  EXPECT_EQ(error_of(replace(kBase, "[\"thresh\"]", "[\"thresh\", \"sam\"]")),
            "cfg.json:18: /victims/1/defenses/1: unknown defense 'sam' (expected thresh, aug, ema or restore)");
  EXPECT_EQ(error_of(replace(kBase, "\"seeds\": [3, 1]", "\"seeds\": [3, 3]")),
            "cfg.json:24: /seeds/1: duplicate seed 3");
  EXPECT_EQ(error_of(replace(kBase, "\"seeds\": [3, 1]", "\"seeds\": []")),
            "cfg.json:24: /seeds: expected a nonempty list of seeds");
  EXPECT_EQ(error_of(replace(kBase, "\"schema_version\": 1", "\"schema_version\": 2")),
            "cfg.json:2: /schema_version: unsupported schema version (this build reads 1)");
  EXPECT_EQ(error_of(replace(kBase, "\"mode\": \"non-uniform\"", "\"mode\": \"burst\"")),
            "cfg.json:21: /schedule/mode: unknown frequency mode 'burst'");
}

TEST(Config, MissingKeysPointAtTheParent) {
  EXPECT_EQ(error_of(replace(kBase, "\"source\": {\"checkpoint\": \"src.ckpt\"},\n", "")),
            "cfg.json:1: /: missing required key 'source'");
  EXPECT_EQ(error_of(replace(kBase, "\"method\": \"tent-lite\", ", "\"method\": \"tent-lite\", \"name\": \"eata-lite+thresh\", ")),
            "cfg.json:18: /victims/1: duplicate victim name 'eata-lite+thresh'; set \"name\"");
}

TEST(Config, DuplicateKeysRejected) {
  EXPECT_EQ(error_of(replace(kBase, "\"batch_size\": 8}", "\"batch_size\": 8, \"r\": 0.1}")),
            "cfg.json:21: /schedule/r: duplicate key");
}

TEST(Config, SyntaxErrorsReportLineAndColumn) {
  const std::string msg = error_of(replace(kBase, "\"dim\": 6,", "\"dim\": 6,,"));
  EXPECT_NE(msg.find("cfg.json:"), std::string::npos);
  EXPECT_NE(msg.find("line 7"), std::string::npos) << msg;
}

TEST(Config, PoolCapacityChecked) {
  // 64 samples per segment → 32 per pool; non-uniform r=0.5 needs 2×8 each.
  EXPECT_NO_THROW(parse(kBase));
  EXPECT_EQ(error_of(replace(kBase, "\"batches_per_segment\": 4", "\"batches_per_segment\": 10")),
            "cfg.json:8: /data/generate/samples_per_segment: segment 0 holds 64 samples; the schedule draws 40 "
            "adversary and 40 benign samples from its halves");
}

TEST(Config, FlagsOverrideConfigValues) {
  const ExperimentConfig c = parse(kBase, {{"/schedule/r", "0.25", "--r"},
                                           {"/seeds", "[7]", "--seeds"},
                                           {"/pgd/alpha", "0.02", "--alpha"}});
  EXPECT_DOUBLE_EQ(c.schedule.r, 0.25);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7}));
  EXPECT_DOUBLE_EQ(c.attacks[1].attack->pgd.alpha, 0.02);
  EXPECT_NE(c.echo.find("\"r\":0.25"), std::string::npos);  // the echo records the effective value
  EXPECT_EQ(error_of(kBase, {{"/schedule/r", "2", "--r"}}), "--r: /schedule/r: must lie in [0,1]");
}

TEST(Config, DefaultsApplyWhenSectionsAreAbsent) {
  std::string text = replace(kBase, "  \"pgd\": {\"steps\": 5},\n", "");
  text = replace(text, "  \"surrogate\": {\"iterations\": 3},\n", "");
  const ExperimentConfig c = parse(text);
  EXPECT_EQ(c.pgd.steps, PgdConfig{}.steps);
  EXPECT_EQ(c.surrogate.iterations, SurrogateSettings{}.iterations);
}

TEST(Config, ReferencedFilesMustExist) {
  try {
    parse_config(kBase, "cfg.json", "/nonexistent-dir", {true, true});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_TRUE(std::regex_search(std::string(e.what()), std::regex("^cfg\\.json:15: /source/checkpoint: ")))
        << e.what();
  }
}

TEST(Config, CsvDataFileIsImported) {
  const fs::path dir = fs::temp_directory_path() / "rttdp_config_test_csv";
  fs::create_directories(dir);
  std::ofstream(dir / "stream.csv") << "label,f1,f2\n0,0.1,0.2\n1,0.9,0.8\n";
  std::string text = replace(kBase, "\"data\": {", "\"data\": {\"file\": \"stream.csv\",");
  const ExperimentConfig c = parse_config(text, "cfg.json", dir, {false, true});
  const Dataset d = load_stream_data(c);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.form.dim, 2u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1}));
  fs::remove_all(dir);
}

TEST(Config, ReferenceConfigParses) {
  const fs::path ref = fs::path(RTTDP_SOURCE_DIR) / "configs" / "reference.json";
  const ExperimentConfig c = load_config(ref, {false, false});
  EXPECT_EQ(c.seeds.size(), 10u);
  EXPECT_EQ(c.victims.size(), 4u);
  EXPECT_EQ(c.attacks.size(), 4u);
  EXPECT_DOUBLE_EQ(c.pgd.budget, 0.3);
  EXPECT_DOUBLE_EQ(c.surrogate.lr, 0.1);
  EXPECT_EQ(c.surrogate.iterations, 10u);
}

}  // namespace
}  // namespace rttdp
