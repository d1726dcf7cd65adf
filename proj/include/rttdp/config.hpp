#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rttdp/data.hpp"
#include "rttdp/forge.hpp"
#include "rttdp/protocol.hpp"
#include "rttdp/tta.hpp"

namespace rttdp {

inline constexpr int kConfigSchemaVersion = 1;

struct VictimEntry {
  std::string name;  // column label in reports
  TtaConfig tta;
};

struct AttackEntry {
  std::string name;                   // row label in reports
  std::optional<AttackConfig> attack;  // empty for the no-attack baseline
};

// One experiment grid. Relative paths are resolved against the config file's directory.
struct ExperimentConfig {
  std::optional<SyntheticSpec> synthetic;  // data.generate
  std::filesystem::path data_file;        // data.file; the stream source when set
  std::filesystem::path checkpoint;       // source.checkpoint
  PretrainConfig pretrain;                // source.pretrain
  std::vector<VictimEntry> victims;
  std::vector<AttackEntry> attacks;
  ScheduleConfig schedule;
  PgdConfig pgd;
  SurrogateSettings surrogate;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;
  std::string echo;  // canonical JSON of the parsed document, embedded in reports
};

// Which referenced files must already exist.
struct FileChecks {
  bool checkpoint = true;
  bool data_file = true;
};

// A command-line value replacing the document entry at `pointer` (created if absent).
struct ConfigOverride {
  std::string pointer;     // e.g. "/schedule/r"
  std::string json_value;  // parsed as JSON, e.g. "0.25" or "\"uniform\""
  std::string flag;        // reported in diagnostics, e.g. "--r"
};

// ConfigError messages read "<origin>:<line>: <json pointer>: <problem>".
ExperimentConfig parse_config(const std::string& text, const std::string& origin,
                              const std::filesystem::path& base_dir, FileChecks checks = {},
                              const std::vector<ConfigOverride>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, FileChecks checks = {},
                             const std::vector<ConfigOverride>& overrides = {});

// Stream dataset of a config: data.file when set (a .csv file goes through import_csv),
// otherwise generated.
Dataset load_stream_data(const ExperimentConfig& cfg);

// Throws ConfigError when a segment pool cannot feed the schedule.
void check_pool_capacity(const Dataset& data, const ScheduleConfig& schedule);

}  // namespace rttdp
