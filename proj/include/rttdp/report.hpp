#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rttdp/config.hpp"
#include "rttdp/protocol.hpp"

namespace rttdp {

inline constexpr int kReportSchemaVersion = 1;

// Results of a victim × attack × seed grid, in config order (victim-major, then attack, then seed).
struct GridResult {
  std::vector<std::string> victims;
  std::vector<std::string> attacks;
  std::vector<RunReport> runs;
};

// RTTDP_WORKERS when set to a positive integer, else the hardware thread count (at least 1).
std::size_t worker_count_from_env();

struct GridCell {
  std::size_t victim = 0;  // index into cfg.victims
  std::size_t attack = 0;  // index into cfg.attacks
  std::uint64_t seed = 0;
};

// Runs the cells on a bounded pool; each stream stays sequential and results
// keep the order of `cells`. The first failing cell's exception is rethrown
// after all workers stop.
std::vector<RunReport> run_cells(const ExperimentConfig& cfg, const Dataset& data, const Model& source,
                                 std::span<const GridCell> cells, std::size_t workers,
                                 const std::function<void(const RunReport&)>& on_done = {});

// The full victim × attack × seed product through run_cells.
GridResult run_grid(const ExperimentConfig& cfg, const Dataset& data, const Model& source,
                    std::size_t workers, const std::function<void(const RunReport&)>& on_done = {});

// Flat CSV: victim,attack,mode,r,seed,segment,error,benign_errors,benign_samples.
// One row per segment plus a row with segment "all" per run.
std::string to_csv(const std::vector<RunReport>& runs);

// Mean overall error per attack (rows) and victim (columns), averaged over seeds.
struct RankTable {
  std::vector<std::string> victims;
  std::vector<std::string> attacks;
  std::vector<std::vector<double>> mean_error;  // [attack][victim]
  std::vector<double> average_rank;             // per attack
};

RankTable rank_table(const GridResult& grid);
// Markdown table, attacks as rows and victims as columns, average rank last.
std::string format_rank_table(const RankTable& t);

std::string to_json(const GridResult& grid, const RankTable& ranks, const std::string& config_echo);
// FormatError naming the first field that breaks the report schema.
void validate_report_json(const std::string& text);

// One CSV row parsed back.
struct CsvRow {
  std::string victim, attack, mode, r, seed, segment;
  std::size_t benign_errors = 0, benign_samples = 0;
};

// FormatError on a malformed file or a header other than the one to_csv writes.
std::vector<CsvRow> read_csv(const std::filesystem::path& path);

// Concatenates CSV reports and recomputes the rank table from the "all" rows.
// ContractError on duplicate runs, mixed schedules or an incomplete table.
struct MergeResult {
  std::string csv;
  RankTable ranks;
};
MergeResult merge_reports(const std::vector<std::filesystem::path>& csvs);

}  // namespace rttdp
