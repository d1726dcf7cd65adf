#include "rttdp/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "rttdp/errors.hpp"

namespace rttdp {

namespace {

const char* kCsvHeader = "victim,attack,mode,r,seed,segment,error,benign_errors,benign_samples";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

double percent(std::size_t wrong, std::size_t total) {
  return total ? 100.0 * static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

// Mean per (attack, victim) of per-run errors, in first-appearance order.
struct Accumulator {
  std::vector<std::string> victims, attacks;
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> sums;

  void add(const std::string& attack, const std::string& victim, double error) {
    if (std::find(victims.begin(), victims.end(), victim) == victims.end()) victims.push_back(victim);
    if (std::find(attacks.begin(), attacks.end(), attack) == attacks.end()) attacks.push_back(attack);
    auto& s = sums[{attack, victim}];
    s.first += error;
    ++s.second;
  }

  RankTable table() const {
    RankTable t;
    t.victims = victims;
    t.attacks = attacks;
    t.mean_error.assign(attacks.size(), std::vector<double>(victims.size(), std::nan("")));
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      for (std::size_t v = 0; v < victims.size(); ++v) {
        auto it = sums.find({attacks[a], victims[v]});
        if (it == sums.end()) {
          throw ContractError("rank table: attack '" + attacks[a] + "' has no runs on victim '" + victims[v] + "'");
        }
        t.mean_error[a][v] = it->second.first / static_cast<double>(it->second.second);
      }
    }
    t.average_rank = average_rank(t.mean_error);
    return t;
  }
};

}  // namespace

std::size_t worker_count_from_env() {
  if (const char* env = std::getenv("RTTDP_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw ConfigError("RTTDP_WORKERS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<RunReport> run_cells(const ExperimentConfig& cfg, const Dataset& data, const Model& source,
                                 std::span<const GridCell> cells, std::size_t workers,
                                 const std::function<void(const RunReport&)>& on_done) {
  for (const auto& c : cells) {
    if (c.victim >= cfg.victims.size() || c.attack >= cfg.attacks.size()) {
      throw ContractError("run_cells: cell refers to a victim or attack outside the config");
    }
  }
  std::vector<RunReport> runs(cells.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size() || stop.load()) return;
      const GridCell& c = cells[i];
      try {
        RunSpec spec;
        spec.data = &data;
        spec.source = &source;
        spec.victim = cfg.victims[c.victim].tta;
        spec.attack = cfg.attacks[c.attack].attack;
        spec.schedule = cfg.schedule;
        spec.surrogate = cfg.surrogate;
        spec.seed = c.seed;
        RunReport r = run_stream(spec);
        r.victim = cfg.victims[c.victim].name;
        r.attack = cfg.attacks[c.attack].name;
        std::lock_guard<std::mutex> lock(mu);
        runs[i] = std::move(r);
        if (on_done) on_done(runs[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        stop = true;
        return;
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return runs;
}

GridResult run_grid(const ExperimentConfig& cfg, const Dataset& data, const Model& source,
                    std::size_t workers, const std::function<void(const RunReport&)>& on_done) {
  std::vector<GridCell> cells;
  for (std::size_t v = 0; v < cfg.victims.size(); ++v)
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a)
      for (auto seed : cfg.seeds) cells.push_back({v, a, seed});
  GridResult g;
  for (const auto& v : cfg.victims) g.victims.push_back(v.name);
  for (const auto& a : cfg.attacks) g.attacks.push_back(a.name);
  g.runs = run_cells(cfg, data, source, cells, workers, on_done);
  return g;
}

std::string to_csv(const std::vector<RunReport>& runs) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : runs) {
    const std::string prefix = csv_field(r.victim) + ',' + csv_field(r.attack) + ',' + r.mode + ',' +
                               fmt("%g", r.r) + ',' + std::to_string(r.seed) + ',';
    std::size_t wrong = 0, total = 0;
    for (const auto& s : r.segments) {
      os << prefix << csv_field(s.name + "-" + std::to_string(s.severity)) << ',' << fmt("%.4f", s.error()) << ','
         << s.benign_errors << ',' << s.benign_samples << '\n';
      wrong += s.benign_errors;
      total += s.benign_samples;
    }
    os << prefix << "all," << fmt("%.4f", percent(wrong, total)) << ',' << wrong << ',' << total << '\n';
  }
  return os.str();
}

RankTable rank_table(const GridResult& grid) {
  Accumulator acc;
  acc.victims = grid.victims;
  acc.attacks = grid.attacks;
  for (const auto& r : grid.runs) acc.add(r.attack, r.victim, r.error);
  return acc.table();
}

std::string format_rank_table(const RankTable& t) {
  std::ostringstream os;
  os << "| attack |";
  for (const auto& v : t.victims) os << ' ' << v << " |";
  os << " avg. rank |\n|---|";
  for (std::size_t v = 0; v < t.victims.size(); ++v) os << "---:|";
  os << "---:|\n";
  for (std::size_t a = 0; a < t.attacks.size(); ++a) {
    os << "| " << t.attacks[a] << " |";
    for (double e : t.mean_error[a]) os << ' ' << fmt("%.2f", e) << " |";
    os << ' ' << fmt("%.2f", t.average_rank[a]) << " |\n";
  }
  return os.str();
}

std::string to_json(const GridResult& grid, const RankTable& ranks, const std::string& config_echo) {
  using json = nlohmann::ordered_json;
  json runs = json::array();
  for (const auto& r : grid.runs) {
    json segs = json::array();
    for (const auto& s : r.segments) {
      segs.push_back({{"name", s.name},
                      {"severity", s.severity},
                      {"error", s.error()},
                      {"benign_errors", s.benign_errors},
                      {"benign_samples", s.benign_samples}});
    }
    runs.push_back({
        {"victim", r.victim},
        {"attack", r.attack},
        {"mode", r.mode},
        {"r", r.r},
        {"seed", r.seed},
        {"error", r.error},
        {"segments", segs},
        {"realized_fraction", r.realized_fraction},
        {"audit",
         {{"passed", r.audit.passed},
          {"batches", r.audit.batches},
          {"online_queries", r.audit.online_queries},
          {"min_queries_per_batch", r.audit.min_queries_per_batch},
          {"max_queries_per_batch", r.audit.max_queries_per_batch},
          {"parameter_reads", r.audit.parameter_reads},
          {"benign_leaks", r.audit.benign_leaks},
          {"surrogate_forwards", r.audit.surrogate_forwards}}},
        {"poison",
         {{"batches", r.poisoned_batches},
          {"max_abs_eps", r.max_abs_eps},
          {"box_ok", r.box_ok},
          {"mean_surrogate_entropy", r.mean_poison_entropy},
          {"mean_feature_kld", r.mean_feature_kld},
          {"mean_victim_entropy", r.mean_victim_poison_entropy},
          {"victim_selected_fraction", r.poison_selected_fraction}}},
        {"benign_selected_fraction", r.benign_selected_fraction},
        {"distill", {{"mean_initial_kld", r.mean_distill_initial}, {"mean_final_kld", r.mean_distill_final}}},
    });
  }
  json summary = {{"victims", ranks.victims},
                  {"attacks", ranks.attacks},
                  {"mean_error", ranks.mean_error},
                  {"average_rank", ranks.average_rank}};
  // Protocol choices the configuration does not expose.
  json protocol = {{"surrogate_bn_statistics", "refreshed from adversary batches inside distillation"},
                   {"surrogate_across_segments", "persisted"},
                   {"lagrange_multipliers", "reset per crafted batch"},
                   {"greedy_tie_break", "lowest row index"}};
  json doc = {{"schema_version", kReportSchemaVersion},
              {"config", json::parse(config_echo)},
              {"protocol", protocol},
              {"runs", runs},
              {"summary", summary}};
  return doc.dump(2) + "\n";
}

void validate_report_json(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  auto need = [](const json& j, const std::string& key, bool (json::*is)() const noexcept, const std::string& at) {
    if (!j.is_object() || !j.contains(key) || !(j[key].*is)()) throw FormatError("report: " + at + "/" + key + " missing or mistyped");
    return j[key];
  };
  if (need(doc, "schema_version", &json::is_number_integer, "").get<int>() != kReportSchemaVersion) {
    throw FormatError("report: unsupported schema_version");
  }
  need(doc, "config", &json::is_object, "");
  need(doc, "protocol", &json::is_object, "");
  const json runs = need(doc, "runs", &json::is_array, "");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::string at = "/runs/" + std::to_string(i);
    const json& r = runs[i];
    need(r, "victim", &json::is_string, at);
    need(r, "attack", &json::is_string, at);
    need(r, "mode", &json::is_string, at);
    need(r, "r", &json::is_number, at);
    need(r, "seed", &json::is_number_unsigned, at);
    const double e = need(r, "error", &json::is_number, at).get<double>();
    if (!(e >= 0.0 && e <= 100.0)) throw FormatError("report: " + at + "/error outside [0,100]");
    const json segs = need(r, "segments", &json::is_array, at);
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const std::string sat = at + "/segments/" + std::to_string(s);
      need(segs[s], "name", &json::is_string, sat);
      need(segs[s], "error", &json::is_number, sat);
      need(segs[s], "benign_samples", &json::is_number_unsigned, sat);
    }
    const json audit = need(r, "audit", &json::is_object, at);
    if (!need(audit, "passed", &json::is_boolean, at + "/audit").get<bool>()) {
      throw FormatError("report: " + at + " records a failed audit");
    }
    need(r, "poison", &json::is_object, at);
  }
  const json summary = need(doc, "summary", &json::is_object, "");
  const json victims = need(summary, "victims", &json::is_array, "/summary");
  const json attacks = need(summary, "attacks", &json::is_array, "/summary");
  const json table = need(summary, "mean_error", &json::is_array, "/summary");
  const json ranks = need(summary, "average_rank", &json::is_array, "/summary");
  if (table.size() != attacks.size() || ranks.size() != attacks.size()) {
    throw FormatError("report: summary rows do not match the attack list");
  }
  for (const auto& row : table) {
    if (!row.is_array() || row.size() != victims.size()) throw FormatError("report: summary columns do not match the victim list");
  }
  if (runs.size() % (victims.size() * attacks.size()) != 0) throw FormatError("report: run count is not a full grid");
}

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) {
    throw FormatError(path.string() + ": header must be '" + std::string(kCsvHeader) + "'");
  }
  std::vector<CsvRow> rows;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string at = path.string() + ":" + std::to_string(n) + ": ";
    if (f.size() != 9) throw FormatError(at + "expected 9 fields, got " + std::to_string(f.size()));
    CsvRow r{f[0], f[1], f[2], f[3], f[4], f[5], 0, 0};
    try {
      std::size_t used = 0;
      r.benign_errors = std::stoull(f[7], &used);
      if (used != f[7].size()) throw std::invalid_argument("trailing");
      r.benign_samples = std::stoull(f[8], &used);
      if (used != f[8].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(at + "benign_errors and benign_samples must be integers");
    }
    if (r.benign_errors > r.benign_samples) throw FormatError(at + "more errors than samples");
    rows.push_back(std::move(r));
  }
  return rows;
}

MergeResult merge_reports(const std::vector<std::filesystem::path>& csvs) {
  if (csvs.empty()) throw ContractError("report-merge: no input reports");
  std::ostringstream os;
  os << kCsvHeader << '\n';
  Accumulator acc;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  std::string schedule;
  for (const auto& path : csvs) {
    for (const auto& r : read_csv(path)) {
      os << csv_field(r.victim) << ',' << csv_field(r.attack) << ',' << r.mode << ',' << r.r << ',' << r.seed << ','
         << csv_field(r.segment) << ',' << fmt("%.4f", percent(r.benign_errors, r.benign_samples)) << ','
         << r.benign_errors << ',' << r.benign_samples << '\n';
      if (r.segment != "all") continue;
      const std::string sched = r.mode + "@" + r.r;
      if (schedule.empty()) schedule = sched;
      if (sched != schedule) throw ContractError("report-merge: mixed schedules " + schedule + " and " + sched);
      if (!seen.insert({r.victim, r.attack, r.seed}).second) {
        throw ContractError("report-merge: run " + r.victim + "/" + r.attack + "/seed " + r.seed +
                            " appears twice");
      }
      acc.add(r.attack, r.victim, percent(r.benign_errors, r.benign_samples));
    }
  }
  return {os.str(), acc.table()};
}

}  // namespace rttdp
