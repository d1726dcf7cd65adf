// rttdp: config-driven runner for the poisoning lab.
//
// Exit status: 0 success, 1 runtime failure, 2 invalid config or usage, 3 audit violation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rttdp/config.hpp"
#include "rttdp/errors.hpp"
#include "rttdp/report.hpp"

namespace fs = std::filesystem;
using namespace rttdp;

namespace {

void write_file(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << body;
  if (!os) throw FormatError("cannot write " + path.string());
}

std::string json_list(const std::vector<std::uint64_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

std::string json_string(const std::string& s) {
  std::string q = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q + "\"";
}

struct RunFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  std::optional<double> r;
  std::string mode;
  std::optional<std::size_t> steps, batches_per_segment, surrogate_iterations, workers;
};

std::vector<ConfigOverride> overrides_of(const RunFlags& f) {
  std::vector<ConfigOverride> o;
  if (!f.seeds.empty()) o.push_back({"/seeds", json_list(f.seeds), "--seeds"});
  if (!f.output_dir.empty()) {
    o.push_back({"/output_dir", json_string(fs::absolute(f.output_dir).string()), "--output-dir"});
  }
  if (f.r) o.push_back({"/schedule/r", std::to_string(*f.r), "--r"});
  if (!f.mode.empty()) o.push_back({"/schedule/mode", json_string(f.mode), "--mode"});
  if (f.steps) o.push_back({"/pgd/steps", std::to_string(*f.steps), "--steps"});
  if (f.batches_per_segment) {
    o.push_back({"/schedule/batches_per_segment", std::to_string(*f.batches_per_segment), "--batches-per-segment"});
  }
  if (f.surrogate_iterations) {
    o.push_back({"/surrogate/iterations", std::to_string(*f.surrogate_iterations), "--surrogate-iterations"});
  }
  return o;
}

SyntheticSpec require_synthetic(const ExperimentConfig& cfg, const char* what) {
  if (!cfg.synthetic) throw ConfigError(std::string(what) + " needs a data.generate section");
  return *cfg.synthetic;
}

int cmd_gen_data(const std::string& config, const std::string& out) {
  const ExperimentConfig cfg = load_config(config, {false, false});
  const fs::path path = out.empty() ? cfg.data_file : fs::path(out);
  if (path.empty()) throw ConfigError(config + ": no data.file and no --out path");
  const Dataset d = generate(require_synthetic(cfg, "gen-data"));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_dataset(d, path);
  std::cout << "wrote " << d.size() << " samples in " << d.segments.size() << " segments to " << path.string()
            << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config, const std::string& out, std::optional<std::size_t> epochs) {
  ExperimentConfig cfg = load_config(config, {false, false});
  const SyntheticSpec spec = require_synthetic(cfg, "pretrain");
  if (epochs) cfg.pretrain.epochs = *epochs;
  const fs::path path = out.empty() ? cfg.checkpoint : fs::path(out);
  const auto t0 = std::chrono::steady_clock::now();
  const PretrainResult r = pretrain_source(spec, default_arch(spec), cfg.pretrain);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(r.model, path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("pretrained %s: %zu epochs, train accuracy %.4f, %.1fs -> %s\n", r.model.tag().c_str(), r.epochs_run,
              r.train_accuracy, secs, path.string().c_str());
  return 0;
}

int cmd_run(const RunFlags& f) {
  const ExperimentConfig cfg = load_config(f.config, {}, overrides_of(f));
  const Dataset data = load_stream_data(cfg);
  check_pool_capacity(data, cfg.schedule);
  const Model source = load_checkpoint(cfg.checkpoint);
  if (source.tag() != default_arch(data.classes, data.form).tag()) {
    throw ConfigError(f.config + ": checkpoint " + cfg.checkpoint.string() + " does not match the dataset");
  }
  const std::size_t workers = f.workers ? *f.workers : worker_count_from_env();
  const std::size_t total = cfg.victims.size() * cfg.attacks.size() * cfg.seeds.size();
  std::size_t done = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const GridResult grid = run_grid(cfg, data, source, workers, [&](const RunReport& r) {
    std::fprintf(stderr, "[%zu/%zu] %s / %s / seed %llu: error %.2f%%\n", ++done, total, r.victim.c_str(),
                 r.attack.c_str(), static_cast<unsigned long long>(r.seed), r.error);
  });
  for (const auto& r : grid.runs) {
    if (!r.audit.passed) throw AuditError(r.victim + "/" + r.attack + ": audit failed");
  }
  const RankTable ranks = rank_table(grid);
  const std::string csv = to_csv(grid.runs);
  const std::string json = to_json(grid, ranks, cfg.echo);
  const std::string table = format_rank_table(ranks);
  write_file(cfg.output_dir / "report.csv", csv);
  write_file(cfg.output_dir / "report.json", json);
  write_file(cfg.output_dir / "ranks.md", table);
  // Reports must read back through their own validators before the run counts as a success.
  validate_report_json(json);
  if (read_csv(cfg.output_dir / "report.csv").size() != total * (data.segments.size() + 1)) {
    throw FormatError("report.csv row count does not match the grid");
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << table;
  std::printf("%zu runs on %zu workers in %.1fs; reports in %s\n", total, workers, secs,
              cfg.output_dir.string().c_str());
  return 0;
}

int cmd_poison_dump(const std::string& config, const std::string& attack_name, std::uint64_t seed,
                    std::size_t segment, const std::string& out) {
  const ExperimentConfig cfg = load_config(config);
  const AttackEntry* entry = nullptr;
  for (const auto& a : cfg.attacks)
    if (a.name == attack_name) entry = &a;
  if (!entry) throw ConfigError(config + ": no attack named '" + attack_name + "' in the config");
  if (!entry->attack) throw ConfigError("poison-dump: attack 'none' crafts nothing");
  const Dataset data = load_stream_data(cfg);
  if (segment >= data.segments.size()) throw ConfigError("poison-dump: --segment out of range");
  const Model source = load_checkpoint(cfg.checkpoint);

  // The first adversary batch of the segment, drawn as run_stream draws it for this seed.
  auto pools = split_pools(data);
  std::mt19937_64 rng(seed);
  for (auto& p : pools) {
    std::shuffle(p.adversary.begin(), p.adversary.end(), rng);
    std::shuffle(p.benign.begin(), p.benign.end(), rng);
  }
  const std::size_t nb = cfg.schedule.batch_size;
  if (pools[segment].adversary.size() < nb) throw ConfigError("poison-dump: adversary pool smaller than a batch");
  std::span<const std::size_t> ids(pools[segment].adversary.data(), nb);

  QueryAuditor audit;
  for (const auto& p : pools) audit.register_benign(p.benign);
  Adversary adversary(source, *entry->attack, cfg.surrogate, seed, audit);
  audit.open(0, Origin::Adversary);
  SynthesisTrace trace;
  const PoisonBatch pb = adversary.craft(data, ids, &trace);
  if (audit.summary().benign_leaks) throw AuditError("poison-dump: benign samples reached the adversary");

  Dataset dump;
  dump.classes = data.classes;
  dump.form = data.form;
  dump.segments = {{"clean", 0, nb}, {"poisoned", 0, nb}};
  dump.labels = pb.labels;
  dump.labels.insert(dump.labels.end(), pb.labels.begin(), pb.labels.end());
  auto c = pb.clean.values();
  auto p = pb.poisoned.values();
  dump.values.assign(c.begin(), c.end());
  dump.values.insert(dump.values.end(), p.begin(), p.end());
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_dataset(dump, out);
  double max_eps = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) max_eps = std::max(max_eps, std::abs(p[i] - c[i]));
  std::printf("%s batch of %zu (segment %zu, seed %llu): max |eps| %.6f (budget %.6f), entropy %.4f, "
              "feature KLD %.4f -> %s\n",
              entry->name.c_str(), nb, segment, static_cast<unsigned long long>(seed), max_eps, pb.budget,
              trace.final_entropy, trace.final_feature_kld, out.c_str());
  return 0;
}

int cmd_report_merge(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  const MergeResult m = merge_reports(paths);
  write_file(fs::path(out) / "report.csv", m.csv);
  const std::string table = format_rank_table(m.ranks);
  write_file(fs::path(out) / "ranks.md", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Realistic test-time data poisoning lab"};
  app.require_subcommand(1);

  std::string config, out;
  auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic stream to a dataset file");
  gen->add_option("-c,--config", config, "Experiment config (JSON)")->required();
  gen->add_option("-o,--out", out, "Dataset path (default: data.file)");

  std::optional<std::size_t> epochs;
  auto* pre = app.add_subcommand("pretrain", "Train the source model and save its checkpoint");
  pre->add_option("-c,--config", config, "Experiment config (JSON)")->required();
  pre->add_option("-o,--out", out, "Checkpoint path (default: source.checkpoint)");
  pre->add_option("--epochs", epochs, "Epoch cap (default: source.pretrain.epochs)");

  RunFlags rf;
  auto* run = app.add_subcommand("run", "Run the victim x attack x seed grid and write reports");
  run->add_option("-c,--config", rf.config, "Experiment config (JSON)")->required();
  run->add_option("--seeds", rf.seeds, "Seeds, replacing the config list")->delimiter(',');
  run->add_option("--output-dir", rf.output_dir, "Report directory");
  run->add_option("--r", rf.r, "Attack budget r in [0,1]");
  run->add_option("--mode", rf.mode, "uniform | non-uniform");
  run->add_option("--steps", rf.steps, "PGD iterations");
  run->add_option("--batches-per-segment", rf.batches_per_segment, "Batches per corruption segment");
  run->add_option("--surrogate-iterations", rf.surrogate_iterations, "Distillation iterations per feedback");
  run->add_option("--workers", rf.workers, "Worker threads (default: RTTDP_WORKERS or core count)")
      ->check(CLI::PositiveNumber);

  std::string attack;
  std::uint64_t seed = 0;
  std::size_t segment = 0;
  auto* dump = app.add_subcommand("poison-dump", "Synthesize one poisoned batch and store it with its clean origin");
  dump->add_option("-c,--config", config, "Experiment config (JSON)")->required();
  dump->add_option("--attack", attack, "Attack name as listed in the config")->required();
  dump->add_option("--seed", seed, "Stream seed");
  dump->add_option("--segment", segment, "Corruption segment");
  dump->add_option("-o,--out", out, "Output dataset file (segments 'clean' and 'poisoned')")->required();

  std::vector<std::string> inputs;
  auto* merge = app.add_subcommand("report-merge", "Concatenate CSV reports and recompute average ranks");
  merge->add_option("inputs", inputs, "report.csv files")->required();
  merge->add_option("-o,--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*pre) return cmd_pretrain(config, out, epochs);
    if (*run) return cmd_run(rf);
    if (*dump) return cmd_poison_dump(config, attack, seed, segment, out);
    if (*merge) return cmd_report_merge(inputs, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const AuditError& e) {
    std::cerr << "audit violation: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
