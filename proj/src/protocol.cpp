#include "rttdp/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rttdp/errors.hpp"
#include "rttdp/losses.hpp"

namespace rttdp {

std::string mode_name(FrequencyMode m) { return m == FrequencyMode::Uniform ? "uniform" : "non-uniform"; }

FrequencyMode mode_from_name(const std::string& name) {
  if (name == "uniform") return FrequencyMode::Uniform;
  if (name == "non-uniform") return FrequencyMode::NonUniform;
  throw ConfigError("unknown frequency mode '" + name + "'");
}

std::size_t StreamSchedule::adversary_slots() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.adversary; }));
}

double StreamSchedule::realized_fraction() const {
  return slots.empty() ? 0.0 : static_cast<double>(adversary_slots()) / static_cast<double>(slots.size());
}

StreamSchedule build_schedule(std::size_t segments, const ScheduleConfig& cfg) {
  if (!(cfg.r >= 0.0 && cfg.r <= 1.0)) throw ConfigError("schedule: r outside [0,1]");
  if (cfg.batches_per_segment == 0 || cfg.batch_size == 0) throw ConfigError("schedule: empty stream");
  StreamSchedule s;
  const std::size_t ts = cfg.batches_per_segment;
  auto cumulative = [&](std::size_t t) {
    return static_cast<std::size_t>(std::llround(cfg.r * static_cast<double>(t)));
  };
  for (std::size_t seg = 0; seg < segments; ++seg) {
    const std::size_t a = cumulative((seg + 1) * ts) - cumulative(seg * ts);
    std::size_t adv_k = 0, ben_k = 0;
    for (std::size_t j = 0; j < ts; ++j) {
      bool adversary;
      if (cfg.mode == FrequencyMode::NonUniform) {
        adversary = j < a;
      } else {
        // Evenly spread: slot j is adversarial when ⌊(j+1)a/Tₛ⌋ steps up.
        adversary = (j + 1) * a / ts > j * a / ts;
      }
      s.slots.push_back({adversary, seg, adversary ? adv_k++ : ben_k++});
    }
  }
  return s;
}

void QueryAuditor::register_benign(std::span<const std::size_t> ids) { benign_.insert(ids.begin(), ids.end()); }

BatchAudit& QueryAuditor::open(std::size_t slot, Origin origin) {
  records_.push_back({slot, origin});
  return records_.back();
}

void QueryAuditor::online_query(std::size_t forwards) {
  if (records_.empty()) throw AuditError("online query outside any batch");
  ++records_.back().online_queries;
  records_.back().online_forwards += forwards;
}

void QueryAuditor::parameter_read() {
  if (records_.empty()) ++reads_outside_batches_;
  else ++records_.back().parameter_reads;
}

void QueryAuditor::surrogate_use(std::span<const std::size_t> ids, std::size_t forwards) {
  if (records_.empty()) throw AuditError("surrogate use outside any batch");
  auto& r = records_.back();
  r.surrogate_forwards += forwards;
  for (auto id : ids) r.benign_ids_seen_by_adversary += benign_.count(id);
}

void QueryAuditor::verify() const {
  if (reads_outside_batches_) throw AuditError("online parameters read outside the stream");
  for (const auto& r : records_) {
    const std::string at = "batch " + std::to_string(r.slot) + ": ";
    if (r.online_queries != 1) {
      throw AuditError(at + std::to_string(r.online_queries) + " online queries (expected exactly 1)");
    }
    if (r.parameter_reads) throw AuditError(at + "online parameters were read");
    if (r.benign_ids_seen_by_adversary) throw AuditError(at + "benign samples reached the adversary");
    if (r.origin == Origin::Benign && r.surrogate_forwards) {
      throw AuditError(at + "surrogate ran during a benign batch");
    }
  }
}

AuditSummary QueryAuditor::summary() const {
  AuditSummary s;
  s.batches = records_.size();
  s.parameter_reads = reads_outside_batches_;
  s.min_queries_per_batch = records_.empty() ? 0 : records_.front().online_queries;
  for (const auto& r : records_) {
    s.online_queries += r.online_queries;
    s.parameter_reads += r.parameter_reads;
    s.benign_leaks += r.benign_ids_seen_by_adversary;
    s.surrogate_forwards += r.surrogate_forwards;
    s.min_queries_per_batch = std::min(s.min_queries_per_batch, r.online_queries);
    s.max_queries_per_batch = std::max(s.max_queries_per_batch, r.online_queries);
  }
  try {
    verify();
    s.passed = true;
  } catch (const AuditError&) {
    s.passed = false;
  }
  return s;
}

OnlineEndpoint::OnlineEndpoint(const Model& source, const TtaConfig& cfg, std::uint64_t seed,
                               QueryAuditor& audit)
    : cfg_(cfg), state_(make_tta_state(source, cfg, seed)), audit_(audit) {}

AdaptResult OnlineEndpoint::query(const Tensor& batch) {
  const std::size_t before = state_.model.forward_count() + (state_.teacher ? state_.teacher->shadow.forward_count() : 0);
  AdaptResult r = adapt_step(state_, batch, cfg_);
  const std::size_t after = state_.model.forward_count() + (state_.teacher ? state_.teacher->shadow.forward_count() : 0);
  audit_.online_query(after - before);
  return r;
}

const Model& OnlineEndpoint::read_parameters() {
  audit_.parameter_read();
  return state_.model;
}

Adversary::Adversary(const Model& source, const AttackConfig& attack, const SurrogateSettings& settings,
                     std::uint64_t seed, QueryAuditor& audit)
    : attack_(attack),
      surrogate_{source, settings.lr, settings.iterations},
      source_(source),
      random_init_(source.arch(), seed ^ 0x554e4c4541524eULL),
      confusion_(source.arch().classes, attack.ble_momentum),
      audit_(audit) {
  attack_.validate();
  lagrange_.rate = attack.pgd.lambda_rate;
}

PoisonBatch Adversary::craft(const Dataset& data, std::span<const std::size_t> ids, SynthesisTrace* trace) {
  const std::size_t before = surrogate_.model.forward_count() + source_.forward_count() + random_init_.forward_count();
  PoisonBatch pb = make_poison_batch(data.batch(ids), data.batch_labels(ids), attack_.pgd.budget);
  ForgeContext ctx{&surrogate_.model, &source_, &random_init_, &confusion_};
  lagrange_.lambda.clear();  // multipliers restart at zero for every synthesis
  PoisonBatch out = synthesize(pb, attack_, ctx, lagrange_, trace);
  const std::size_t after = surrogate_.model.forward_count() + source_.forward_count() + random_init_.forward_count();
  audit_.surrogate_use(ids, after - before);
  return out;
}

std::vector<double> Adversary::feedback(const Tensor& submitted, const Tensor& online_posteriors,
                                        std::span<const std::size_t> ids) {
  const std::size_t before = surrogate_.model.forward_count();
  auto trace = distill(surrogate_, submitted, online_posteriors);
  audit_.surrogate_use(ids, surrogate_.model.forward_count() - before);
  return trace;
}

RunReport run_stream(const RunSpec& spec) {
  if (!spec.data || !spec.source) throw ContractError("run_stream: dataset and source model are required");
  const Dataset& data = *spec.data;
  if (spec.source->arch().classes != data.classes) throw ContractError("run_stream: class count mismatch");
  spec.victim.validate();

  auto pools = split_pools(data);
  std::mt19937_64 shuffle_rng(spec.seed);
  for (auto& p : pools) {
    std::shuffle(p.adversary.begin(), p.adversary.end(), shuffle_rng);
    std::shuffle(p.benign.begin(), p.benign.end(), shuffle_rng);
  }
  const StreamSchedule schedule = build_schedule(data.segments.size(), spec.schedule);
  const std::size_t nb = spec.schedule.batch_size;
  for (const auto& slot : schedule.slots) {
    const auto& pool = slot.adversary ? pools[slot.segment].adversary : pools[slot.segment].benign;
    if ((slot.pool_batch + 1) * nb > pool.size()) {
      throw ContractError("run_stream: segment " + std::to_string(slot.segment) + " has too few " +
                          (slot.adversary ? "adversary" : "benign") + " samples for the schedule");
    }
  }

  QueryAuditor audit;
  for (const auto& p : pools) audit.register_benign(p.benign);
  OnlineEndpoint online(*spec.source, spec.victim, spec.seed, audit);
  std::optional<Adversary> adversary;
  if (spec.attack) adversary.emplace(*spec.source, *spec.attack, spec.surrogate, spec.seed, audit);

  RunReport rep;
  rep.victim = spec.victim.label();
  rep.attack = spec.attack ? spec.attack->label() : "none";
  rep.mode = mode_name(spec.schedule.mode);
  rep.r = spec.schedule.r;
  rep.seed = spec.seed;
  rep.realized_fraction = schedule.realized_fraction();
  for (const auto& s : data.segments) rep.segments.push_back({s.name, s.severity, 0, 0});

  double entropy_sum = 0.0, kld_sum = 0.0, distill0 = 0.0, distill1 = 0.0;
  std::size_t distill_rounds = 0;
  double victim_entropy = 0.0;
  std::size_t poison_selected = 0, poison_samples = 0, benign_selected = 0, benign_seen = 0;
  for (std::size_t t = 0; t < schedule.slots.size(); ++t) {
    const Slot& slot = schedule.slots[t];
    const auto& pool = slot.adversary ? pools[slot.segment].adversary : pools[slot.segment].benign;
    std::span<const std::size_t> ids(pool.data() + slot.pool_batch * nb, nb);
    if (slot.adversary) {
      audit.open(t, Origin::Adversary);
      rep.adversary_batches.emplace_back(ids.begin(), ids.end());
      Tensor submitted;
      if (adversary) {
        SynthesisTrace trace;
        PoisonBatch pb = adversary->craft(data, ids, &trace);
        auto c = pb.clean.values();
        auto p = pb.poisoned.values();
        for (std::size_t i = 0; i < c.size(); ++i) {
          const double e = std::abs(p[i] - c[i]);
          rep.max_abs_eps = std::max(rep.max_abs_eps, e);
          const bool ok = e <= pb.budget + 1e-9 && p[i] >= 0.0 && p[i] <= 1.0;
          rep.box_ok = rep.box_ok && ok;
          if (!ok) throw AuditError("batch " + std::to_string(t) + ": poisoned sample outside the budget or box");
        }
        ++rep.poisoned_batches;
        entropy_sum += trace.final_entropy;
        kld_sum += trace.final_feature_kld;
        submitted = pb.poisoned;
      } else {
        submitted = data.batch(ids);
      }
      AdaptResult res = online.query(submitted);
      if (adversary) {
        for (double h : row_entropy(res.posteriors.values(), data.classes)) victim_entropy += h;
        for (bool m : res.step.mask) poison_selected += m;
        poison_samples += res.step.mask.size();
        auto d = adversary->feedback(submitted, res.posteriors, ids);
        if (!d.empty()) {
          distill0 += d.front();
          distill1 += d.back();
          ++distill_rounds;
        }
      }
    } else {
      audit.open(t, Origin::Benign);
      AdaptResult res = online.query(data.batch(ids));
      for (bool m : res.step.mask) benign_selected += m;
      benign_seen += res.step.mask.size();
      const auto pred = row_argmax(res.posteriors.values(), data.classes);
      auto& seg = rep.segments[slot.segment];
      for (std::size_t i = 0; i < nb; ++i) {
        ++seg.benign_samples;
        seg.benign_errors += pred[i] != data.labels[ids[i]];
      }
    }
  }
  audit.verify();
  rep.audit = audit.summary();

  std::size_t total = 0, wrong = 0;
  for (const auto& s : rep.segments) {
    total += s.benign_samples;
    wrong += s.benign_errors;
  }
  rep.error = total ? 100.0 * static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
  if (rep.poisoned_batches) {
    rep.mean_poison_entropy = entropy_sum / static_cast<double>(rep.poisoned_batches);
    rep.mean_feature_kld = kld_sum / static_cast<double>(rep.poisoned_batches);
  }
  if (poison_samples) {
    rep.mean_victim_poison_entropy = victim_entropy / static_cast<double>(poison_samples);
    rep.poison_selected_fraction = static_cast<double>(poison_selected) / static_cast<double>(poison_samples);
  }
  if (benign_seen) {
    rep.benign_selected_fraction = static_cast<double>(benign_selected) / static_cast<double>(benign_seen);
  }
  if (distill_rounds) {
    rep.mean_distill_initial = distill0 / static_cast<double>(distill_rounds);
    rep.mean_distill_final = distill1 / static_cast<double>(distill_rounds);
  }
  return rep;
}

std::vector<double> average_rank(const std::vector<std::vector<double>>& errors) {
  if (errors.empty() || errors.front().empty()) throw ContractError("average_rank: empty table");
  const std::size_t victims = errors.front().size();
  for (const auto& row : errors) {
    if (row.size() != victims) throw ContractError("average_rank: incomplete table");
    for (double e : row)
      if (!std::isfinite(e)) throw ContractError("average_rank: missing entry");
  }
  const std::size_t attacks = errors.size();
  std::vector<double> ranks(attacks, 0.0);
  for (std::size_t v = 0; v < victims; ++v) {
    std::vector<std::size_t> order(attacks);
    for (std::size_t a = 0; a < attacks; ++a) order[a] = a;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return errors[x][v] > errors[y][v]; });
    for (std::size_t i = 0; i < attacks;) {
      std::size_t j = i;
      while (j + 1 < attacks && errors[order[j + 1]][v] == errors[order[i]][v]) ++j;
      const double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
      for (std::size_t q = i; q <= j; ++q) ranks[order[q]] += shared;
      i = j + 1;
    }
  }
  for (auto& r : ranks) r /= static_cast<double>(victims);
  return ranks;
}

}  // namespace rttdp
