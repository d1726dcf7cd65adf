#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rttdp/data.hpp"
#include "rttdp/forge.hpp"
#include "rttdp/surrogate.hpp"
#include "rttdp/tta.hpp"

namespace rttdp {

enum class FrequencyMode { Uniform, NonUniform };
std::string mode_name(FrequencyMode m);
FrequencyMode mode_from_name(const std::string& name);

struct ScheduleConfig {
  std::size_t batches_per_segment = 20;
  std::size_t batch_size = 32;
  double r = 0.5;
  FrequencyMode mode = FrequencyMode::Uniform;
};

struct Slot {
  bool adversary = false;
  std::size_t segment = 0;
  std::size_t pool_batch = 0;  // k-th batch drawn from this segment's pool
};

struct StreamSchedule {
  std::vector<Slot> slots;
  std::size_t adversary_slots() const;
  double realized_fraction() const;
};

// Adversary slots per segment follow round(r·t) over the cumulative batch
// count, so the realized fraction stays within 1/T of r.
StreamSchedule build_schedule(std::size_t segments, const ScheduleConfig& cfg);

enum class Origin { Adversary, Benign };

struct BatchAudit {
  std::size_t slot = 0;
  Origin origin = Origin::Benign;
  std::size_t online_queries = 0;
  std::size_t online_forwards = 0;  // internal passes of the victim (telemetry)
  std::size_t surrogate_forwards = 0;
  std::size_t parameter_reads = 0;
  std::size_t benign_ids_seen_by_adversary = 0;
};

struct AuditSummary {
  std::size_t batches = 0;
  std::size_t online_queries = 0;
  std::size_t parameter_reads = 0;
  std::size_t benign_leaks = 0;
  std::size_t min_queries_per_batch = 0;
  std::size_t max_queries_per_batch = 0;
  std::size_t surrogate_forwards = 0;
  bool passed = false;
};

// Records every interaction between the parties; verify() turns a violation into AuditError.
class QueryAuditor {
 public:
  void register_benign(std::span<const std::size_t> ids);
  BatchAudit& open(std::size_t slot, Origin origin);
  void online_query(std::size_t forwards);
  void parameter_read();
  void surrogate_use(std::span<const std::size_t> ids, std::size_t forwards);
  void verify() const;
  AuditSummary summary() const;
  const std::vector<BatchAudit>& records() const { return records_; }

 private:
  std::set<std::size_t> benign_;
  std::vector<BatchAudit> records_;
  std::size_t reads_outside_batches_ = 0;
};

// The victim as the adversary sees it: a query interface with no parameter access.
class OnlineEndpoint {
 public:
  OnlineEndpoint(const Model& source, const TtaConfig& cfg, std::uint64_t seed, QueryAuditor& audit);
  AdaptResult query(const Tensor& batch);
  // Any inspection of live weights is logged as a grey-box violation.
  const Model& read_parameters();

 private:
  TtaConfig cfg_;
  TtaState state_;
  QueryAuditor& audit_;
};

struct SurrogateSettings {
  double lr = 0.1;
  std::size_t iterations = 10;
};

// Adversary side: surrogate, label-mapping state and Lagrange multipliers persist across the stream.
class Adversary {
 public:
  Adversary(const Model& source, const AttackConfig& attack, const SurrogateSettings& settings,
            std::uint64_t seed, QueryAuditor& audit);
  PoisonBatch craft(const Dataset& data, std::span<const std::size_t> ids, SynthesisTrace* trace);
  std::vector<double> feedback(const Tensor& submitted, const Tensor& online_posteriors,
                               std::span<const std::size_t> ids);
  const SurrogateState& surrogate() const { return surrogate_; }
  const LagrangeState& lagrange() const { return lagrange_; }

 private:
  AttackConfig attack_;
  SurrogateState surrogate_;
  Model source_;
  Model random_init_;
  ConfusionState confusion_;
  LagrangeState lagrange_;
  QueryAuditor& audit_;
};

struct SegmentResult {
  std::string name;
  int severity = 0;
  std::size_t benign_samples = 0;
  std::size_t benign_errors = 0;
  double error() const {
    return benign_samples ? 100.0 * static_cast<double>(benign_errors) / static_cast<double>(benign_samples) : 0.0;
  }
};

struct RunSpec {
  const Dataset* data = nullptr;
  const Model* source = nullptr;
  TtaConfig victim;
  std::optional<AttackConfig> attack;
  ScheduleConfig schedule;
  SurrogateSettings surrogate;
  std::uint64_t seed = 0;
};

struct RunReport {
  std::string victim;
  std::string attack;  // "none" without an adversary
  std::string mode;
  double r = 0.0;
  std::uint64_t seed = 0;
  std::vector<SegmentResult> segments;
  double error = 0.0;  // attack success rate, benign samples only
  double realized_fraction = 0.0;
  AuditSummary audit;
  double max_abs_eps = 0.0;
  bool box_ok = true;
  std::size_t poisoned_batches = 0;
  double mean_poison_entropy = 0.0;
  double mean_feature_kld = 0.0;
  // Victim-side view of the poisons: prediction entropy and the share its sample filter kept.
  double mean_victim_poison_entropy = 0.0;
  double poison_selected_fraction = 0.0;
  double benign_selected_fraction = 0.0;
  double mean_distill_initial = 0.0;
  double mean_distill_final = 0.0;
  std::vector<std::vector<std::size_t>> adversary_batches;  // dataset ids per adversary slot
};

// Strictly sequential stream. Pools are shuffled per seed within each segment.
RunReport run_stream(const RunSpec& spec);

// errors[attack][victim] → mean rank per attack (1 = highest error, ties share the mean rank).
std::vector<double> average_rank(const std::vector<std::vector<double>>& errors);

}  // namespace rttdp
