#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rttdp/assignment.hpp"
#include "rttdp/nn.hpp"

namespace rttdp {

enum class AttackKind { Nhe, Ble, MaxCe, Tepa, Unlearnable, AdvPoison, Dia };

std::string attack_name(AttackKind k);
AttackKind attack_from_name(const std::string& name);  // ConfigError if unknown

// Model the PGD objective is evaluated on.
enum class ReferenceModel { Surrogate, Source, RandomInit };

struct PgdConfig {
  std::size_t steps = 40;
  double alpha = 0.01;
  double budget = 0.3;
  double lambda_rate = 0.001;
};

struct AttackConfig {
  AttackKind kind = AttackKind::Nhe;
  PgdConfig pgd;
  bool regularize = true;
  ReferenceModel reference = ReferenceModel::Surrogate;
  MappingSolver solver = MappingSolver::Greedy;
  double ble_momentum = 0.9;
  bool flip_kld_order = false;  // KLD(poison‖clean) instead of KLD(clean‖poison)

  // NHE and BLE run on the surrogate with feature regularization; the legacy
  // objectives run on θ₀ (Unlearnable on a random initialization) without it.
  static AttackConfig defaults_for(AttackKind kind);
  void validate() const;
  std::string label() const;  // e.g. "nhe", "maxce+reg"
};

struct PoisonBatch {
  Tensor clean;         // B_ab
  Tensor perturbation;  // ε
  Tensor poisoned;      // B_a
  std::vector<int> labels;
  double budget = 0.3;
};

PoisonBatch make_poison_batch(const Tensor& clean, std::vector<int> labels, double budget);

struct LagrangeState {
  std::vector<double> lambda;  // one multiplier per feature layer, starts at 0
  double rate = 0.001;
};

struct SynthesisTrace {
  std::vector<double> attack_loss;
  std::vector<std::vector<double>> reg;     // per iteration, per layer
  std::vector<std::vector<double>> lambda;  // after each ascent step
  std::vector<double> max_abs_eps;          // after each projection
  std::vector<bool> in_box;                 // after each projection
  double final_feature_kld = 0.0;           // mean over layers, final B_a vs B_ab
  double final_entropy = 0.0;               // mean prediction entropy of B_a under the reference model
};

// --- objectives (all minimized by PGD) ---
// CE toward Q with Q_iy = 0 and 1/(K−1) elsewhere, probabilities floored at 1e-12.
Tensor nhe_loss(const Tensor& logits, std::span<const int> labels);
// CE toward mapping[y_i].
Tensor ble_loss(const Tensor& logits, std::span<const int> labels, std::span<const int> mapping);
Tensor mapped_cross_entropy(const Tensor& logits, std::span<const int> targets);
int adv_poison_target(int label, std::size_t classes);
// MaxCE, TePA, Unlearnable, AdvPoison and DIA objectives, negated where the
// original maximizes. NHE and BLE are ContractError here.
Tensor legacy_objective(AttackKind kind, const Tensor& logits, std::span<const int> labels);

// Per-layer Gaussian KLD between clean and poisoned feature statistics.
// Spatial layers: per-sample Gaussians over H·W positions, averaged over samples.
// Dense layers: one Gaussian per batch over samples.
std::vector<Tensor> feature_consistency(const FeatureTrace& poison, const FeatureTrace& clean,
                                        bool flip_order = false);

// Everything synthesis may touch on the adversary side.
struct ForgeContext {
  Model* surrogate = nullptr;
  Model* source = nullptr;
  Model* random_init = nullptr;
  ConfusionState* confusion = nullptr;  // BLE only
};

// PGD with Lagrangian ascent on λ. The reference model is never modified.
PoisonBatch synthesize(const PoisonBatch& batch, const AttackConfig& cfg, ForgeContext ctx,
                       LagrangeState& lagrange, SynthesisTrace* trace = nullptr);

// Positions of B_ab that DIA-adapted perturbs (even) versus holds clean (odd).
std::vector<bool> dia_poison_mask(std::size_t n);

}  // namespace rttdp
