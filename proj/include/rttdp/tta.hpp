#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rttdp/nn.hpp"

namespace rttdp {

enum class TtaMethod { Source, Tent, Rpl, Eata, Cotta };

std::string method_name(TtaMethod m);
TtaMethod method_from_name(const std::string& name);  // ConfigError if unknown

struct DefenseFlags {
  bool entropy_threshold = false;
  bool augmentation = false;
  bool ema = false;
  bool restore = false;
};

struct Augmenter {
  double noise = 0.05;  // additive Gaussian σ
  bool flip = true;     // random horizontal flip, image inputs only
};

struct TtaConfig {
  TtaMethod method = TtaMethod::Tent;
  DefenseFlags defenses;
  double lr = 0.05;
  double threshold_coef = 0.05;
  double ema_momentum = 0.999;
  double restore_p = 0.01;
  double gce_q = 0.8;
  std::size_t n_aug = 1;
  Augmenter augment;
  // eata-lite: reliability margin as a fraction of ln K, and the momentum of
  // the running mean posterior used for diversity weighting.
  double eata_margin = 0.4;
  double eata_mean_momentum = 0.9;
  double log_base = 0.0;  // 0 → natural log
  // Fraction of each batch's statistics folded into θᵇ (1 = current batch only).
  double bn_momentum = 1.0;
  UpdateScope scope = UpdateScope::BnAffine;

  void validate() const;  // ConfigError on out-of-range values
  // cotta-lite always runs with the teacher, augmentation and restore modules.
  DefenseFlags effective_defenses() const;
  bool uses_teacher() const { return effective_defenses().ema; }
  // e.g. "tent-lite+thresh+ema"
  std::string label() const;
};

struct AdaptationStep {
  double pre_step_error = -1.0;  // filled by the harness, which holds the labels
  std::vector<bool> mask;
  std::vector<double> weights;
  double loss = 0.0;
  double update_norm = 0.0;
  std::size_t restored = 0;
};

struct AdaptResult {
  Tensor posteriors;  // [N,K], produced before the update
  AdaptationStep step;
};

// Online model plus the companions some configurations need.
struct TtaState {
  Model model;
  Model source;
  std::optional<EmaModel> teacher;
  std::mt19937_64 rng;
  std::vector<double> mean_posterior;  // eata-lite diversity reference; empty until first update
};

TtaState make_tta_state(const Model& source, const TtaConfig& cfg, std::uint64_t seed);

// Predict on `batch`, then take one adaptation step. Order of the defense stack:
// entropy filter → augmentation consistency → gradient step → EMA → restore.
AdaptResult adapt_step(TtaState& state, const Tensor& batch, const TtaConfig& cfg);

// mask[i] = H(p_i) < coefficient · log K (both in `log_base`, 0 → natural).
std::vector<bool> entropy_filter(std::span<const double> posteriors, std::size_t classes,
                                 double coefficient, double log_base = 0.0);

// mean_i (1 − p_{i,argmax}^q) / q over rows of `probs` (differentiable).
Tensor gce_loss(const Tensor& probs, double q);

Tensor augment(const Tensor& batch, const Augmenter& aug, std::mt19937_64& rng);

// Mean over views and selected samples of CE(target_i, softmax(model(view_i))).
// Views are forwarded with the current batch statistics without refreshing θᵇ.
Tensor augmentation_consistency(Model& model, const Tensor& batch, const Tensor& target,
                                const std::vector<bool>& mask, const Augmenter& aug,
                                std::size_t n_aug, std::mt19937_64& rng);

}  // namespace rttdp
