#include "rttdp/tta.hpp"

#include <algorithm>
#include <cmath>

#include "rttdp/errors.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

std::string method_name(TtaMethod m) {
  switch (m) {
    case TtaMethod::Source: return "source";
    case TtaMethod::Tent: return "tent-lite";
    case TtaMethod::Rpl: return "rpl-lite";
    case TtaMethod::Eata: return "eata-lite";
    case TtaMethod::Cotta: return "cotta-lite";
  }
  return "?";
}

TtaMethod method_from_name(const std::string& name) {
  for (auto m : {TtaMethod::Source, TtaMethod::Tent, TtaMethod::Rpl, TtaMethod::Eata, TtaMethod::Cotta}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown TTA method '" + name + "'");
}

void TtaConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("tta: learning rate must be > 0");
  if (!(threshold_coef > 0.0 && threshold_coef < 1.0)) throw ConfigError("tta: threshold coefficient outside (0,1)");
  if (!(restore_p >= 0.0 && restore_p <= 1.0)) throw ConfigError("tta: restore probability outside [0,1]");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("tta: EMA momentum outside [0,1]");
  if (!(gce_q > 0.0 && gce_q <= 1.0)) throw ConfigError("tta: GCE exponent outside (0,1]");
  if (!(eata_margin > 0.0 && eata_margin <= 1.0)) throw ConfigError("tta: eata margin outside (0,1]");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("tta: BN momentum outside [0,1]");
  if (augment.noise < 0.0) throw ConfigError("tta: augmentation noise must be >= 0");
  if (effective_defenses().augmentation && n_aug == 0) throw ConfigError("tta: augmentation needs n_aug >= 1");
}

DefenseFlags TtaConfig::effective_defenses() const {
  DefenseFlags d = defenses;
  if (method == TtaMethod::Cotta) d.ema = d.augmentation = d.restore = true;
  if (method == TtaMethod::Source) d = DefenseFlags{};
  return d;
}

std::string TtaConfig::label() const {
  std::string s = method_name(method);
  if (method == TtaMethod::Source || method == TtaMethod::Cotta) return s;
  if (defenses.entropy_threshold) s += "+thresh";
  if (defenses.augmentation) s += "+aug";
  if (defenses.ema) s += "+ema";
  if (defenses.restore) s += "+restore";
  if (scope == UpdateScope::Full) s += "+full";
  return s;
}

TtaState make_tta_state(const Model& source, const TtaConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TtaState s{source, source, std::nullopt, std::mt19937_64(seed), {}};
  s.model.bn_momentum = cfg.bn_momentum;
  s.model.set_update_scope(cfg.scope);
  if (cfg.uses_teacher()) {
    s.teacher = EmaModel{source, cfg.ema_momentum};
    s.teacher->shadow.bn_momentum = cfg.bn_momentum;
  }
  return s;
}

std::vector<bool> entropy_filter(std::span<const double> posteriors, std::size_t classes,
                                 double coefficient, double log_base) {
  const auto h = row_entropy(posteriors, classes, log_base);
  const double max_h = log_base > 0.0 ? std::log(static_cast<double>(classes)) / std::log(log_base)
                                      : std::log(static_cast<double>(classes));
  std::vector<bool> mask(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) mask[i] = h[i] < coefficient * max_h;
  return mask;
}

Tensor gce_loss(const Tensor& probs, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ContractError("gce_loss: q outside (0,1]");
  const std::size_t k = probs.dim(1);
  const auto labels = row_argmax(probs.values(), k);
  Tensor picked = sum_axis(mul(probs, one_hot(labels, k)), 1);
  // clamp keeps pow's derivative finite when a probability underflows to 0
  Tensor per = scale(add_scalar(scale(pow(clamp(picked, 1e-12, 1.0), q), -1.0), 1.0), 1.0 / q);
  return mean(per);
}

Tensor augment(const Tensor& batch, const Augmenter& aug, std::mt19937_64& rng) {
  Tensor out = batch.detach();
  auto v = out.values_mut();
  if (aug.flip && batch.rank() == 4) {
    std::bernoulli_distribution coin(0.5);
    const std::size_t n = batch.dim(0), rows = batch.dim(1) * batch.dim(2), w = batch.dim(3);
    for (std::size_t i = 0; i < n; ++i) {
      if (!coin(rng)) continue;
      for (std::size_t r = 0; r < rows; ++r) {
        double* row = v.data() + (i * rows + r) * w;
        std::reverse(row, row + w);
      }
    }
  }
  if (aug.noise > 0.0) {
    std::normal_distribution<double> n(0.0, aug.noise);
    for (auto& x : v) x = std::clamp(x + n(rng), 0.0, 1.0);
  }
  return out;
}

namespace {

Tensor masked_mean(const Tensor& per_sample, const std::vector<double>& weights) {
  double count = 0.0;
  for (double w : weights) count += w > 0.0 ? 1.0 : 0.0;
  if (count == 0.0) return Tensor();
  Tensor w({weights.size()}, weights);
  return scale(sum(mul(per_sample, w)), 1.0 / count);
}

Tensor mask_weights_tensor(const std::vector<bool>& mask) {
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  return Tensor({w.size()}, w);
}

}  // namespace

Tensor augmentation_consistency(Model& model, const Tensor& batch, const Tensor& target,
                                const std::vector<bool>& mask, const Augmenter& aug,
                                std::size_t n_aug, std::mt19937_64& rng) {
  if (n_aug == 0) throw ContractError("augmentation_consistency: n_aug must be >= 1");
  if (mask.size() != batch.dim(0)) throw ShapeError("augmentation_consistency: mask length");
  std::size_t selected = 0;
  for (bool m : mask) selected += m;
  if (selected == 0) return Tensor({}, 0.0);
  const Tensor w = mask_weights_tensor(mask);
  Tensor total;
  for (std::size_t a = 0; a < n_aug; ++a) {
    Tensor view = augment(batch, aug, rng);
    Tensor logits = model.forward(view, ForwardOptions{StatsMode::Train, false, false}).logits;
    Tensor term = sum(mul(soft_cross_entropy(logits, target), w));
    total = a == 0 ? term : add(total, term);
  }
  return scale(total, 1.0 / static_cast<double>(selected * n_aug));
}

AdaptResult adapt_step(TtaState& state, const Tensor& batch, const TtaConfig& cfg) {
  if (batch.rank() == 0 || batch.dim(0) == 0) throw ContractError("adapt_step: empty batch");
  const DefenseFlags def = cfg.effective_defenses();
  if (def.ema && !state.teacher) throw ContractError("adapt_step: configuration needs an EMA teacher");
  Model& model = state.model;
  const std::size_t n = batch.dim(0);
  const std::size_t k = model.arch().classes;
  AdaptResult result;
  result.step.mask.assign(n, true);
  result.step.weights.assign(n, 1.0);

  if (cfg.method == TtaMethod::Source) {
    NoGradGuard guard;
    result.posteriors = posteriors(model.forward(batch, StatsMode::Eval).logits);
    return result;
  }

  model.set_grad_scope(GradScope::Updatable);
  model.zero_grad();
  Tensor logits = model.forward(batch, StatsMode::Train).logits;
  Tensor student_post = posteriors(logits);
  Tensor reference = student_post;
  if (def.ema) {
    NoGradGuard guard;
    reference = posteriors(state.teacher->shadow.forward(batch, StatsMode::Train).logits);
  }
  result.posteriors = reference;

  // Sample selection and weighting.
  std::vector<bool>& mask = result.step.mask;
  std::vector<double>& weights = result.step.weights;
  const auto h = row_entropy(reference.values(), k, cfg.log_base);
  if (def.entropy_threshold) mask = entropy_filter(reference.values(), k, cfg.threshold_coef, cfg.log_base);
  if (cfg.method == TtaMethod::Eata) {
    const auto reliable = entropy_filter(reference.values(), k, cfg.eata_margin, cfg.log_base);
    const double e0 = cfg.eata_margin * (cfg.log_base > 0.0 ? std::log(static_cast<double>(k)) / std::log(cfg.log_base)
                                                            : std::log(static_cast<double>(k)));
    auto p = reference.values();
    for (std::size_t i = 0; i < n; ++i) {
      mask[i] = mask[i] && reliable[i];
      double w = std::exp(e0 - h[i]);
      if (!state.mean_posterior.empty()) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          dot += p[i * k + c] * state.mean_posterior[c];
          na += p[i * k + c] * p[i * k + c];
          nb += state.mean_posterior[c] * state.mean_posterior[c];
        }
        w *= 1.0 - dot / std::sqrt(std::max(na * nb, 1e-24));
      }
      weights[i] = w;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!mask[i]) weights[i] = 0.0;

  Tensor per_sample;
  if (def.ema) {
    per_sample = soft_cross_entropy(logits, reference);
  } else if (cfg.method == TtaMethod::Rpl) {
    const auto labels = row_argmax(student_post.values(), k);
    Tensor picked = sum_axis(mul(softmax(logits), one_hot(labels, k)), 1);
    per_sample = scale(add_scalar(scale(pow(clamp(picked, 1e-12, 1.0), cfg.gce_q), -1.0), 1.0), 1.0 / cfg.gce_q);
  } else {
    per_sample = softmax_entropy(logits);
  }
  Tensor loss = masked_mean(per_sample, weights);
  if (def.augmentation) {
    Tensor aug = augmentation_consistency(model, batch, reference, mask, cfg.augment, cfg.n_aug, state.rng);
    loss = loss.numel() ? add(loss, aug) : aug;
  }

  if (loss.numel() && loss.requires_grad()) {
    result.step.loss = loss.item();
    backward(loss);
    double norm2 = 0.0;
    for (auto& p : model.parameters()) {
      if (p.role != ParamRole::Updatable) continue;
      auto g = p.value.grad();
      if (g.empty()) continue;
      auto v = p.value.values_mut();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = cfg.lr * g[i];
        v[i] -= d;
        norm2 += d * d;
      }
    }
    result.step.update_norm = std::sqrt(norm2);
  }
  model.set_grad_scope(GradScope::None);

  if (cfg.method == TtaMethod::Eata) {
    std::vector<double> m(k, 0.0);
    std::size_t sel = 0;
    auto p = reference.values();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      ++sel;
      for (std::size_t c = 0; c < k; ++c) m[c] += p[i * k + c];
    }
    if (sel) {
      for (auto& v : m) v /= static_cast<double>(sel);
      if (state.mean_posterior.empty()) {
        state.mean_posterior = m;
      } else {
        for (std::size_t c = 0; c < k; ++c)
          state.mean_posterior[c] = cfg.eata_mean_momentum * state.mean_posterior[c] +
                                    (1.0 - cfg.eata_mean_momentum) * m[c];
      }
    }
  }
  if (def.ema) ema_update(*state.teacher, model);
  if (def.restore) result.step.restored = stochastic_restore(model, state.source, cfg.restore_p, state.rng);
  return result;
}

}  // namespace rttdp
