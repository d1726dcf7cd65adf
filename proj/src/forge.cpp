#include "rttdp/forge.hpp"

#include <algorithm>
#include <cmath>

#include "rttdp/errors.hpp"
#include "rttdp/linalg.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

namespace {
constexpr double kProbFloor = 1e-12;

Tensor floored_log_softmax(const Tensor& logits) { return log(clamp(softmax(logits), kProbFloor, 1.0)); }

void require_labels(const Tensor& logits, std::span<const int> labels, const char* who) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError(std::string(who) + ": logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (logits.dim(1) < 2) throw ContractError(std::string(who) + ": need K >= 2");
}
}  // namespace

std::string attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::Nhe: return "nhe";
    case AttackKind::Ble: return "ble";
    case AttackKind::MaxCe: return "maxce";
    case AttackKind::Tepa: return "tepa";
    case AttackKind::Unlearnable: return "unlearnable";
    case AttackKind::AdvPoison: return "advpoison";
    case AttackKind::Dia: return "dia";
  }
  return "?";
}

AttackKind attack_from_name(const std::string& name) {
  for (auto k : {AttackKind::Nhe, AttackKind::Ble, AttackKind::MaxCe, AttackKind::Tepa,
                 AttackKind::Unlearnable, AttackKind::AdvPoison, AttackKind::Dia}) {
    if (attack_name(k) == name) return k;
  }
  throw ConfigError("unknown attack '" + name + "'");
}

AttackConfig AttackConfig::defaults_for(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  const bool ours = kind == AttackKind::Nhe || kind == AttackKind::Ble;
  c.regularize = ours;
  c.reference = ours ? ReferenceModel::Surrogate
                     : (kind == AttackKind::Unlearnable ? ReferenceModel::RandomInit : ReferenceModel::Source);
  return c;
}

void AttackConfig::validate() const {
  if (!(pgd.budget >= 0.0)) throw ConfigError("attack: budget must be >= 0");
  if (!(pgd.alpha > 0.0)) throw ConfigError("attack: step size must be > 0");
  if (!(pgd.lambda_rate >= 0.0)) throw ConfigError("attack: lambda rate must be >= 0");
  if (kind == AttackKind::Ble && !(ble_momentum >= 0.0 && ble_momentum <= 1.0)) {
    throw ConfigError("attack: BLE momentum outside [0,1]");
  }
}

std::string AttackConfig::label() const {
  const AttackConfig d = defaults_for(kind);
  std::string s = attack_name(kind);
  if (regularize != d.regularize) s += regularize ? "+reg" : "-reg";
  if (kind == AttackKind::Ble && solver == MappingSolver::Exact) s += "+exact";
  return s;
}

PoisonBatch make_poison_batch(const Tensor& clean, std::vector<int> labels, double budget) {
  if (clean.rank() == 0 || clean.dim(0) != labels.size()) {
    throw ContractError("poison batch: " + std::to_string(labels.size()) + " labels for input " +
                        shape_str(clean.shape()));
  }
  PoisonBatch b;
  b.clean = clean.detach();
  b.perturbation = Tensor(clean.shape(), 0.0);
  b.poisoned = clean.detach();
  b.labels = std::move(labels);
  b.budget = budget;
  return b;
}

Tensor nhe_loss(const Tensor& logits, std::span<const int> labels) {
  require_labels(logits, labels, "nhe_loss");
  const std::size_t n = labels.size(), k = logits.dim(1);
  std::vector<double> q(n * k, 1.0 / static_cast<double>(k - 1));
  for (std::size_t i = 0; i < n; ++i) q[i * k + static_cast<std::size_t>(labels[i])] = 0.0;
  Tensor target({n, k}, std::move(q));
  return scale(mean(sum_axis(mul(target, floored_log_softmax(logits)), 1)), -1.0);
}

Tensor mapped_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_labels(logits, targets, "mapped_cross_entropy");
  Tensor t = one_hot(targets, logits.dim(1));
  return scale(mean(sum_axis(mul(t, floored_log_softmax(logits)), 1)), -1.0);
}

Tensor ble_loss(const Tensor& logits, std::span<const int> labels, std::span<const int> mapping) {
  std::vector<int> mapped(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) mapped[i] = mapping[static_cast<std::size_t>(labels[i])];
  return mapped_cross_entropy(logits, mapped);
}

int adv_poison_target(int label, std::size_t classes) {
  return static_cast<int>((static_cast<std::size_t>(label) + 1) % classes);
}

std::vector<bool> dia_poison_mask(std::size_t n) {
  std::vector<bool> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = i % 2 == 0;
  return m;
}

std::vector<Tensor> feature_consistency(const FeatureTrace& poison, const FeatureTrace& clean,
                                        bool flip_order) {
  if (poison.layers.size() != clean.layers.size()) {
    throw ContractError("feature_consistency: " + std::to_string(poison.layers.size()) + " vs " +
                        std::to_string(clean.layers.size()) + " layers");
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < poison.layers.size(); ++l) {
    const Tensor& zp = poison.layers[l];
    const Tensor& zc = clean.layers[l];
    if (zp.shape() != zc.shape()) {
      throw ContractError("feature_consistency: layer " + std::to_string(l) + " shapes " +
                          shape_str(zp.shape()) + " vs " + shape_str(zc.shape()));
    }
    const bool spatial = zp.rank() == 4 && zp.dim(2) * zp.dim(3) > 1;
    auto [mp, cp] = spatial ? spatial_moments(zp) : batch_moments(zp.rank() == 4 ? reshape(zp, {zp.dim(0), zp.dim(1)}) : zp);
    auto [mc, cc] = spatial ? spatial_moments(zc) : batch_moments(zc.rank() == 4 ? reshape(zc, {zc.dim(0), zc.dim(1)}) : zc);
    Tensor kld = flip_order ? gaussian_kld(mp, cp, mc, cc) : gaussian_kld(mc, cc, mp, cp);
    out.push_back(mean(kld));
  }
  return out;
}

Tensor legacy_objective(AttackKind kind, const Tensor& logits, std::span<const int> labels) {
  require_labels(logits, labels, "legacy_objective");
  const std::size_t k = logits.dim(1);
  switch (kind) {
    case AttackKind::MaxCe: return scale(mean(cross_entropy(logits, labels)), -1.0);
    case AttackKind::Tepa: return scale(mean(softmax_entropy(logits)), -1.0);
    case AttackKind::Unlearnable: return mean(cross_entropy(logits, labels));
    case AttackKind::AdvPoison: {
      std::vector<int> t(labels.size());
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = adv_poison_target(labels[i], k);
      return mean(cross_entropy(logits, t));
    }
    case AttackKind::Dia: {
      // Maximize the error of the held clean half that shares the batch statistics.
      const std::vector<bool> poisoned = dia_poison_mask(labels.size());
      std::vector<double> w(labels.size(), 0.0);
      double held = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i)
        if (!poisoned[i]) held += (w[i] = 1.0);
      if (held == 0.0) throw ContractError("dia: batch needs at least two samples");
      Tensor wt({w.size()}, w);
      return scale(sum(mul(cross_entropy(logits, labels), wt)), -1.0 / held);
    }
    case AttackKind::Nhe:
    case AttackKind::Ble: break;
  }
  throw ContractError("legacy_objective: " + attack_name(kind) + " is not a legacy objective");
}

namespace {

Tensor attack_objective(const AttackConfig& cfg, const Tensor& logits, std::span<const int> labels,
                        std::vector<int>* ble_mapping) {
  switch (cfg.kind) {
    case AttackKind::Nhe: return nhe_loss(logits, labels);
    case AttackKind::Ble: return ble_loss(logits, labels, *ble_mapping);
    default: return legacy_objective(cfg.kind, logits, labels);
  }
}

}  // namespace

PoisonBatch synthesize(const PoisonBatch& batch, const AttackConfig& cfg, ForgeContext ctx,
                       LagrangeState& lagrange, SynthesisTrace* trace) {
  cfg.validate();
  Model* model = nullptr;
  switch (cfg.reference) {
    case ReferenceModel::Surrogate: model = ctx.surrogate; break;
    case ReferenceModel::Source: model = ctx.source; break;
    case ReferenceModel::RandomInit: model = ctx.random_init; break;
  }
  if (!model) throw ContractError("synthesize: the configured reference model was not supplied");
  if (cfg.kind == AttackKind::Ble && !ctx.confusion) throw ContractError("synthesize: BLE needs a confusion state");
  const std::size_t n = batch.labels.size();
  const std::size_t k = model->arch().classes;
  if (cfg.kind == AttackKind::Ble && ctx.confusion->classes != k) throw ContractError("synthesize: confusion size");
  if (cfg.kind == AttackKind::Dia && n < 2) throw ContractError("synthesize: DIA needs at least two samples");

  PoisonBatch out = batch;
  out.budget = cfg.pgd.budget;
  const std::span<const double> clean = batch.clean.values();
  std::vector<double> eps(clean.size(), 0.0);
  const std::vector<bool> sample_mask =
      cfg.kind == AttackKind::Dia ? dia_poison_mask(n) : std::vector<bool>(n, true);
  const std::size_t per_sample = clean.size() / n;

  // The reference model is read-only here: frozen θᵇ, no parameter gradients.
  model->set_grad_scope(GradScope::None);
  const ForwardOptions fo{StatsMode::Train, true, false};
  FeatureTrace clean_trace;
  {
    NoGradGuard guard;
    auto r = model->forward(batch.clean, fo);
    for (auto& z : r.trace->layers) clean_trace.layers.push_back(z.detach());
  }
  const std::size_t layers = clean_trace.layers.size();
  if (lagrange.lambda.empty()) lagrange.lambda.assign(layers, 0.0);
  if (lagrange.lambda.size() != layers) throw ContractError("synthesize: lambda length differs from layer count");

  std::vector<double> staged_confusion;
  std::vector<int> mapping;
  for (std::size_t it = 0; it < cfg.pgd.steps; ++it) {
    std::vector<double> xa(clean.size());
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = clean[i] + eps[i];
    Tensor x(batch.clean.shape(), std::move(xa), true);
    auto r = model->forward(x, fo);
    if (cfg.kind == AttackKind::Ble) {
      // The pseudo-code recomputes C and the mapping on every call from the committed C.
      Tensor post = posteriors(r.logits);
      staged_confusion = blended_confusion(*ctx.confusion, post.values(), batch.labels);
      mapping = solve_mapping(staged_confusion, k, cfg.solver);
    }
    Tensor atk = attack_objective(cfg, r.logits, batch.labels, &mapping);
    Tensor total = atk;
    std::vector<double> reg_values;
    if (cfg.regularize) {
      auto regs = feature_consistency(*r.trace, clean_trace, cfg.flip_kld_order);
      for (std::size_t l = 0; l < layers; ++l) {
        reg_values.push_back(regs[l].item());
        total = add(total, scale(regs[l], lagrange.lambda[l] / static_cast<double>(layers)));
      }
    }
    if (!std::isfinite(total.item())) {
      throw NumericsError("synthesize: non-finite loss at iteration " + std::to_string(it));
    }
    backward(total);
    const auto g = x.grad_or_zeros();
    double max_eps = 0.0;
    bool box = true;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (!sample_mask[i / per_sample]) continue;
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      double e = std::clamp(eps[i] - cfg.pgd.alpha * s, -cfg.pgd.budget, cfg.pgd.budget);
      const double xi = std::clamp(clean[i] + e, 0.0, 1.0);
      eps[i] = xi - clean[i];
      max_eps = std::max(max_eps, std::abs(eps[i]));
      box = box && clean[i] + eps[i] >= 0.0 && clean[i] + eps[i] <= 1.0;
    }
    for (std::size_t l = 0; l < reg_values.size(); ++l) {
      // KLD ≥ 0; rounding can leave a value a few ulps below zero.
      lagrange.lambda[l] += lagrange.rate * std::max(reg_values[l], 0.0) / static_cast<double>(layers);
    }
    if (trace) {
      trace->attack_loss.push_back(atk.item());
      trace->reg.push_back(reg_values);
      trace->lambda.push_back(lagrange.lambda);
      trace->max_abs_eps.push_back(max_eps);
      trace->in_box.push_back(box);
    }
  }
  if (cfg.kind == AttackKind::Ble && cfg.pgd.steps > 0) {
    ctx.confusion->c = staged_confusion;
    ctx.confusion->mapping = mapping;
  }

  std::vector<double> pv(clean.size());
  for (std::size_t i = 0; i < pv.size(); ++i) pv[i] = std::clamp(clean[i] + eps[i], 0.0, 1.0);
  out.perturbation = Tensor(batch.clean.shape(), eps);
  out.poisoned = Tensor(batch.clean.shape(), std::move(pv));

  if (trace) {
    NoGradGuard guard;
    auto r = model->forward(out.poisoned, fo);
    auto regs = feature_consistency(*r.trace, clean_trace, cfg.flip_kld_order);
    double s = 0.0;
    for (auto& t : regs) s += t.item();
    trace->final_feature_kld = layers ? s / static_cast<double>(layers) : 0.0;
    const auto h = row_entropy(posteriors(r.logits).values(), k);
    double hm = 0.0;
    for (double v : h) hm += v;
    trace->final_entropy = hm / static_cast<double>(n);
  }
  return out;
}

}  // namespace rttdp
