#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rttdp/tensor.hpp"

namespace rttdp {

enum class Architecture { Mlp, Cnn };

struct ArchSpec {
  Architecture kind = Architecture::Cnn;
  std::size_t channels = 3;  // CNN input
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t input_dim = 0;  // MLP input
  std::size_t classes = 10;
  std::vector<std::size_t> hidden{8, 16};  // conv channels or dense widths

  static ArchSpec mlp(std::size_t input_dim, std::size_t classes);
  static ArchSpec cnn(std::size_t channels, std::size_t height, std::size_t width,
                      std::size_t classes);

  std::string tag() const;
  // Inverse of tag(); throws FormatError on malformed input.
  static ArchSpec from_tag(const std::string& tag);
  Shape input_shape(std::size_t batch) const;
  std::size_t sample_size() const;
};

// θᵘ / θᵇ / θᶠ partition label of a parameter tensor.
enum class ParamRole : char { Updatable = 'u', BnStat = 'b', Frozen = 'f' };

// Which parameters form θᵘ at construction time.
enum class UpdateScope { BnAffine, Full };

enum class StatsMode { Train, Eval };

// Which leaves record gradients during the next forward.
enum class GradScope { None, Updatable, Learnable };

struct Parameter {
  std::string name;
  Tensor value;
  ParamRole role;
};

/// Pre-normalization activations, one entry per batch-norm layer.
struct FeatureTrace {
  std::vector<Tensor> layers;
};

struct ForwardResult {
  Tensor logits;
  std::optional<FeatureTrace> trace;
};

struct ForwardOptions {
  StatsMode mode = StatsMode::Eval;
  bool capture = false;
  // In train mode, fold the batch statistics into θᵇ.
  bool refresh_stats = true;
};

class Model {
 public:
  Model(ArchSpec spec, std::uint64_t seed, UpdateScope scope = UpdateScope::BnAffine);

  // Deep copies: a copied model never aliases the source's parameters.
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ArchSpec& arch() const { return spec_; }
  std::string tag() const { return spec_.tag(); }

  ForwardResult forward(const Tensor& x, const ForwardOptions& opts);
  ForwardResult forward(const Tensor& x, StatsMode mode, bool capture = false) {
    return forward(x, ForwardOptions{mode, capture, true});
  }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;

  std::size_t bn_layer_count() const;
  std::size_t scalar_count(ParamRole role) const;

  void set_grad_scope(GradScope scope);
  // Re-labels conv/linear weights: θᵘ under Full, frozen under BnAffine.
  void set_update_scope(UpdateScope scope);
  void zero_grad();
  // Copies every value (all roles) from a model with the same tag.
  void copy_values_from(const Model& other);

  // Fraction of the batch statistics folded into θᵇ per train-mode forward.
  double bn_momentum = 1.0;
  double bn_eps = 1e-5;

  // Forward passes run on this instance (copies start at zero).
  std::size_t forward_count() const { return forwards_; }

 private:
  struct Layer {
    enum class Kind { Linear, Conv, BatchNorm, Relu, GlobalPool } kind;
    std::size_t p0 = 0, p1 = 0, p2 = 0, p3 = 0;  // parameter indices
    std::size_t stride = 1, padding = 0;
  };

  std::size_t add_param(std::string name, Tensor value, ParamRole role);
  void build(std::uint64_t seed, UpdateScope scope);

  ArchSpec spec_;
  std::vector<Layer> layers_;
  std::vector<Parameter> params_;
  std::size_t forwards_ = 0;
};

// Softmax posteriors as a detached [N,K] tensor.
Tensor posteriors(const Tensor& logits);

struct EmaModel {
  Model shadow;
  double momentum = 0.999;
};

// shadow ← m·shadow + (1−m)·online for every parameter and statistic.
void ema_update(EmaModel& ema, const Model& online);

// Resets each θᵘ scalar to its source value with probability p; returns the count.
std::size_t stochastic_restore(Model& model, const Model& source, double p, std::mt19937_64& rng);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
// Loads into `model`; the file's architecture tag must match.
void load_checkpoint(Model& model, const std::filesystem::path& path);
// Reconstructs the architecture from the stored tag.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace rttdp
