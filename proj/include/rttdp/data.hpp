#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rttdp/nn.hpp"

namespace rttdp {

enum class CorruptionKind { GaussianNoise, BlurProxy, Contrast, RotationProxy };

std::string corruption_name(CorruptionKind kind);
CorruptionKind corruption_from_name(const std::string& name);  // ConfigError if unknown

struct Corruption {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;  // 0 = clean, 1..5 increasing strength
};

struct InputForm {
  bool image = true;
  std::size_t channels = 3, height = 16, width = 16;  // image form
  std::size_t dim = 0;                                // vector form

  std::size_t sample_size() const { return image ? channels * height * width : dim; }
  bool operator==(const InputForm&) const = default;
};

struct SyntheticSpec {
  std::size_t classes = 10;
  InputForm form;
  double separation = 1.0;
  double noise = 0.1;
  std::vector<Corruption> segments;
  std::size_t samples_per_segment = 512;
  std::uint64_t seed = 0;
};

struct SegmentInfo {
  std::string name;  // corruption name, or a free label for imported data
  int severity = 0;
  std::size_t count = 0;
  bool operator==(const SegmentInfo&) const = default;
};

// Flat labeled sample store; records keep their segment order.
struct Dataset {
  std::size_t classes = 0;
  InputForm form;
  std::vector<SegmentInfo> segments;
  std::vector<int> labels;
  std::vector<double> values;  // size() × form.sample_size()

  std::size_t size() const { return labels.size(); }
  std::size_t segment_begin(std::size_t s) const;
  const double* sample(std::size_t i) const { return values.data() + i * form.sample_size(); }
  // Gathers samples into a [n, ...] tensor shaped for `form`.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  bool operator==(const Dataset&) const = default;
};

// Index pools of one segment: even offsets feed the adversary, odd offsets the benign users.
struct SegmentPools {
  std::vector<std::size_t> adversary;
  std::vector<std::size_t> benign;
};
std::vector<SegmentPools> split_pools(const Dataset& data);

// Test stream: one block of samples per segment, corrupted per segment.
Dataset generate(const SyntheticSpec& spec);
// Uncorrupted draw from the same class-conditional world, independent of the stream samples.
Dataset generate_clean(const SyntheticSpec& spec, std::size_t count, std::uint64_t draw);

void apply_corruption(std::span<double> sample, const InputForm& form, Corruption c,
                      std::uint64_t noise_seed);

ArchSpec default_arch(const SyntheticSpec& spec);
ArchSpec default_arch(std::size_t classes, const InputForm& form);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
// Header row `label,f1,f2,...`; one vector-form sample per line.
Dataset import_csv(const std::filesystem::path& path);

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t train_size = 2000;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double target_accuracy = 0.98;
  double minimum_accuracy = 0.80;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  Model model;
  std::size_t epochs_run = 0;
  double train_accuracy = 0.0;
};

// Supervised training on a clean draw; all weights train, BN statistics track with momentum 0.1.
PretrainResult pretrain_source(const SyntheticSpec& spec, const ArchSpec& arch,
                               const PretrainConfig& cfg);

// Eval-stats accuracy of `model` on every sample of `data`.
double accuracy(Model& model, const Dataset& data, std::size_t batch = 256);

}  // namespace rttdp
