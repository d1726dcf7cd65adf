#include "rttdp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "rttdp/errors.hpp"
#include "rttdp/losses.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

namespace {

constexpr char kDataMagic[8] = {'R', 'T', 'D', 'P', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDataVersion = 1;

// Stream tags keep the world, the clean draws and the corruption noise independent.
constexpr std::uint64_t kWorldTag = 0x574f524c44;
constexpr std::uint64_t kSampleTag = 0x53414d50;
constexpr std::uint64_t kNoiseTag = 0x4e4f4953;

std::mt19937_64 seeded(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
                    static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d >> 32)};
  return std::mt19937_64(seq);
}

// Class-conditional generator parameters derived from SyntheticSpec::seed alone.
struct World {
  std::vector<std::vector<double>> centers;  // vector form
  std::vector<double> angle, freq;           // image form
  std::vector<std::vector<double>> color, offset;
};

World make_world(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic spec: need at least 2 classes");
  if (spec.form.sample_size() == 0) throw ConfigError("synthetic spec: empty input form");
  auto rng = seeded(spec.seed, kWorldTag, 0);
  std::normal_distribution<double> n(0.0, 1.0);
  World w;
  const std::size_t k = spec.classes;
  if (!spec.form.image) {
    w.centers.assign(k, std::vector<double>(spec.form.dim));
    for (auto& c : w.centers)
      for (auto& v : c) v = 0.5 + 0.15 * spec.separation * n(rng);
    return w;
  }
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (std::size_t c = 0; c < k; ++c) {
    w.angle.push_back(std::numbers::pi * (static_cast<double>(c) + jitter(rng)) / static_cast<double>(k));
    w.freq.push_back(1.5 + static_cast<double>(c % 3));
    std::vector<double> col(spec.form.channels), off(spec.form.channels);
    double norm = 0.0;
    for (auto& v : col) norm += (v = n(rng)) * v;
    for (auto& v : col) v /= std::sqrt(norm);
    for (auto& v : off) v = 0.08 * n(rng);
    w.color.push_back(col);
    w.offset.push_back(off);
  }
  return w;
}

void draw_sample(const SyntheticSpec& spec, const World& w, int label, std::mt19937_64& rng,
                 std::span<double> out) {
  std::normal_distribution<double> n(0.0, 1.0);
  const auto k = static_cast<std::size_t>(label);
  if (!spec.form.image) {
    for (std::size_t d = 0; d < out.size(); ++d) out[d] = w.centers[k][d] + spec.noise * n(rng);
  } else {
    const auto& f = spec.form;
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double phi = phase(rng);
    const double amp = 0.25 * spec.separation;
    const double ca = std::cos(w.angle[k]), sa = std::sin(w.angle[k]);
    for (std::size_t c = 0; c < f.channels; ++c)
      for (std::size_t h = 0; h < f.height; ++h)
        for (std::size_t x = 0; x < f.width; ++x) {
          const double t = 2.0 * std::numbers::pi * w.freq[k] *
                           (ca * static_cast<double>(x) + sa * static_cast<double>(h)) /
                           static_cast<double>(f.width);
          out[(c * f.height + h) * f.width + x] = 0.5 + spec.separation * w.offset[k][c] +
                                                  amp * w.color[k][c] * std::sin(t + phi) +
                                                  spec.noise * n(rng);
        }
  }
  for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
}

void box_blur_image(std::span<double> x, const InputForm& f) {
  std::vector<double> src(x.begin(), x.end());
  const auto H = static_cast<long>(f.height), W = static_cast<long>(f.width);
  for (std::size_t c = 0; c < f.channels; ++c) {
    const double* s = src.data() + c * f.height * f.width;
    double* d = x.data() + c * f.height * f.width;
    for (long h = 0; h < H; ++h)
      for (long w = 0; w < W; ++w) {
        double acc = 0.0;
        for (long dh = -1; dh <= 1; ++dh)
          for (long dw = -1; dw <= 1; ++dw) {
            const long hh = std::clamp(h + dh, 0L, H - 1), ww = std::clamp(w + dw, 0L, W - 1);
            acc += s[hh * W + ww];
          }
        d[h * W + w] = acc / 9.0;
      }
  }
}

void rotate_image(std::span<double> x, const InputForm& f, double radians) {
  std::vector<double> src(x.begin(), x.end());
  const double cy = (static_cast<double>(f.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(f.width) - 1.0) / 2.0;
  const double ca = std::cos(radians), sa = std::sin(radians);
  const auto H = static_cast<long>(f.height), W = static_cast<long>(f.width);
  for (std::size_t c = 0; c < f.channels; ++c) {
    const double* s = src.data() + c * f.height * f.width;
    double* d = x.data() + c * f.height * f.width;
    auto at = [&](long h, long w) { return s[std::clamp(h, 0L, H - 1) * W + std::clamp(w, 0L, W - 1)]; };
    for (long h = 0; h < H; ++h)
      for (long w = 0; w < W; ++w) {
        // Inverse map: sample the source at the position rotated back.
        const double dy = static_cast<double>(h) - cy, dx = static_cast<double>(w) - cx;
        const double sy = cy + ca * dy + sa * dx, sx = cx - sa * dy + ca * dx;
        const long y0 = static_cast<long>(std::floor(sy)), x0 = static_cast<long>(std::floor(sx));
        const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
        d[h * W + w] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                       fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
  }
}

}  // namespace

std::string corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::GaussianNoise: return "gaussian-noise";
    case CorruptionKind::BlurProxy: return "blur-proxy";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::RotationProxy: return "rotation-proxy";
  }
  return "?";
}

CorruptionKind corruption_from_name(const std::string& name) {
  for (auto k : {CorruptionKind::GaussianNoise, CorruptionKind::BlurProxy, CorruptionKind::Contrast,
                 CorruptionKind::RotationProxy}) {
    if (corruption_name(k) == name) return k;
  }
  throw ConfigError("unknown corruption '" + name + "'");
}

void apply_corruption(std::span<double> x, const InputForm& form, Corruption c,
                      std::uint64_t noise_seed) {
  if (c.severity < 0 || c.severity > 5) {
    throw ConfigError("corruption severity " + std::to_string(c.severity) + " outside 0..5");
  }
  if (c.severity == 0) return;
  const double s = c.severity;
  switch (c.kind) {
    case CorruptionKind::GaussianNoise: {
      auto rng = seeded(noise_seed, kNoiseTag, 0);
      std::normal_distribution<double> n(0.0, 0.05 * s);
      for (auto& v : x) v += n(rng);
      break;
    }
    case CorruptionKind::BlurProxy:
      for (int pass = 0; pass < c.severity; ++pass) {
        if (form.image) {
          box_blur_image(x, form);
        } else {
          std::vector<double> src(x.begin(), x.end());
          const std::size_t d = src.size();
          for (std::size_t i = 0; i < d; ++i)
            x[i] = 0.25 * src[(i + d - 1) % d] + 0.5 * src[i] + 0.25 * src[(i + 1) % d];
        }
      }
      break;
    case CorruptionKind::Contrast: {
      static constexpr double kFactor[5] = {0.7, 0.55, 0.4, 0.3, 0.2};
      const double f = kFactor[c.severity - 1];
      const std::size_t groups = form.image ? form.channels : 1;
      const std::size_t per = x.size() / groups;
      for (std::size_t g = 0; g < groups; ++g) {
        auto part = x.subspan(g * per, per);
        double m = 0.0;
        for (double v : part) m += v;
        m /= static_cast<double>(per);
        for (auto& v : part) v = m + (v - m) * f;
      }
      break;
    }
    case CorruptionKind::RotationProxy: {
      const double rad = (form.image ? 15.0 : 12.0) * s * std::numbers::pi / 180.0;
      if (form.image) {
        rotate_image(x, form, rad);
      } else {
        const double ca = std::cos(rad), sa = std::sin(rad);
        for (std::size_t i = 0; i + 1 < x.size(); i += 2) {
          const double a = x[i] - 0.5, b = x[i + 1] - 0.5;
          x[i] = 0.5 + ca * a - sa * b;
          x[i + 1] = 0.5 + sa * a + ca * b;
        }
      }
      break;
    }
  }
  for (auto& v : x) v = std::clamp(v, 0.0, 1.0);
}

std::size_t Dataset::segment_begin(std::size_t s) const {
  std::size_t b = 0;
  for (std::size_t i = 0; i < s; ++i) b += segments[i].count;
  return b;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t d = form.sample_size();
  Shape shape = form.image ? Shape{indices.size(), form.channels, form.height, form.width}
                           : Shape{indices.size(), form.dim};
  std::vector<double> v(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw ContractError("dataset: index " + std::to_string(indices[i]) + " out of range");
    std::memcpy(v.data() + i * d, sample(indices[i]), d * sizeof(double));
  }
  return Tensor(std::move(shape), std::move(v));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<SegmentPools> split_pools(const Dataset& data) {
  std::vector<SegmentPools> pools(data.segments.size());
  std::size_t base = 0;
  for (std::size_t s = 0; s < data.segments.size(); ++s) {
    for (std::size_t j = 0; j < data.segments[s].count; ++j) {
      (j % 2 == 0 ? pools[s].adversary : pools[s].benign).push_back(base + j);
    }
    base += data.segments[s].count;
  }
  return pools;
}

namespace {

Dataset empty_like(const SyntheticSpec& spec) {
  Dataset d;
  d.classes = spec.classes;
  d.form = spec.form;
  return d;
}

void append_draws(Dataset& d, const SyntheticSpec& spec, const World& w, std::size_t count,
                  std::uint64_t draw, std::uint64_t first_index, std::optional<Corruption> corruption) {
  const std::size_t dim = spec.form.sample_size();
  const std::size_t start = d.labels.size();
  d.labels.resize(start + count);
  d.values.resize((start + count) * dim);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + i;
    auto rng = seeded(spec.seed, kSampleTag, draw, index);
    const int label = static_cast<int>(rng() % spec.classes);
    std::span<double> out(d.values.data() + (start + i) * dim, dim);
    draw_sample(spec, w, label, rng, out);
    if (corruption) apply_corruption(out, spec.form, *corruption, rng());
    d.labels[start + i] = label;
  }
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  const World w = make_world(spec);
  Dataset d = empty_like(spec);
  std::uint64_t index = 0;
  for (const auto& c : spec.segments) {
    append_draws(d, spec, w, spec.samples_per_segment, 1, index, c);
    d.segments.push_back({corruption_name(c.kind), c.severity, spec.samples_per_segment});
    index += spec.samples_per_segment;
  }
  return d;
}

Dataset generate_clean(const SyntheticSpec& spec, std::size_t count, std::uint64_t draw) {
  const World w = make_world(spec);
  Dataset d = empty_like(spec);
  // Draw 1 is reserved for the test stream.
  append_draws(d, spec, w, count, draw + 2, 0, std::nullopt);
  d.segments.push_back({"clean", 0, count});
  return d;
}

ArchSpec default_arch(std::size_t classes, const InputForm& form) {
  return form.image ? ArchSpec::cnn(form.channels, form.height, form.width, classes)
                    : ArchSpec::mlp(form.dim, classes);
}

ArchSpec default_arch(const SyntheticSpec& spec) { return default_arch(spec.classes, spec.form); }

// Layout: "RTDPDATA" | u32 version | u32 K | u8 image | u32 C,H,W,D |
//         u32 segments × { str name | i32 severity | u64 count } | u64 N |
//         N × { i32 label | f64 values[sample_size] }
void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("dataset: cannot open '" + path.string() + "' for writing");
  os.write(kDataMagic, sizeof kDataMagic);
  detail::Writer w(os);
  w.put<std::uint32_t>(kDataVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(data.classes));
  w.put<std::uint8_t>(data.form.image ? 1 : 0);
  for (auto v : {data.form.channels, data.form.height, data.form.width, data.form.dim})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(data.segments.size()));
  for (const auto& s : data.segments) {
    w.str(s.name);
    w.put<std::int32_t>(s.severity);
    w.put<std::uint64_t>(s.count);
  }
  w.put<std::uint64_t>(data.size());
  const std::size_t d = data.form.sample_size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    w.put<std::int32_t>(data.labels[i]);
    for (std::size_t j = 0; j < d; ++j) w.put<double>(data.values[i * d + j]);
  }
  if (!os) throw FormatError("dataset: write failed for '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dataset: cannot open '" + path.string() + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kDataMagic, sizeof magic) != 0) throw FormatError("dataset: bad magic");
  detail::Reader r(is, "dataset '" + path.string() + "'");
  const auto version = r.get<std::uint32_t>();
  if (version != kDataVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  Dataset d;
  d.classes = r.get<std::uint32_t>();
  d.form.image = r.get<std::uint8_t>() != 0;
  d.form.channels = r.get<std::uint32_t>();
  d.form.height = r.get<std::uint32_t>();
  d.form.width = r.get<std::uint32_t>();
  d.form.dim = r.get<std::uint32_t>();
  const auto nseg = r.get<std::uint32_t>();
  std::size_t total = 0;
  for (std::uint32_t s = 0; s < nseg; ++s) {
    SegmentInfo info;
    info.name = r.str();
    info.severity = r.get<std::int32_t>();
    info.count = r.get<std::uint64_t>();
    total += info.count;
    d.segments.push_back(info);
  }
  const auto n = r.get<std::uint64_t>();
  if (n != total) throw FormatError("dataset: segment counts sum to " + std::to_string(total) + ", header says " + std::to_string(n));
  const std::size_t dim = d.form.sample_size();
  if (d.classes < 2 || dim == 0) throw FormatError("dataset: invalid header");
  d.labels.resize(n);
  d.values.resize(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = r.get<std::int32_t>();
    if (d.labels[i] < 0 || static_cast<std::size_t>(d.labels[i]) >= d.classes)
      throw FormatError("dataset: label out of range at record " + std::to_string(i));
    for (std::size_t j = 0; j < dim; ++j) d.values[i * dim + j] = r.get<double>();
  }
  return d;
}

Dataset import_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("csv: cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw FormatError("csv: empty file");
  const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw FormatError("csv: need a label column and at least one feature");
  Dataset d;
  d.form.image = false;
  d.form.dim = columns - 1;
  int max_label = -1;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw FormatError("csv line " + std::to_string(lineno) + ": cannot parse '" + cell + "'");
      }
    }
    if (row.size() != columns) {
      throw FormatError("csv line " + std::to_string(lineno) + ": " + std::to_string(row.size()) +
                        " fields, header has " + std::to_string(columns));
    }
    const double l = row[0];
    if (l < 0 || l != std::floor(l)) throw FormatError("csv line " + std::to_string(lineno) + ": bad label");
    d.labels.push_back(static_cast<int>(l));
    max_label = std::max(max_label, static_cast<int>(l));
    d.values.insert(d.values.end(), row.begin() + 1, row.end());
  }
  d.classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
  d.segments.push_back({"external", 0, d.labels.size()});
  return d;
}

double accuracy(Model& model, const Dataset& data, std::size_t batch) {
  NoGradGuard guard;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < data.size(); b += batch) {
    idx.clear();
    for (std::size_t i = b; i < std::min(data.size(), b + batch); ++i) idx.push_back(i);
    Tensor logits = model.forward(data.batch(idx), StatsMode::Eval).logits;
    auto pred = row_argmax(logits.values(), data.classes);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

PretrainResult pretrain_source(const SyntheticSpec& spec, const ArchSpec& arch,
                               const PretrainConfig& cfg) {
  Model model(arch, cfg.seed);
  PretrainResult result{model, 0, 0.0};
  if (cfg.epochs == 0) return result;

  const Dataset train = generate_clean(spec, cfg.train_size, cfg.seed);
  model.bn_momentum = 0.1;
  model.set_grad_scope(GradScope::Learnable);
  std::vector<std::vector<double>> velocity;
  for (const auto& p : model.parameters()) velocity.emplace_back(p.value.numel(), 0.0);

  std::mt19937_64 rng(cfg.seed ^ 0x5052455452414e);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double acc = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b + 2 <= order.size(); b += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
      const auto labels = train.batch_labels(idx);
      model.zero_grad();
      Tensor loss = mean(cross_entropy(model.forward(train.batch(idx), StatsMode::Train).logits, labels));
      if (!std::isfinite(loss.item())) {
        throw TrainingDivergedError("pretrain: non-finite loss in epoch " + std::to_string(epoch));
      }
      backward(loss);
      auto& params = model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].role == ParamRole::BnStat) continue;
        auto g = params[i].value.grad();
        if (g.empty()) continue;
        auto v = params[i].value.values_mut();
        for (std::size_t k = 0; k < v.size(); ++k) {
          velocity[i][k] = cfg.momentum * velocity[i][k] + g[k];
          v[k] -= cfg.lr * velocity[i][k];
        }
      }
    }
    result.epochs_run = epoch + 1;
    acc = accuracy(model, train);
    if (acc >= cfg.target_accuracy) break;
  }
  model.set_grad_scope(GradScope::None);
  model.bn_momentum = 1.0;
  if (acc < cfg.minimum_accuracy) {
    throw TrainingDivergedError("pretrain: train accuracy " + std::to_string(acc) + " after " +
                                std::to_string(result.epochs_run) + " epochs");
  }
  result.model = std::move(model);
  result.train_accuracy = acc;
  return result;
}

}  // namespace rttdp
