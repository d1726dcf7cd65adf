#include "rttdp/nn.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "rttdp/errors.hpp"
#include "rttdp/ops.hpp"

namespace rttdp {

using detail::Reader;
using detail::Writer;

ArchSpec ArchSpec::mlp(std::size_t input_dim, std::size_t classes) {
  ArchSpec s;
  s.kind = Architecture::Mlp;
  s.channels = s.height = s.width = 0;
  s.input_dim = input_dim;
  s.classes = classes;
  s.hidden = {64, 64};
  return s;
}

ArchSpec ArchSpec::cnn(std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t classes) {
  ArchSpec s;
  s.kind = Architecture::Cnn;
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.classes = classes;
  s.hidden = {8, 16};
  return s;
}

std::string ArchSpec::tag() const {
  std::ostringstream os;
  if (kind == Architecture::Mlp) {
    os << "mlp:in=" << input_dim;
  } else {
    os << "cnn:in=" << channels << 'x' << height << 'x' << width;
  }
  os << ":h=";
  for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
  os << ":k=" << classes;
  return os.str();
}

ArchSpec ArchSpec::from_tag(const std::string& tag) {
  auto fail = [&]() -> ArchSpec { throw FormatError("malformed architecture tag '" + tag + "'"); };
  std::vector<std::string> fields;
  std::stringstream ss(tag);
  for (std::string f; std::getline(ss, f, ':');) fields.push_back(f);
  if (fields.size() != 4) return fail();
  auto numbers = [&](std::string s, char sep) {
    std::vector<std::size_t> out;
    std::stringstream in(s);
    for (std::string t; std::getline(in, t, sep);) {
      if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) fail();
      out.push_back(std::stoul(t));
    }
    return out;
  };
  auto strip = [&](const std::string& f, const char* prefix) {
    if (f.rfind(prefix, 0) != 0) fail();
    return f.substr(std::strlen(prefix));
  };
  ArchSpec s;
  const auto in = strip(fields[1], "in=");
  if (fields[0] == "mlp") {
    auto d = numbers(in, 'x');
    if (d.size() != 1) return fail();
    s = mlp(d[0], 2);
  } else if (fields[0] == "cnn") {
    auto d = numbers(in, 'x');
    if (d.size() != 3) return fail();
    s = cnn(d[0], d[1], d[2], 2);
  } else {
    return fail();
  }
  s.hidden = numbers(strip(fields[2], "h="), ',');
  auto k = numbers(strip(fields[3], "k="), ',');
  if (k.size() != 1 || s.hidden.size() != 2) return fail();
  s.classes = k[0];
  return s;
}

Shape ArchSpec::input_shape(std::size_t batch) const {
  if (kind == Architecture::Mlp) return {batch, input_dim};
  return {batch, channels, height, width};
}

std::size_t ArchSpec::sample_size() const {
  return kind == Architecture::Mlp ? input_dim : channels * height * width;
}

Model::Model(ArchSpec spec, std::uint64_t seed, UpdateScope scope) : spec_(std::move(spec)) {
  if (spec_.classes < 2) throw ContractError("model: need at least 2 classes");
  if (spec_.hidden.size() != 2) throw ContractError("model: expected two hidden widths");
  build(seed, scope);
}

Model::Model(const Model& other)
    : bn_momentum(other.bn_momentum),
      bn_eps(other.bn_eps),
      spec_(other.spec_),
      layers_(other.layers_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone(), p.role});
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

std::size_t Model::add_param(std::string name, Tensor value, ParamRole role) {
  params_.push_back({std::move(name), std::move(value), role});
  return params_.size() - 1;
}

void Model::set_update_scope(UpdateScope scope) {
  const ParamRole weight_role = scope == UpdateScope::Full ? ParamRole::Updatable : ParamRole::Frozen;
  for (const auto& l : layers_) {
    if (l.kind != Layer::Kind::Linear && l.kind != Layer::Kind::Conv) continue;
    params_[l.p0].role = weight_role;
    params_[l.p1].role = weight_role;
  }
}

void Model::build(std::uint64_t seed, UpdateScope scope) {
  std::mt19937_64 rng(seed);
  const ParamRole weight_role = scope == UpdateScope::Full ? ParamRole::Updatable : ParamRole::Frozen;
  auto uniform = [&](Shape shape, double bound) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.values_mut()) v = u(rng);
    return t;
  };
  auto add_bn = [&](const std::string& name, std::size_t c) {
    Layer l{Layer::Kind::BatchNorm};
    l.p0 = add_param(name + ".gamma", Tensor({c}, 1.0), ParamRole::Updatable);
    l.p1 = add_param(name + ".beta", Tensor({c}, 0.0), ParamRole::Updatable);
    l.p2 = add_param(name + ".running_mean", Tensor({c}, 0.0), ParamRole::BnStat);
    l.p3 = add_param(name + ".running_var", Tensor({c}, 1.0), ParamRole::BnStat);
    layers_.push_back(l);
    layers_.push_back({Layer::Kind::Relu});
  };
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Layer l{Layer::Kind::Linear};
    l.p0 = add_param(name + ".weight", uniform({in, out}, std::sqrt(6.0 / static_cast<double>(in))),
                     weight_role);
    l.p1 = add_param(name + ".bias", Tensor({out}, 0.0), weight_role);
    layers_.push_back(l);
  };
  auto add_conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t stride) {
    Layer l{Layer::Kind::Conv};
    l.stride = stride;
    l.padding = 1;
    l.p0 = add_param(name + ".weight",
                     uniform({out, in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9))), weight_role);
    l.p1 = add_param(name + ".bias", Tensor({out}, 0.0), weight_role);
    layers_.push_back(l);
  };

  const std::size_t h0 = spec_.hidden[0], h1 = spec_.hidden[1];
  if (spec_.kind == Architecture::Mlp) {
    add_linear("fc1", spec_.input_dim, h0);
    add_bn("bn1", h0);
    add_linear("fc2", h0, h1);
    add_bn("bn2", h1);
    add_linear("head", h1, spec_.classes);
  } else {
    add_conv("conv1", spec_.channels, h0, 1);
    add_bn("bn1", h0);
    add_conv("conv2", h0, h1, 2);
    add_bn("bn2", h1);
    layers_.push_back({Layer::Kind::GlobalPool});
    add_linear("head", h1, spec_.classes);
  }
}

ForwardResult Model::forward(const Tensor& x, const ForwardOptions& opts) {
  const Shape expect = spec_.input_shape(x.rank() ? x.dim(0) : 0);
  if (x.shape() != expect) {
    throw ShapeError("model " + tag() + ": input " + shape_str(x.shape()) + ", expected " +
                     shape_str(expect));
  }
  if (opts.mode == StatsMode::Train && x.dim(0) < 2) {
    throw DegenerateBatchError("model: train-stats forward needs batch size >= 2");
  }
  ++forwards_;
  ForwardResult result;
  if (opts.capture) result.trace.emplace();
  Tensor h = x;
  for (const Layer& l : layers_) {
    switch (l.kind) {
      case Layer::Kind::Linear:
        h = add(matmul(h, params_[l.p0].value), params_[l.p1].value);
        break;
      case Layer::Kind::Conv:
        h = conv2d(h, params_[l.p0].value, params_[l.p1].value, l.stride, l.padding);
        break;
      case Layer::Kind::BatchNorm: {
        if (result.trace) result.trace->layers.push_back(h);
        Tensor& gamma = params_[l.p0].value;
        Tensor& beta = params_[l.p1].value;
        Tensor& rmean = params_[l.p2].value;
        Tensor& rvar = params_[l.p3].value;
        if (opts.mode == StatsMode::Train) {
          BatchNormResult bn = batch_norm_train(h, gamma, beta, bn_eps);
          if (opts.refresh_stats) {
            auto m = rmean.values_mut();
            auto v = rvar.values_mut();
            for (std::size_t c = 0; c < m.size(); ++c) {
              m[c] = (1.0 - bn_momentum) * m[c] + bn_momentum * bn.batch_mean[c];
              v[c] = (1.0 - bn_momentum) * v[c] + bn_momentum * bn.batch_var[c];
            }
          }
          h = bn.out;
        } else {
          h = batch_norm_eval(h, gamma, beta, rmean.values(), rvar.values(), bn_eps);
        }
        break;
      }
      case Layer::Kind::Relu:
        h = relu(h);
        break;
      case Layer::Kind::GlobalPool: {
        const std::size_t n = h.dim(0), c = h.dim(1), p = h.dim(2) * h.dim(3);
        h = mean_axis(reshape(h, {n, c, p}), 2);
        break;
      }
    }
  }
  result.logits = h;
  return result;
}

Parameter& Model::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ContractError("model: no parameter named '" + name + "'");
}

const Parameter& Model::parameter(const std::string& name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::size_t Model::bn_layer_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.kind == Layer::Kind::BatchNorm;
  return n;
}

std::size_t Model::scalar_count(ParamRole role) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.role == role) n += p.value.numel();
  }
  return n;
}

void Model::set_grad_scope(GradScope scope) {
  for (auto& p : params_) {
    const bool on = p.role != ParamRole::BnStat &&
                    (scope == GradScope::Learnable ||
                     (scope == GradScope::Updatable && p.role == ParamRole::Updatable));
    if (p.value.requires_grad() != on) p.value.set_requires_grad(on);
  }
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void Model::copy_values_from(const Model& other) {
  if (other.tag() != tag() || other.params_.size() != params_.size()) {
    throw ContractError("model: copy between '" + other.tag() + "' and '" + tag() + "'");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].value.values();
    auto dst = params_[i].value.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor posteriors(const Tensor& logits) {
  NoGradGuard guard;
  return softmax(logits).detach();
}

void ema_update(EmaModel& ema, const Model& online) {
  if (ema.shadow.tag() != online.tag()) {
    throw ContractError("ema_update: architecture mismatch '" + ema.shadow.tag() + "' vs '" +
                        online.tag() + "'");
  }
  const double m = ema.momentum;
  auto& shadow = ema.shadow.parameters();
  const auto& live = online.parameters();
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    auto dst = shadow[i].value.values_mut();
    auto src = live[i].value.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = m * dst[k] + (1.0 - m) * src[k];
  }
}

std::size_t stochastic_restore(Model& model, const Model& source, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("stochastic_restore: p outside [0,1]");
  if (model.tag() != source.tag()) throw ContractError("stochastic_restore: architecture mismatch");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t restored = 0;
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].role != ParamRole::Updatable) continue;
    auto dst = params[i].value.values_mut();
    auto src = source.parameters()[i].value.values();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      if (u(rng) < p) {
        dst[k] = src[k];
        ++restored;
      }
    }
  }
  return restored;
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers and reals little-endian):
//   "RTDPCKPT" | u32 version | str tag | u32 count |
//   count × { str name | u32 rank | u64 dims[rank] | u8 role | f64 values[] }
// where str = u32 length + bytes.

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'T', 'D', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("checkpoint: cannot open '" + path.string() + "' for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  Writer w(os);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.str(model.tag());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.str(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.put<std::uint64_t>(d);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.role));
    for (double v : p.value.values()) w.put<double>(v);
  }
  if (!os) throw FormatError("checkpoint: write failed for '" + path.string() + "'");
}

namespace {

std::string read_checkpoint_header(std::istream& is, Reader& r) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  return r.str();
}

}  // namespace

void load_checkpoint(Model& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path.string() + "'");
  Reader r(is, "checkpoint '" + path.string() + "'");
  const std::string tag = read_checkpoint_header(is, r);
  if (tag != model.tag()) {
    throw FormatError("checkpoint: architecture '" + tag + "' does not match model '" + model.tag() + "'");
  }
  const auto count = r.get<std::uint32_t>();
  auto& params = model.parameters();
  if (count != params.size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, model has " +
                      std::to_string(params.size()));
  }
  // Stage into copies so a corrupt file never leaves the model half-loaded.
  std::vector<Parameter> staged;
  staged.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter p{r.str(), Tensor(), ParamRole::Frozen};
    if (p.name != params[i].name) throw FormatError("checkpoint: unexpected tensor '" + p.name + "'");
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != params[i].value.shape()) {
      throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(shape));
    }
    const auto role = r.get<std::uint8_t>();
    if (role != 'u' && role != 'b' && role != 'f') {
      throw FormatError("checkpoint: invalid role byte for '" + p.name + "'");
    }
    p.role = static_cast<ParamRole>(role);
    std::vector<double> values(numel_of(shape));
    for (auto& v : values) v = r.get<double>();
    p.value = Tensor(shape, std::move(values));
    staged.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < staged.size(); ++i) {
    auto dst = params[i].value.values_mut();
    auto src = staged[i].value.values();
    std::copy(src.begin(), src.end(), dst.begin());
    params[i].role = staged[i].role;
  }
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path.string() + "'");
  Reader r(is, "checkpoint '" + path.string() + "'");
  Model model(ArchSpec::from_tag(read_checkpoint_header(is, r)), 0);
  is.close();
  load_checkpoint(model, path);
  return model;
}

}  // namespace rttdp
