#include "rttdp/config.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rttdp/errors.hpp"

namespace rttdp {

using json = nlohmann::json;

namespace {

// Input iterator that tracks the line of the last non-blank character the
// parser consumed. The lexer reads at most one character past a token, and
// that character is blank or punctuation on the same line in any sane file.
struct LineCounter {
  int line = 1;
  int token_line = 1;
};

class CountingIterator {
 public:
  using iterator_category = std::input_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  CountingIterator(const char* p, LineCounter* c) : p_(p), c_(c) {}
  reference operator*() const { return *p_; }
  CountingIterator& operator++() {
    if (*p_ == '\n') ++c_->line;
    else if (!std::isspace(static_cast<unsigned char>(*p_))) c_->token_line = c_->line;
    ++p_;
    return *this;
  }
  CountingIterator operator++(int) {
    CountingIterator t = *this;
    ++*this;
    return t;
  }
  bool operator==(const CountingIterator& o) const { return p_ == o.p_; }
  bool operator!=(const CountingIterator& o) const { return p_ != o.p_; }

 private:
  const char* p_;
  LineCounter* c_;
};

std::string escape_token(const std::string& key) {
  std::string s;
  for (char ch : key) {
    if (ch == '~') s += "~0";
    else if (ch == '/') s += "~1";
    else s += ch;
  }
  return s;
}

// SAX pass recording the line on which each value starts, keyed by JSON pointer.
class LineLocator : public nlohmann::json_sax<json> {
 public:
  explicit LineLocator(const LineCounter& c) : c_(c) {}

  std::map<std::string, int> lines{{"", 1}};
  std::string duplicate;  // pointer of the first repeated key, if any
  int duplicate_line = 0;

  bool null() override { return value(); }
  bool boolean(bool) override { return value(); }
  bool number_integer(number_integer_t) override { return value(); }
  bool number_unsigned(number_unsigned_t) override { return value(); }
  bool number_float(number_float_t, const string_t&) override { return value(); }
  bool string(string_t&) override { return value(); }
  bool binary(binary_t&) override { return value(); }
  bool start_object(std::size_t) override { return open(false); }
  bool end_object() override { return close(); }
  bool start_array(std::size_t) override { return open(true); }
  bool end_array() override { return close(); }
  bool key(string_t& k) override {
    stack_.back().child = "/" + escape_token(k);
    if (!stack_.back().keys.insert(k).second && duplicate.empty()) {
      duplicate = here();
      duplicate_line = c_.token_line;
    }
    return true;
  }
  bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override {
    return false;
  }

 private:
  struct Frame {
    bool array = false;
    std::size_t index = 0;
    std::string child;
    std::set<std::string> keys;
  };

  std::string here() {
    std::string p;
    for (auto& f : stack_) p += f.child;
    return p;
  }
  bool value() {
    if (!stack_.empty() && stack_.back().array) stack_.back().child = "/" + std::to_string(stack_.back().index++);
    if (!stack_.empty()) lines[here()] = c_.token_line;
    return true;
  }
  bool open(bool array) {
    value();
    stack_.push_back({array, 0, "", {}});
    return true;
  }
  bool close() {
    stack_.pop_back();
    return true;
  }

  const LineCounter& c_;
  std::vector<Frame> stack_;
};

class Ctx {
 public:
  std::string origin;
  std::map<std::string, int> lines;
  std::map<std::string, std::string> flagged;  // pointer → flag that set it

  [[noreturn]] void fail(const std::string& ptr, const std::string& msg) const {
    for (const auto& [p, flag] : flagged) {
      if (ptr == p || ptr.rfind(p + "/", 0) == 0) throw ConfigError(flag + ": " + ptr + ": " + msg);
    }
    std::string p = ptr;
    for (;;) {
      auto it = lines.find(p);
      if (it != lines.end()) {
        throw ConfigError(origin + ":" + std::to_string(it->second) + ": " + (ptr.empty() ? "/" : ptr) +
                          ": " + msg);
      }
      const auto cut = p.rfind('/');
      if (cut == std::string::npos) break;
      p.resize(cut);
    }
    throw ConfigError(origin + ": " + ptr + ": " + msg);
  }
};

class Obj {
 public:
  Obj(const Ctx& ctx, const json& j, std::string ptr) : ctx_(ctx), j_(j), ptr_(std::move(ptr)) {
    if (!j_.is_object()) ctx_.fail(ptr_, "expected an object");
  }

  const std::string& ptr() const { return ptr_; }
  std::string at(const std::string& key) const { return ptr_ + "/" + escape_token(key); }
  bool has(const std::string& key) const { return j_.contains(key); }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const { ctx_.fail(at(key), msg); }

  const json* child(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  const json& required(const std::string& key) {
    const json* c = child(key);
    if (!c) ctx_.fail(ptr_, "missing required key '" + key + "'");
    return *c;
  }

  double number(const std::string& key, double def) {
    const json* c = child(key);
    if (!c) return def;
    if (!c->is_number()) fail(key, "expected a number");
    return c->get<double>();
  }
  double positive(const std::string& key, double def) {
    const double v = number(key, def);
    if (!(v > 0.0)) fail(key, "must be > 0");
    return v;
  }
  double unit(const std::string& key, double def) {
    const double v = number(key, def);
    if (!(v >= 0.0 && v <= 1.0)) fail(key, "must lie in [0,1]");
    return v;
  }
  std::uint64_t count(const std::string& key, std::uint64_t def) {
    const json* c = child(key);
    if (!c) return def;
    if (!c->is_number_unsigned()) fail(key, "expected a non-negative integer");
    return c->get<std::uint64_t>();
  }
  std::uint64_t at_least_one(const std::string& key, std::uint64_t def) {
    const std::uint64_t v = count(key, def);
    if (v == 0) fail(key, "must be >= 1");
    return v;
  }
  bool flag(const std::string& key, bool def) {
    const json* c = child(key);
    if (!c) return def;
    if (!c->is_boolean()) fail(key, "expected true or false");
    return c->get<bool>();
  }
  std::string text(const std::string& key, const std::string& def) {
    const json* c = child(key);
    if (!c) return def;
    if (!c->is_string()) fail(key, "expected a string");
    return c->get<std::string>();
  }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) ctx_.fail(at(it.key()), "unknown key '" + it.key() + "'");
    }
  }

 private:
  const Ctx& ctx_;
  const json& j_;
  std::string ptr_;
  std::set<std::string> used_;
};

// Runs a library validator and pins its ConfigError to `ptr`.
template <class F>
void located(const Ctx& ctx, const std::string& ptr, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    ctx.fail(ptr, e.what());
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

SyntheticSpec parse_synthetic(const Ctx& ctx, Obj o) {
  SyntheticSpec s;
  s.classes = o.count("classes", s.classes);
  if (s.classes < 2) o.fail("classes", "needs at least 2 classes");
  const std::string form = o.text("form", "image");
  if (form == "image") {
    s.form = InputForm{true, o.at_least_one("channels", 3), o.at_least_one("height", 16),
                       o.at_least_one("width", 16), 0};
  } else if (form == "vector") {
    s.form = InputForm{false, 0, 0, 0, o.at_least_one("dim", 8)};
  } else {
    o.fail("form", "expected \"image\" or \"vector\"");
  }
  s.separation = o.number("separation", s.separation);
  if (!(s.separation >= 0.0)) o.fail("separation", "must be >= 0");
  s.noise = o.number("noise", s.noise);
  if (!(s.noise >= 0.0)) o.fail("noise", "must be >= 0");
  s.samples_per_segment = o.at_least_one("samples_per_segment", s.samples_per_segment);
  s.seed = o.count("seed", s.seed);
  const json& segs = o.required("segments");
  const std::string sp = o.at("segments");
  if (!segs.is_array() || segs.empty()) ctx.fail(sp, "expected a nonempty list of segments");
  for (std::size_t i = 0; i < segs.size(); ++i) {
    Obj g(ctx, segs[i], sp + "/" + std::to_string(i));
    Corruption c;
    located(ctx, g.at("kind"), [&] { c.kind = corruption_from_name(g.text("kind", "")); });
    const std::uint64_t sev = g.count("severity", 5);
    if (sev > 5) g.fail("severity", "must lie in 0..5");
    c.severity = static_cast<int>(sev);
    g.done();
    s.segments.push_back(c);
  }
  o.done();
  return s;
}

TtaConfig parse_victim(const Ctx& ctx, Obj o, std::string& name) {
  TtaConfig t;
  located(ctx, o.at("method"), [&] { t.method = method_from_name(o.text("method", method_name(t.method))); });
  if (const json* d = o.child("defenses")) {
    const std::string dp = o.at("defenses");
    if (!d->is_array()) ctx.fail(dp, "expected a list of defense names");
    for (std::size_t i = 0; i < d->size(); ++i) {
      const std::string at = dp + "/" + std::to_string(i);
      const json& v = (*d)[i];
      if (!v.is_string()) ctx.fail(at, "expected a string");
      const std::string n = v.get<std::string>();
      if (n == "thresh") t.defenses.entropy_threshold = true;
      else if (n == "aug") t.defenses.augmentation = true;
      else if (n == "ema") t.defenses.ema = true;
      else if (n == "restore") t.defenses.restore = true;
      else ctx.fail(at, "unknown defense '" + n + "' (expected thresh, aug, ema or restore)");
    }
  }
  t.lr = o.positive("lr", t.lr);
  t.threshold_coef = o.number("threshold_coef", t.threshold_coef);
  if (!(t.threshold_coef > 0.0 && t.threshold_coef < 1.0)) o.fail("threshold_coef", "must lie in (0,1)");
  t.ema_momentum = o.unit("ema_momentum", t.ema_momentum);
  t.restore_p = o.unit("restore_p", t.restore_p);
  t.gce_q = o.number("gce_q", t.gce_q);
  if (!(t.gce_q > 0.0 && t.gce_q <= 1.0)) o.fail("gce_q", "must lie in (0,1]");
  t.n_aug = o.count("n_aug", t.n_aug);
  t.augment.noise = o.number("aug_noise", t.augment.noise);
  if (!(t.augment.noise >= 0.0)) o.fail("aug_noise", "must be >= 0");
  t.augment.flip = o.flag("aug_flip", t.augment.flip);
  t.eata_margin = o.number("eata_margin", t.eata_margin);
  if (!(t.eata_margin > 0.0 && t.eata_margin <= 1.0)) o.fail("eata_margin", "must lie in (0,1]");
  t.eata_mean_momentum = o.unit("eata_mean_momentum", t.eata_mean_momentum);
  t.log_base = o.number("log_base", t.log_base);
  if (!(t.log_base == 0.0 || (t.log_base > 0.0 && t.log_base != 1.0))) {
    o.fail("log_base", "must be 0 (natural) or a positive base other than 1");
  }
  t.bn_momentum = o.unit("bn_momentum", t.bn_momentum);
  const std::string scope = o.text("update_scope", "bn-affine");
  if (scope == "bn-affine") t.scope = UpdateScope::BnAffine;
  else if (scope == "full") t.scope = UpdateScope::Full;
  else o.fail("update_scope", "expected \"bn-affine\" or \"full\"");
  name = o.text("name", t.label());
  located(ctx, o.ptr(), [&] { t.validate(); });
  o.done();
  return t;
}

AttackEntry parse_attack(const Ctx& ctx, const json& j, const std::string& ptr, const PgdConfig& pgd) {
  AttackEntry e;
  if (j.is_string()) {
    const std::string kind = j.get<std::string>();
    e.name = kind;
    if (kind == "none") return e;
    AttackConfig a;
    located(ctx, ptr, [&] { a = AttackConfig::defaults_for(attack_from_name(kind)); });
    a.pgd = pgd;
    e.name = a.label();
    e.attack = a;
    return e;
  }
  Obj o(ctx, j, ptr);
  const std::string kind = o.text("kind", "");
  if (kind.empty()) o.fail("kind", "missing attack kind");
  if (kind == "none") {
    e.name = o.text("name", "none");
    o.done();
    return e;
  }
  AttackConfig a;
  located(ctx, o.at("kind"), [&] { a = AttackConfig::defaults_for(attack_from_name(kind)); });
  a.pgd = pgd;
  a.regularize = o.flag("regularize", a.regularize);
  const std::string ref = o.text("reference", "");
  if (ref == "surrogate") a.reference = ReferenceModel::Surrogate;
  else if (ref == "source") a.reference = ReferenceModel::Source;
  else if (ref == "random-init") a.reference = ReferenceModel::RandomInit;
  else if (!ref.empty()) o.fail("reference", "expected surrogate, source or random-init");
  const std::string solver = o.text("solver", "greedy");
  if (solver == "greedy") a.solver = MappingSolver::Greedy;
  else if (solver == "exact") a.solver = MappingSolver::Exact;
  else o.fail("solver", "expected \"greedy\" or \"exact\"");
  a.ble_momentum = o.unit("ble_momentum", a.ble_momentum);
  a.flip_kld_order = o.flag("flip_kld_order", a.flip_kld_order);
  e.name = o.text("name", a.label());
  located(ctx, ptr, [&] { a.validate(); });
  o.done();
  e.attack = a;
  return e;
}

}  // namespace

void check_pool_capacity(const Dataset& data, const ScheduleConfig& schedule) {
  const StreamSchedule s = build_schedule(data.segments.size(), schedule);
  const auto pools = split_pools(data);
  for (std::size_t seg = 0; seg < pools.size(); ++seg) {
    std::size_t adv = 0, ben = 0;
    for (const auto& slot : s.slots) {
      if (slot.segment != seg) continue;
      (slot.adversary ? adv : ben) += schedule.batch_size;
    }
    if (adv > pools[seg].adversary.size() || ben > pools[seg].benign.size()) {
      throw ConfigError("segment " + std::to_string(seg) + " holds " + std::to_string(data.segments[seg].count) +
                        " samples; the schedule draws " + std::to_string(adv) + " adversary and " +
                        std::to_string(ben) + " benign samples from its halves");
    }
  }
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin,
                              const std::filesystem::path& base_dir, FileChecks checks,
                              const std::vector<ConfigOverride>& overrides) {
  Ctx ctx;
  ctx.origin = origin;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports "... at line L, column C: ..." in its message.
    throw ConfigError(origin + ": " + e.what());
  }
  {
    LineCounter counter;
    LineLocator locator(counter);
    json::sax_parse(CountingIterator(text.data(), &counter), CountingIterator(text.data() + text.size(), &counter),
                    &locator);
    if (!locator.duplicate.empty()) {
      throw ConfigError(origin + ":" + std::to_string(locator.duplicate_line) + ": " + locator.duplicate +
                        ": duplicate key");
    }
    ctx.lines = std::move(locator.lines);
  }
  for (const auto& ov : overrides) {
    json v;
    try {
      v = json::parse(ov.json_value);
    } catch (const json::parse_error&) {
      v = ov.json_value;  // bare words are strings
    }
    try {
      doc[json::json_pointer(ov.pointer)] = v;
    } catch (const json::exception& e) {
      throw ConfigError(ov.flag + ": cannot set " + ov.pointer + ": " + e.what());
    }
    ctx.flagged[ov.pointer] = ov.flag;
  }

  ExperimentConfig cfg;
  Obj root(ctx, doc, "");
  {
    const json& v = root.required("schema_version");
    if (!v.is_number_integer() || v.get<int>() != kConfigSchemaVersion) {
      ctx.fail("/schema_version", "unsupported schema version (this build reads " +
                                      std::to_string(kConfigSchemaVersion) + ")");
    }
  }

  Obj data(ctx, root.required("data"), "/data");
  if (const json* g = data.child("generate")) cfg.synthetic = parse_synthetic(ctx, Obj(ctx, *g, "/data/generate"));
  if (data.has("file")) {
    cfg.data_file = resolve(base_dir, data.text("file", ""));
    if (checks.data_file && !std::filesystem::exists(cfg.data_file)) {
      data.fail("file", "dataset file " + cfg.data_file.string() + " does not exist (run gen-data first)");
    }
  }
  if (!cfg.synthetic && cfg.data_file.empty()) ctx.fail("/data", "needs 'generate', 'file' or both");
  data.done();

  Obj source(ctx, root.required("source"), "/source");
  cfg.checkpoint = resolve(base_dir, source.text("checkpoint", ""));
  if (!source.has("checkpoint")) source.fail("checkpoint", "missing checkpoint path");
  if (checks.checkpoint && !std::filesystem::exists(cfg.checkpoint)) {
    source.fail("checkpoint", "checkpoint " + cfg.checkpoint.string() + " does not exist (run pretrain first)");
  }
  if (const json* p = source.child("pretrain")) {
    Obj o(ctx, *p, "/source/pretrain");
    auto& t = cfg.pretrain;
    t.epochs = o.count("epochs", t.epochs);
    t.train_size = o.at_least_one("train_size", t.train_size);
    t.batch_size = o.at_least_one("batch_size", t.batch_size);
    t.lr = o.positive("lr", t.lr);
    t.momentum = o.unit("momentum", t.momentum);
    t.target_accuracy = o.unit("target_accuracy", t.target_accuracy);
    t.minimum_accuracy = o.unit("minimum_accuracy", t.minimum_accuracy);
    t.seed = o.count("seed", t.seed);
    o.done();
  }
  source.done();

  {
    Obj o(ctx, root.required("schedule"), "/schedule");
    auto& s = cfg.schedule;
    s.r = o.unit("r", s.r);
    located(ctx, o.at("mode"), [&] { s.mode = mode_from_name(o.text("mode", mode_name(s.mode))); });
    s.batches_per_segment = o.at_least_one("batches_per_segment", s.batches_per_segment);
    s.batch_size = o.at_least_one("batch_size", s.batch_size);
    if (s.batch_size < 2) o.fail("batch_size", "batch statistics need at least 2 samples");
    o.done();
  }
  if (cfg.synthetic && cfg.data_file.empty()) {
    SyntheticSpec probe = *cfg.synthetic;
    Dataset shape;
    for (const auto& c : probe.segments) {
      shape.segments.push_back({corruption_name(c.kind), c.severity, probe.samples_per_segment});
    }
    shape.labels.resize(probe.samples_per_segment * probe.segments.size());
    located(ctx, "/data/generate/samples_per_segment", [&] { check_pool_capacity(shape, cfg.schedule); });
  }
  if (const json* p = root.child("pgd")) {
    Obj o(ctx, *p, "/pgd");
    cfg.pgd.steps = o.count("steps", cfg.pgd.steps);
    cfg.pgd.alpha = o.positive("alpha", cfg.pgd.alpha);
    cfg.pgd.budget = o.number("budget", cfg.pgd.budget);
    if (!(cfg.pgd.budget >= 0.0)) o.fail("budget", "must be >= 0");
    cfg.pgd.lambda_rate = o.number("lambda_rate", cfg.pgd.lambda_rate);
    if (!(cfg.pgd.lambda_rate >= 0.0)) o.fail("lambda_rate", "must be >= 0");
    o.done();
  }
  if (const json* p = root.child("surrogate")) {
    Obj o(ctx, *p, "/surrogate");
    cfg.surrogate.lr = o.positive("lr", cfg.surrogate.lr);
    cfg.surrogate.iterations = o.count("iterations", cfg.surrogate.iterations);
    o.done();
  }

  std::set<std::string> names;
  {
    const json& v = root.required("victims");
    if (!v.is_array() || v.empty()) ctx.fail("/victims", "expected a nonempty list of victims");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string p = "/victims/" + std::to_string(i);
      VictimEntry e;
      e.tta = parse_victim(ctx, Obj(ctx, v[i], p), e.name);
      if (!names.insert(e.name).second) ctx.fail(p, "duplicate victim name '" + e.name + "'; set \"name\"");
      cfg.victims.push_back(std::move(e));
    }
  }
  names.clear();
  {
    const json& a = root.required("attacks");
    if (!a.is_array() || a.empty()) ctx.fail("/attacks", "expected a nonempty list of attacks");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::string p = "/attacks/" + std::to_string(i);
      AttackEntry e = parse_attack(ctx, a[i], p, cfg.pgd);
      if (!names.insert(e.name).second) ctx.fail(p, "duplicate attack name '" + e.name + "'; set \"name\"");
      cfg.attacks.push_back(std::move(e));
    }
  }
  {
    const json& s = root.required("seeds");
    if (!s.is_array() || s.empty()) ctx.fail("/seeds", "expected a nonempty list of seeds");
    std::set<std::uint64_t> seen;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::string p = "/seeds/" + std::to_string(i);
      if (!s[i].is_number_unsigned()) ctx.fail(p, "expected a non-negative integer");
      const auto seed = s[i].get<std::uint64_t>();
      if (!seen.insert(seed).second) ctx.fail(p, "duplicate seed " + std::to_string(seed));
      cfg.seeds.push_back(seed);
    }
  }
  cfg.output_dir = resolve(base_dir, root.text("output_dir", "reports"));
  root.done();
  cfg.echo = doc.dump();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, FileChecks checks,
                             const std::vector<ConfigOverride>& overrides) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string(), path.parent_path(), checks, overrides);
}

Dataset load_stream_data(const ExperimentConfig& cfg) {
  if (!cfg.data_file.empty()) {
    return cfg.data_file.extension() == ".csv" ? import_csv(cfg.data_file) : load_dataset(cfg.data_file);
  }
  if (!cfg.synthetic) throw ConfigError("config has neither a dataset file nor a generate section");
  return generate(*cfg.synthetic);
}

}  // namespace rttdp
