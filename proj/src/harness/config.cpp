#include "pflow/harness/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace pflow::harness {

using nlohmann::json;

namespace {

// Field access with path tracking. finish() rejects keys nobody asked for.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ConfigError((path.empty() ? std::string("config") : path) + ": " + msg);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) fail(at(key), "missing");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(raw(key), at(key));
  }

  template <class T>
  T require(const std::string& key) {
    return convert<T>(raw(key), at(key));
  }

  Obj child(const std::string& key) { return Obj(raw(key), at(key)); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail(at(it.key()), "unknown field");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        fail(path, "expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(path, "expected a number");
      return v.get<T>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported field type");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class T>
std::vector<T> list_of(const json& v, const std::string& path) {
  if (!v.is_array()) Obj::fail(path, "expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(Obj::convert<T>(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

ImageShape parse_shape(const json& v, const std::string& path) {
  const auto dims = list_of<std::size_t>(v, path);
  if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
    Obj::fail(path, "expected [channels, height, width] with positive entries");
  }
  return ImageShape{dims[0], dims[1], dims[2]};
}

SolverConfig parse_solver(Obj o, SolverConfig base) {
  const std::string method = o.get<std::string>("method", base.method == SolverMethod::RK4 ? "rk4" : "euler");
  if (method == "rk4") {
    base.method = SolverMethod::RK4;
  } else if (method == "euler") {
    base.method = SolverMethod::Euler;
  } else {
    Obj::fail(o.at("method"), "unknown solver method '" + method + "' (rk4, euler)");
  }
  base.step_size = o.get<double>("step_size", base.step_size);
  base.t0 = o.get<double>("t0", base.t0);
  if (o.has("divergence")) {
    const auto d = o.require<std::string>("divergence");
    if (d == "exact") {
      base.divergence = DivergenceMode::Exact;
    } else if (d == "hutchinson") {
      base.divergence = DivergenceMode::Hutchinson;
    } else {
      Obj::fail(o.at("divergence"), "unknown divergence '" + d + "' (exact, hutchinson)");
    }
  }
  if (o.has("z_policy")) {
    const auto z = o.require<std::string>("z_policy");
    if (z == "fixed") {
      base.z_policy = ZPolicy::FixedSingle;
    } else if (z == "per_step") {
      base.z_policy = ZPolicy::FreshPerStep;
    } else {
      Obj::fail(o.at("z_policy"), "unknown z policy '" + z + "' (fixed, per_step)");
    }
  }
  base.exact_max_dim = o.get<std::size_t>("exact_max_dim", base.exact_max_dim);
  o.finish();
  try {
    (void)base.intervals();
  } catch (const std::invalid_argument& e) {
    Obj::fail(o.at("step_size"), e.what());
  }
  return base;
}

DataSpec parse_data(Obj o, DataSpec d) {
  if (o.has("type")) {
    const auto t = o.require<std::string>("type");
    if (t == "uniform") {
      d.type = DataSpec::Type::Uniform;
    } else if (t == "mixture") {
      d.type = DataSpec::Type::Mixture;
    } else if (t == "toy_images") {
      d.type = DataSpec::Type::ToyImages;
    } else {
      Obj::fail(o.at("type"), "unknown dataset type '" + t + "' (uniform, mixture, toy_images)");
    }
  }
  d.n = o.get<std::size_t>("n", d.n);
  d.height = o.get<std::size_t>("height", d.height);
  d.width = o.get<std::size_t>("width", d.width);
  d.seed = o.get<std::uint64_t>("seed", d.seed);
  o.finish();
  return d;
}

TrainSpec parse_train(Obj o) {
  TrainSpec t;
  if (o.has("data")) t.data = parse_data(o.child("data"), t.data);
  if (o.has("hidden")) t.hidden = list_of<std::size_t>(o.raw("hidden"), o.at("hidden"));
  t.steps = o.get<std::size_t>("steps", t.steps);
  t.batch = o.get<std::size_t>("batch", t.batch);
  t.lr = o.get<double>("lr", t.lr);
  t.lr_decay = o.get<double>("lr_decay", t.lr_decay);
  t.decay_every = o.get<std::size_t>("decay_every", t.decay_every);
  t.seed = o.get<std::uint64_t>("seed", t.seed);
  o.finish();
  if (t.batch == 0) Obj::fail(o.at("batch"), "must be positive");
  if (!(t.lr > 0.0)) Obj::fail(o.at("lr"), "must be positive");
  if (!(t.lr_decay > 0.0)) Obj::fail(o.at("lr_decay"), "must be positive");
  if (t.decay_every == 0) Obj::fail(o.at("decay_every"), "must be positive");
  return t;
}

ModelSpec parse_model(Obj o, const std::filesystem::path& base_dir) {
  ModelSpec m;
  const auto type = o.require<std::string>("type");
  if (type == "gmm") {
    m.type = ModelSpec::Type::Mixture;
    if (o.has("preset")) {
      const auto p = o.require<std::string>("preset");
      if (p == "two_component") {
        m.mixture = reference_two_component();
      } else if (p == "three_component") {
        m.mixture = reference_three_component();
      } else {
        Obj::fail(o.at("preset"), "unknown preset '" + p + "' (two_component, three_component)");
      }
    } else {
      m.mixture.weights = list_of<double>(o.raw("weights"), o.at("weights"));
      const json& means = o.raw("means");
      if (!means.is_array()) Obj::fail(o.at("means"), "expected an array of points");
      for (std::size_t k = 0; k < means.size(); ++k) {
        m.mixture.means.push_back(list_of<double>(means[k], o.at("means") + "[" + std::to_string(k) + "]"));
      }
      m.mixture.stds = list_of<double>(o.raw("stds"), o.at("stds"));
    }
    try {
      m.mixture.validate();
    } catch (const std::invalid_argument& e) {
      Obj::fail(o.at("weights"), e.what());
    }
  } else if (type == "score_net") {
    m.type = ModelSpec::Type::ScoreNet;
    if (o.has("checkpoint")) {
      m.checkpoint = o.require<std::string>("checkpoint");
      if (m.checkpoint.is_relative() && !base_dir.empty()) m.checkpoint = base_dir / m.checkpoint;
    }
    if (o.has("train")) m.train = parse_train(o.child("train"));
    if (m.checkpoint.empty() == !m.train.has_value()) {
      Obj::fail(o.at("type"), "score_net needs exactly one of 'checkpoint' or 'train'");
    }
  } else {
    Obj::fail(o.at("type"), "unknown model type '" + type + "' (gmm, score_net)");
  }
  o.finish();
  return m;
}

AttackSpec parse_attack(Obj o) {
  AttackSpec a;
  const auto name = o.require<std::string>("kind");
  const auto kind = parse_attack_kind(name);
  if (!kind) {
    Obj::fail(o.at("kind"), "unknown attack kind '" + name +
                                "' (unrestricted, random_region, near_sample, high_complexity, prior_only, "
                                "reverse_integration)");
  }
  a.kind = *kind;
  const auto defaults = AttackConfig::defaults(a.kind);
  a.epsilon = o.get<double>("epsilon", defaults.epsilon);
  a.lr = o.get<double>("lr", defaults.lr);
  if (o.has("lambda") && o.has("lambdas")) Obj::fail(o.at("lambda"), "give either 'lambda' or 'lambdas'");
  if (o.has("lambda")) a.lambdas = {o.require<double>("lambda")};
  if (o.has("lambdas")) a.lambdas = list_of<double>(o.raw("lambdas"), o.at("lambdas"));
  if (a.lambdas.empty()) Obj::fail(o.at("lambdas"), "must not be empty");
  if (o.has("steps")) a.steps = o.require<std::size_t>("steps");
  if (o.has("samples")) a.samples = o.require<std::size_t>("samples");
  o.finish();
  if (a.epsilon < 0.0) Obj::fail(o.at("epsilon"), "must be >= 0");
  if (!(a.lr > 0.0)) Obj::fail(o.at("lr"), "must be positive");
  for (double l : a.lambdas) {
    if (!(l >= 0.0)) Obj::fail(o.at("lambdas"), "must be >= 0");
  }
  return a;
}

ExperimentKind parse_kind(const std::string& s, const std::string& path) {
  if (s == "estimate") return ExperimentKind::Estimate;
  if (s == "attack") return ExperimentKind::Attack;
  if (s == "solver_compare") return ExperimentKind::SolverCompare;
  if (s == "blackbox") return ExperimentKind::BlackBox;
  if (s == "train") return ExperimentKind::Train;
  Obj::fail(path, "unknown experiment '" + s + "' (estimate, attack, solver_compare, blackbox, train)");
}

std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Estimate: return "estimate";
    case ExperimentKind::Attack: return "attack";
    case ExperimentKind::SolverCompare: return "solver_compare";
    case ExperimentKind::BlackBox: return "blackbox";
    case ExperimentKind::Train: return "train";
  }
  return "?";
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte);
    std::string what = e.what();
    if (const auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + what);
  }

  ExperimentConfig c;
  c.base_dir = base_dir;
  Obj o(root, "");
  c.version = o.require<int>("version");
  if (c.version != kSchemaVersion) {
    Obj::fail("version", "unsupported schema version " + std::to_string(c.version) + " (expected " +
                             std::to_string(kSchemaVersion) + ")");
  }
  c.kind = parse_kind(o.require<std::string>("experiment"), "experiment");
  c.seed = o.get<std::uint64_t>("seed", c.seed);
  c.output_dir = o.get<std::string>("output_dir", c.output_dir.string());
  c.workers = o.get<std::size_t>("workers", c.workers);
  if (c.workers == 0) Obj::fail("workers", "must be positive");

  // Train runs only need a model to supply mixture data.
  if (c.kind != ExperimentKind::Train || o.has("model")) c.model = parse_model(o.child("model"), base_dir);

  if (o.has("solvers")) {
    Obj s = o.child("solvers");
    if (s.has("fast")) c.fast = parse_solver(s.child("fast"), c.fast);
    if (s.has("accurate")) c.accurate = parse_solver(s.child("accurate"), SolverConfig::accurate(64));
    s.finish();
  }
  if (o.has("dataset")) c.dataset = parse_data(o.child("dataset"), c.dataset);

  if (o.has("campaign")) {
    Obj k = o.child("campaign");
    c.samples_per_attack = k.get<std::size_t>("samples_per_attack", c.samples_per_attack);
    c.steps = k.get<std::size_t>("steps", c.steps);
    if (k.has("smoke")) {
      Obj s = k.child("smoke");
      c.smoke_samples = s.get<std::size_t>("samples_per_attack", c.smoke_samples);
      c.smoke_steps = s.get<std::size_t>("steps", c.smoke_steps);
      s.finish();
    }
    k.finish();
  }
  if (o.has("attacks")) {
    const json& list = o.raw("attacks");
    if (!list.is_array()) Obj::fail("attacks", "expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      c.attacks.push_back(parse_attack(Obj(list[i], "attacks[" + std::to_string(i) + "]")));
    }
  }
  if (o.has("solver_compare")) {
    Obj s = o.child("solver_compare");
    c.compare_seeds = s.get<std::size_t>("seeds", c.compare_seeds);
    const json& list = s.raw("regimes");
    if (!list.is_array()) Obj::fail(s.at("regimes"), "expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string path = s.at("regimes") + "[" + std::to_string(i) + "]";
      Obj r(list[i], path);
      RegimeSpec spec;
      spec.name = r.require<std::string>("name");
      const json& solver = r.raw("solver");
      spec.solver = parse_solver(Obj(solver, path + ".solver"), SolverConfig::fast());
      r.finish();
      c.regimes.push_back(std::move(spec));
    }
    s.finish();
  }
  if (o.has("blackbox")) {
    Obj b = o.child("blackbox");
    BlackBoxSpec spec;
    spec.levels = b.get<std::size_t>("levels", spec.levels);
    spec.kernel_size = b.get<std::size_t>("kernel_size", spec.kernel_size);
    if (b.has("reference_shape")) spec.reference_shape = parse_shape(b.raw("reference_shape"), b.at("reference_shape"));
    b.finish();
    if (spec.levels == 0) Obj::fail("blackbox.levels", "must be positive");
    c.blackbox = spec;
  }
  if (o.has("train")) c.train = parse_train(o.child("train"));
  o.finish();

  switch (c.kind) {
    case ExperimentKind::Attack:
      if (c.attacks.empty()) Obj::fail("attacks", "attack experiments need at least one attack");
      break;
    case ExperimentKind::SolverCompare:
      if (c.regimes.size() < 2) Obj::fail("solver_compare.regimes", "need at least two regimes");
      break;
    default:
      break;
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError(file.string() + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), file.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

}  // namespace pflow::harness
