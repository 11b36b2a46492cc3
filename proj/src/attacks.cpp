#include "pflow/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>

#include "pflow/adam.hpp"
#include "pflow/complexity.hpp"

namespace pflow {

namespace {

constexpr std::array<const char*, 6> kAttackNames{"unrestricted", "random_region", "near_sample",
                                                  "high_complexity", "prior_only", "reverse_integration"};
constexpr std::array<const char*, 3> kBlackBoxNames{"monochrome", "filtered_noise", "uniform_noise"};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

enum Stream : std::uint64_t { kFastZ = 1, kEvalZ = 2, kCenter = 3 };

LikelihoodEstimate make_estimate(double integral, double prior, std::size_t dim, Direction dir) {
  LikelihoodEstimate e;
  e.integral = integral;
  e.prior = prior;
  e.total = integral + prior;
  e.per_dim = e.total / static_cast<double>(dim);
  e.direction = dir;
  return e;
}

LikelihoodEstimate nan_estimate(Direction dir) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  LikelihoodEstimate e;
  e.integral = e.prior = e.total = e.per_dim = nan;
  e.direction = dir;
  return e;
}

struct Evaluation {
  double objective = 0.0;
  double integral = 0.0;
  double prior = 0.0;
  std::vector<double> grad;
};

class Problem {
 public:
  Problem(const ScoreModel& model, const AttackConfig& cfg) : model_(model), cfg_(cfg) {
    fast_ = cfg.solver;
    fast_.seed = derive_seed(cfg.seed, kFastZ);
    fast_.direction = cfg.kind == AttackKind::ReverseIntegration ? Direction::Reverse : Direction::Forward;
    fast_.validate(model.dim());
  }

  const SolverConfig& fast() const { return fast_; }

  Evaluation evaluate(std::span<const double> params, bool with_grad) const {
    ad::Tape tape;
    const ad::Var p = tape.variable(std::vector<double>(params.begin(), params.end()));
    const TapedEstimate est = cfg_.kind == AttackKind::ReverseIntegration
                                  ? log_likelihood_reverse(p, fast_, model_)
                                  : log_likelihood_forward(p, fast_, model_);
    ad::Var obj = cfg_.kind == AttackKind::PriorOnly ? est.prior : est.total;
    if (cfg_.kind == AttackKind::HighComplexity) {
      // log p / D + lambda * hf, kept in nats by scaling with D.
      const double weight = cfg_.lambda * static_cast<double>(model_.dim());
      obj = ad::add(obj, ad::scale(hf_energy(p, *model_.image_shape()), weight));
    }
    Evaluation e;
    e.objective = obj.scalar();
    e.integral = est.integral.scalar();
    e.prior = est.prior.scalar();
    if (with_grad) {
      e.grad = tape.gradient(obj, std::span(&p, 1))[0];
      for (double g : e.grad) {
        if (!std::isfinite(g)) throw ad::NonFiniteError("non-finite objective gradient");
      }
    }
    return e;
  }

 private:
  const ScoreModel& model_;
  const AttackConfig& cfg_;
  SolverConfig fast_;
};

void project(std::span<double> x, std::span<const double> center, double eps, bool pixel_bounds) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isfinite(eps)) x[i] = std::clamp(x[i], center[i] - eps, center[i] + eps);
    if (pixel_bounds) x[i] = std::clamp(x[i], -1.0, 1.0);
  }
}

std::vector<double> difference(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

}  // namespace

const char* to_string(AttackKind k) { return kAttackNames.at(static_cast<std::size_t>(k)); }

std::optional<AttackKind> parse_attack_kind(std::string_view name) {
  for (std::size_t i = 0; i < kAttackNames.size(); ++i) {
    if (name == kAttackNames[i]) return static_cast<AttackKind>(i);
  }
  return std::nullopt;
}

bool is_bounded(AttackKind k) { return k != AttackKind::Unrestricted; }

bool needs_benign(AttackKind k) {
  return k == AttackKind::NearSample || k == AttackKind::HighComplexity ||
         k == AttackKind::ReverseIntegration;
}

AttackConfig AttackConfig::defaults(AttackKind kind, std::uint64_t seed) {
  AttackConfig c;
  c.kind = kind;
  c.seed = seed;
  c.epsilon = (kind == AttackKind::NearSample || kind == AttackKind::HighComplexity) ? 0.06 : 0.16;
  return c;
}

void AttackConfig::validate() const {
  if (is_bounded(kind) && !(epsilon >= 0.0)) throw std::invalid_argument("attack epsilon must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("attack lambda must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("attack lr must be positive");
  if (!(center_std >= 0.0)) throw std::invalid_argument("attack center_std must be >= 0");
}

std::vector<double> random_center(std::size_t dim, double center_std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> c(dim);
  for (auto& v : c) v = std::clamp(center_std * normal(rng), -1.0, 1.0);
  return c;
}

AttackResult run_attack(const ScoreModel& model, const AttackConfig& cfg, std::span<const double> benign,
                        const AttackObserver& on_step) {
  cfg.validate();
  const std::size_t dim = model.dim();
  const auto shape = model.image_shape();
  if (cfg.kind == AttackKind::HighComplexity && !shape) {
    throw std::invalid_argument("high_complexity attack needs an image model");
  }
  if (needs_benign(cfg.kind) && benign.size() != dim) {
    throw std::invalid_argument(std::string(to_string(cfg.kind)) + " attack needs a benign sample of dimension " +
                                std::to_string(dim));
  }
  const Problem problem(model, cfg);
  const bool latent_space = cfg.kind == AttackKind::ReverseIntegration;
  const bool pixel_bounds = !latent_space;
  const double eps = is_bounded(cfg.kind) ? cfg.epsilon : std::numeric_limits<double>::infinity();

  AttackResult r;
  r.kind = cfg.kind;
  switch (cfg.kind) {
    case AttackKind::Unrestricted:
      r.center.assign(dim, 0.0);
      break;
    case AttackKind::RandomRegion:
    case AttackKind::PriorOnly:
      r.center = random_center(dim, cfg.center_std, derive_seed(cfg.seed, kCenter));
      break;
    case AttackKind::NearSample:
    case AttackKind::HighComplexity:
      r.center.assign(benign.begin(), benign.end());
      break;
    case AttackKind::ReverseIntegration: {
      SolverConfig enc = problem.fast();
      enc.direction = Direction::Forward;
      r.center = solve(benign, enc, model).x;
      break;
    }
  }

  std::vector<double> x = r.center;
  project(x, r.center, eps, pixel_bounds);
  std::vector<double> last_good = x;
  AdamState adam;
  const AdamOptions adam_opts{.lr = cfg.lr};
  Evaluation last_eval;
  bool have_eval = false;

  auto record = [&](const Evaluation& e) {
    r.objective.push_back(e.objective);
    r.integral_trace.push_back(e.integral);
    r.prior_trace.push_back(e.prior);
    last_eval = e;
    have_eval = true;
    last_good = x;
  };

  try {
    for (std::size_t k = 0; k < cfg.max_steps; ++k) {
      Evaluation e = problem.evaluate(x, true);
      record(e);
      for (auto& g : e.grad) g = -g;
      adam_step(x, e.grad, adam, adam_opts);
      project(x, r.center, eps, pixel_bounds);
      r.steps = k + 1;
      if (on_step) {
        const auto d = difference(x, r.center);
        on_step(AttackStep{r.steps, e.objective, x, d});
      }
    }
    record(problem.evaluate(x, false));
  } catch (const ad::NonFiniteError& err) {
    r.aborted = true;
    r.abort_reason = err.what();
  } catch (const SolverError& err) {
    r.aborted = true;
    r.abort_reason = err.what();
  }
  if (r.aborted && r.steps > 0 && r.objective.size() == r.steps) {
    // The failing evaluation was the iterate after the last recorded one.
    r.steps -= 1;
  }
  x = last_good;
  r.delta = difference(x, r.center);

  const std::size_t w = cfg.convergence_window;
  if (!r.aborted && w > 0 && r.objective.size() > w) {
    const double gain = r.objective.back() - r.objective[r.objective.size() - 1 - w];
    r.converged = gain / static_cast<double>(dim) < cfg.convergence_tol;
  }

  SolverConfig eval = cfg.eval_solver.value_or(SolverConfig::accurate(dim));
  eval.seed = derive_seed(cfg.seed, kEvalZ);
  try {
    if (have_eval) {
      r.fast = make_estimate(last_eval.integral, last_eval.prior, dim,
                             latent_space ? Direction::Reverse : Direction::Forward);
    } else {
      r.fast = nan_estimate(latent_space ? Direction::Reverse : Direction::Forward);
    }
    if (latent_space) {
      r.latent = x;
      SolverConfig dec = eval;
      dec.direction = Direction::Reverse;
      r.x = solve(r.latent, dec, model).x;
    } else {
      r.x = x;
    }
    eval.direction = Direction::Forward;
    r.accurate = log_likelihood_forward(r.x, eval, model);
  } catch (const std::runtime_error& err) {
    if (r.x.empty()) r.x = x;
    r.accurate = nan_estimate(Direction::Forward);
    if (!r.aborted) {
      r.aborted = true;
      r.abort_reason = std::string("scoring failed: ") + err.what();
    }
  }
  if (shape) {
    r.complexity = complexity_png(Sample{r.x, *shape});
    r.hf_energy = hf_energy(r.x, *shape);
  }
  return r;
}

namespace {

AttackResult run_checked(AttackKind want, const ScoreModel& model, const AttackConfig& cfg,
                         std::span<const double> benign) {
  if (cfg.kind != want) {
    throw std::invalid_argument(std::string("expected a ") + to_string(want) + " config, got " +
                                to_string(cfg.kind));
  }
  return run_attack(model, cfg, benign);
}

}  // namespace

AttackResult attack_unrestricted(const ScoreModel& model, const AttackConfig& cfg) {
  return run_checked(AttackKind::Unrestricted, model, cfg, {});
}

AttackResult attack_random_region(const ScoreModel& model, const AttackConfig& cfg) {
  return run_checked(AttackKind::RandomRegion, model, cfg, {});
}

AttackResult attack_near_sample(const ScoreModel& model, const AttackConfig& cfg,
                                std::span<const double> x_benign) {
  return run_checked(AttackKind::NearSample, model, cfg, x_benign);
}

AttackResult attack_high_complexity(const ScoreModel& model, const AttackConfig& cfg,
                                    std::span<const double> x_benign) {
  return run_checked(AttackKind::HighComplexity, model, cfg, x_benign);
}

AttackResult attack_prior_only(const ScoreModel& model, const AttackConfig& cfg) {
  return run_checked(AttackKind::PriorOnly, model, cfg, {});
}

AttackResult attack_reverse_integration(const ScoreModel& model, const AttackConfig& cfg,
                                        std::span<const double> x_benign) {
  return run_checked(AttackKind::ReverseIntegration, model, cfg, x_benign);
}

// --- black-box probes ----------------------------------------------------------

const char* to_string(BlackBoxKind k) { return kBlackBoxNames.at(static_cast<std::size_t>(k)); }

std::optional<BlackBoxKind> parse_blackbox_kind(std::string_view name) {
  for (std::size_t i = 0; i < kBlackBoxNames.size(); ++i) {
    if (name == kBlackBoxNames[i]) return static_cast<BlackBoxKind>(i);
  }
  return std::nullopt;
}

std::vector<Sample> blackbox_suite(BlackBoxKind kind, const BlackBoxParams& params, std::uint64_t seed) {
  if (params.levels == 0) throw std::invalid_argument("black-box suite needs at least one level");
  const ImageShape& s = params.shape;
  const std::size_t n = params.levels;
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 16));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> base(s.size());
  for (auto& e : base) e = unit(rng);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(s.size());
    const double a = static_cast<double>(k + 1) / static_cast<double>(n);
    switch (kind) {
      case BlackBoxKind::Monochrome: {
        const double level = n == 1 ? -1.0 : -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(n - 1);
        std::fill(v.begin(), v.end(), level);
        break;
      }
      case BlackBoxKind::FilteredNoise: {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 2.0 * a * base[i];
        v = gaussian_filter2d(v, s, params.kernel_size);
        for (auto& e : v) e = std::clamp(e, -1.0, 1.0);
        break;
      }
      case BlackBoxKind::UniformNoise: {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a * (2.0 * base[i] - 1.0), -1.0, 1.0);
        break;
      }
    }
    out.push_back(Sample{std::move(v), s});
  }
  return out;
}

}  // namespace pflow
