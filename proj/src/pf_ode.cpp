#include "pflow/pf_ode.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace pflow {

const char* to_string(SolverMethod m) { return m == SolverMethod::RK4 ? "rk4" : "euler"; }
const char* to_string(Direction d) { return d == Direction::Forward ? "forward" : "reverse"; }

// --- configuration ---------------------------------------------------------

SolverConfig SolverConfig::fast(std::uint64_t seed) {
  SolverConfig c;
  c.seed = seed;
  return c;
}

SolverConfig SolverConfig::accurate(std::size_t dim, std::uint64_t seed) {
  SolverConfig c;
  c.step_size = 0.001;
  c.z_policy = ZPolicy::FreshPerStep;
  c.divergence = dim <= c.exact_max_dim ? DivergenceMode::Exact : DivergenceMode::Hutchinson;
  c.seed = seed;
  return c;
}

std::size_t SolverConfig::intervals() const {
  if (!(t0 > 0.0 && t0 < 1.0)) throw std::invalid_argument("solver t0 must lie in (0, 1)");
  if (!(step_size > 0.0)) throw std::invalid_argument("solver step size must be positive");
  const double ratio = (1.0 - t0) / step_size;
  const double n = std::round(ratio);
  if (n < 1.0 || std::abs(ratio - n) > 0.02) {
    throw std::invalid_argument("step size " + std::to_string(step_size) +
                                " does not divide [t0, 1] into a whole number of steps");
  }
  return static_cast<std::size_t>(n);
}

std::size_t SolverConfig::evaluations() const {
  return intervals() * (method == SolverMethod::RK4 ? 4 : 1);
}

void SolverConfig::validate(std::size_t dim) const {
  (void)intervals();
  if (divergence == DivergenceMode::Exact && dim > exact_max_dim) {
    throw std::invalid_argument("exact divergence requested for dimension " + std::to_string(dim) +
                                " above the bound " + std::to_string(exact_max_dim));
  }
}

// --- Rademacher draws ------------------------------------------------------

std::vector<double> rademacher(std::uint64_t seed, std::uint64_t key, std::size_t dim) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<double> z(dim);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    if (i % 64 == 0) bits = rng();
    z[i] = (bits >> (i % 64)) & 1U ? 1.0 : -1.0;
  }
  return z;
}

namespace {

constexpr std::uint64_t kFixedZKey = ~std::uint64_t{0};

void check_rademacher(std::span<const double> z) {
  for (double v : z)
    if (v != 1.0 && v != -1.0) throw std::invalid_argument("Rademacher vector entries must be +-1");
}

}  // namespace

// --- vector field and divergence -------------------------------------------

ad::Var drift_tilde(const ad::Var& x, double t, ScoreBinding& score, const SubVpSde& sde) {
  const ad::Var s = score.score(x, t);
  if (s.size() != x.size()) throw ad::ShapeError("score output shape differs from its input");
  return ad::sub(ad::scale(x, -0.5 * sde.beta(t)), ad::scale(s, 0.5 * sde.diffusion_g2(t)));
}

std::vector<double> drift_tilde(std::span<const double> x, double t, const ScoreModel& model) {
  ad::Tape tape;
  auto binding = model.bind(tape);
  const ad::Var f = drift_tilde(tape.constant({x.begin(), x.end()}), t, *binding, model.sde());
  return {f.value().begin(), f.value().end()};
}

ad::Var divergence_exact(const ad::Var& x, const ad::Var& drift) {
  ad::Tape& tape = *x.tape();
  const std::size_t d = x.size();
  ad::Var total;
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    const ad::Var basis = tape.constant(e);
    const ad::Var row = tape.vjp_graph(drift, basis, std::span<const ad::Var>(&x, 1)).front();
    const ad::Var diag = ad::dot(row, basis);
    total = total.valid() ? ad::add(total, diag) : diag;
  }
  return total;
}

ad::Var divergence_hutchinson(const ad::Var& x, const ad::Var& drift, std::span<const double> z) {
  check_rademacher(z);
  ad::Tape& tape = *x.tape();
  const ad::Var zv = tape.constant({z.begin(), z.end()});
  const ad::Var vjp = tape.vjp_graph(drift, zv, std::span<const ad::Var>(&x, 1)).front();
  return ad::dot(vjp, zv);
}

namespace {

double numeric_divergence(const ad::Tape& tape, const ad::Var& x, const ad::Var& f,
                          DivergenceMode mode, std::span<const double> z) {
  const std::size_t d = x.size();
  if (mode == DivergenceMode::Hutchinson) {
    const auto g = tape.vjp(f, z, std::span<const ad::Var>(&x, 1)).front();
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += g[i] * z[i];
    return s;
  }
  double s = 0.0;
  std::vector<double> e(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    e[i] = 1.0;
    s += tape.vjp(f, e, std::span<const ad::Var>(&x, 1)).front()[i];
    e[i] = 0.0;
  }
  return s;
}

}  // namespace

double divergence_exact(std::span<const double> x, double t, const ScoreModel& model,
                        std::size_t max_dim) {
  if (x.size() > max_dim) {
    throw std::invalid_argument("exact divergence requested above the dimension bound");
  }
  ad::Tape tape;
  auto binding = model.bind(tape);
  const ad::Var xv = tape.variable({x.begin(), x.end()});
  const ad::Var f = drift_tilde(xv, t, *binding, model.sde());
  return numeric_divergence(tape, xv, f, DivergenceMode::Exact, {});
}

double divergence_hutchinson(std::span<const double> x, double t, const ScoreModel& model,
                             std::span<const double> z) {
  check_rademacher(z);
  if (z.size() != x.size()) throw std::invalid_argument("z and x differ in length");
  ad::Tape tape;
  auto binding = model.bind(tape);
  const ad::Var xv = tape.variable({x.begin(), x.end()});
  const ad::Var f = drift_tilde(xv, t, *binding, model.sde());
  return numeric_divergence(tape, xv, f, DivergenceMode::Hutchinson, z);
}

// --- solvers ---------------------------------------------------------------

namespace {

struct Grid {
  std::size_t n;
  double t0;
  Direction dir;

  double at(std::size_t k) const {
    const double h = (1.0 - t0) / static_cast<double>(n);
    if (dir == Direction::Forward) return k == n ? 1.0 : t0 + static_cast<double>(k) * h;
    return k == n ? t0 : 1.0 - static_cast<double>(k) * h;
  }
};

class ZSource {
 public:
  ZSource(const SolverConfig& cfg, std::size_t dim) : cfg_(cfg), dim_(dim) {
    if (cfg.divergence == DivergenceMode::Hutchinson && cfg.z_policy == ZPolicy::FixedSingle) {
      fixed_ = rademacher(cfg.seed, kFixedZKey, dim);
    }
  }

  std::vector<double> for_step(std::size_t step) const {
    if (cfg_.divergence == DivergenceMode::Exact) return {};
    if (cfg_.z_policy == ZPolicy::FixedSingle) return fixed_;
    return rademacher(cfg_.seed, step, dim_);
  }

 private:
  const SolverConfig& cfg_;
  std::size_t dim_;
  std::vector<double> fixed_;
};

void check_input(std::size_t got, const ScoreModel& model) {
  if (got != model.dim()) {
    throw std::invalid_argument("sample dimension " + std::to_string(got) +
                                " does not match model dimension " + std::to_string(model.dim()));
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

// Stage evaluation without gradients. The score parameters are placed once;
// every stage is recorded after them and then discarded.
class NumericField {
 public:
  NumericField(const ScoreModel& model, DivergenceMode mode)
      : model_(model), mode_(mode), binding_(model.bind(tape_)), mark_(tape_.size()) {}

  double eval(std::span<const double> x, double t, std::span<const double> z, std::vector<double>& f_out) {
    tape_.rewind(mark_);
    const ad::Var xv = tape_.variable({x.begin(), x.end()});
    const ad::Var f = drift_tilde(xv, t, *binding_, model_.sde());
    f_out.assign(f.value().begin(), f.value().end());
    return numeric_divergence(tape_, xv, f, mode_, z);
  }

 private:
  const ScoreModel& model_;
  DivergenceMode mode_;
  ad::Tape tape_;
  std::unique_ptr<ScoreBinding> binding_;
  std::size_t mark_;
};

}  // namespace

void ode_step(SolverMethod method, const OdeRhs& rhs, double t, double dt, std::span<double> y) {
  const std::size_t n = y.size();
  std::vector<double> k1(n);
  rhs(t, y, k1);
  if (method == SolverMethod::Euler) {
    for (std::size_t i = 0; i < n; ++i) y[i] += dt * k1[i];
    return;
  }
  std::vector<double> k2(n), k3(n), k4(n), tmp(n);
  const double tm = t + 0.5 * dt;
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k1[i];
  rhs(tm, tmp, k2);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k2[i];
  rhs(tm, tmp, k3);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + dt * k3[i];
  rhs(t + dt, tmp, k4);
  for (std::size_t i = 0; i < n; ++i) y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

AugmentedState solve(std::span<const double> x_init, const SolverConfig& cfg, const ScoreModel& model) {
  check_input(x_init.size(), model);
  cfg.validate(model.dim());
  const Grid grid{cfg.intervals(), cfg.t0, cfg.direction};
  const ZSource zs(cfg, model.dim());
  NumericField field(model, cfg.divergence);

  // Augmented state: x followed by the divergence integral.
  const std::size_t d = x_init.size();
  std::vector<double> y(x_init.begin(), x_init.end());
  y.push_back(0.0);
  std::vector<double> z;
  std::vector<double> f;
  const OdeRhs rhs = [&](double t, std::span<const double> state, std::span<double> dy) {
    dy[d] = field.eval(state.first(d), t, z, f);
    std::copy(f.begin(), f.end(), dy.begin());
  };
  for (std::size_t step = 0; step < grid.n; ++step) {
    const double t = grid.at(step);
    z = zs.for_step(step);
    try {
      ode_step(cfg.method, rhs, t, grid.at(step + 1) - t, y);
    } catch (const ad::NonFiniteError& e) {
      throw SolverError(std::string("non-finite value at step ") + std::to_string(step) + ": " + e.what(),
                        step);
    }
    if (!all_finite(y)) throw SolverError("non-finite state at step " + std::to_string(step), step);
  }
  const double logdet = y.back();
  y.pop_back();
  return {std::move(y), logdet};
}

TapedState solve(const ad::Var& x_init, const SolverConfig& cfg, const ScoreModel& model) {
  check_input(x_init.size(), model);
  cfg.validate(model.dim());
  ad::Tape& tape = *x_init.tape();
  const Grid grid{cfg.intervals(), cfg.t0, cfg.direction};
  const ZSource zs(cfg, model.dim());
  auto binding = model.bind(tape);
  const SubVpSde& sde = model.sde();

  auto stage = [&](const ad::Var& x, double t, std::span<const double> z) {
    const ad::Var f = drift_tilde(x, t, *binding, sde);
    const ad::Var div = cfg.divergence == DivergenceMode::Exact ? divergence_exact(x, f)
                                                                : divergence_hutchinson(x, f, z);
    return std::pair{f, div};
  };

  TapedState st{x_init, tape.scalar_constant(0.0)};
  for (std::size_t step = 0; step < grid.n; ++step) {
    const double t = grid.at(step);
    const double t_next = grid.at(step + 1);
    const double dt = t_next - t;
    const std::vector<double> z = zs.for_step(step);
    try {
      const auto [k1, d1] = stage(st.x, t, z);
      if (cfg.method == SolverMethod::Euler) {
        st.x = ad::add(st.x, ad::scale(k1, dt));
        st.logdet = ad::add(st.logdet, ad::scale(d1, dt));
      } else {
        const double tm = 0.5 * (t + t_next);
        const auto [k2, d2] = stage(ad::add(st.x, ad::scale(k1, 0.5 * dt)), tm, z);
        const auto [k3, d3] = stage(ad::add(st.x, ad::scale(k2, 0.5 * dt)), tm, z);
        const auto [k4, d4] = stage(ad::add(st.x, ad::scale(k3, dt)), t_next, z);
        const ad::Var kx = ad::add(ad::add(k1, ad::scale(k2, 2.0)), ad::add(ad::scale(k3, 2.0), k4));
        const ad::Var kd = ad::add(ad::add(d1, ad::scale(d2, 2.0)), ad::add(ad::scale(d3, 2.0), d4));
        st.x = ad::add(st.x, ad::scale(kx, dt / 6.0));
        st.logdet = ad::add(st.logdet, ad::scale(kd, dt / 6.0));
      }
    } catch (const ad::NonFiniteError& e) {
      throw SolverError(std::string("non-finite value at step ") + std::to_string(step) + ": " + e.what(),
                        step);
    }
  }
  return st;
}

// --- estimators ------------------------------------------------------------

ad::Var prior_logp(const ad::Var& x1) {
  const double d = static_cast<double>(x1.size());
  return ad::add(ad::scale(ad::dot(x1, x1), -0.5),
                 x1.tape()->scalar_constant(-0.5 * d * std::log(2.0 * std::numbers::pi)));
}

namespace {

void require_direction(const SolverConfig& cfg, Direction want) {
  if (cfg.direction != want) {
    throw std::invalid_argument(std::string("solver config must integrate ") + to_string(want));
  }
}

LikelihoodEstimate make_estimate(double integral, double prior, std::size_t dim, Direction dir) {
  LikelihoodEstimate e;
  e.integral = integral;
  e.prior = prior;
  e.total = integral + prior;
  e.per_dim = e.total / static_cast<double>(dim);
  e.direction = dir;
  return e;
}

}  // namespace

LikelihoodEstimate log_likelihood_forward(std::span<const double> x0, const SolverConfig& cfg,
                                          const ScoreModel& model) {
  require_direction(cfg, Direction::Forward);
  const AugmentedState st = solve(x0, cfg, model);
  return make_estimate(st.logdet, prior_logp(st.x), x0.size(), Direction::Forward);
}

TapedEstimate log_likelihood_forward(const ad::Var& x0, const SolverConfig& cfg, const ScoreModel& model) {
  require_direction(cfg, Direction::Forward);
  const TapedState st = solve(x0, cfg, model);
  const ad::Var prior = prior_logp(st.x);
  return {st.logdet, prior, ad::add(st.logdet, prior), st.x};
}

ReverseEstimate log_likelihood_reverse(std::span<const double> x1, const SolverConfig& cfg,
                                       const ScoreModel& model) {
  require_direction(cfg, Direction::Reverse);
  AugmentedState st = solve(x1, cfg, model);
  return {make_estimate(-st.logdet, prior_logp(x1), x1.size(), Direction::Reverse), std::move(st.x)};
}

TapedEstimate log_likelihood_reverse(const ad::Var& x1, const SolverConfig& cfg, const ScoreModel& model) {
  require_direction(cfg, Direction::Reverse);
  const TapedState st = solve(x1, cfg, model);
  const ad::Var integral = ad::neg(st.logdet);
  const ad::Var prior = prior_logp(x1);
  return {integral, prior, ad::add(integral, prior), st.x};
}

}  // namespace pflow
