#include "pflow/pf_ode.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_util.hpp"

namespace pflow {
namespace {

using testing::central_diff;
using testing::rel_error;

GaussianMixture two_component() { return {{0.6, 0.4}, {{-0.4, 0.0}, {0.6, 0.0}}, {0.2, 0.2}}; }

GaussianMixture gaussian(std::size_t dim, double sd) {
  return {{1.0}, {std::vector<double>(dim, 0.0)}, {sd}};
}

SolverConfig accurate_exact(std::uint64_t seed = 0) {
  SolverConfig c = SolverConfig::accurate(2, seed);
  EXPECT_EQ(c.divergence, DivergenceMode::Exact);
  return c;
}

SolverConfig reversed(SolverConfig c) {
  c.direction = Direction::Reverse;
  return c;
}

// Gaussian data N(0, s^2 I): v(t) = m^2 s^2 + sigma^2 obeys dv/dt = -beta v + g^2,
// so the flow is x(t) = x0 sqrt(v(t) / v(t0)) with divergence integral
// D/2 log(v(1) / v(t0)).
double gauss_var(const SubVpSde& sde, double t, double s) {
  const auto k = sde.kernel_moments(t);
  return k.mean_scale * k.mean_scale * s * s + k.std * k.std;
}

TEST(SolverConfigTest, Grids) {
  EXPECT_EQ(SolverConfig::fast().intervals(), 20u);
  EXPECT_EQ(SolverConfig::fast().evaluations(), 80u);
  EXPECT_EQ(SolverConfig::accurate(2).intervals(), 1000u);
  EXPECT_EQ(SolverConfig::accurate(2).divergence, DivergenceMode::Exact);
  EXPECT_EQ(SolverConfig::accurate(65).divergence, DivergenceMode::Hutchinson);
  EXPECT_EQ(SolverConfig::accurate(65).z_policy, ZPolicy::FreshPerStep);
  SolverConfig e;
  e.method = SolverMethod::Euler;
  e.step_size = 0.02;
  EXPECT_EQ(e.evaluations(), 50u);
  SolverConfig bad;
  bad.step_size = 0.3;
  EXPECT_THROW(bad.intervals(), std::invalid_argument);
  bad.step_size = -0.1;
  EXPECT_THROW(bad.intervals(), std::invalid_argument);
  SolverConfig exact;
  exact.divergence = DivergenceMode::Exact;
  EXPECT_NO_THROW(exact.validate(64));
  EXPECT_THROW(exact.validate(65), std::invalid_argument);
}

TEST(RademacherTest, KeyedAndBalanced) {
  const auto a = rademacher(1, 7, 1000);
  EXPECT_EQ(a, rademacher(1, 7, 1000));
  EXPECT_NE(a, rademacher(1, 8, 1000));
  EXPECT_NE(a, rademacher(2, 7, 1000));
  double s = 0.0;
  for (double v : a) {
    EXPECT_TRUE(v == 1.0 || v == -1.0);
    s += v;
  }
  EXPECT_LT(std::abs(s), 4.0 * std::sqrt(1000.0));
}

TEST(DriftTildeTest, ZeroScoreIsPureDrift) {
  ZeroScoreModel model(1, SubVpSde{});
  std::vector<double> x{2.0};
  EXPECT_NEAR(drift_tilde(x, 0.0, model)[0], -0.1, 1e-15);
}

TEST(DriftTildeTest, LinearForGaussianModel) {
  GaussianMixtureScore model(gaussian(2, 1.0), SubVpSde{});
  std::vector<double> x{0.3, -0.8}, y{1.1, 0.4}, comb(2);
  const double a = 1.7, b = -0.6;
  for (std::size_t i = 0; i < 2; ++i) comb[i] = a * x[i] + b * y[i];
  for (double t : {0.01, 0.5, 1.0}) {
    const auto fx = drift_tilde(x, t, model), fy = drift_tilde(y, t, model), fc = drift_tilde(comb, t, model);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(fc[i], a * fx[i] + b * fy[i], 1e-12);
  }
}

TEST(DriftTildeTest, RespectsMixtureSymmetry) {
  GaussianMixtureScore model({{0.5, 0.5}, {{0.5, 0.0}, {-0.5, 0.0}}, {0.2, 0.2}}, SubVpSde{});
  std::vector<double> x{0.3, 0.2}, mx{-0.3, -0.2};
  const auto f = drift_tilde(x, 0.3, model), g = drift_tilde(mx, 0.3, model);
  EXPECT_NEAR(f[0], -g[0], 1e-13);
  EXPECT_NEAR(f[1], -g[1], 1e-13);
}

TEST(DivergenceTest, ZeroScore) {
  ZeroScoreModel model(3, SubVpSde{});
  SubVpSde sde;
  std::vector<double> x{0.1, 0.2, 0.3};
  for (double t : {0.0, 0.4, 1.0}) {
    EXPECT_NEAR(divergence_exact(x, t, model), -0.5 * sde.beta(t) * 3, 1e-12);
    for (std::uint64_t k = 0; k < 8; ++k) {
      EXPECT_NEAR(divergence_hutchinson(x, t, model, rademacher(3, k, 3)), -0.5 * sde.beta(t) * 3, 1e-12);
    }
  }
}

TEST(DivergenceTest, SingleGaussianClosedForm) {
  SubVpSde sde;
  const double sd = 0.6;
  GaussianMixtureScore model(gaussian(2, sd), sde);
  std::vector<double> x{0.5, -0.2};
  for (double t : {0.05, 0.3, 0.9}) {
    const double v = gauss_var(sde, t, sd);
    const double want = -0.5 * sde.beta(t) * 2 + 0.5 * sde.diffusion_g2(t) * 2 / v;
    EXPECT_NEAR(divergence_exact(x, t, model), want, 1e-10 * std::abs(want));
  }
}

TEST(DivergenceTest, ExactMatchesFiniteDifferences) {
  GaussianMixtureScore model(two_component(), SubVpSde{});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> x{u(rng), u(rng)};
    const double t = 0.02 + 0.9 * (u(rng) + 1) / 2;
    double fd = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
      auto fk = [&](std::span<const double> p) { return drift_tilde(p, t, model)[k]; };
      fd += central_diff(fk, x)[k];
    }
    const double ex = divergence_exact(x, t, model);
    EXPECT_LT(std::abs(ex - fd) / std::max(1.0, std::abs(fd)), 1e-5);
  }
}

TEST(DivergenceTest, ExactRespectsDimensionBound) {
  ZeroScoreModel model(70, SubVpSde{});
  std::vector<double> x(70, 0.1);
  EXPECT_THROW(divergence_exact(x, 0.5, model), std::invalid_argument);
  EXPECT_NO_THROW(divergence_exact(x, 0.5, model, 70));
}

TEST(DivergenceTest, HutchinsonUnbiasedAndDeterministic) {
  GaussianMixtureScore model(two_component(), SubVpSde{});
  // Off-diagonal coupling comes from a component off the x-axis.
  GaussianMixtureScore skew({{0.5, 0.5}, {{-0.3, 0.2}, {0.4, -0.3}}, {0.2, 0.3}}, SubVpSde{});
  std::vector<double> x{0.1, 0.15};
  const double t = 0.1;
  const double exact = divergence_exact(x, t, skew);
  const int n = 10000;
  double sum = 0.0, sq = 0.0;
  for (int k = 0; k < n; ++k) {
    const double v = divergence_hutchinson(x, t, skew, rademacher(9, k, 2));
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
  EXPECT_GT(se, 0.0);
  EXPECT_LT(std::abs(mean - exact), 3.0 * se);

  const auto z = rademacher(4, 4, 2);
  EXPECT_EQ(divergence_hutchinson(x, t, skew, z), divergence_hutchinson(x, t, skew, z));
  std::vector<double> bad{1.0, 0.5};
  EXPECT_THROW(divergence_hutchinson(x, t, skew, bad), std::invalid_argument);
  // Axis-aligned means with equal stds: Jacobian diagonal, every z exact.
  const double ex2 = divergence_exact(x, t, model);
  for (std::uint64_t k = 0; k < 4; ++k) EXPECT_NEAR(divergence_hutchinson(x, t, model, rademacher(1, k, 2)), ex2, 1e-12);
}

TEST(DivergenceTest, TapedFormsMatchNumeric) {
  GaussianMixtureScore model({{0.5, 0.5}, {{-0.3, 0.2}, {0.4, -0.3}}, {0.2, 0.3}}, SubVpSde{});
  std::vector<double> x{0.2, -0.1};
  const double t = 0.3;
  ad::Tape tape;
  auto bind = model.bind(tape);
  const ad::Var xv = tape.variable(x);
  const ad::Var f = drift_tilde(xv, t, *bind, model.sde());
  EXPECT_NEAR(divergence_exact(xv, f).scalar(), divergence_exact(x, t, model), 1e-12);
  const auto z = rademacher(2, 2, 2);
  EXPECT_NEAR(divergence_hutchinson(xv, f, z).scalar(), divergence_hutchinson(x, t, model, z), 1e-12);
}

TEST(OdeStepTest, Rk4OnExponentialDecay) {
  const OdeRhs rhs = [](double, std::span<const double> y, std::span<double> dy) { dy[0] = -y[0]; };
  std::vector<double> y{1.0};
  for (int k = 0; k < 10; ++k) ode_step(SolverMethod::RK4, rhs, k * 0.1, 0.1, y);
  EXPECT_NEAR(y[0], std::exp(-1.0), 1e-6);
  std::vector<double> e{1.0};
  ode_step(SolverMethod::Euler, rhs, 0.0, 0.1, e);
  EXPECT_DOUBLE_EQ(e[0], 0.9);
}

TEST(SolveTest, ZeroFieldLeavesStateUnchanged) {
  ZeroScoreModel model(3, SubVpSde(NoiseSchedule::zero()));
  std::vector<double> x{0.5, -1.0, 2.0};
  for (auto method : {SolverMethod::RK4, SolverMethod::Euler}) {
    SolverConfig cfg;
    cfg.method = method;
    const auto st = solve(x, cfg, model);
    EXPECT_EQ(st.x, x);
    EXPECT_EQ(st.logdet, 0.0);
  }
  const auto rev = log_likelihood_reverse(x, reversed(SolverConfig{}), model);
  EXPECT_EQ(rev.decoded, x);
  EXPECT_EQ(rev.estimate.integral, 0.0);
}

TEST(SolveTest, GaussianFlowClosedForm) {
  SubVpSde sde;
  const double sd = 0.5;
  GaussianMixtureScore model(gaussian(2, sd), sde);
  std::vector<double> x0{0.4, -0.7};
  SolverConfig cfg = accurate_exact();
  const auto st = solve(x0, cfg, model);
  const double v0 = gauss_var(sde, cfg.t0, sd), v1 = gauss_var(sde, 1.0, sd);
  const double scale = std::sqrt(v1 / v0);
  EXPECT_NEAR(st.x[0], x0[0] * scale, 1e-8);
  EXPECT_NEAR(st.x[1], x0[1] * scale, 1e-8);
  EXPECT_NEAR(st.logdet, std::log(v1 / v0), 1e-8);
}

TEST(SolveTest, Rk4IsFourthOrder) {
  SubVpSde sde;
  const double sd = 0.5;
  GaussianMixtureScore model(gaussian(1, sd), sde);
  std::vector<double> x0{0.8};
  SolverConfig cfg;
  cfg.divergence = DivergenceMode::Exact;
  const double exact = 0.5 * std::log(gauss_var(sde, 1.0, sd) / gauss_var(sde, cfg.t0, sd));
  std::vector<double> err;
  for (double h : {0.05, 0.025, 0.0125}) {
    cfg.step_size = h;
    err.push_back(std::abs(solve(x0, cfg, model).logdet - exact));
  }
  for (std::size_t i = 1; i < err.size(); ++i) {
    const double ratio = err[i - 1] / err[i];
    EXPECT_GT(ratio, 8.0) << "h ratio step " << i;
    EXPECT_LT(ratio, 32.0) << "h ratio step " << i;
  }
}

TEST(SolveTest, NonFiniteAbortsWithStep) {
  class Exploding final : public ScoreModel {
   public:
    std::size_t dim() const override { return 1; }
    const SubVpSde& sde() const override { return sde_; }
    std::unique_ptr<ScoreBinding> bind(ad::Tape&) const override {
      struct B final : ScoreBinding {
        ad::Var score(const ad::Var& x, double t) override {
          return t > 0.5 ? ad::exp(ad::scale(x, 1e4)) : ad::scale(x, 0.0);
        }
      };
      return std::make_unique<B>();
    }

   private:
    SubVpSde sde_;
  };
  Exploding model;
  std::vector<double> x{1.0};
  try {
    solve(x, SolverConfig{}, model);
    FAIL() << "expected SolverError";
  } catch (const SolverError& e) {
    EXPECT_GE(e.step(), 9u);
    EXPECT_LE(e.step(), 11u);
  }
}

TEST(SolveTest, TapedMatchesNumeric) {
  GaussianMixtureScore model(two_component(), SubVpSde{});
  std::vector<double> x0{0.3, -0.2};
  for (auto method : {SolverMethod::RK4, SolverMethod::Euler}) {
    for (auto div : {DivergenceMode::Exact, DivergenceMode::Hutchinson}) {
      SolverConfig cfg = SolverConfig::fast(5);
      cfg.method = method;
      cfg.divergence = div;
      const auto num = solve(x0, cfg, model);
      ad::Tape tape;
      const auto tp = solve(tape.variable(x0), cfg, model);
      EXPECT_NEAR(tp.logdet.scalar(), num.logdet, 1e-12);
      EXPECT_NEAR(tp.x.value()[0], num.x[0], 1e-12);
      EXPECT_NEAR(tp.x.value()[1], num.x[1], 1e-12);
    }
  }
}

TEST(EstimatorTest, StandardNormalAtOrigin) {
  GaussianMixtureScore model(gaussian(1, 1.0), SubVpSde{});
  std::vector<double> x0{0.0};
  const auto e = log_likelihood_forward(x0, SolverConfig::accurate(1), model);
  EXPECT_NEAR(e.total, -0.918938533204673, 1e-3);
  EXPECT_EQ(e.total, e.integral + e.prior);
  EXPECT_EQ(e.per_dim, e.total);
  EXPECT_EQ(e.direction, Direction::Forward);
}

TEST(EstimatorTest, StandardNormalRoundTrip) {
  GaussianMixtureScore model(gaussian(2, 1.0), SubVpSde{});
  std::vector<double> x0{0.7, -1.3};
  const auto fw = solve(x0, SolverConfig::accurate(2), model);
  const auto rev = log_likelihood_reverse(fw.x, reversed(SolverConfig::accurate(2)), model);
  EXPECT_NEAR(rev.decoded[0], x0[0], 1e-6);
  EXPECT_NEAR(rev.decoded[1], x0[1], 1e-6);
}

TEST(EstimatorTest, MatchesMixtureDensity) {
  const auto g = two_component();
  GaussianMixtureScore model(g, SubVpSde{});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> x{u(rng), 0.6 * u(rng)};
    const auto e = log_likelihood_forward(x, accurate_exact(), model);
    EXPECT_NEAR(e.total, gmm_logp_t(x, kDefaultT0, g, model.sde()), 1e-3) << "point " << i;
  }
}

TEST(EstimatorTest, FastTracksAccurate) {
  GaussianMixtureScore model(two_component(), SubVpSde{});
  GaussianMixtureScore normal(gaussian(2, 1.0), SubVpSde{});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const ScoreModel* m : {static_cast<const ScoreModel*>(&model), static_cast<const ScoreModel*>(&normal)}) {
    for (int i = 0; i < 10; ++i) {
      std::vector<double> x{u(rng), u(rng)};
      const auto fast = log_likelihood_forward(x, SolverConfig::fast(i), *m);
      SolverConfig acc = SolverConfig::accurate(2, i);
      acc.divergence = DivergenceMode::Hutchinson;
      const auto accurate = log_likelihood_forward(x, acc, *m);
      EXPECT_LT(std::abs(fast.per_dim - accurate.per_dim), 0.05);
    }
  }
}

TEST(EstimatorTest, ForwardReverseConsistency) {
  GaussianMixtureScore model({{0.3, 0.3, 0.4}, {{-0.5, -0.3}, {0.5, -0.2}, {0.0, 0.375}}, {0.15, 0.2, 0.25}},
                             SubVpSde{});
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> x0{u(rng), u(rng)};
    const auto fw = solve(x0, accurate_exact(), model);
    const auto rev = log_likelihood_reverse(fw.x, reversed(accurate_exact()), model);
    EXPECT_LT(std::abs(fw.logdet - rev.estimate.integral), 1e-3);
    EXPECT_LT(std::max(std::abs(rev.decoded[0] - x0[0]), std::abs(rev.decoded[1] - x0[1])), 1e-4);
    EXPECT_EQ(rev.estimate.prior, prior_logp(fw.x));
    EXPECT_EQ(rev.estimate.direction, Direction::Reverse);
  }
}

TEST(EstimatorTest, DirectionMismatchThrows) {
  GaussianMixtureScore model(two_component(), SubVpSde{});
  std::vector<double> x{0.0, 0.0};
  EXPECT_THROW(log_likelihood_forward(x, reversed(SolverConfig{}), model), std::invalid_argument);
  EXPECT_THROW(log_likelihood_reverse(x, SolverConfig{}, model), std::invalid_argument);
  std::vector<double> wrong{0.0};
  EXPECT_THROW(log_likelihood_forward(wrong, SolverConfig{}, model), std::invalid_argument);
}

TEST(EstimatorTest, FastGradientMatchesFiniteDifferences) {
  GaussianMixtureScore model({{0.3, 0.3, 0.4}, {{-0.5, -0.3}, {0.5, -0.2}, {0.0, 0.375}}, {0.15, 0.2, 0.25}},
                             SubVpSde{});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> x0{u(rng), u(rng)};
    const SolverConfig cfg = SolverConfig::fast(100 + i);
    ad::Tape tape;
    const ad::Var xv = tape.variable(x0);
    const auto est = log_likelihood_forward(xv, cfg, model);
    const auto g = tape.gradient(est.total, std::span(&xv, 1))[0];
    auto f = [&](std::span<const double> p) { return log_likelihood_forward(p, cfg, model).total; };
    EXPECT_LT(rel_error(g, central_diff(f, x0)), 1e-4);
    EXPECT_NEAR(est.total.scalar(), f(x0), 1e-12);
  }
}

}  // namespace
}  // namespace pflow
