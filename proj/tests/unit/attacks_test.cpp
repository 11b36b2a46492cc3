#include "pflow/attacks.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>

#include "pflow/complexity.hpp"

using namespace pflow;

namespace {

GaussianMixture two_modes() { return reference_two_component(); }

// Mean-shift on the t = 0 mixture: with equal isotropic variances the
// responsibility-weighted mean is a fixed point exactly at a local maximum.
std::vector<double> mixture_mode(const GaussianMixture& g, std::vector<double> x) {
  for (int it = 0; it < 10000; ++it) {
    std::vector<double> logw(g.weights.size());
    for (std::size_t k = 0; k < logw.size(); ++k) {
      double q = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) q += (x[i] - g.means[k][i]) * (x[i] - g.means[k][i]);
      logw[k] = std::log(g.weights[k]) - 0.5 * q / (g.stds[k] * g.stds[k]);
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double z = 0.0;
    for (auto& l : logw) z += (l = std::exp(l - mx));
    std::vector<double> next(x.size(), 0.0);
    for (std::size_t k = 0; k < logw.size(); ++k) {
      for (std::size_t i = 0; i < x.size(); ++i) next[i] += logw[k] / z * g.means[k][i];
    }
    x = next;
  }
  return x;
}

double dist_inf(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

AttackConfig quick(AttackKind kind, std::uint64_t seed, std::size_t steps) {
  AttackConfig c = AttackConfig::defaults(kind, seed);
  c.max_steps = steps;
  c.eval_solver = SolverConfig::fast();
  return c;
}

TinyScoreNet small_image_net() {
  return TinyScoreNet(ScoreNetArch{16, {16}, ImageShape{1, 4, 4}}, SubVpSde{}, 5);
}

std::vector<double> image_benign() { return toy_image_dataset(1, 4, 4, 11)[0].values; }

// A Gaussian score whose binding fails with a non-finite value once more
// than `budget` bindings have been made.
class FlakyModel final : public ScoreModel {
 public:
  explicit FlakyModel(int budget) : inner_({{1.0}, {{0.0, 0.0}}, {0.5}}, SubVpSde{}), budget_(budget) {}
  std::size_t dim() const override { return 2; }
  const SubVpSde& sde() const override { return inner_.sde(); }
  std::unique_ptr<ScoreBinding> bind(ad::Tape& tape) const override {
    struct Binding : ScoreBinding {
      std::unique_ptr<ScoreBinding> inner;
      bool broken;
      ad::Var score(const ad::Var& x, double t) override {
        ad::Var s = inner->score(x, t);
        return broken ? ad::exp(ad::scale(s, 1e6)) : s;
      }
    };
    auto b = std::make_unique<Binding>();
    b->inner = inner_.bind(tape);
    b->broken = calls_.fetch_add(1) >= budget_;
    return b;
  }

 private:
  GaussianMixtureScore inner_;
  int budget_;
  mutable std::atomic<int> calls_{0};
};

}  // namespace

TEST(AttackConfigTest, NamesRoundTrip) {
  for (auto k : {AttackKind::Unrestricted, AttackKind::RandomRegion, AttackKind::NearSample,
                 AttackKind::HighComplexity, AttackKind::PriorOnly, AttackKind::ReverseIntegration}) {
    EXPECT_EQ(parse_attack_kind(to_string(k)), k);
  }
  EXPECT_FALSE(parse_attack_kind("pgd").has_value());
  for (auto k : {BlackBoxKind::Monochrome, BlackBoxKind::FilteredNoise, BlackBoxKind::UniformNoise}) {
    EXPECT_EQ(parse_blackbox_kind(to_string(k)), k);
  }
}

TEST(AttackConfigTest, Defaults) {
  EXPECT_DOUBLE_EQ(AttackConfig::defaults(AttackKind::RandomRegion).epsilon, 0.16);
  EXPECT_DOUBLE_EQ(AttackConfig::defaults(AttackKind::NearSample).epsilon, 0.06);
  EXPECT_DOUBLE_EQ(AttackConfig::defaults(AttackKind::ReverseIntegration).epsilon, 0.16);
  const auto c = AttackConfig::defaults(AttackKind::PriorOnly);
  EXPECT_DOUBLE_EQ(c.lr, 0.003);
  EXPECT_EQ(c.max_steps, 500u);
  EXPECT_EQ(c.solver.intervals(), 20u);
}

TEST(AttackConfigTest, RejectsBadInput) {
  const GaussianMixtureScore model(two_modes(), SubVpSde{});
  auto c = quick(AttackKind::RandomRegion, 0, 1);
  c.epsilon = -0.1;
  EXPECT_THROW(run_attack(model, c), std::invalid_argument);
  c = quick(AttackKind::HighComplexity, 0, 1);
  c.lambda = -1.0;
  EXPECT_THROW(run_attack(model, c, std::vector<double>{0.0, 0.0}), std::invalid_argument);
  c.lambda = 1.0;
  EXPECT_THROW(run_attack(model, c, std::vector<double>{0.0, 0.0}), std::invalid_argument);
  c = quick(AttackKind::NearSample, 0, 1);
  EXPECT_THROW(run_attack(model, c), std::invalid_argument);
  EXPECT_THROW(attack_unrestricted(model, c), std::invalid_argument);
  c.lr = 0.0;
  EXPECT_THROW(run_attack(model, c, std::vector<double>{0.0, 0.0}), std::invalid_argument);
}

TEST(AttackTest, UnrestrictedHoldsGaussianMode) {
  const GaussianMixture g{{1.0}, {{0.0, 0.0}}, {0.5}};
  const GaussianMixtureScore model(g, SubVpSde{});
  auto c = AttackConfig::defaults(AttackKind::Unrestricted, 3);
  c.max_steps = 100;
  const auto r = attack_unrestricted(model, c);
  EXPECT_LT(dist_inf(r.x, std::vector<double>{0.0, 0.0}), 0.02);
  EXPECT_NEAR(r.accurate.total, gmm_logp0(std::vector<double>{0.0, 0.0}, g), 0.01);
}

TEST(AttackTest, UnrestrictedReachesMixtureMode) {
  const GaussianMixture g = two_modes();
  const GaussianMixtureScore model(g, SubVpSde{});
  const auto mode = mixture_mode(g, g.means[0]);
  const double mode_logp = gmm_logp0(mode, g);
  auto c = AttackConfig::defaults(AttackKind::Unrestricted, 1);
  const auto r = attack_unrestricted(model, c);
  EXPECT_LT(dist_inf(r.x, g.means[0]), 0.1);
  EXPECT_NEAR(r.accurate.total, mode_logp, 0.01);
  EXPECT_NEAR(r.accurate.total, gmm_logp0(r.x, g), 1e-3);
  EXPECT_EQ(r.objective.size(), r.steps + 1);
  EXPECT_EQ(r.steps, 500u);
  EXPECT_FALSE(r.complexity.has_value());
}

TEST(AttackTest, EpsilonZeroIsIdentity) {
  const GaussianMixtureScore model(two_modes(), SubVpSde{});
  auto c = quick(AttackKind::RandomRegion, 4, 20);
  c.epsilon = 0.0;
  const auto r = attack_random_region(model, c);
  EXPECT_EQ(r.x, r.center);
  for (double v : r.objective) EXPECT_EQ(v, r.objective.front());

  auto n = quick(AttackKind::NearSample, 4, 20);
  n.epsilon = 0.0;
  const std::vector<double> benign{0.1, -0.2};
  EXPECT_EQ(attack_near_sample(model, n, benign).x, benign);
}

TEST(AttackTest, ConstraintsHoldAfterEveryStep) {
  const GaussianMixtureScore gmm(two_modes(), SubVpSde{});
  const auto net = small_image_net();
  const auto img = image_benign();
  struct Case {
    const ScoreModel* model;
    AttackKind kind;
    std::vector<double> benign;
  };
  const std::vector<Case> cases{{&gmm, AttackKind::Unrestricted, {}},
                                {&gmm, AttackKind::RandomRegion, {}},
                                {&gmm, AttackKind::NearSample, {0.95, -0.97}},
                                {&gmm, AttackKind::PriorOnly, {}},
                                {&gmm, AttackKind::ReverseIntegration, {0.2, 0.1}},
                                {&net, AttackKind::HighComplexity, img},
                                {&net, AttackKind::NearSample, img}};
  for (const auto& cs : cases) {
    auto c = quick(cs.kind, 9, 60);
    c.lr = 0.05;
    c.lambda = 1.0;
    std::size_t seen = 0;
    const auto r = run_attack(*cs.model, c, cs.benign, [&](const AttackStep& s) {
      ++seen;
      EXPECT_EQ(s.step, seen);
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (is_bounded(cs.kind)) EXPECT_LE(std::abs(s.delta[i]), c.epsilon + 1e-12) << to_string(cs.kind);
        if (cs.kind != AttackKind::ReverseIntegration) {
          EXPECT_LE(std::abs(s.x[i]), 1.0) << to_string(cs.kind);
        }
      }
    });
    EXPECT_EQ(seen, 60u);
    EXPECT_FALSE(r.aborted) << r.abort_reason;
    if (is_bounded(cs.kind)) EXPECT_LE(dist_inf(r.delta, std::vector<double>(r.delta.size(), 0.0)), c.epsilon + 1e-12);
  }
}

TEST(AttackTest, RandomRegionFarFromModesStaysBelowThem) {
  const GaussianMixture g = two_modes();
  const GaussianMixtureScore model(g, SubVpSde{});
  double best_mode = -1e300;
  for (const auto& m : g.means) best_mode = std::max(best_mode, gmm_logp0(mixture_mode(g, m), g));
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto c = AttackConfig::defaults(AttackKind::RandomRegion, seed);
    c.max_steps = 150;
    c.lr = 0.01;
    const auto r = attack_random_region(model, c);
    const double gap = std::min(dist_inf(r.center, g.means[0]), dist_inf(r.center, g.means[1]));
    if (gap <= c.epsilon + 0.05) continue;
    ++checked;
    EXPECT_LT(r.accurate.total, best_mode);
    EXPECT_GT(r.accurate.total, r.objective.empty() ? -1e300 : gmm_logp0(r.center, g));
  }
  EXPECT_GT(checked, 0);
}

TEST(AttackTest, HighComplexityWithZeroLambdaIsNearSample) {
  const auto net = small_image_net();
  const auto img = image_benign();
  auto a = quick(AttackKind::NearSample, 2, 30);
  auto b = quick(AttackKind::HighComplexity, 2, 30);
  b.lambda = 0.0;
  const auto ra = attack_near_sample(net, a, img);
  const auto rb = attack_high_complexity(net, b, img);
  EXPECT_EQ(ra.objective, rb.objective);
  EXPECT_EQ(ra.x, rb.x);
  ASSERT_TRUE(rb.complexity.has_value());
  EXPECT_DOUBLE_EQ(*rb.complexity, complexity_png(Sample{rb.x, ImageShape{1, 4, 4}}));
  EXPECT_DOUBLE_EQ(*rb.hf_energy, hf_energy(rb.x, ImageShape{1, 4, 4}));
}

TEST(AttackTest, HighComplexityRaisesHfEnergy) {
  const auto net = small_image_net();
  const auto img = image_benign();
  auto c = quick(AttackKind::HighComplexity, 2, 50);
  c.lambda = 0.0;
  const double h0 = *attack_high_complexity(net, c, img).hf_energy;
  c.lambda = 1e4;
  const double h1 = *attack_high_complexity(net, c, img).hf_energy;
  EXPECT_GT(h1, h0);
}

TEST(AttackTest, HighComplexityWeighsHfPerDimension) {
  const auto net = small_image_net();
  const auto img = image_benign();
  auto c = quick(AttackKind::HighComplexity, 4, 5);
  c.lambda = 0.7;
  std::vector<std::vector<double>> iterates{img};
  const auto r = run_attack(net, c, img, [&](const AttackStep& s) { iterates.emplace_back(s.x.begin(), s.x.end()); });
  ASSERT_EQ(r.objective.size(), 6u);
  for (std::size_t k = 0; k < r.objective.size(); ++k) {
    const double expected = r.integral_trace[k] + r.prior_trace[k] + 0.7 * 16.0 * hf_energy(iterates[k], ImageShape{1, 4, 4});
    EXPECT_NEAR(r.objective[k], expected, 1e-9 * std::max(1.0, std::abs(expected))) << "step " << k;
  }
}

TEST(AttackTest, PriorOnlyObjectiveIsPriorOfLatent) {
  const GaussianMixtureScore model(two_modes(), SubVpSde{});
  auto c = quick(AttackKind::PriorOnly, 5, 200);
  c.lr = 0.01;
  const auto r = attack_prior_only(model, c);
  ASSERT_EQ(r.objective.size(), r.prior_trace.size());
  for (std::size_t k = 0; k < r.objective.size(); ++k) EXPECT_EQ(r.objective[k], r.prior_trace[k]);
  const auto x1 = solve(r.x, SolverConfig::fast(), model).x;
  EXPECT_NEAR(r.objective.back(), prior_logp(x1), 1e-12);
  EXPECT_GT(r.prior_trace.back(), r.prior_trace.front());
  EXPECT_GT(r.integral_trace.back(), r.integral_trace.front());
}

TEST(AttackTest, ReverseIntegrationWithZeroEpsilonDecodesBenign) {
  const GaussianMixture g = two_modes();
  const GaussianMixtureScore model(g, SubVpSde{});
  const std::vector<double> benign{-0.45, -0.2};
  auto c = AttackConfig::defaults(AttackKind::ReverseIntegration, 1);
  c.epsilon = 0.0;
  c.max_steps = 5;
  const auto r = attack_reverse_integration(model, c, benign);
  EXPECT_LT(dist_inf(r.x, benign), 1e-3);
  EXPECT_EQ(r.latent, r.center);
  EXPECT_NEAR(r.fast.per_dim, r.accurate.per_dim, 0.05);
  EXPECT_NEAR(r.accurate.total, gmm_logp0(r.x, g), 1e-3);
}

TEST(AttackTest, ReverseIntegrationLatentStaysInBox) {
  const GaussianMixtureScore model(two_modes(), SubVpSde{});
  auto c = quick(AttackKind::ReverseIntegration, 3, 100);
  c.lr = 0.02;
  const auto r = attack_reverse_integration(model, c, std::vector<double>{0.3, 0.2});
  EXPECT_LE(dist_inf(r.latent, r.center), c.epsilon + 1e-12);
  EXPECT_GT(r.objective.back(), r.objective.front());
  EXPECT_EQ(r.fast.direction, Direction::Reverse);
}

TEST(AttackTest, Deterministic) {
  const GaussianMixtureScore model(two_modes(), SubVpSde{});
  for (auto kind : {AttackKind::RandomRegion, AttackKind::PriorOnly, AttackKind::ReverseIntegration}) {
    const auto c = quick(kind, 8, 25);
    const std::vector<double> benign{0.1, 0.1};
    const auto a = run_attack(model, c, benign);
    const auto b = run_attack(model, c, benign);
    EXPECT_EQ(a.objective, b.objective);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.delta, b.delta);
    EXPECT_EQ(a.accurate.total, b.accurate.total);
    EXPECT_EQ(a.fast.total, b.fast.total);
    auto c2 = c;
    c2.seed = 9;
    if (kind != AttackKind::ReverseIntegration) EXPECT_NE(run_attack(model, c2, benign).center, a.center);
  }
}

TEST(AttackTest, NonFiniteObjectiveAbortsWithPartialTrajectory) {
  const FlakyModel model(7);
  auto c = quick(AttackKind::RandomRegion, 1, 50);
  std::vector<std::vector<double>> iterates;
  const auto r = run_attack(model, c, {}, [&](const AttackStep& s) { iterates.emplace_back(s.x.begin(), s.x.end()); });
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  EXPECT_EQ(r.objective.size(), 7u);
  EXPECT_EQ(r.steps, 6u);
  EXPECT_EQ(r.x, iterates.at(5));
  EXPECT_FALSE(r.converged);
}

TEST(BlackBoxTest, MonochromeSpansBoundsWithLowComplexity) {
  const BlackBoxParams p{ImageShape{3, 32, 32}, 6, 8};
  const auto suite = blackbox_suite(BlackBoxKind::Monochrome, p, 0);
  ASSERT_EQ(suite.size(), 6u);
  EXPECT_EQ(suite.front().values.front(), -1.0);
  EXPECT_EQ(suite.back().values.front(), 1.0);
  for (const auto& s : suite) {
    EXPECT_TRUE(std::all_of(s.values.begin(), s.values.end(), [&](double v) { return v == s.values[0]; }));
    EXPECT_LT(complexity_png(s), 0.05);
  }
}

TEST(BlackBoxTest, UniformNoiseComplexityGrowsWithMagnitude) {
  const BlackBoxParams p{ImageShape{3, 32, 32}, 8, 8};
  const auto suite = blackbox_suite(BlackBoxKind::UniformNoise, p, 3);
  // Sizes saturate once deflate stores the rows verbatim.
  double prev = 0.0;
  for (const auto& s : suite) {
    const double c = complexity_png(s);
    EXPECT_GE(c, prev);
    prev = c;
  }
  EXPECT_GT(prev, complexity_png(suite.front()));
  EXPECT_GE(prev, 0.9);
  EXPECT_LE(prev, 1.1);
}

TEST(BlackBoxTest, UniformNoiseLevelsScaleOnePattern) {
  const BlackBoxParams p{ImageShape{1, 8, 8}, 4, 8};
  const auto suite = blackbox_suite(BlackBoxKind::UniformNoise, p, 9);
  // Below magnitude 1 nothing is clamped, so level k is k + 1 times level 0.
  for (std::size_t k = 1; k + 1 < suite.size(); ++k) {
    for (std::size_t i = 0; i < suite[k].values.size(); ++i) {
      EXPECT_NEAR(suite[k].values[i], static_cast<double>(k + 1) * suite[0].values[i], 1e-12);
    }
  }
}

TEST(BlackBoxTest, FilteredNoiseIsSmoothAndInRange) {
  const BlackBoxParams p{ImageShape{1, 16, 16}, 5, 8};
  const auto filtered = blackbox_suite(BlackBoxKind::FilteredNoise, p, 3);
  const auto raw = blackbox_suite(BlackBoxKind::UniformNoise, p, 3);
  for (std::size_t k = 0; k < filtered.size(); ++k) {
    for (double v : filtered[k].values) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LT(complexity_png(filtered[k]), complexity_png(raw[k]));
  }
}

TEST(BlackBoxTest, SameSeedSameSuite) {
  const BlackBoxParams p{};
  for (auto k : {BlackBoxKind::Monochrome, BlackBoxKind::FilteredNoise, BlackBoxKind::UniformNoise}) {
    const auto a = blackbox_suite(k, p, 4);
    const auto b = blackbox_suite(k, p, 4);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values);
  }
  EXPECT_NE(blackbox_suite(BlackBoxKind::UniformNoise, p, 4)[0].values,
            blackbox_suite(BlackBoxKind::UniformNoise, p, 5)[0].values);
}
