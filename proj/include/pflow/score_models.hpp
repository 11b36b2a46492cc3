#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pflow/autodiff.hpp"
#include "pflow/sample.hpp"
#include "pflow/sde.hpp"

namespace pflow {

// A score model attached to one tape. Parameters are placed on the tape
// once, when the binding is created, and reused by every call.
class ScoreBinding {
 public:
  virtual ~ScoreBinding() = default;
  // s(x, t) ~ grad_x log p_t(x), recorded on the bound tape.
  virtual ad::Var score(const ad::Var& x, double t) = 0;
};

class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual std::size_t dim() const = 0;
  virtual const SubVpSde& sde() const = 0;
  virtual std::optional<ImageShape> image_shape() const { return std::nullopt; }
  virtual std::unique_ptr<ScoreBinding> bind(ad::Tape& tape) const = 0;

  // Convenience evaluation on a private tape.
  std::vector<double> score(std::span<const double> x, double t) const;
};

// s(x, t) = 0. Together with NoiseSchedule::zero() this gives a flow that
// does not move.
class ZeroScoreModel final : public ScoreModel {
 public:
  ZeroScoreModel(std::size_t dim, SubVpSde sde) : dim_(dim), sde_(sde) {}

  std::size_t dim() const override { return dim_; }
  const SubVpSde& sde() const override { return sde_; }
  std::unique_ptr<ScoreBinding> bind(ad::Tape& tape) const override;

 private:
  std::size_t dim_;
  SubVpSde sde_;
};

// Isotropic Gaussian mixture sum_k w_k N(mu_k, std_k^2 I).
struct GaussianMixture {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<double> stds;

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
  // Throws std::invalid_argument when the mixture is malformed.
  void validate() const;
};

// Reference mixtures at D = 2 used by the default configs. Both have a zero
// weighted mean, so the diffused marginal at t = 1 matches the standard
// normal prior to first order in m(1).
// Two components on the first axis, unequal weights, std 0.2.
GaussianMixture reference_two_component();
// Three components of unequal weight and width.
GaussianMixture reference_three_component();

// n seeded draws from the mixture.
std::vector<std::vector<double>> sample_mixture(const GaussianMixture& gmm, std::size_t n, std::uint64_t seed);

// log p_0(x), computed with log-sum-exp.
double gmm_logp0(std::span<const double> x, const GaussianMixture& gmm);

// log p_t(x) of the mixture pushed through the perturbation kernel:
// component k becomes N(m(t) mu_k, (m(t)^2 std_k^2 + sigma(t)^2) I).
double gmm_logp_t(std::span<const double> x, double t, const GaussianMixture& gmm,
                  const SubVpSde& sde);

// Exact score of the diffused mixture.
class GaussianMixtureScore final : public ScoreModel {
 public:
  GaussianMixtureScore(GaussianMixture gmm, SubVpSde sde);

  std::size_t dim() const override { return gmm_.dim(); }
  const SubVpSde& sde() const override { return sde_; }
  std::unique_ptr<ScoreBinding> bind(ad::Tape& tape) const override;

  const GaussianMixture& mixture() const { return gmm_; }
  std::vector<double> score_t(std::span<const double> x, double t) const { return score(x, t); }
  double logp_t(std::span<const double> x, double t) const { return gmm_logp_t(x, t, gmm_, sde_); }

 private:
  GaussianMixture gmm_;
  SubVpSde sde_;
};

// Small tanh MLP. The input is x together with the time features
// (t, sin 2 pi t, cos 2 pi t). The score is the network output times
// c(t) = 1 / sqrt(sigma(t)^2 + m(t)^2 s_d^2), with s_d = kDataScale a nominal
// data standard deviation, so the raw output stays O(1) for every t.
struct ScoreNetArch {
  std::size_t dim = 0;
  std::vector<std::size_t> hidden{128, 128};
  std::optional<ImageShape> image;
};

class TinyScoreNet final : public ScoreModel {
 public:
  TinyScoreNet(ScoreNetArch arch, SubVpSde sde, std::uint64_t init_seed);
  TinyScoreNet(ScoreNetArch arch, SubVpSde sde, std::vector<double> params);

  std::size_t dim() const override { return arch_.dim; }
  const SubVpSde& sde() const override { return sde_; }
  std::optional<ImageShape> image_shape() const override { return arch_.image; }
  std::unique_ptr<ScoreBinding> bind(ad::Tape& tape) const override;

  const ScoreNetArch& arch() const { return arch_; }
  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }
  std::size_t param_count() const { return params_.size(); }

  // One tape leaf per parameter block, in layout order.
  struct Bound {
    std::vector<ad::Var> blocks;
  };
  Bound place(ad::Tape& tape, bool trainable) const;
  // Raw network output (before the c(t) scaling).
  ad::Var forward(const Bound& params, const ad::Var& x, double t) const;
  double output_scale(double t) const;

  static constexpr double kDataScale = 0.5;

  static std::size_t count_params(const ScoreNetArch& arch);

 private:
  ScoreNetArch arch_;
  SubVpSde sde_;
  std::vector<double> params_;
};

// Model checkpoints: "PFSCORE1" magic, u32 version, u32 dim, u32 layer
// count, u32 per hidden layer, u32 channels/height/width (zeros when the
// model is not image shaped), u64 parameter count, then the parameters as
// little-endian IEEE-754 doubles.
void save_checkpoint(const std::string& path, const TinyScoreNet& net);
TinyScoreNet load_checkpoint(const std::string& path, SubVpSde sde);

struct DsmOptions {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double t0 = kDefaultT0;
};

struct DsmReport {
  std::vector<double> loss;  // Mean batch loss per step.
};

// Denoising score matching with weighting sigma(t)^2:
//   E || sigma(t) s(x_t, t) + eps ||^2,  x_t = m(t) x0 + sigma(t) eps,
// t ~ U[t0, 1]. On a non-finite loss throws ad::NonFiniteError and leaves
// the network at the last good parameters. `on_step` (optional) sees the
// step index and loss after every update.
DsmReport train_dsm(TinyScoreNet& net, std::span<const std::vector<double>> dataset,
                    const DsmOptions& opts,
                    const std::function<void(std::size_t, double)>& on_step = {});

// Seeded grayscale images in [-1, 1]: a random linear gradient with one to
// three soft-edged discs or rectangles on top.
std::vector<Sample> toy_image_dataset(std::size_t n, std::size_t height, std::size_t width,
                                      std::uint64_t seed);

}  // namespace pflow
