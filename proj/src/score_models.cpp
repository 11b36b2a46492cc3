#include "pflow/score_models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "pflow/adam.hpp"

namespace pflow {

std::vector<double> ScoreModel::score(std::span<const double> x, double t) const {
  ad::Tape tape;
  auto binding = bind(tape);
  const ad::Var xv = tape.constant(std::vector<double>(x.begin(), x.end()));
  const ad::Var s = binding->score(xv, t);
  return {s.value().begin(), s.value().end()};
}

// --- zero model ------------------------------------------------------------

namespace {

class ZeroBinding final : public ScoreBinding {
 public:
  ad::Var score(const ad::Var& x, double /*t*/) override { return ad::scale(x, 0.0); }
};

}  // namespace

std::unique_ptr<ScoreBinding> ZeroScoreModel::bind(ad::Tape& /*tape*/) const {
  return std::make_unique<ZeroBinding>();
}

// --- Gaussian mixture ------------------------------------------------------

void GaussianMixture::validate() const {
  const std::size_t k = weights.size();
  if (k == 0) throw std::invalid_argument("mixture has no components");
  if (means.size() != k || stds.size() != k) {
    throw std::invalid_argument("mixture weights/means/stds have different lengths");
  }
  const std::size_t d = means.front().size();
  if (d == 0) throw std::invalid_argument("mixture has zero dimension");
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!(weights[i] >= 0.0)) throw std::invalid_argument("mixture weight is negative");
    if (!(stds[i] > 0.0)) throw std::invalid_argument("mixture std must be positive");
    if (means[i].size() != d) throw std::invalid_argument("mixture means differ in dimension");
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture weights must sum to 1");
}

double gmm_logp_t(std::span<const double> x, double t, const GaussianMixture& gmm,
                  const SubVpSde& sde) {
  gmm.validate();
  if (x.size() != gmm.dim()) throw std::invalid_argument("sample dimension does not match mixture");
  const KernelMoments km = t == 0.0 ? KernelMoments{1.0, 0.0} : sde.kernel_moments(t);
  const double d = static_cast<double>(x.size());
  std::vector<double> logits;
  logits.reserve(gmm.weights.size());
  for (std::size_t k = 0; k < gmm.weights.size(); ++k) {
    if (gmm.weights[k] == 0.0) continue;
    const double v = km.mean_scale * km.mean_scale * gmm.stds[k] * gmm.stds[k] + km.std * km.std;
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = x[i] - km.mean_scale * gmm.means[k][i];
      sq += r * r;
    }
    logits.push_back(std::log(gmm.weights[k]) - 0.5 * d * std::log(2.0 * std::numbers::pi * v) -
                     0.5 * sq / v);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double acc = 0.0;
  for (double l : logits) acc += std::exp(l - mx);
  return mx + std::log(acc);
}

GaussianMixture reference_two_component() { return {{0.6, 0.4}, {{-0.4, 0.0}, {0.6, 0.0}}, {0.2, 0.2}}; }

GaussianMixture reference_three_component() {
  return {{0.5, 0.3, 0.2}, {{-0.5, -0.3}, {0.4, 0.5}, {0.65, 0.0}}, {0.2, 0.25, 0.3}};
}

std::vector<std::vector<double>> sample_mixture(const GaussianMixture& gmm, std::size_t n, std::uint64_t seed) {
  gmm.validate();
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(gmm.weights.begin(), gmm.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(gmm.dim()));
  for (auto& x : out) {
    const std::size_t k = pick(rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = gmm.means[k][i] + gmm.stds[k] * normal(rng);
  }
  return out;
}

double gmm_logp0(std::span<const double> x, const GaussianMixture& gmm) {
  return gmm_logp_t(x, 0.0, gmm, SubVpSde{});
}

namespace {

class MixtureBinding final : public ScoreBinding {
 public:
  MixtureBinding(ad::Tape& tape, const GaussianMixture& gmm, const SubVpSde& sde)
      : tape_(tape), gmm_(gmm), sde_(sde) {}

  ad::Var score(const ad::Var& x, double t) override {
    const KernelMoments km = sde_.kernel_moments(t);
    const std::size_t d = gmm_.dim();
    if (x.size() != d) throw ad::ShapeError("sample dimension does not match mixture");

    std::vector<ad::Var> comp_scores;
    std::vector<ad::Var> logits;
    std::vector<double> logit_values;
    for (std::size_t k = 0; k < gmm_.weights.size(); ++k) {
      if (gmm_.weights[k] == 0.0) continue;
      const double v = km.mean_scale * km.mean_scale * gmm_.stds[k] * gmm_.stds[k] + km.std * km.std;
      std::vector<double> centre(d);
      for (std::size_t i = 0; i < d; ++i) centre[i] = km.mean_scale * gmm_.means[k][i];
      const ad::Var diff = ad::sub(x, tape_.constant(std::move(centre)));
      comp_scores.push_back(ad::scale(diff, -1.0 / v));
      const double log_norm = std::log(gmm_.weights[k]) -
                              0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * v);
      const ad::Var logit =
          ad::add(ad::scale(ad::dot(diff, diff), -0.5 / v), tape_.scalar_constant(log_norm));
      logit_values.push_back(logit.scalar());
      logits.push_back(logit);
    }
    if (comp_scores.size() == 1) return comp_scores.front();

    // Responsibilities r_k = softmax(logits); the shift is a constant.
    const double shift = *std::max_element(logit_values.begin(), logit_values.end());
    const ad::Var shift_c = tape_.scalar_constant(shift);
    std::vector<ad::Var> expd;
    ad::Var total;
    for (const ad::Var& l : logits) {
      expd.push_back(ad::exp(ad::sub(l, shift_c)));
      total = total.valid() ? ad::add(total, expd.back()) : expd.back();
    }
    ad::Var out;
    for (std::size_t k = 0; k < expd.size(); ++k) {
      const ad::Var term = ad::mul(ad::div(expd[k], total), comp_scores[k]);
      out = out.valid() ? ad::add(out, term) : term;
    }
    return out;
  }

 private:
  ad::Tape& tape_;
  const GaussianMixture& gmm_;
  const SubVpSde& sde_;
};

}  // namespace

GaussianMixtureScore::GaussianMixtureScore(GaussianMixture gmm, SubVpSde sde)
    : gmm_(std::move(gmm)), sde_(sde) {
  gmm_.validate();
}

std::unique_ptr<ScoreBinding> GaussianMixtureScore::bind(ad::Tape& tape) const {
  return std::make_unique<MixtureBinding>(tape, gmm_, sde_);
}

// --- TinyScoreNet ----------------------------------------------------------

namespace {

constexpr std::size_t kTimeFeatures = 3;

struct BlockShape {
  std::size_t rows;
  std::size_t cols;
};

std::vector<BlockShape> block_shapes(const ScoreNetArch& arch) {
  if (arch.dim == 0) throw std::invalid_argument("score net dimension must be positive");
  if (arch.hidden.empty()) throw std::invalid_argument("score net needs at least one hidden layer");
  if (arch.image && arch.image->size() != arch.dim) {
    throw std::invalid_argument("score net image shape does not match its dimension");
  }
  std::vector<BlockShape> s;
  const std::size_t h0 = arch.hidden.front();
  s.push_back({h0, arch.dim});
  s.push_back({h0, kTimeFeatures});
  s.push_back({h0, 1});
  for (std::size_t i = 1; i < arch.hidden.size(); ++i) {
    s.push_back({arch.hidden[i], arch.hidden[i - 1]});
    s.push_back({arch.hidden[i], 1});
  }
  s.push_back({arch.dim, arch.hidden.back()});
  s.push_back({arch.dim, 1});
  return s;
}

class NetBinding final : public ScoreBinding {
 public:
  NetBinding(const TinyScoreNet& net, TinyScoreNet::Bound bound) : net_(net), bound_(std::move(bound)) {}

  ad::Var score(const ad::Var& x, double t) override {
    return ad::scale(net_.forward(bound_, x, t), net_.output_scale(t));
  }

 private:
  const TinyScoreNet& net_;
  TinyScoreNet::Bound bound_;
};

}  // namespace

std::size_t TinyScoreNet::count_params(const ScoreNetArch& arch) {
  std::size_t n = 0;
  for (const BlockShape& b : block_shapes(arch)) n += b.rows * b.cols;
  return n;
}

TinyScoreNet::TinyScoreNet(ScoreNetArch arch, SubVpSde sde, std::uint64_t init_seed)
    : arch_(std::move(arch)), sde_(sde) {
  std::mt19937_64 rng(init_seed);
  const auto shapes = block_shapes(arch_);
  params_.reserve(count_params(arch_));
  for (std::size_t b = 0; b < shapes.size(); ++b) {
    const BlockShape& s = shapes[b];
    if (s.cols == 1) {
      params_.insert(params_.end(), s.rows, 0.0);  // bias
      continue;
    }
    // Glorot-uniform; the time-feature block shares the input layer fan-in.
    const std::size_t fan_in = b == 0 || b == 1 ? arch_.dim + kTimeFeatures : s.cols;
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + s.rows));
    std::uniform_real_distribution<double> u(-a, a);
    for (std::size_t i = 0; i < s.rows * s.cols; ++i) params_.push_back(u(rng));
  }
}

TinyScoreNet::TinyScoreNet(ScoreNetArch arch, SubVpSde sde, std::vector<double> params)
    : arch_(std::move(arch)), sde_(sde), params_(std::move(params)) {
  if (params_.size() != count_params(arch_)) {
    throw std::invalid_argument("parameter count does not match the architecture");
  }
}

TinyScoreNet::Bound TinyScoreNet::place(ad::Tape& tape, bool trainable) const {
  Bound bound;
  std::size_t offset = 0;
  for (const BlockShape& s : block_shapes(arch_)) {
    const std::size_t n = s.rows * s.cols;
    std::vector<double> block(params_.begin() + static_cast<std::ptrdiff_t>(offset),
                              params_.begin() + static_cast<std::ptrdiff_t>(offset + n));
    bound.blocks.push_back(trainable ? tape.variable(std::move(block), s.rows, s.cols)
                                     : tape.constant(std::move(block), s.rows, s.cols));
    offset += n;
  }
  return bound;
}

ad::Var TinyScoreNet::forward(const Bound& p, const ad::Var& x, double t) const {
  ad::Tape& tape = *x.tape();
  const double tau = 2.0 * std::numbers::pi * t;
  const ad::Var feat = tape.constant({t, std::sin(tau), std::cos(tau)});
  const ad::Var bias0 = ad::add(ad::matvec(p.blocks[1], feat), p.blocks[2]);
  ad::Var h = ad::tanh(ad::affine(p.blocks[0], x, bias0));
  std::size_t b = 3;
  for (std::size_t i = 1; i < arch_.hidden.size(); ++i, b += 2) {
    h = ad::tanh(ad::affine(p.blocks[b], h, p.blocks[b + 1]));
  }
  return ad::affine(p.blocks[b], h, p.blocks[b + 1]);
}

double TinyScoreNet::output_scale(double t) const {
  const KernelMoments k = sde_.kernel_moments(t);
  return 1.0 / std::sqrt(k.std * k.std + k.mean_scale * k.mean_scale * kDataScale * kDataScale);
}

std::unique_ptr<ScoreBinding> TinyScoreNet::bind(ad::Tape& tape) const {
  return std::make_unique<NetBinding>(*this, place(tape, false));
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'F', 'S', 'C', 'O', 'R', 'E', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw std::runtime_error("checkpoint is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const TinyScoreNet& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  const ScoreNetArch& arch = net.arch();
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(arch.dim));
  put_u32(os, static_cast<std::uint32_t>(arch.hidden.size()));
  for (std::size_t h : arch.hidden) put_u32(os, static_cast<std::uint32_t>(h));
  const ImageShape img = arch.image.value_or(ImageShape{0, 0, 0});
  put_u32(os, static_cast<std::uint32_t>(img.channels));
  put_u32(os, static_cast<std::uint32_t>(img.height));
  put_u32(os, static_cast<std::uint32_t>(img.width));
  put_u64(os, net.param_count());
  for (double p : net.params()) put_u64(os, std::bit_cast<std::uint64_t>(p));
  if (!os) throw std::runtime_error("failed writing " + path);
}

TinyScoreNet load_checkpoint(const std::string& path, SubVpSde sde) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw std::runtime_error(path + " is not a score-net checkpoint");
  }
  const auto version = static_cast<std::uint32_t>(get_uint(is, 4));
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
  ScoreNetArch arch;
  arch.dim = get_uint(is, 4);
  arch.hidden.resize(get_uint(is, 4));
  for (auto& h : arch.hidden) h = get_uint(is, 4);
  ImageShape img;
  img.channels = get_uint(is, 4);
  img.height = get_uint(is, 4);
  img.width = get_uint(is, 4);
  if (img.size() != 0) arch.image = img;
  const std::uint64_t count = get_uint(is, 8);
  if (count != TinyScoreNet::count_params(arch)) {
    throw std::runtime_error("checkpoint parameter count does not match its header");
  }
  std::vector<double> params(count);
  for (auto& p : params) p = std::bit_cast<double>(get_uint(is, 8));
  return TinyScoreNet(std::move(arch), sde, std::move(params));
}

// --- denoising score matching ----------------------------------------------

DsmReport train_dsm(TinyScoreNet& net, std::span<const std::vector<double>> dataset,
                    const DsmOptions& opts, const std::function<void(std::size_t, double)>& on_step) {
  if (dataset.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& x : dataset) {
    if (x.size() != net.dim()) throw std::invalid_argument("training sample has the wrong dimension");
  }
  if (opts.batch == 0) throw std::invalid_argument("batch size must be positive");

  DsmReport report;
  report.loss.reserve(opts.steps);
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::uniform_real_distribution<double> time(opts.t0, 1.0);
  std::normal_distribution<double> normal;
  AdamState adam;
  const AdamOptions adam_opts{.lr = opts.lr};
  const std::size_t d = net.dim();

  for (std::size_t step = 0; step < opts.steps; ++step) {
    ad::Tape tape;
    const auto bound = net.place(tape, true);
    ad::Var total;
    for (std::size_t b = 0; b < opts.batch; ++b) {
      const auto& x0 = dataset[pick(rng)];
      const double t = time(rng);
      const KernelMoments km = net.sde().kernel_moments(t);
      std::vector<double> eps(d), xt(d);
      for (std::size_t i = 0; i < d; ++i) {
        eps[i] = normal(rng);
        xt[i] = km.mean_scale * x0[i] + km.std * eps[i];
      }
      const ad::Var out = net.forward(bound, tape.constant(std::move(xt)), t);
      const ad::Var r = ad::add(ad::scale(out, km.std * net.output_scale(t)), tape.constant(std::move(eps)));
      const ad::Var l = ad::dot(r, r);
      total = total.valid() ? ad::add(total, l) : l;
    }
    const ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(opts.batch));
    const double loss_value = loss.scalar();

    const auto grads = tape.gradient(loss, bound.blocks);
    std::vector<double> flat;
    flat.reserve(net.param_count());
    for (const auto& g : grads) flat.insert(flat.end(), g.begin(), g.end());

    std::vector<double> next(net.params().begin(), net.params().end());
    AdamState next_state = adam;
    adam_step(next, flat, next_state, adam_opts);
    for (double p : next) {
      if (!std::isfinite(p)) {
        throw ad::NonFiniteError("training diverged at step " + std::to_string(step));
      }
    }
    std::copy(next.begin(), next.end(), net.mutable_params().begin());
    adam = std::move(next_state);
    report.loss.push_back(loss_value);
    if (on_step) on_step(step, loss_value);
  }
  return report;
}

// --- toy images ------------------------------------------------------------

std::vector<Sample> toy_image_dataset(std::size_t n, std::size_t height, std::size_t width,
                                      std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("toy dataset needs at least one image");
  if (height == 0 || width == 0) throw std::invalid_argument("image dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const ImageShape shape{1, height, width};

  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Sample img{std::vector<double>(shape.size()), shape};
    const double base = uniform(-0.6, 0.6);
    const double amp = uniform(0.0, 0.6);
    const double angle = uniform(0.0, 2.0 * std::numbers::pi);
    // Pixel centres mapped to [-1, 1].
    auto coord = [](std::size_t i, std::size_t n) {
      return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        img.values[y * width + x] =
            base + amp * (std::cos(angle) * coord(x, width) + std::sin(angle) * coord(y, height));

    const int shapes = 1 + static_cast<int>(unit(rng) * 3.0) % 3;
    for (int k = 0; k < shapes; ++k) {
      const bool disc = unit(rng) < 0.5;
      const double level = uniform(-1.0, 1.0);
      const double cx = uniform(0.0, static_cast<double>(width - 1));
      const double cy = uniform(0.0, static_cast<double>(height - 1));
      const double rx = uniform(0.15, 0.4) * static_cast<double>(width);
      const double ry = disc ? rx : uniform(0.15, 0.4) * static_cast<double>(height);
      const double soft = uniform(0.3, 1.0);
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double dx = static_cast<double>(x) - cx;
          const double dy = static_cast<double>(y) - cy;
          // Signed distance to the boundary, positive inside.
          const double inside = disc ? rx - std::hypot(dx, dy)
                                     : std::min(rx - std::abs(dx), ry - std::abs(dy));
          const double alpha = 1.0 / (1.0 + std::exp(-inside / soft));
          double& v = img.values[y * width + x];
          v = (1.0 - alpha) * v + alpha * level;
        }
      }
    }
    for (double& v : img.values) v = std::clamp(v, -1.0, 1.0);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace pflow
