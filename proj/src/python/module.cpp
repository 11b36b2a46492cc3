#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <sstream>

#include "pflow/attacks.hpp"
#include "pflow/complexity.hpp"
#include "pflow/harness/config.hpp"
#include "pflow/harness/experiments.hpp"
#include "pflow/pf_ode.hpp"
#include "pflow/score_models.hpp"
#include "pflow/sde.hpp"

namespace py = pybind11;
using namespace pflow;

namespace {

using Vec = std::vector<double>;
using Release = py::call_guard<py::gil_scoped_release>;

ImageShape shape_of(const std::tuple<std::size_t, std::size_t, std::size_t>& s) {
  return ImageShape{std::get<0>(s), std::get<1>(s), std::get<2>(s)};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Probability-flow ODE likelihoods, complexity and attacks";
  m.attr("DEFAULT_T0") = kDefaultT0;

  py::class_<SubVpSde>(m, "SubVpSde")
      .def(py::init([](double beta0, double beta1) { return SubVpSde(NoiseSchedule(beta0, beta1)); }),
           py::arg("beta0") = 0.1, py::arg("beta1") = 20.0)
      .def("beta", &SubVpSde::beta)
      .def("beta_integral", &SubVpSde::beta_integral)
      .def("diffusion_g2", &SubVpSde::diffusion_g2)
      .def("kernel_moments", [](const SubVpSde& s, double t) {
        const auto k = s.kernel_moments(t);
        return std::make_pair(k.mean_scale, k.std);
      });

  m.def("prior_logp", [](const Vec& x) { return prior_logp(x); });

  py::class_<GaussianMixture>(m, "GaussianMixture")
      .def(py::init([](Vec w, std::vector<Vec> mu, Vec s) {
             GaussianMixture g{std::move(w), std::move(mu), std::move(s)};
             g.validate();
             return g;
           }),
           py::arg("weights"), py::arg("means"), py::arg("stds"))
      .def_readonly("weights", &GaussianMixture::weights)
      .def_readonly("means", &GaussianMixture::means)
      .def_readonly("stds", &GaussianMixture::stds)
      .def_property_readonly("dim", &GaussianMixture::dim);
  m.def("reference_two_component", &reference_two_component);
  m.def("reference_three_component", &reference_three_component);
  m.def("sample_mixture", &sample_mixture, py::arg("gmm"), py::arg("n"), py::arg("seed"));
  m.def("gmm_logp0", [](const Vec& x, const GaussianMixture& g) { return gmm_logp0(x, g); });
  m.def(
      "gmm_logp_t",
      [](const Vec& x, double t, const GaussianMixture& g, const SubVpSde& sde) { return gmm_logp_t(x, t, g, sde); },
      py::arg("x"), py::arg("t"), py::arg("gmm"), py::arg("sde") = SubVpSde{});

  py::class_<ScoreModel, std::shared_ptr<ScoreModel>>(m, "ScoreModel")
      .def_property_readonly("dim", &ScoreModel::dim)
      .def_property_readonly("image_shape",
                             [](const ScoreModel& s) -> std::optional<std::tuple<std::size_t, std::size_t, std::size_t>> {
                               if (auto sh = s.image_shape()) return std::make_tuple(sh->channels, sh->height, sh->width);
                               return std::nullopt;
                             })
      .def("score", [](const ScoreModel& s, const Vec& x, double t) { return s.score(x, t); });
  py::class_<GaussianMixtureScore, ScoreModel, std::shared_ptr<GaussianMixtureScore>>(m, "GaussianMixtureScore")
      .def(py::init<GaussianMixture, SubVpSde>(), py::arg("gmm"), py::arg("sde") = SubVpSde{})
      .def_property_readonly("mixture", &GaussianMixtureScore::mixture)
      .def("logp_t", [](const GaussianMixtureScore& s, const Vec& x, double t) { return s.logp_t(x, t); });
  py::class_<TinyScoreNet, ScoreModel, std::shared_ptr<TinyScoreNet>>(m, "TinyScoreNet")
      .def_property_readonly("param_count", &TinyScoreNet::param_count);
  m.def(
      "load_checkpoint",
      [](const std::string& path) { return std::make_shared<TinyScoreNet>(load_checkpoint(path, SubVpSde{})); },
      py::arg("path"));

  py::enum_<SolverMethod>(m, "SolverMethod").value("RK4", SolverMethod::RK4).value("EULER", SolverMethod::Euler);
  py::enum_<DivergenceMode>(m, "DivergenceMode")
      .value("EXACT", DivergenceMode::Exact)
      .value("HUTCHINSON", DivergenceMode::Hutchinson);
  py::enum_<ZPolicy>(m, "ZPolicy")
      .value("FIXED_SINGLE", ZPolicy::FixedSingle)
      .value("FRESH_PER_STEP", ZPolicy::FreshPerStep);
  py::enum_<Direction>(m, "Direction").value("FORWARD", Direction::Forward).value("REVERSE", Direction::Reverse);

  py::class_<SolverConfig>(m, "SolverConfig")
      .def(py::init<>())
      .def_static("fast", &SolverConfig::fast, py::arg("seed") = 0)
      .def_static("accurate", &SolverConfig::accurate, py::arg("dim"), py::arg("seed") = 0)
      .def_readwrite("method", &SolverConfig::method)
      .def_readwrite("step_size", &SolverConfig::step_size)
      .def_readwrite("t0", &SolverConfig::t0)
      .def_readwrite("divergence", &SolverConfig::divergence)
      .def_readwrite("z_policy", &SolverConfig::z_policy)
      .def_readwrite("seed", &SolverConfig::seed)
      .def_readwrite("direction", &SolverConfig::direction)
      .def_readwrite("exact_max_dim", &SolverConfig::exact_max_dim)
      .def_property_readonly("intervals", &SolverConfig::intervals)
      .def_property_readonly("evaluations", &SolverConfig::evaluations);

  py::class_<LikelihoodEstimate>(m, "LikelihoodEstimate")
      .def_readonly("integral", &LikelihoodEstimate::integral)
      .def_readonly("prior", &LikelihoodEstimate::prior)
      .def_readonly("total", &LikelihoodEstimate::total)
      .def_readonly("per_dim", &LikelihoodEstimate::per_dim)
      .def_readonly("direction", &LikelihoodEstimate::direction)
      .def("__repr__", [](const LikelihoodEstimate& e) {
        std::ostringstream s;
        s << "LikelihoodEstimate(total=" << e.total << ", integral=" << e.integral << ", prior=" << e.prior << ")";
        return s.str();
      });

  m.def("rademacher", &rademacher, py::arg("seed"), py::arg("key"), py::arg("dim"));
  m.def(
      "divergence_exact",
      [](const Vec& x, double t, const ScoreModel& s) { return divergence_exact(x, t, s); }, Release());
  m.def(
      "divergence_hutchinson",
      [](const Vec& x, double t, const ScoreModel& s, const Vec& z) { return divergence_hutchinson(x, t, s, z); },
      Release());
  m.def(
      "solve",
      [](const Vec& x, const SolverConfig& cfg, const ScoreModel& s) {
        auto st = solve(x, cfg, s);
        return std::make_pair(st.x, st.logdet);
      },
      py::arg("x"), py::arg("config"), py::arg("model"), Release());
  m.def(
      "log_likelihood_forward",
      [](const Vec& x0, const SolverConfig& cfg, const ScoreModel& s) { return log_likelihood_forward(x0, cfg, s); },
      py::arg("x0"), py::arg("config"), py::arg("model"), Release());
  m.def(
      "log_likelihood_reverse",
      [](const Vec& x1, SolverConfig cfg, const ScoreModel& s) {
        cfg.direction = Direction::Reverse;
        auto r = log_likelihood_reverse(x1, cfg, s);
        return std::make_pair(r.estimate, r.decoded);
      },
      py::arg("x1"), py::arg("config"), py::arg("model"), Release());

  m.def(
      "complexity_png",
      [](const Vec& v, const std::tuple<std::size_t, std::size_t, std::size_t>& shape) {
        return complexity_png(Sample{v, shape_of(shape)});
      },
      py::arg("values"), py::arg("shape"));
  m.def(
      "encode_png",
      [](const Vec& v, const std::tuple<std::size_t, std::size_t, std::size_t>& shape) {
        const auto bytes = encode_png(quantize(v, shape_of(shape)));
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("values"), py::arg("shape"));
  m.def(
      "hf_energy",
      [](const Vec& v, const std::tuple<std::size_t, std::size_t, std::size_t>& shape) {
        return hf_energy(v, shape_of(shape));
      },
      py::arg("values"), py::arg("shape"));

  py::enum_<AttackKind>(m, "AttackKind")
      .value("UNRESTRICTED", AttackKind::Unrestricted)
      .value("RANDOM_REGION", AttackKind::RandomRegion)
      .value("NEAR_SAMPLE", AttackKind::NearSample)
      .value("HIGH_COMPLEXITY", AttackKind::HighComplexity)
      .value("PRIOR_ONLY", AttackKind::PriorOnly)
      .value("REVERSE_INTEGRATION", AttackKind::ReverseIntegration);

  py::class_<AttackConfig>(m, "AttackConfig")
      .def_static("defaults", &AttackConfig::defaults, py::arg("kind"), py::arg("seed") = 0)
      .def_readwrite("kind", &AttackConfig::kind)
      .def_readwrite("epsilon", &AttackConfig::epsilon)
      .def_readwrite("lam", &AttackConfig::lambda)
      .def_readwrite("lr", &AttackConfig::lr)
      .def_readwrite("max_steps", &AttackConfig::max_steps)
      .def_readwrite("seed", &AttackConfig::seed)
      .def_readwrite("solver", &AttackConfig::solver)
      .def_readwrite("eval_solver", &AttackConfig::eval_solver)
      .def_readwrite("center_std", &AttackConfig::center_std);

  py::class_<AttackResult>(m, "AttackResult")
      .def_readonly("kind", &AttackResult::kind)
      .def_readonly("x", &AttackResult::x)
      .def_readonly("center", &AttackResult::center)
      .def_readonly("delta", &AttackResult::delta)
      .def_readonly("objective", &AttackResult::objective)
      .def_readonly("integral_trace", &AttackResult::integral_trace)
      .def_readonly("prior_trace", &AttackResult::prior_trace)
      .def_readonly("steps", &AttackResult::steps)
      .def_readonly("fast", &AttackResult::fast)
      .def_readonly("accurate", &AttackResult::accurate)
      .def_readonly("complexity", &AttackResult::complexity)
      .def_readonly("hf_energy", &AttackResult::hf_energy)
      .def_readonly("converged", &AttackResult::converged)
      .def_readonly("aborted", &AttackResult::aborted)
      .def_readonly("abort_reason", &AttackResult::abort_reason);

  m.def(
      "run_attack",
      [](const ScoreModel& s, const AttackConfig& cfg, const Vec& benign) { return run_attack(s, cfg, benign); },
      py::arg("model"), py::arg("config"), py::arg("benign") = Vec{}, Release());

  py::register_exception<harness::ConfigError>(m, "ConfigError", PyExc_ValueError);

  // Returns (exit code, output directory, summary JSON text).
  m.def(
      "run_experiment",
      [](const std::string& config, std::optional<std::filesystem::path> output_dir, std::optional<std::uint64_t> seed,
         std::optional<std::size_t> workers, bool smoke) {
        const auto cfg = harness::load_config(config);
        harness::RunOptions opts;
        opts.output_dir = std::move(output_dir);
        opts.seed = seed;
        opts.workers = workers;
        opts.smoke = smoke;
        py::gil_scoped_release release;
        const auto out = harness::run_experiment(cfg, opts);
        return std::make_tuple(out.exit_code, out.output_dir, out.summary_json);
      },
      py::arg("config"), py::arg("output_dir") = py::none(), py::arg("seed") = py::none(),
      py::arg("workers") = py::none(), py::arg("smoke") = false);
}
