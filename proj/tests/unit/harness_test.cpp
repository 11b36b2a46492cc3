#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "pflow/harness/config.hpp"
#include "pflow/harness/experiments.hpp"
#include "pflow/harness/report.hpp"

namespace fs = std::filesystem;
using namespace pflow;
using namespace pflow::harness;

namespace {

std::string error_of(std::string_view text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pflow_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

constexpr const char* kEstimate = R"({
  "version": 1, "experiment": "estimate", "seed": 3,
  "model": {"type": "gmm", "preset": "three_component"},
  "dataset": {"type": "uniform", "n": 3, "seed": 1}
})";

// Spearman reference: Pearson correlation of average ranks, computed without
// sharing code with the harness.
double naive_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        if (w < v[i]) ++less;
        if (w == v[i]) ++equal;
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += ra[i] / n, mb += rb[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(ConfigTest, ParsesMinimalEstimate) {
  const auto cfg = parse_config(kEstimate);
  EXPECT_EQ(cfg.kind, ExperimentKind::Estimate);
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.dataset.n, 3u);
  EXPECT_EQ(cfg.model.mixture.weights.size(), 3u);
  EXPECT_EQ(cfg.fast.method, SolverMethod::RK4);
}

TEST(ConfigTest, ErrorsNameTheField) {
  EXPECT_NE(error_of(R"({"version": 1, "experiment": "estimate", "bogus": 1,
      "model": {"type": "gmm", "preset": "two_component"}})").find("bogus: unknown field"), std::string::npos);
  EXPECT_NE(error_of(R"({"version": 1, "experiment": "estimate",
      "model": {"type": "gmm", "preset": "two_component", "colour": 2}})").find("model.colour"), std::string::npos);
  EXPECT_NE(error_of(R"({"version": 1, "experiment": "attack",
      "model": {"type": "gmm", "preset": "two_component"},
      "attacks": [{"kind": "unrestricted"}, {"kind": "sideways"}]})").find("attacks[1].kind"), std::string::npos);
  EXPECT_NE(error_of(R"({"version": 1, "experiment": "estimate",
      "model": {"type": "gmm", "preset": "two_component"},
      "solvers": {"fast": {"method": "leapfrog"}}})").find("solvers.fast.method"), std::string::npos);
  EXPECT_NE(error_of(R"({"version": 1, "experiment": "estimate", "seed": -4,
      "model": {"type": "gmm", "preset": "two_component"}})").find("seed"), std::string::npos);
  EXPECT_NE(error_of(R"({"version": 2, "experiment": "estimate",
      "model": {"type": "gmm", "preset": "two_component"}})").find("version"), std::string::npos);
}

TEST(ConfigTest, SyntaxErrorsCarryPosition) {
  const std::string msg = error_of("{\n  \"version\": 1,\n  \"experiment\": \n}");
  EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(ConfigTest, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/pflow.json"), ConfigError);
}

TEST(CsvTest, EscapesPerRfc4180) {
  EXPECT_EQ(CsvWriter::escape("plain"), "plain");
  EXPECT_EQ(CsvWriter::escape("a,b"), "\"a,b\"");
  EXPECT_EQ(CsvWriter::escape("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(CsvWriter::escape("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(CsvWriter::escape("cr\r"), "\"cr\r\"");
}

TEST(CsvTest, RoundTripsAndUsesCrlf) {
  const fs::path dir = scratch("csv");
  fs::create_directories(dir);
  const fs::path file = dir / "t.csv";
  const std::vector<std::vector<std::string>> rows{{"a", "b,c", ""}, {"x\"y", "line\nbreak", "3"}};
  {
    CsvWriter w(file);
    for (const auto& r : rows) w.row(r);
  }
  const std::string bytes = slurp(file);
  EXPECT_EQ(bytes.substr(0, 12), "a,\"b,c\",\r\n\"x");
  EXPECT_EQ(read_csv(file), rows);
  fs::remove_all(dir);
}

TEST(CsvTest, DoublesRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    EXPECT_EQ(std::stod(fmt(v)), v);
  }
  EXPECT_EQ(fmt(std::optional<double>{}), "");
  EXPECT_EQ(fmt(std::numeric_limits<double>::quiet_NaN()), "nan");
  EXPECT_EQ(fmt(-std::numeric_limits<double>::infinity()), "-inf");
}

TEST(StatsTest, PercentileInterpolates) {
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 100), 4.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({10, 20}, 95), 19.5);
}

TEST(StatsTest, SpearmanMatchesNaiveRanks) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(30), b(30);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = std::round(3 * n(rng));  // ties
      b[i] = 0.5 * a[i] + n(rng);
    }
    const auto r = spearman(a, b);
    EXPECT_NEAR(r.rho, naive_spearman(a, b), 1e-12);
    EXPECT_EQ(r.n, 30u);
  }
}

TEST(StatsTest, SpearmanPValue) {
  // Distinct ranks with sum d^2 = 104: rho = 1 - 6*104/(12*143) = 7/11.
  // t = rho*sqrt(10/(1-rho^2)) = 2.6087 with 10 dof, two-sided p = 0.026097
  // (scipy.stats.spearmanr).
  std::vector<double> a(12);
  for (std::size_t i = 0; i < 12; ++i) a[i] = static_cast<double>(i);
  const std::vector<double> b{2, 5, 0, 3, 1, 10, 8, 4, 11, 7, 6, 9};
  const auto r = spearman(a, b);
  EXPECT_NEAR(r.rho, 7.0 / 11.0, 1e-12);
  EXPECT_NEAR(r.p_value, 0.026096891, 1e-7);
  const auto perfect = spearman(a, a);
  EXPECT_DOUBLE_EQ(perfect.rho, 1.0);
  EXPECT_DOUBLE_EQ(perfect.p_value, 0.0);
}

TEST(StatsTest, Inversions) {
  EXPECT_EQ(inversions_nondecreasing(std::vector<double>{1, 2, 2, 3}), 0u);
  EXPECT_EQ(inversions_nondecreasing(std::vector<double>{1, 3, 2, 4, 0}), 2u);
  EXPECT_EQ(inversions_nonincreasing(std::vector<double>{4, 3, 3, 5}), 1u);
}

TEST(ExperimentsTest, JobSeedsAreDistinct) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 200; ++s) seeds.push_back(job_seed(7, s));
  std::sort(seeds.begin(), seeds.end());
  EXPECT_EQ(std::adjacent_find(seeds.begin(), seeds.end()), seeds.end());
  EXPECT_EQ(job_seed(7, 3), job_seed(7, 3));
  EXPECT_NE(job_seed(7, 3), job_seed(8, 3));
}

TEST(ExperimentsTest, OutputDirPrecedence) {
  auto cfg = parse_config(kEstimate);
  cfg.output_dir = "from_config";
  RunOptions opts;
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(resolve_output_dir(cfg, opts).filename(), "from_config");
  ::setenv(kOutputDirEnv, "/tmp/from_env", 1);
  EXPECT_EQ(resolve_output_dir(cfg, opts), fs::path("/tmp/from_env"));
  opts.output_dir = "/tmp/from_flag";
  EXPECT_EQ(resolve_output_dir(cfg, opts), fs::path("/tmp/from_flag"));
  ::unsetenv(kOutputDirEnv);
}

TEST(ExperimentsTest, EmptyDatasetIsConfigError) {
  auto cfg = parse_config(kEstimate);
  cfg.dataset.n = 0;
  RunOptions opts;
  opts.output_dir = scratch("empty");
  try {
    run_experiment(cfg, opts);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset: no samples"), std::string::npos);
  }
}

TEST(ExperimentsTest, EstimateIsByteDeterministic) {
  const auto cfg = parse_config(kEstimate);
  RunOptions a, b;
  a.output_dir = scratch("det_a");
  b.output_dir = scratch("det_b");
  b.workers = 3;
  const auto ra = run_experiment(cfg, a);
  const auto rb = run_experiment(cfg, b);
  EXPECT_EQ(ra.exit_code, 0);
  EXPECT_EQ(rb.exit_code, 0);
  const std::string csv = slurp(*a.output_dir / "estimates.csv");
  EXPECT_FALSE(csv.empty());
  EXPECT_EQ(csv, slurp(*b.output_dir / "estimates.csv"));
  // Header plus 3 samples x 2 regimes x 2 directions.
  EXPECT_EQ(read_csv(*a.output_dir / "estimates.csv").size(), 13u);
  fs::remove_all(*a.output_dir);
  fs::remove_all(*b.output_dir);
}
