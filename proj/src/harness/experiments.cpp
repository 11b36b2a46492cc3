#include "pflow/harness/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <thread>

#include "json.hpp"
#include "pflow/complexity.hpp"
#include "pflow/harness/report.hpp"

namespace pflow::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void say(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  std::uint64_t seed;
  std::size_t workers;
  bool smoke;
  std::ostream* log;
};

SolverConfig accurate_for(const ExperimentConfig& cfg, std::size_t dim) {
  SolverConfig s = cfg.accurate.value_or(SolverConfig::accurate(dim));
  s.direction = Direction::Forward;
  return s;
}

struct Scored {
  LikelihoodEstimate fast;
  LikelihoodEstimate accurate;
};

Scored score_sample(const ScoreModel& model, std::span<const double> x, SolverConfig fast, SolverConfig acc,
                    std::uint64_t seed) {
  fast.seed = job_seed(seed, 1);
  fast.direction = Direction::Forward;
  acc.seed = job_seed(seed, 2);
  acc.direction = Direction::Forward;
  return {log_likelihood_forward(x, fast, model), log_likelihood_forward(x, acc, model)};
}

RunRecord record_of(const std::string& group, std::size_t id, const Scored& s, const std::optional<ImageShape>& shape,
                    std::span<const double> x, std::uint64_t seed) {
  RunRecord r;
  r.group = group;
  r.sample_id = id;
  r.seed = seed;
  r.logp_fast = s.fast.total;
  r.logp = s.accurate.total;
  r.integral = s.accurate.integral;
  r.prior = s.accurate.prior;
  r.per_dim = s.accurate.per_dim;
  if (shape) {
    r.complexity = complexity_png(Sample{std::vector<double>(x.begin(), x.end()), *shape});
    r.hf_energy = hf_energy(x, *shape);
  }
  return r;
}

const std::vector<std::string> kRecordHeader{"group",   "sample_id", "lambda",     "epsilon",   "seed",
                                             "logp_fast", "logp",    "integral",   "prior",     "per_dim",
                                             "complexity", "hf_energy", "steps",   "converged", "aborted"};

std::vector<std::string> record_row(const RunRecord& r) {
  return {r.group,
          std::to_string(r.sample_id),
          fmt(r.lambda),
          fmt(r.epsilon),
          std::to_string(r.seed),
          fmt(r.logp_fast),
          fmt(r.logp),
          fmt(r.integral),
          fmt(r.prior),
          fmt(r.per_dim),
          fmt(r.complexity),
          fmt(r.hf_energy),
          std::to_string(r.steps),
          r.converged ? "1" : "0",
          r.aborted ? "1" : "0"};
}

void write_records(const fs::path& path, const std::vector<RunRecord>& rows) {
  CsvWriter csv(path);
  csv.row(kRecordHeader);
  for (const auto& r : rows) csv.row(record_row(r));
}

void write_timings(const fs::path& path, const std::vector<RunRecord>& rows) {
  json t = json::array();
  for (const auto& r : rows) {
    t.push_back({{"group", r.group}, {"sample_id", r.sample_id}, {"lambda", r.lambda}, {"wall_time_s", r.wall_time}});
  }
  write_text(path, t.dump(2) + "\n");
}

std::string finish(const Context& ctx, json summary) {
  summary["experiment"] = to_string(ctx.cfg.kind);
  summary["seed"] = ctx.seed;
  summary["smoke"] = ctx.smoke;
  summary["schema_version"] = kSchemaVersion;
  const std::string text = summary.dump(2) + "\n";
  write_text(ctx.out / "summary.json", text);
  return text;
}

std::string png_name(const std::string& group, double lambda, std::size_t id, bool with_lambda) {
  std::string name = group;
  if (with_lambda) name += "_lambda" + fmt(lambda);
  return name + "_" + std::to_string(id) + ".png";
}

// --- estimate ----------------------------------------------------------------

RunOutcome run_estimate(const Context& ctx) {
  const auto model = build_model(ctx.cfg.model, ctx.log);
  const auto data = build_dataset(ctx.cfg.dataset, *model, ctx.cfg.model);
  const std::size_t dim = model->dim();
  const bool analytic = ctx.cfg.model.type == ModelSpec::Type::Mixture;
  const std::vector<std::pair<std::string, SolverConfig>> regimes{{"fast", ctx.cfg.fast},
                                                                  {"accurate", accurate_for(ctx.cfg, dim)}};
  struct Row {
    std::string regime, direction;
    LikelihoodEstimate est;
    std::optional<double> truth, abs_error, roundtrip, gap;
  };
  std::vector<std::vector<Row>> rows(data.size());
  parallel_for(data.size(), ctx.workers, [&](std::size_t i) {
    const auto& x0 = data[i].values;
    const std::uint64_t s = job_seed(ctx.seed, i);
    std::optional<double> truth;
    if (analytic) truth = gmm_logp0(x0, ctx.cfg.model.mixture);
    for (const auto& [name, base] : regimes) {
      SolverConfig fw = base;
      fw.seed = s;
      fw.direction = Direction::Forward;
      const auto fwd = log_likelihood_forward(x0, fw, *model);
      const auto x1 = solve(x0, fw, *model).x;
      SolverConfig rv = fw;
      rv.direction = Direction::Reverse;
      const auto rev = log_likelihood_reverse(x1, rv, *model);
      double roundtrip = 0.0;
      for (std::size_t k = 0; k < dim; ++k) roundtrip = std::max(roundtrip, std::abs(rev.decoded[k] - x0[k]));
      Row f{name, "forward", fwd, truth, std::nullopt, std::nullopt, std::nullopt};
      if (truth) f.abs_error = std::abs(fwd.total - *truth);
      Row r{name, "reverse", rev.estimate, truth, std::nullopt, roundtrip, std::abs(fwd.integral - rev.estimate.integral)};
      if (truth) r.abs_error = std::abs(rev.estimate.total - *truth);
      rows[i].push_back(std::move(f));
      rows[i].push_back(std::move(r));
    }
  });

  CsvWriter csv(ctx.out / "estimates.csv");
  csv.row({"sample_id", "regime", "direction", "integral", "prior", "total", "per_dim", "ground_truth", "abs_error",
           "roundtrip_error", "consistency_gap"});
  std::vector<std::string> failures;
  double max_abs = 0.0, max_round = 0.0, max_gap = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& r : rows[i]) {
      csv.row({std::to_string(i), r.regime, r.direction, fmt(r.est.integral), fmt(r.est.prior), fmt(r.est.total),
               fmt(r.est.per_dim), fmt(r.truth), fmt(r.abs_error), fmt(r.roundtrip), fmt(r.gap)});
      const std::string where = "sample " + std::to_string(i) + " " + r.regime + " " + r.direction;
      if (!std::isfinite(r.est.total) || r.est.total != r.est.integral + r.est.prior) {
        failures.push_back(where + ": total != integral + prior");
      }
      const bool exact_accurate = r.regime == "accurate" && regimes[1].second.divergence == DivergenceMode::Exact;
      if (!exact_accurate) continue;
      if (r.direction == "forward" && r.abs_error) {
        max_abs = std::max(max_abs, *r.abs_error);
        if (*r.abs_error >= 1e-3) failures.push_back(where + ": |log p - ground truth| >= 1e-3");
      }
      if (r.roundtrip) {
        max_round = std::max(max_round, *r.roundtrip);
        if (*r.roundtrip >= 1e-4) failures.push_back(where + ": round trip error >= 1e-4");
      }
      if (r.gap) {
        max_gap = std::max(max_gap, *r.gap);
        if (*r.gap >= 1e-3) failures.push_back(where + ": |I_fw - I_rev| >= 1e-3");
      }
    }
  }
  json summary;
  summary["samples"] = data.size();
  summary["max_abs_error_accurate"] = max_abs;
  summary["max_roundtrip_error_accurate"] = max_round;
  summary["max_consistency_gap_accurate"] = max_gap;
  summary["failures"] = failures;
  RunOutcome out;
  out.exit_code = failures.empty() ? 0 : 1;
  out.summary_json = finish(ctx, summary);
  return out;
}

// --- attack campaigns ----------------------------------------------------------

struct Job {
  std::size_t attack = 0;
  std::size_t lambda_index = 0;
  std::size_t sample = 0;
};

void append_blackbox(const Context& ctx, const ScoreModel& model, std::vector<RunRecord>& rows,
                     std::vector<std::pair<std::string, QuantizedImage>>* images) {
  const auto shape = *model.image_shape();
  const BlackBoxSpec spec = ctx.cfg.blackbox.value_or(BlackBoxSpec{});
  struct Item {
    BlackBoxKind kind;
    std::size_t level;
    Sample sample;
  };
  std::vector<Item> items;
  for (auto kind : {BlackBoxKind::Monochrome, BlackBoxKind::FilteredNoise, BlackBoxKind::UniformNoise}) {
    const auto suite = blackbox_suite(kind, BlackBoxParams{shape, spec.levels, spec.kernel_size}, ctx.seed);
    for (std::size_t l = 0; l < suite.size(); ++l) items.push_back({kind, l, suite[l]});
  }
  std::vector<RunRecord> out(items.size());
  const SolverConfig acc = accurate_for(ctx.cfg, model.dim());
  parallel_for(items.size(), ctx.workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t s = job_seed(ctx.seed, 0x1000 + i);
    const auto sc = score_sample(model, items[i].sample.values, ctx.cfg.fast, acc, s);
    out[i] = record_of(std::string("blackbox_") + to_string(items[i].kind), items[i].level, sc, shape,
                       items[i].sample.values, s);
    out[i].wall_time = seconds_since(t0);
  });
  if (images) {
    for (const auto& it : items) {
      images->emplace_back(std::string("blackbox_") + to_string(it.kind) + "_" + std::to_string(it.level),
                           quantize(it.sample.values, shape));
    }
  }
  rows.insert(rows.end(), out.begin(), out.end());
}

RunOutcome run_attack_campaign(const Context& ctx) {
  const auto model = build_model(ctx.cfg.model, ctx.log);
  const auto data = build_dataset(ctx.cfg.dataset, *model, ctx.cfg.model);
  const auto shape = model->image_shape();
  const std::size_t dim = model->dim();
  const SolverConfig acc = accurate_for(ctx.cfg, dim);
  fs::create_directories(ctx.out / "samples");

  for (const auto& a : ctx.cfg.attacks) {
    if (a.kind == AttackKind::HighComplexity && !shape) {
      throw ConfigError("attacks: high_complexity needs an image model");
    }
  }

  // Benign set.
  std::vector<RunRecord> benign(data.size());
  parallel_for(data.size(), ctx.workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t s = job_seed(ctx.seed, 0x2000 + i);
    benign[i] = record_of("benign", i, score_sample(*model, data[i].values, ctx.cfg.fast, acc, s), shape,
                          data[i].values, s);
    benign[i].wall_time = seconds_since(t0);
  });
  say(ctx.log, "scored " + std::to_string(data.size()) + " benign samples");

  std::vector<Job> jobs;
  for (std::size_t a = 0; a < ctx.cfg.attacks.size(); ++a) {
    const auto& spec = ctx.cfg.attacks[a];
    const std::size_t n = ctx.smoke ? ctx.cfg.smoke_samples : spec.samples.value_or(ctx.cfg.samples_per_attack);
    for (std::size_t l = 0; l < spec.lambdas.size(); ++l) {
      for (std::size_t s = 0; s < n; ++s) jobs.push_back({a, l, s});
    }
  }
  std::vector<AttackResult> results(jobs.size());
  std::vector<RunRecord> attack_rows(jobs.size());
  std::atomic<std::size_t> done{0};
  std::mutex log_mu;
  parallel_for(jobs.size(), ctx.workers, [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& spec = ctx.cfg.attacks[job.attack];
    const auto t0 = std::chrono::steady_clock::now();
    AttackConfig c = AttackConfig::defaults(spec.kind);
    c.epsilon = spec.epsilon;
    c.lambda = spec.lambdas[job.lambda_index];
    c.lr = spec.lr;
    c.max_steps = ctx.smoke ? ctx.cfg.smoke_steps : spec.steps.value_or(ctx.cfg.steps);
    // Paired across lambdas: the same sample index gets the same seed.
    c.seed = job_seed(ctx.seed, (job.attack << 32) | job.sample);
    c.solver = ctx.cfg.fast;
    c.eval_solver = acc;
    std::span<const double> x_benign;
    if (needs_benign(spec.kind)) x_benign = data[job.sample % data.size()].values;
    results[j] = run_attack(*model, c, x_benign);
    const auto& res = results[j];
    RunRecord r;
    r.group = to_string(spec.kind);
    r.sample_id = job.sample;
    r.lambda = c.lambda;
    r.epsilon = is_bounded(spec.kind) ? c.epsilon : 0.0;
    r.seed = c.seed;
    r.logp_fast = res.fast.total;
    r.logp = res.accurate.total;
    r.integral = res.accurate.integral;
    r.prior = res.accurate.prior;
    r.per_dim = res.accurate.per_dim;
    r.complexity = res.complexity;
    r.hf_energy = res.hf_energy;
    r.steps = res.steps;
    r.converged = res.converged;
    r.aborted = res.aborted;
    r.wall_time = seconds_since(t0);
    attack_rows[j] = r;
    const std::size_t k = ++done;
    if (ctx.log) {
      std::lock_guard lock(log_mu);
      *ctx.log << "[" << k << "/" << jobs.size() << "] " << r.group << " sample " << r.sample_id << " lambda "
               << fmt(r.lambda) << ": log p " << fmt(r.logp) << std::endl;
    }
  });

  std::vector<std::pair<std::string, QuantizedImage>> bb_images;
  std::vector<RunRecord> bb_rows;
  if (ctx.cfg.blackbox && shape) append_blackbox(ctx, *model, bb_rows, &bb_images);

  // Stable ordering: benign, attacks in config order (lambda, sample), black-box suites.
  std::vector<std::size_t> order(jobs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ja = jobs[a];
    const auto& jb = jobs[b];
    return std::tie(ja.attack, ja.lambda_index, ja.sample) < std::tie(jb.attack, jb.lambda_index, jb.sample);
  });
  std::vector<RunRecord> all = benign;
  for (std::size_t j : order) all.push_back(attack_rows[j]);
  all.insert(all.end(), bb_rows.begin(), bb_rows.end());
  write_records(ctx.out / "records.csv", all);
  write_timings(ctx.out / "timings.json", all);

  {
    CsvWriter traj(ctx.out / "trajectories.csv");
    traj.row({"group", "lambda", "sample_id", "step", "objective", "integral", "prior"});
    for (std::size_t j : order) {
      const auto& res = results[j];
      for (std::size_t k = 0; k < res.objective.size(); ++k) {
        traj.row({attack_rows[j].group, fmt(attack_rows[j].lambda), std::to_string(attack_rows[j].sample_id),
                  std::to_string(k), fmt(res.objective[k]), fmt(res.integral_trace[k]), fmt(res.prior_trace[k])});
      }
    }
  }

  // Final samples.
  if (shape) {
    for (std::size_t j : order) {
      const auto& spec = ctx.cfg.attacks[jobs[j].attack];
      const auto bytes = encode_png(quantize(results[j].x, *shape));
      write_bytes(ctx.out / "samples" /
                      png_name(attack_rows[j].group, attack_rows[j].lambda, attack_rows[j].sample_id,
                               spec.lambdas.size() > 1 || spec.kind == AttackKind::HighComplexity),
                  bytes);
    }
    for (const auto& [name, img] : bb_images) write_bytes(ctx.out / "samples" / (name + ".png"), encode_png(img));
  } else {
    CsvWriter finals(ctx.out / "finals.csv");
    std::vector<std::string> head{"group", "lambda", "sample_id"};
    for (std::size_t d = 0; d < dim; ++d) head.push_back("x" + std::to_string(d));
    for (std::size_t d = 0; d < dim; ++d) head.push_back("center" + std::to_string(d));
    finals.row(head);
    for (std::size_t j : order) {
      std::vector<std::string> row{attack_rows[j].group, fmt(attack_rows[j].lambda),
                                   std::to_string(attack_rows[j].sample_id)};
      for (double v : results[j].x) row.push_back(fmt(v));
      for (double v : results[j].center) row.push_back(fmt(v));
      finals.row(row);
    }
  }

  // Summary statistics over the pooled outcomes.
  json summary;
  std::vector<double> benign_logp, benign_c;
  for (const auto& r : benign) {
    benign_logp.push_back(r.logp);
    if (r.complexity) benign_c.push_back(*r.complexity);
  }
  const double p95_logp = percentile(benign_logp, 95.0);
  summary["benign_count"] = benign.size();
  summary["attack_runs"] = jobs.size();
  summary["blackbox_count"] = bb_rows.size();
  summary["benign_p95_logp"] = p95_logp;
  summary["benign_mean_logp"] = [&] {
    double s = 0.0;
    for (double v : benign_logp) s += v;
    return s / static_cast<double>(benign_logp.size());
  }();

  double transfer = 0.0;
  std::size_t aborted = 0, converged = 0;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    transfer = std::max(transfer, std::abs(results[j].fast.per_dim - results[j].accurate.per_dim));
    aborted += results[j].aborted;
    converged += results[j].converged;
  }
  summary["transfer_max_gap_per_dim"] = transfer;
  summary["aborted_runs"] = aborted;
  summary["converged_runs"] = converged;

  if (shape) {
    const double p95_c = percentile(benign_c, 95.0);
    summary["benign_p95_complexity"] = p95_c;
    json joint = json::array();
    std::vector<double> lp, cc;
    for (const auto& r : all) {
      if (!std::isfinite(r.logp) || !r.complexity) continue;
      lp.push_back(r.logp);
      cc.push_back(*r.complexity);
      if (r.logp > p95_logp && *r.complexity > p95_c) {
        joint.push_back({{"group", r.group}, {"sample_id", r.sample_id}, {"lambda", r.lambda}});
      }
    }
    summary["joint_region"] = joint;
    summary["joint_region_empty"] = joint.empty();
    const auto sp = spearman(lp, cc);
    summary["spearman"] = {{"rho", sp.rho}, {"p_value", sp.p_value}, {"n", sp.n}};

    // Lambda sweeps: per sample, trend of hf energy and log p across lambdas.
    json sweeps = json::array();
    for (std::size_t a = 0; a < ctx.cfg.attacks.size(); ++a) {
      const auto& spec = ctx.cfg.attacks[a];
      if (spec.kind != AttackKind::HighComplexity || spec.lambdas.size() < 2) continue;
      std::vector<std::size_t> lam_order(spec.lambdas.size());
      for (std::size_t i = 0; i < lam_order.size(); ++i) lam_order[i] = i;
      std::stable_sort(lam_order.begin(), lam_order.end(),
                       [&](std::size_t x, std::size_t y) { return spec.lambdas[x] < spec.lambdas[y]; });
      std::map<std::size_t, std::map<std::size_t, std::size_t>> by_sample;  // sample -> lambda index -> job
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (jobs[j].attack == a) by_sample[jobs[j].sample][jobs[j].lambda_index] = j;
      }
      for (const auto& [sample, lam_jobs] : by_sample) {
        std::vector<double> lams, hf, lpv;
        for (std::size_t li : lam_order) {
          const std::size_t j = lam_jobs.at(li);
          lams.push_back(spec.lambdas[li]);
          hf.push_back(*results[j].hf_energy);
          lpv.push_back(results[j].accurate.total);
        }
        const std::size_t hi = inversions_nondecreasing(hf), li = inversions_nonincreasing(lpv);
        sweeps.push_back({{"sample_id", sample},
                          {"lambdas", lams},
                          {"hf_energy", hf},
                          {"logp", lpv},
                          {"hf_inversions", hi},
                          {"logp_inversions", li},
                          {"monotone", hi <= 1 && li <= 1}});
      }
    }
    summary["lambda_sweeps"] = sweeps;

    // Scatter of C against log p per group, with the log p CDF.
    std::vector<Series> series;
    std::map<std::string, std::size_t> index;
    for (const auto& r : all) {
      if (!r.complexity || !std::isfinite(r.logp)) continue;
      const std::string key = r.group.rfind("blackbox_", 0) == 0 ? "blackbox" : r.group;
      if (!index.count(key)) {
        index[key] = series.size();
        series.push_back({key, {}, {}});
      }
      series[index[key]].x.push_back(r.logp);
      series[index[key]].y.push_back(*r.complexity);
    }
    write_text(ctx.out / "scatter.svg",
               svg_scatter_with_cdf(series, {"Complexity vs. log-likelihood", "log p (accurate)", "C (PNG bytes / D)"},
                                    p95_logp, p95_c));
  }

  // Mean objective per dimension over runs of each (attack, lambda).
  std::vector<Series> lines;
  for (std::size_t a = 0; a < ctx.cfg.attacks.size(); ++a) {
    const auto& spec = ctx.cfg.attacks[a];
    for (std::size_t l = 0; l < spec.lambdas.size(); ++l) {
      std::vector<double> sum;
      std::vector<std::size_t> cnt;
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (jobs[j].attack != a || jobs[j].lambda_index != l) continue;
        const auto& obj = results[j].objective;
        if (sum.size() < obj.size()) sum.resize(obj.size(), 0.0), cnt.resize(obj.size(), 0);
        for (std::size_t k = 0; k < obj.size(); ++k) sum[k] += obj[k] / static_cast<double>(dim), ++cnt[k];
      }
      Series s{std::string(to_string(spec.kind)) + (spec.lambdas.size() > 1 ? " lambda=" + fmt(spec.lambdas[l]) : ""),
               {}, {}};
      for (std::size_t k = 0; k < sum.size(); ++k) {
        s.x.push_back(static_cast<double>(k));
        s.y.push_back(sum[k] / static_cast<double>(cnt[k]));
      }
      lines.push_back(std::move(s));
    }
  }
  write_text(ctx.out / "convergence.svg",
             svg_lines(lines, {"Attack convergence", "step", "objective per dimension (mean over runs)"}));

  RunOutcome out;
  out.summary_json = finish(ctx, summary);
  return out;
}

// --- solver comparison -----------------------------------------------------------

RunOutcome run_solver_compare(const Context& ctx) {
  const auto model = build_model(ctx.cfg.model, ctx.log);
  const std::size_t dim = model->dim();
  const SolverConfig acc = accurate_for(ctx.cfg, dim);
  const auto& regimes = ctx.cfg.regimes;
  RunOutcome out;
  for (std::size_t r = 1; r < regimes.size(); ++r) {
    const std::size_t a = regimes[0].solver.evaluations(), b = regimes[r].solver.evaluations();
    if (a != b) {
      out.warnings.push_back("regimes '" + regimes[0].name + "' and '" + regimes[r].name +
                             "' differ in cost: " + std::to_string(a) + " vs " + std::to_string(b) +
                             " function evaluations per solve");
    }
  }
  for (const auto& w : out.warnings) say(ctx.log, "warning: " + w);

  const std::size_t seeds = ctx.cfg.compare_seeds;
  const std::size_t steps = ctx.smoke ? ctx.cfg.smoke_steps : ctx.cfg.steps;
  const AttackSpec* spec = nullptr;
  for (const auto& a : ctx.cfg.attacks) {
    if (a.kind == AttackKind::PriorOnly) spec = &a;
  }
  std::vector<AttackResult> results(seeds * regimes.size());
  parallel_for(results.size(), ctx.workers, [&](std::size_t j) {
    const std::size_t s = j / regimes.size(), r = j % regimes.size();
    AttackConfig c = AttackConfig::defaults(AttackKind::PriorOnly);
    if (spec) {
      c.epsilon = spec->epsilon;
      c.lr = spec->lr;
    }
    c.max_steps = (spec && spec->steps && !ctx.smoke) ? *spec->steps : steps;
    c.seed = job_seed(ctx.seed, s);
    c.solver = regimes[r].solver;
    c.eval_solver = acc;
    results[j] = run_attack(*model, c);
  });

  CsvWriter csv(ctx.out / "compare.csv");
  csv.row({"seed_index", "regime", "method", "step_size", "evaluations", "logp_fast", "logp", "gap", "steps"});
  CsvWriter traj(ctx.out / "trajectories.csv");
  traj.row({"regime", "seed_index", "step", "objective", "integral", "prior", "fast_total"});
  json per_seed = json::array();
  std::vector<double> mean_gap(regimes.size(), 0.0);
  std::size_t first_wins = 0;
  std::vector<Series> lines;
  for (std::size_t r = 0; r < regimes.size(); ++r) lines.push_back({regimes[r].name, {}, {}});
  std::vector<std::vector<double>> line_sum(regimes.size());
  for (std::size_t s = 0; s < seeds; ++s) {
    json gaps = json::object();
    std::vector<double> g(regimes.size());
    for (std::size_t r = 0; r < regimes.size(); ++r) {
      const auto& res = results[s * regimes.size() + r];
      g[r] = std::abs(res.fast.total - res.accurate.total);
      mean_gap[r] += g[r] / static_cast<double>(seeds);
      const auto& sv = regimes[r].solver;
      csv.row({std::to_string(s), regimes[r].name, sv.method == SolverMethod::RK4 ? "rk4" : "euler", fmt(sv.step_size),
               std::to_string(sv.evaluations()), fmt(res.fast.total), fmt(res.accurate.total), fmt(g[r]),
               std::to_string(res.steps)});
      auto& sum = line_sum[r];
      if (sum.size() < res.objective.size()) sum.resize(res.objective.size(), 0.0);
      for (std::size_t k = 0; k < res.objective.size(); ++k) {
        const double total = res.integral_trace[k] + res.prior_trace[k];
        traj.row({regimes[r].name, std::to_string(s), std::to_string(k), fmt(res.objective[k]),
                  fmt(res.integral_trace[k]), fmt(res.prior_trace[k]), fmt(total)});
        sum[k] += total / static_cast<double>(seeds);
      }
      gaps[regimes[r].name] = g[r];
    }
    first_wins += g[0] <= g[1];
    per_seed.push_back(gaps);
  }
  for (std::size_t r = 0; r < regimes.size(); ++r) {
    for (std::size_t k = 0; k < line_sum[r].size(); ++k) {
      lines[r].x.push_back(static_cast<double>(k));
      lines[r].y.push_back(line_sum[r][k]);
    }
  }
  write_text(ctx.out / "convergence.svg",
             svg_lines(lines, {"Prior-only attack under each solver", "step", "fast log p (mean over seeds)"}));

  json summary;
  json mg = json::object();
  for (std::size_t r = 0; r < regimes.size(); ++r) mg[regimes[r].name] = mean_gap[r];
  summary["mean_gap"] = mg;
  summary["per_seed_gap"] = per_seed;
  summary["seeds"] = seeds;
  summary["first_regime_gap_le_second"] = first_wins;
  summary["warnings"] = out.warnings;
  out.summary_json = finish(ctx, summary);
  return out;
}

// --- black-box probes -------------------------------------------------------------

RunOutcome run_blackbox(const Context& ctx) {
  const auto model = build_model(ctx.cfg.model, ctx.log);
  const auto shape = model->image_shape();
  if (!shape) throw ConfigError("model: image model required");
  const auto data = build_dataset(ctx.cfg.dataset, *model, ctx.cfg.model);
  const BlackBoxSpec spec = ctx.cfg.blackbox.value_or(BlackBoxSpec{});
  const SolverConfig acc = accurate_for(ctx.cfg, model->dim());

  std::vector<RunRecord> benign(data.size());
  parallel_for(data.size(), ctx.workers, [&](std::size_t i) {
    const std::uint64_t s = job_seed(ctx.seed, 0x2000 + i);
    benign[i] = record_of("benign", i, score_sample(*model, data[i].values, ctx.cfg.fast, acc, s), shape,
                          data[i].values, s);
  });
  std::vector<RunRecord> rows;
  std::vector<std::pair<std::string, QuantizedImage>> images;
  append_blackbox(ctx, *model, rows, &images);

  const std::vector<BlackBoxKind> kinds{BlackBoxKind::Monochrome, BlackBoxKind::FilteredNoise,
                                        BlackBoxKind::UniformNoise};
  std::map<BlackBoxKind, std::vector<double>> ref_c;
  if (spec.reference_shape) {
    for (auto k : kinds) {
      for (const auto& s : blackbox_suite(k, BlackBoxParams{*spec.reference_shape, spec.levels, spec.kernel_size},
                                          ctx.seed)) {
        ref_c[k].push_back(complexity_png(s));
      }
    }
  }

  CsvWriter csv(ctx.out / "blackbox.csv");
  csv.row({"suite", "level", "magnitude", "logp_fast", "logp", "integral", "prior", "per_dim", "complexity",
           "complexity_reference"});
  json suites = json::object();
  std::vector<double> lp, cc;
  double benign_mean = 0.0;
  for (const auto& b : benign) benign_mean += b.logp / static_cast<double>(benign.size());
  std::size_t idx = 0;
  std::vector<std::vector<QuantizedImage>> grid;
  for (auto k : kinds) {
    json js;
    std::vector<double> logps, cs, refs;
    grid.emplace_back();
    for (std::size_t l = 0; l < spec.levels; ++l, ++idx) {
      const auto& r = rows[idx];
      const double n = static_cast<double>(spec.levels);
      const double magnitude = k == BlackBoxKind::Monochrome
                                   ? (spec.levels == 1 ? -1.0 : -1.0 + 2.0 * static_cast<double>(l) / (n - 1.0))
                                   : static_cast<double>(l + 1) / n;
      std::optional<double> ref;
      if (spec.reference_shape) ref = ref_c[k][l];
      csv.row({to_string(k), std::to_string(l), fmt(magnitude), fmt(r.logp_fast), fmt(r.logp), fmt(r.integral),
               fmt(r.prior), fmt(r.per_dim), fmt(r.complexity), fmt(ref)});
      logps.push_back(r.logp);
      cs.push_back(*r.complexity);
      if (ref) refs.push_back(*ref);
      lp.push_back(r.logp);
      cc.push_back(*r.complexity);
      grid.back().push_back(images[idx].second);
    }
    js["logp"] = logps;
    js["complexity"] = cs;
    if (!refs.empty()) js["complexity_reference"] = refs;
    js["logp_inversions_nonincreasing"] = inversions_nonincreasing(logps);
    suites[to_string(k)] = js;
  }
  {
    CsvWriter bcsv(ctx.out / "benign.csv");
    bcsv.row(kRecordHeader);
    for (const auto& r : benign) bcsv.row(record_row(r));
  }
  write_bytes(ctx.out / "blackbox_grid.png", encode_png(tile_images(grid, 1)));

  json summary;
  summary["suites"] = suites;
  summary["benign_mean_logp"] = benign_mean;
  const auto& mono = suites["monochrome"]["logp"];
  bool above = true;
  for (const auto& v : mono) above = above && v.get<double>() > benign_mean;
  summary["monochrome_above_benign_mean"] = above;
  const auto sp = spearman(lp, cc);
  summary["spearman"] = {{"rho", sp.rho}, {"p_value", sp.p_value}, {"n", sp.n}};
  if (spec.reference_shape) {
    const auto& rs = *spec.reference_shape;
    summary["reference_shape"] = {rs.channels, rs.height, rs.width};
    summary["monochrome_max_complexity_reference"] =
        *std::max_element(ref_c[BlackBoxKind::Monochrome].begin(), ref_c[BlackBoxKind::Monochrome].end());
    summary["uniform_noise_complexity_reference_at_max"] = ref_c[BlackBoxKind::UniformNoise].back();
  }
  RunOutcome out;
  out.summary_json = finish(ctx, summary);
  return out;
}

// --- training -----------------------------------------------------------------------

double heldout_score_mse(const ScoreModel& net, const GaussianMixture& g, std::uint64_t seed) {
  const GaussianMixtureScore truth(g, SubVpSde{});
  const auto xs = sample_mixture(g, 256, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> ut(kDefaultT0, 1.0);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x0 : xs) {
    const double t = ut(rng);
    const auto km = net.sde().kernel_moments(t);
    std::vector<double> x(x0.size());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = km.mean_scale * x0[i] + km.std * normal(rng);
    const auto a = net.score(x, t);
    const auto b = truth.score(x, t);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = km.std * (a[i] - b[i]);
      sum += d * d;
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

RunOutcome run_train(const Context& ctx) {
  const GaussianMixture* mixture =
      ctx.cfg.model.type == ModelSpec::Type::Mixture && !ctx.cfg.model.mixture.weights.empty() ? &ctx.cfg.model.mixture
                                                                                             : nullptr;
  TrainSpec spec = ctx.cfg.train;
  spec.seed = job_seed(ctx.seed, spec.seed);
  std::optional<double> mse_init;
  if (mixture && spec.data.type == DataSpec::Type::Mixture) {
    const TinyScoreNet init(ScoreNetArch{mixture->dim(), spec.hidden, std::nullopt}, SubVpSde{}, spec.seed);
    mse_init = heldout_score_mse(init, *mixture, ctx.seed + 99);
  }
  auto outcome = train_score_net(spec, mixture, ctx.log);
  save_checkpoint((ctx.out / "checkpoint.bin").string(), *outcome.net);
  {
    CsvWriter csv(ctx.out / "loss.csv");
    csv.row({"step", "lr", "loss"});
    for (std::size_t i = 0; i < outcome.loss.size(); ++i) {
      csv.row({std::to_string(i + 1), fmt(outcome.lr[i]), fmt(outcome.loss[i])});
    }
  }
  std::vector<Series> lines{{"DSM loss", {}, {}}};
  for (std::size_t i = 0; i < outcome.loss.size(); ++i) {
    lines[0].x.push_back(static_cast<double>(i + 1));
    lines[0].y.push_back(outcome.loss[i]);
  }
  write_text(ctx.out / "loss.svg", svg_lines(lines, {"Training loss", "step", "batch loss"}));

  json summary;
  summary["steps_completed"] = outcome.loss.size();
  summary["parameters"] = outcome.net->param_count();
  summary["diverged"] = outcome.diverged;
  if (!outcome.message.empty()) summary["message"] = outcome.message;
  if (!outcome.loss.empty()) {
    summary["initial_loss"] = outcome.loss.front();
    summary["final_loss"] = outcome.loss.back();
  }
  if (mse_init) {
    summary["heldout_score_mse_initial"] = *mse_init;
    summary["heldout_score_mse_final"] = heldout_score_mse(*outcome.net, *mixture, ctx.seed + 99);
  }
  RunOutcome out;
  out.exit_code = outcome.diverged ? 1 : 0;
  out.summary_json = finish(ctx, summary);
  return out;
}

}  // namespace

std::uint64_t job_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(seed ^ splitmix64(stream)); }

fs::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (opts.output_dir) return *opts.output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return cfg.output_dir;
}

TrainOutcome train_score_net(const TrainSpec& spec, const GaussianMixture* mixture, std::ostream* log) {
  std::vector<std::vector<double>> data;
  ScoreNetArch arch;
  arch.hidden = spec.hidden;
  switch (spec.data.type) {
    case DataSpec::Type::ToyImages:
      for (auto& s : toy_image_dataset(spec.data.n, spec.data.height, spec.data.width, spec.data.seed)) {
        data.push_back(std::move(s.values));
      }
      arch.dim = spec.data.height * spec.data.width;
      arch.image = ImageShape{1, spec.data.height, spec.data.width};
      break;
    case DataSpec::Type::Mixture:
      if (!mixture) throw ConfigError("train.data: mixture data needs a gmm model section");
      data = sample_mixture(*mixture, spec.data.n, spec.data.seed);
      arch.dim = mixture->dim();
      break;
    case DataSpec::Type::Uniform:
      throw ConfigError("train.data: type must be mixture or toy_images");
  }
  if (data.empty()) throw ConfigError("train.data: no samples");

  TrainOutcome out;
  out.net = std::make_unique<TinyScoreNet>(arch, SubVpSde{}, spec.seed);
  double lr = spec.lr;
  std::size_t remaining = spec.steps, round = 0;
  while (remaining > 0) {
    const std::size_t n = std::min(spec.decay_every, remaining);
    DsmOptions o;
    o.steps = n;
    o.batch = spec.batch;
    o.lr = lr;
    o.seed = job_seed(spec.seed, round + 1);
    try {
      train_dsm(*out.net, data, o, [&](std::size_t, double loss) {
        out.loss.push_back(loss);
        out.lr.push_back(lr);
      });
    } catch (const ad::NonFiniteError& e) {
      out.diverged = true;
      out.message = std::string("training stopped at step ") + std::to_string(out.loss.size() + 1) + ": " + e.what();
      say(log, out.message);
      break;
    }
    say(log, "trained " + std::to_string(out.loss.size()) + "/" + std::to_string(spec.steps) +
                 " steps, loss " + fmt(out.loss.empty() ? 0.0 : out.loss.back()));
    lr *= spec.lr_decay;
    remaining -= n;
    ++round;
  }
  return out;
}

std::unique_ptr<ScoreModel> build_model(const ModelSpec& spec, std::ostream* log) {
  if (spec.type == ModelSpec::Type::Mixture) {
    return std::make_unique<GaussianMixtureScore>(spec.mixture, SubVpSde{});
  }
  if (!spec.checkpoint.empty()) {
    try {
      return std::make_unique<TinyScoreNet>(load_checkpoint(spec.checkpoint.string(), SubVpSde{}));
    } catch (const std::runtime_error& e) {
      throw ConfigError("model.checkpoint: " + std::string(e.what()));
    }
  }
  auto outcome = train_score_net(*spec.train, nullptr, log);
  if (outcome.diverged) throw std::runtime_error("model.train: " + outcome.message);
  return std::move(outcome.net);
}

std::vector<Sample> build_dataset(const DataSpec& spec, const ScoreModel& model, const ModelSpec& model_spec) {
  if (spec.n == 0) throw ConfigError("dataset: no samples");
  std::vector<Sample> out;
  switch (spec.type) {
    case DataSpec::Type::Uniform: {
      std::mt19937_64 rng(spec.seed);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (std::size_t i = 0; i < spec.n; ++i) {
        Sample s{std::vector<double>(model.dim()), model.image_shape()};
        for (auto& v : s.values) v = u(rng);
        out.push_back(std::move(s));
      }
      break;
    }
    case DataSpec::Type::Mixture: {
      if (model_spec.type != ModelSpec::Type::Mixture) throw ConfigError("dataset: mixture data needs a gmm model");
      for (auto& x : sample_mixture(model_spec.mixture, spec.n, spec.seed)) out.push_back(Sample{std::move(x), {}});
      break;
    }
    case DataSpec::Type::ToyImages: {
      const auto shape = model.image_shape();
      if (!shape || *shape != ImageShape{1, spec.height, spec.width}) {
        throw ConfigError("dataset: toy images of " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                          " do not match the model");
      }
      out = toy_image_dataset(spec.n, spec.height, spec.width, spec.seed);
      break;
    }
  }
  return out;
}

RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  const fs::path out = resolve_output_dir(cfg, opts);
  fs::create_directories(out);
  const Context ctx{cfg, out, opts.seed.value_or(cfg.seed), opts.workers.value_or(cfg.workers), opts.smoke,
                    opts.log};
  RunOutcome res;
  switch (cfg.kind) {
    case ExperimentKind::Estimate: res = run_estimate(ctx); break;
    case ExperimentKind::Attack: res = run_attack_campaign(ctx); break;
    case ExperimentKind::SolverCompare: res = run_solver_compare(ctx); break;
    case ExperimentKind::BlackBox: res = run_blackbox(ctx); break;
    case ExperimentKind::Train: res = run_train(ctx); break;
  }
  res.output_dir = out;
  return res;
}

}  // namespace pflow::harness
