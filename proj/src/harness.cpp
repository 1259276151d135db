#include "klflow/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "klflow/error.hpp"
#include "klflow/svg.hpp"

namespace klflow {

namespace {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Stream tags beyond the solver's own.
constexpr std::uint64_t kStreamData = 101;
constexpr std::uint64_t kStreamW1 = 102;
constexpr std::uint64_t kStreamLangevin = 103;
constexpr std::uint64_t kStreamTarget = 104;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void say(const HarnessOptions& opt, const std::string& line) {
  if (opt.log) opt.log(line);
}

// Runs jobs[i] for i in [0, n) on `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

SolverConfig trial_solver(const ExperimentConfig& c, std::uint64_t seed) {
  SolverConfig s = c.solver;
  s.seed = seed;
  return s;
}

Tensor eval_cloud(const FlowModel& flow, const SolverConfig& c) {
  const std::size_t m_eval = c.eval_particles == 0 ? c.particles : c.eval_particles;
  Rng eval_rng = make_rng(c.seed, {0, kStreamEval});
  return push_forward(flow, flow.base().sample(m_eval, eval_rng)).points;
}

void absorb(TrialResult& t, SolveResult&& s, const SolverConfig& sc) {
  t.records = std::move(s.records);
  t.warnings = std::move(s.warnings);
  t.distillations = std::move(s.distillations);
  t.converged_inner = s.converged_inner;
  t.outer_stop_k = s.outer_stop_k;
  if (!t.records.empty()) t.terminal_loss = t.records.back().loss;
  t.final_cloud = eval_cloud(s.flow, sc);
}

// W1 between an iid cloud and the fixed target reference, same estimator for every method.
double w1_to_target(const ParticleCloud& cloud, const ParticleCloud& reference, const ExperimentConfig& c,
                    std::uint64_t seed, std::size_t k) {
  if (cloud.first_non_finite() != cloud.size()) return std::numeric_limits<double>::infinity();
  Rng rng = make_rng(seed, {k, kStreamW1});
  return w1_distance(cloud, reference, rng, W1Options{c.bayes.w1_cap, c.bayes.w1_repeats});
}

ParticleCloud target_reference(const ExperimentConfig& c, std::uint64_t seed) {
  RadialTarget target(c.bayes.alpha, c.data.dim);
  return target.sample_qmc(c.bayes.w1_cap, seed * 7919 + kStreamTarget);
}

TrialResult run_flow_method(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
  TrialResult t;
  t.method = method;
  t.seed = seed;
  SolverConfig sc = trial_solver(c, seed);

  if (c.kind == ExperimentKind::kBayesSampling) {
    const KlTargetFunctional f(c.data.dim, PotentialTarget{c.bayes.alpha, 0.0});
    const ParticleCloud reference = target_reference(c, seed);
    auto w1_of = [&](const FlowModel& flow, std::size_t k) {
      Rng rng = make_rng(seed, {k, kStreamW1, 1});
      return w1_to_target(sample(flow, sc.particles, rng).points, reference, c, seed, k);
    };
    t.metric.push_back({0, std::log(w1_of(initial_flow(sc, c.data.dim), 0)), false});
    SolveOptions opt;
    opt.on_iteration = [&](const RunRecord& rec, const FlowModel& flow) {
      t.metric.push_back({rec.k, std::log(w1_of(flow, rec.k)), false});
    };
    absorb(t, solve_algorithm1(f, sc, opt), sc);
    return t;
  }

  const Dataset data = experiment_data(c, seed);
  const NpmleFunctional f(data, experiment_kernel(c));
  if (method == "iklpd") {
    absorb(t, solve_algorithm1(f, sc), sc);
  } else if (method == "iklpd-stochastic") {
    sc.beta2 = c.stochastic.beta2;
    sc.gamma = c.stochastic.gamma;
    sc.lr_schedule = c.stochastic.lr_schedule;
    absorb(t, solve_stochastic(f, sc, StochasticConfig{c.stochastic.batch}), sc);
  } else if (method == "iklpd-composed") {
    // The starting flow is one short flow; every step appends another.
    sc.blocks = c.compose.short_blocks;
    sc.width = c.compose.short_width;
    ComposeConfig cc = c.compose;
    if (cc.student_width == 0) cc.student_width = c.solver.width;
    absorb(t, solve_algorithm2(f, sc, cc), sc);
  } else {
    throw ContractViolation("unknown flow method '" + method + "'");
  }
  return t;
}

TrialResult run_kw(const ExperimentConfig& c, std::uint64_t seed) {
  TrialResult t;
  t.method = "kw-grid";
  t.seed = seed;
  const Dataset data = experiment_data(c, seed);
  const SimplexFunctional f = SimplexFunctional::npmle(kw_grid_atoms(c, data), data, experiment_kernel(c));
  const auto t0 = Clock::now();
  const KwResult early = kw_grid_solver(f, c.kw.tau, c.solver.outer_iters, 1);
  const double ms = 1e3 * seconds_since(t0) / static_cast<double>(std::max<std::size_t>(1, c.solver.outer_iters));
  for (std::size_t k = 1; k < early.values.size(); ++k) {
    RunRecord r;
    r.k = k;
    r.loss = early.values[k];
    r.kl_step = kNan;
    r.fv_var = kNan;
    r.inner_iters = 1;
    r.wall_ms = ms;
    r.seed = seed;
    t.records.push_back(r);
  }
  const KwResult plateau = kw_grid_solver(f, c.kw.tau, std::max(c.kw.steps, c.solver.outer_iters), c.kw.steps);
  t.terminal_loss = plateau.values.back();
  return t;
}

TrialResult run_langevin(const ExperimentConfig& c, std::uint64_t seed) {
  TrialResult t;
  t.method = "langevin";
  t.seed = seed;
  const ParticleCloud reference = target_reference(c, seed);
  Rng rng = make_rng(seed, {0, kStreamLangevin});
  const ParticleCloud init =
      BaseDistribution::isotropic(c.data.dim, c.solver.base_variance).sample(c.solver.particles, rng);
  const auto t0 = Clock::now();
  LangevinResult lr = langevin_run(LangevinConfig{c.bayes.alpha, c.bayes.langevin_dt, c.solver.outer_iters, 1e100},
                                   init, rng);
  const double ms = 1e3 * seconds_since(t0) / static_cast<double>(std::max<std::size_t>(1, c.solver.outer_iters));
  if (lr.diverged) {
    t.warnings.push_back("langevin diverged at step " + std::to_string(lr.diverged_at));
  }
  for (std::size_t k = 0; k < lr.trajectory.size(); ++k) {
    t.metric.push_back({k, std::log(w1_to_target(lr.trajectory[k], reference, c, seed, k)), false});
    if (k == 0) continue;
    RunRecord r;
    r.k = k;
    r.loss = kNan;
    r.kl_step = kNan;
    r.fv_var = kNan;
    r.inner_iters = 1;
    r.wall_ms = ms;
    r.seed = seed;
    t.records.push_back(r);
  }
  t.terminal_loss = kNan;
  t.final_cloud = lr.trajectory.back();
  return t;
}

TrialResult run_trial(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
  try {
    if (method == "kw-grid") return run_kw(c, seed);
    if (method == "langevin") return run_langevin(c, seed);
    return run_flow_method(c, method, seed);
  } catch (const std::exception& e) {
    TrialResult t;
    t.method = method;
    t.seed = seed;
    t.error = e.what();
    return t;
  }
}

// EM reference over the final particles of every flow trial on this seed and the KW grid.
double nll_reference(const ExperimentConfig& c, std::uint64_t seed, const std::vector<const TrialResult*>& flows) {
  const Dataset data = experiment_data(c, seed);
  const Tensor grid = kw_grid_atoms(c, data);
  std::size_t particles = 0;
  for (const TrialResult* t : flows) particles += t->final_cloud.rows();
  Tensor atoms(particles + grid.rows(), grid.cols());
  std::vector<double> init(atoms.rows());
  std::size_t row = 0;
  const double grid_mass = particles == 0 ? 1.0 : 0.01;
  for (const TrialResult* t : flows) {
    for (std::size_t i = 0; i < t->final_cloud.rows(); ++i, ++row) {
      for (std::size_t j = 0; j < atoms.cols(); ++j) atoms(row, j) = t->final_cloud(i, j);
      init[row] = std::log((1.0 - grid_mass) / static_cast<double>(particles));
    }
  }
  for (std::size_t i = 0; i < grid.rows(); ++i, ++row) {
    for (std::size_t j = 0; j < atoms.cols(); ++j) atoms(row, j) = grid(i, j);
    init[row] = std::log(grid_mass / static_cast<double>(grid.rows()));
  }
  const SimplexFunctional f = SimplexFunctional::npmle(atoms, data, experiment_kernel(c));
  return f.value(npmle_reference(f, c.reference.em_iters, init));
}

std::string format_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s << std::setprecision(12) << v;
  return s.str();
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

// ---------------------------------------------------------------------------
// Inputs

Dataset experiment_data(const ExperimentConfig& c, std::uint64_t seed) {
  MixingSpec mix;
  mix.moons.separation = c.data.separation;
  mix.dim = c.data.dim;
  if (c.kind == ExperimentKind::kNpmleLocationScale && c.data.dim > 2) mix.kind = MixingSpec::Kind::kTwoMoonsNormal;
  Rng rng = make_rng(seed, {0, kStreamData});
  return mixture_data_gen(mix, experiment_kernel(c).kind, c.data.n, rng);
}

LikelihoodKernel experiment_kernel(const ExperimentConfig& c) {
  return LikelihoodKernel{c.kind == ExperimentKind::kNpmleLocationScale ? KernelKind::kLocationScale
                                                                         : KernelKind::kLocation};
}

Tensor kw_grid_atoms(const ExperimentConfig& c, const Dataset& data) {
  double L = 0.0;
  for (double v : data.x.values()) L = std::max(L, std::abs(v));
  const std::size_t d = data.dim();
  const bool scale = c.kind == ExperimentKind::kNpmleLocationScale;
  const std::size_t axes = scale ? 2 * d : d;
  const std::vector<std::size_t> counts = balanced_counts(c.kw.grid, axes);
  std::vector<double> lo(axes, -L), hi(axes, L);
  for (std::size_t a = d; a < axes; ++a) {
    lo[a] = 0.01;
    hi[a] = 4.0;
  }
  Tensor g = tensor_grid(lo, hi, counts);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t a = d; a < axes; ++a) g(i, a) = std::log(g(i, a));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Experiments

std::vector<const TrialResult*> ExperimentResult::of(const std::string& method) const {
  std::vector<const TrialResult*> out;
  for (const auto& t : trials) {
    if (t.method == method) out.push_back(&t);
  }
  return out;
}

bool ExperimentResult::any_failed() const {
  return std::any_of(trials.begin(), trials.end(), [](const TrialResult& t) { return !t.ok(); });
}

ExperimentResult run_experiment(const ExperimentConfig& c, const std::vector<std::string>& methods,
                                const HarnessOptions& opt) {
  validate(c);
  KLFLOW_REQUIRE(c.kind != ExperimentKind::kSimplexVerify && c.kind != ExperimentKind::kStepSizeStudy,
                 "run_experiment handles solver comparisons only");
  ExperimentResult r;
  r.config = c;
  r.methods = methods;
  r.metric_name = c.kind == ExperimentKind::kBayesSampling ? "log_w1" : "log_nll_gap";

  struct Job {
    std::string method;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& m : methods) {
    for (std::uint64_t s : c.seeds) jobs.push_back({m, s});
  }
  r.trials.resize(jobs.size());
  std::mutex log_mu;
  parallel_for(jobs.size(), c.threads, [&](std::size_t i) {
    const auto t0 = Clock::now();
    r.trials[i] = run_trial(c, jobs[i].method, jobs[i].seed);
    std::lock_guard<std::mutex> lock(log_mu);
    std::ostringstream line;
    line << jobs[i].method << " seed " << jobs[i].seed << ": "
         << (r.trials[i].ok() ? "done" : "FAILED (" + r.trials[i].error + ")") << " in " << std::fixed
         << std::setprecision(1) << seconds_since(t0) << " s";
    say(opt, line.str());
  });

  if (c.kind != ExperimentKind::kBayesSampling) {
    for (std::uint64_t s : c.seeds) {
      std::vector<const TrialResult*> flows;
      for (const auto& t : r.trials) {
        if (t.ok() && t.seed == s && t.method != "kw-grid" && t.final_cloud.rows() > 0) flows.push_back(&t);
      }
      const auto t0 = Clock::now();
      r.reference_loss[s] = nll_reference(c, s, flows);
      std::ostringstream line;
      line << "reference seed " << s << ": " << std::setprecision(10) << r.reference_loss[s] << " in " << std::fixed
           << std::setprecision(1) << seconds_since(t0) << " s";
      say(opt, line.str());
    }
    for (auto& t : r.trials) {
      if (!t.ok()) continue;
      std::vector<double> losses;
      for (const auto& rec : t.records) losses.push_back(rec.loss);
      const GapSeries g = nll_gap(losses, r.reference_loss[t.seed]);
      t.metric.clear();
      for (std::size_t i = 0; i < losses.size(); ++i) t.metric.push_back({t.records[i].k, g.log_gap[i], g.floored[i]});
    }
  }
  return r;
}

double standard_error(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  return std::sqrt(sample_variance(values) / static_cast<double>(values.size()));
}

std::vector<AggregateRow> aggregate(const ExperimentResult& r) {
  std::vector<AggregateRow> rows;
  auto add = [&](const std::string& method, const std::string& metric,
                 const std::map<std::size_t, std::vector<double>>& by_k) {
    for (const auto& [k, vals] : by_k) {
      std::vector<double> finite;
      for (double v : vals) {
        if (std::isfinite(v)) finite.push_back(v);
      }
      if (finite.empty()) continue;
      AggregateRow row;
      row.method = method;
      row.k = k;
      row.metric = metric;
      row.mean = pairwise_sum(finite) / static_cast<double>(finite.size());
      row.stderr_ = standard_error(finite);
      row.trials = finite.size();
      rows.push_back(row);
    }
  };
  for (const auto& m : r.methods) {
    std::map<std::size_t, std::vector<double>> loss, metric, inner;
    for (const TrialResult* t : r.of(m)) {
      if (!t->ok()) continue;
      for (const auto& rec : t->records) {
        loss[rec.k].push_back(rec.loss);
        inner[rec.k].push_back(static_cast<double>(rec.inner_iters));
      }
      for (const auto& p : t->metric) metric[p.k].push_back(p.value);
    }
    add(m, "loss", loss);
    add(m, r.metric_name, metric);
    add(m, "inner_iters", inner);
  }
  return rows;
}

void write_experiment_artifacts(const ExperimentResult& r, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const bool several = r.methods.size() > 1;
  for (const auto& t : r.trials) {
    const fs::path sub = several ? dir / t.method : dir;
    fs::create_directories(sub);
    std::ofstream out(sub / ("trial_" + std::to_string(t.seed) + ".csv"));
    write_run_records(out, t.records);
  }

  const std::vector<AggregateRow> agg = aggregate(r);
  {
    std::ofstream out(dir / "aggregate.csv");
    out << kAggregateHeader << '\n';
    for (const auto& a : agg) {
      out << a.method << ',' << a.k << ',' << a.metric << ',' << format_num(a.mean) << ',' << format_num(a.stderr_)
          << ',' << a.trials << '\n';
    }
  }
  if (several) {
    std::ofstream out(dir / "compare.csv");
    out << kCompareHeader << '\n';
    for (const auto& t : r.trials) {
      std::map<std::size_t, const RunRecord*> recs;
      for (const auto& rec : t.records) recs[rec.k] = &rec;
      for (const auto& p : t.metric) {
        const auto it = recs.find(p.k);
        out << t.method << ',' << t.seed << ',' << p.k << ','
            << format_num(it == recs.end() ? kNan : it->second->loss) << ',' << r.metric_name << ','
            << format_num(p.value) << ',' << (p.floored ? 1 : 0) << ','
            << (it == recs.end() ? 0 : it->second->inner_iters) << '\n';
      }
    }
  }

  // One chart per metric, one series per method with a stderr band.
  for (const std::string& metric : {r.metric_name, std::string("loss")}) {
    ChartSpec chart;
    chart.title = metric == "log_w1" ? "log W1 to target" : metric == "loss" ? "loss" : "log NLL gap";
    chart.x_label = "outer iteration k";
    chart.y_label = metric == "loss" ? "mean loss" : "mean " + metric + " (stderr band)";
    for (const auto& m : r.methods) {
      ChartSeries s;
      s.name = m;
      for (const auto& a : agg) {
        if (a.method != m || a.metric != metric) continue;
        s.x.push_back(static_cast<double>(a.k));
        s.y.push_back(a.mean);
        s.err.push_back(a.stderr_);
      }
      if (!s.x.empty()) chart.series.push_back(std::move(s));
    }
    if (!chart.series.empty()) write_text(dir / (metric + ".svg"), render_svg(chart));
  }

  write_text(dir / "config_echo.toml", serialize_config(r.config));

  json report;
  report["experiment"] = std::string(to_string(r.config.kind));
  report["profile"] = std::string(to_string(r.config.profile));
  report["metric"] = r.metric_name;
  report["error_bars"] = "standard error of the mean over trials";
  for (const auto& [seed, ref] : r.reference_loss) report["reference_loss"][std::to_string(seed)] = ref;
  json& methods = report["methods"];
  for (const auto& m : r.methods) {
    json entry;
    std::vector<double> term_loss, term_metric;
    std::size_t failed = 0;
    json warnings = json::array();
    for (const TrialResult* t : r.of(m)) {
      if (!t->ok()) {
        ++failed;
        warnings.push_back("seed " + std::to_string(t->seed) + ": " + t->error);
        continue;
      }
      if (std::isfinite(t->terminal_loss)) term_loss.push_back(t->terminal_loss);
      if (!t->metric.empty() && std::isfinite(t->metric.back().value)) term_metric.push_back(t->metric.back().value);
      for (const auto& w : t->warnings) warnings.push_back("seed " + std::to_string(t->seed) + ": " + w);
    }
    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? kNan : pairwise_sum(v) / static_cast<double>(v.size());
    };
    entry["terminal_loss_mean"] = num_or_null(mean(term_loss));
    entry["terminal_loss_stderr"] = num_or_null(standard_error(term_loss));
    entry["terminal_" + r.metric_name + "_mean"] = num_or_null(mean(term_metric));
    entry["failed_trials"] = failed;
    entry["warnings"] = warnings;
    methods[m] = entry;
  }
  // Qualitative verdicts for the method pairs that have one.
  auto terminal_mean = [&](const std::string& m, bool metric) {
    std::vector<double> v;
    for (const TrialResult* t : r.of(m)) {
      if (!t->ok()) continue;
      const double x = metric ? (t->metric.empty() ? kNan : t->metric.back().value) : t->terminal_loss;
      if (std::isfinite(x)) v.push_back(x);
    }
    return v.empty() ? kNan : pairwise_sum(v) / static_cast<double>(v.size());
  };
  auto has = [&](const std::string& m) { return std::find(r.methods.begin(), r.methods.end(), m) != r.methods.end(); };
  if (has("iklpd") && has("kw-grid")) {
    report["verdicts"]["kw_plateau_above_iklpd"] = terminal_mean("kw-grid", false) > terminal_mean("iklpd", false);
  }
  if (has("iklpd") && has("langevin")) {
    report["verdicts"]["iklpd_w1_below_langevin"] = terminal_mean("iklpd", true) < terminal_mean("langevin", true);
  }
  if (has("iklpd") && has("iklpd-composed")) {
    const double a = terminal_mean("iklpd", false), b = terminal_mean("iklpd-composed", false);
    report["verdicts"]["composed_loss_within_5pct"] = std::abs(b - a) <= 0.05 * std::abs(a);
  }
  report["any_failed"] = r.any_failed();
  write_text(dir / "report.json", report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Step-size study

StudyResult run_step_size_study(const ExperimentConfig& c, const HarnessOptions& opt) {
  validate(c);
  StudyResult res;
  res.config = c;
  struct Cell {
    std::vector<double> inner;  // mean inner iterations of the trial
    double outer = 0.0;
    bool failed = false;
    bool reached = false;
    std::vector<std::string> warnings;
  };
  const std::size_t T = c.study.taus.size(), S = c.seeds.size();
  std::vector<Cell> cells(T * S);
  std::mutex log_mu;
  parallel_for(T * S, c.threads, [&](std::size_t i) {
    const std::size_t ti = i / S, si = i % S;
    SolverConfig sc = trial_solver(c, c.seeds[si]);
    sc.tau = c.study.taus[ti];
    if (!c.study.gammas.empty()) sc.gamma = c.study.gammas[ti];
    const auto t0 = Clock::now();
    Cell& cell = cells[i];
    try {
      const Dataset data = experiment_data(c, c.seeds[si]);
      const NpmleFunctional f(data, experiment_kernel(c));
      SolveOptions so;
      so.stop_on_budget_after_burn_in = true;
      SolveResult r = solve_algorithm1(f, sc, so);
      for (const auto& rec : r.records) {
        cell.inner.push_back(static_cast<double>(rec.inner_iters));
        if (rec.k > sc.burn_in && rec.stop_reason == StopReason::kMaxIters) cell.failed = true;
      }
      cell.reached = r.outer_stop_k > 0;
      cell.outer = static_cast<double>(r.outer_stop_k > 0 ? r.outer_stop_k : r.records.size());
      cell.warnings = std::move(r.warnings);
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.warnings.push_back(e.what());
    }
    std::lock_guard<std::mutex> lock(log_mu);
    std::ostringstream line;
    line << "tau " << sc.tau << " seed " << c.seeds[si] << ": outer " << cell.outer
         << (cell.reached ? "" : " (criterion not reached)") << (cell.failed ? ", inner budget exhausted" : "")
         << " in " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s";
    say(opt, line.str());
  });

  for (std::size_t ti = 0; ti < T; ++ti) {
    StudyRow row;
    row.tau = c.study.taus[ti];
    row.gamma = c.study.gammas.empty() ? c.solver.gamma : c.study.gammas[ti];
    std::vector<double> inner, outer;
    for (std::size_t si = 0; si < S; ++si) {
      const Cell& cell = cells[ti * S + si];
      if (!cell.inner.empty()) inner.push_back(pairwise_sum(cell.inner) / static_cast<double>(cell.inner.size()));
      outer.push_back(cell.outer);
      row.failed_trials += cell.failed ? 1 : 0;
      row.unreached_trials += cell.reached ? 0 : 1;
      for (const auto& w : cell.warnings) {
        res.warnings.push_back("tau " + format_num(row.tau) + " seed " + std::to_string(c.seeds[si]) + ": " + w);
      }
    }
    row.mean_inner = inner.empty() ? kNan : pairwise_sum(inner) / static_cast<double>(inner.size());
    row.stderr_inner = standard_error(inner);
    row.mean_outer = pairwise_sum(outer) / static_cast<double>(outer.size());
    row.stderr_outer = standard_error(outer);
    res.rows.push_back(row);
  }
  return res;
}

void write_study_artifacts(const StudyResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "study.csv");
    out << kStudyHeader << '\n';
    for (const auto& row : r.rows) {
      out << format_num(row.tau) << ',' << format_num(row.gamma) << ',' << format_num(row.mean_inner) << ','
          << format_num(row.stderr_inner) << ',' << format_num(row.mean_outer) << ',' << format_num(row.stderr_outer)
          << ',' << row.failed_trials << ',' << row.unreached_trials << ',' << (row.converged() ? 1 : 0) << '\n';
    }
  }
  // Non-converged step sizes are left off the curves.
  for (const bool inner : {true, false}) {
    ChartSpec chart;
    chart.title = inner ? "inner iterations vs step size" : "outer iterations vs step size";
    chart.x_label = "tau";
    chart.y_label = inner ? "mean inner iterations per outer step" : "outer iterations to criterion";
    ChartSeries s;
    s.name = inner ? "inner" : "outer";
    for (const auto& row : r.rows) {
      if (!row.converged()) continue;
      s.x.push_back(row.tau);
      s.y.push_back(inner ? row.mean_inner : row.mean_outer);
      s.err.push_back(inner ? row.stderr_inner : row.stderr_outer);
    }
    chart.series.push_back(std::move(s));
    write_text(dir / (inner ? "inner_iters.svg" : "outer_iters.svg"), render_svg(chart));
  }
  write_text(dir / "config_echo.toml", serialize_config(r.config));
  json report;
  report["experiment"] = std::string(to_string(r.config.kind));
  report["profile"] = std::string(to_string(r.config.profile));
  for (const auto& row : r.rows) {
    report["rows"].push_back({{"tau", row.tau},
                              {"gamma", row.gamma},
                              {"mean_inner", num_or_null(row.mean_inner)},
                              {"mean_outer", num_or_null(row.mean_outer)},
                              {"failed_trials", row.failed_trials},
                              {"unreached_trials", row.unreached_trials},
                              {"converged", row.converged()}});
  }
  report["warnings"] = r.warnings;
  write_text(dir / "report.json", report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Simplex verification

bool VerifyResult::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const VerifyCheck& c) { return c.pass; });
}

const VerifyCheck* VerifyResult::find(const std::string& id) const {
  for (const auto& c : checks) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

VerifyResult run_simplex_verify(const VerifySettings& v, std::uint64_t seed, const std::vector<std::string>& only) {
  auto wanted = [&](const std::string& id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  VerifyResult out;

  // Strongly convex target: pi proportional to exp(-theta^4/4) on a 1D grid.
  const std::vector<double> lo{-4.0}, hi{4.0};
  const std::vector<std::size_t> cnt{v.kl_atoms};
  const SimplexFunctional kl = SimplexFunctional::kl_target(tensor_grid(lo, hi, cnt), PotentialTarget{2, 0.0});
  Rng init_rng = make_rng(seed, {1});
  const std::vector<double> kl_init = SimplexDistribution::random(Tensor(v.kl_atoms, 1), init_rng).log_weights;

  // NPMLE on a 1D grid spanning synthetic data from a symmetric two-point mixture.
  Rng data_rng = make_rng(seed, {2});
  Tensor x(v.npmle_n, 1);
  for (std::size_t i = 0; i < v.npmle_n; ++i) x(i, 0) = (i % 2 ? 2.0 : -2.0) + standard_normal(data_rng);
  const Dataset data(x);
  double L = 0.0;
  for (double xi : x.values()) L = std::max(L, std::abs(xi));
  auto npmle_on = [&](std::size_t atoms) {
    const std::vector<double> l{-L}, h{L};
    const std::vector<std::size_t> c{atoms};
    return SimplexFunctional::npmle(tensor_grid(l, h, c), data, LikelihoodKernel{});
  };
  auto uniform = [](std::size_t n) { return std::vector<double>(n, -std::log(static_cast<double>(n))); };

  std::optional<SimplexFunctional> npmle;
  std::vector<double> npmle_star;
  auto need_npmle = [&] {
    if (npmle) return;
    npmle = npmle_on(v.npmle_atoms);
    npmle_star = npmle_reference(*npmle, v.reference_iters);
  };

  if (wanted("theorem2-strong")) {
    const auto t0 = Clock::now();
    VerifyCheck c;
    c.id = "theorem2-strong";
    const std::vector<double> taus(v.kl_steps, v.tau);
    Theorem2Result r = verify_theorem2(kl, kl_init, kl.log_pi(), taus);
    double max_factor = 0.0;
    for (double f : r.factors) max_factor = std::max(max_factor, f);
    const double cap = 1.0 / (1.0 + v.tau) + 1e-8;
    const std::vector<double> closed = kl_target_closed_form(kl.log_pi(), kl_init, v.tau);
    const StepResult step = implicit_step_exact(kl, kl_init, v.tau);
    double l1 = 0.0;
    for (std::size_t j = 0; j < closed.size(); ++j) l1 += std::abs(std::exp(closed[j]) - std::exp(step.log_w[j]));
    c.pass = r.report.all_satisfied() && max_factor <= cap && l1 < 1e-8;
    std::ostringstream d;
    d << "envelope " << (r.report.all_satisfied() ? "holds" : "violated") << " over " << r.report.rows.size()
      << " rows; max per-step KL factor " << max_factor << " (cap " << cap << "); closed-form L1 gap " << l1;
    c.detail = d.str();
    c.reports.push_back(std::move(r.report));
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }

  if (wanted("theorem2-npmle")) {
    const auto t0 = Clock::now();
    need_npmle();
    VerifyCheck c;
    c.id = "theorem2-npmle";
    const std::vector<double> taus(v.npmle_steps, v.tau);
    Theorem2Result r = verify_theorem2(*npmle, uniform(v.npmle_atoms), npmle_star, taus);
    std::size_t unconverged = 0;
    for (const auto& s : r.run.steps) unconverged += s.converged ? 0 : 1;
    c.pass = r.report.all_satisfied();
    std::ostringstream d;
    d << "envelope " << (c.pass ? "holds" : "violated") << " over " << v.npmle_steps << " steps; "
      << unconverged << " inner solves above tolerance; F* = " << npmle->value(npmle_star);
    c.detail = d.str();
    c.reports.push_back(std::move(r.report));
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }

  if (wanted("theorem1")) {
    const auto t0 = Clock::now();
    VerifyCheck c;
    c.id = "theorem1";
    const auto every = static_cast<std::size_t>(std::max(1.0, std::round(0.1 / v.flow_dt)));
    const KlgfResult a = integrate_klgf(kl, kl_init, kl.log_pi(), v.flow_dt, v.flow_horizon, every);
    const KlgfResult b = integrate_klgf(kl, kl_init, kl.log_pi(), v.flow_dt / 2, v.flow_horizon, 2 * every);
    BoundReport rep = verify_theorem1(kl, a, kl_init, kl.log_pi());
    const double rate = -(std::log(a.kl_star.back()) - std::log(a.kl_star.front())) / (a.times.back() - a.times.front());
    const double change = std::abs(a.kl_star.back() - b.kl_star.back()) / b.kl_star.back();
    c.pass = rep.all_satisfied() && rate >= 0.5 * 0.95 && change < 0.01;
    std::ostringstream d;
    d << "log-KL decay rate " << rate << " per unit time (need >= 0.475); dt-halving terminal change "
      << 100 * change << "%; envelope " << (rep.all_satisfied() ? "holds" : "violated");
    for (const auto& w : a.warnings) d << "; " << w;
    c.detail = d.str();
    c.reports.push_back(std::move(rep));
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }

  if (wanted("theorem4")) {
    const auto t0 = Clock::now();
    VerifyCheck c;
    c.id = "theorem4";
    Rng calib_rng = make_rng(seed, {3});
    const std::vector<double> calib = SimplexDistribution::random(Tensor(v.kl_atoms, 1), calib_rng).log_weights;
    std::ostringstream d;
    c.pass = true;
    const char* sep = "";
    for (const auto sch : {ToleranceSchedule::kGeometric, ToleranceSchedule::kPolynomial}) {
      Theorem4Config cfg;
      cfg.schedule = sch;
      cfg.kappa = v.kappa;
      cfg.eps = v.eps;
      cfg.alpha = v.alpha;
      cfg.tau = v.tau;
      cfg.steps = v.inexact_steps;
      Theorem4Result r = verify_theorem4(kl, kl_init, calib, kl.log_pi(), cfg);
      std::size_t excluded = 0;
      for (const auto& row : r.report.rows) excluded += row.excluded ? 1 : 0;
      c.pass = c.pass && r.report.all_satisfied();
      d << sep << r.report.name << ": " << (r.report.all_satisfied() ? "holds" : "violated") << " (C = "
        << r.report.constant << ", " << excluded << " rows excluded)";
      sep = "; ";
      c.reports.push_back(std::move(r.report));
    }
    c.detail = d.str();
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }

  if (wanted("theorem5")) {
    const auto t0 = Clock::now();
    VerifyCheck c;
    c.id = "theorem5";
    const SimplexFunctional f = npmle_on(v.stochastic_atoms);
    const std::vector<double> star = npmle_reference(f, v.reference_iters);
    Theorem5Config cfg;
    cfg.batch = v.stochastic_batch;
    cfg.tau = v.tau;
    cfg.steps = v.stochastic_steps;
    cfg.trials = v.stochastic_trials;
    cfg.seed = seed;
    Theorem5Result r = verify_theorem5(f, uniform(v.stochastic_atoms), star, cfg);
    double slack = std::numeric_limits<double>::infinity();
    for (const auto& row : r.report.rows) {
      if (!row.excluded) slack = std::min(slack, row.rhs - row.lhs);
    }
    c.pass = r.report.all_satisfied();
    std::ostringstream d;
    d << "envelope " << (c.pass ? "holds" : "violated") << " with E L^2 = " << r.expected_l2 << "; minimum slack "
      << slack;
    c.detail = d.str();
    c.reports.push_back(std::move(r.report));
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }

  if (wanted("three-point")) {
    const auto t0 = Clock::now();
    need_npmle();
    VerifyCheck c;
    c.id = "three-point";
    Rng rng = make_rng(seed, {4});
    BoundReport rep;
    rep.name = "three-point inequality";
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v.lemma_pairs; ++i) {
      const SimplexFunctional& f = i % 2 ? *npmle : kl;
      const Tensor dummy(f.size(), 1);
      const auto prev = SimplexDistribution::random(dummy, rng).log_weights;
      const auto probe = SimplexDistribution::random(dummy, rng).log_weights;
      const double tau = std::exp(4.0 * uniform01(rng) - 2.0);
      const StepResult st = implicit_step_exact(f, prev, tau);
      const double slack = three_point_slack(f, prev, st.log_w, probe, tau);
      worst = std::min(worst, slack);
      BoundRow row;
      row.k = i;
      row.lhs = -slack;
      row.rhs = 1e-8;
      row.satisfied = slack >= -1e-8;
      rep.rows.push_back(row);
    }
    c.pass = rep.all_satisfied();
    std::ostringstream d;
    d << "worst slack " << worst << " over " << v.lemma_pairs << " pairs (need >= -1e-8)";
    c.detail = d.str();
    c.reports.push_back(std::move(rep));
    c.seconds = seconds_since(t0);
    out.checks.push_back(std::move(c));
  }
  return out;
}

void write_verify_artifacts(const VerifyResult& r, const ExperimentConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json report;
  report["experiment"] = std::string(to_string(c.kind));
  for (const auto& check : r.checks) {
    for (std::size_t i = 0; i < check.reports.size(); ++i) {
      const std::string stem = check.reports.size() == 1 ? check.id : check.id + "_" + std::to_string(i + 1);
      std::ofstream out(dir / (stem + ".csv"));
      write_bound_report(out, check.reports[i]);
      if (check.reports[i].rows.size() < 2) continue;
      ChartSpec chart;
      chart.title = check.reports[i].name;
      chart.x_label = "k";
      chart.y_label = "value";
      chart.log_y = true;
      ChartSeries lhs{"measured", {}, {}, {}}, rhs{"bound", {}, {}, {}};
      for (const auto& row : check.reports[i].rows) {
        lhs.x.push_back(static_cast<double>(row.k));
        lhs.y.push_back(row.lhs);
        rhs.x.push_back(static_cast<double>(row.k));
        rhs.y.push_back(row.rhs);
      }
      chart.series = {std::move(lhs), std::move(rhs)};
      write_text(dir / (stem + ".svg"), render_svg(chart));
    }
    report["checks"][check.id] = {{"pass", check.pass}, {"detail", check.detail}, {"seconds", check.seconds}};
  }
  report["all_pass"] = r.all_pass();
  write_text(dir / "config_echo.toml", serialize_config(c));
  write_text(dir / "report.json", report.dump(2) + "\n");
}

}  // namespace klflow
