#include "klflow/solver.hpp"

#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "klflow/adam.hpp"
#include "klflow/error.hpp"

namespace klflow {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<std::string_view, E> (&table)[N], const char* what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw ParseError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string_view enum_name(E e, const std::pair<std::string_view, E> (&table)[N]) {
  for (const auto& [name, value] : table) {
    if (value == e) return name;
  }
  return "?";
}

constexpr std::pair<std::string_view, StopReason> kStopNames[] = {
    {"none", StopReason::kNone},           {"grad_norm", StopReason::kGradNorm},
    {"patience", StopReason::kPatience},   {"fv_variance", StopReason::kFvVariance},
    {"max_iters", StopReason::kMaxIters},  {"diverged", StopReason::kDiverged},
    {"outer_fv_variance", StopReason::kOuterFvVariance},
};
constexpr std::pair<std::string_view, LrSchedule> kLrNames[] = {
    {"geometric", LrSchedule::kGeometric},
    {"harmonic", LrSchedule::kHarmonic},
    {"inverse_linear", LrSchedule::kInverseLinear},
};
constexpr std::pair<std::string_view, TauSchedule> kTauNames[] = {
    {"geometric", TauSchedule::kGeometric},
    {"constant", TauSchedule::kConstant},
    {"inverse_sqrt", TauSchedule::kInverseSqrt},
    {"strongly_convex", TauSchedule::kStronglyConvex},
};
constexpr std::pair<std::string_view, ZetaSchedule> kZetaNames[] = {
    {"none", ZetaSchedule::kNone},
    {"constant", ZetaSchedule::kConstant},
    {"harmonic", ZetaSchedule::kHarmonic},
};
constexpr std::pair<std::string_view, BaseResample> kResampleNames[] = {
    {"per_run", BaseResample::kPerRun},
    {"per_outer", BaseResample::kPerOuter},
    {"per_inner", BaseResample::kPerInner},
};
constexpr std::pair<std::string_view, PatienceMetric> kPatienceNames[] = {
    {"grad_norm", PatienceMetric::kGradNorm},
    {"loss", PatienceMetric::kLoss},
};

}  // namespace

std::string_view to_string(StopReason r) { return enum_name(r, kStopNames); }
std::string_view to_string(LrSchedule s) { return enum_name(s, kLrNames); }
std::string_view to_string(TauSchedule s) { return enum_name(s, kTauNames); }
std::string_view to_string(ZetaSchedule s) { return enum_name(s, kZetaNames); }
std::string_view to_string(BaseResample s) { return enum_name(s, kResampleNames); }
std::string_view to_string(PatienceMetric s) { return enum_name(s, kPatienceNames); }
LrSchedule parse_lr_schedule(std::string_view s) { return parse_enum(s, kLrNames, "learning-rate schedule"); }
TauSchedule parse_tau_schedule(std::string_view s) { return parse_enum(s, kTauNames, "step-size schedule"); }
ZetaSchedule parse_zeta_schedule(std::string_view s) { return parse_enum(s, kZetaNames, "zeta schedule"); }
BaseResample parse_base_resample(std::string_view s) { return parse_enum(s, kResampleNames, "resample mode"); }
PatienceMetric parse_patience_metric(std::string_view s) {
  return parse_enum(s, kPatienceNames, "patience metric");
}

double step_size(const SolverConfig& c, std::size_t k) {
  const auto kk = static_cast<double>(k);
  switch (c.tau_schedule) {
    case TauSchedule::kGeometric: return c.tau * std::pow(c.beta2, kk - 1.0);
    case TauSchedule::kConstant: return c.tau;
    case TauSchedule::kInverseSqrt: return c.tau / std::sqrt(kk + 1.0);
    case TauSchedule::kStronglyConvex: return 2.0 / (c.lambda * (kk + 1.0));
  }
  return c.tau;
}

double learning_rate(const SolverConfig& c, std::size_t k) {
  const auto kk = static_cast<double>(k);
  switch (c.lr_schedule) {
    case LrSchedule::kGeometric: return c.gamma * std::pow(c.beta1, kk - 1.0);
    case LrSchedule::kHarmonic: return 20.0 * c.gamma / (19.0 + kk);
    case LrSchedule::kInverseLinear: return c.gamma / (1.0 + kk / 27.0);
  }
  return c.gamma;
}

std::optional<double> inner_zeta(const SolverConfig& c, std::size_t k) {
  switch (c.zeta_schedule) {
    case ZetaSchedule::kNone: return std::nullopt;
    case ZetaSchedule::kConstant: return c.zeta0;
    case ZetaSchedule::kHarmonic: return c.zeta0 * 20.0 / (19.0 + static_cast<double>(k));
  }
  return std::nullopt;
}

void validate(const SolverConfig& c) {
  KLFLOW_REQUIRE(c.tau > 0.0, "tau must be positive");
  KLFLOW_REQUIRE(c.beta2 > 0.0, "beta2 must be positive");
  KLFLOW_REQUIRE(c.gamma > 0.0, "gamma must be positive");
  KLFLOW_REQUIRE(c.beta1 > 0.0 && c.beta1 <= 1.0, "beta1 must lie in (0, 1]");
  KLFLOW_REQUIRE(c.outer_iters >= 1 && c.max_inner >= 1, "iteration counts must be >= 1");
  KLFLOW_REQUIRE(c.particles >= 2, "at least two particles are needed");
  KLFLOW_REQUIRE(c.blocks >= 1 && c.width >= 1, "flow needs at least one block of width >= 1");
  KLFLOW_REQUIRE(c.base_variance > 0.0, "base variance must be positive");
  KLFLOW_REQUIRE(c.tau_schedule != TauSchedule::kStronglyConvex || c.lambda > 0.0,
                 "the 2/(lambda(k+1)) schedule needs lambda > 0");
  KLFLOW_REQUIRE(c.fv_check_every >= 1, "fv_check_every must be >= 1");
}

void validate(const ComposeConfig& c) {
  KLFLOW_REQUIRE(c.short_blocks >= 1, "k2 must be >= 1");
  KLFLOW_REQUIRE(c.student_blocks <= c.max_blocks, "k0 must not exceed k1");
  KLFLOW_REQUIRE(c.student_blocks >= 1, "k0 must be >= 1");
  KLFLOW_REQUIRE(c.distill_lr > 0.0 && c.distill_tol > 0.0, "distillation rate and tolerance must be positive");
  KLFLOW_REQUIRE(c.short_width >= 1, "short-flow width must be >= 1");
}

// ---------------------------------------------------------------------------
// RunRecord CSV

void write_run_records(std::ostream& out, std::span<const RunRecord> records) {
  out << kRunRecordHeader << '\n';
  std::ostringstream row;
  row.precision(17);
  for (const RunRecord& r : records) {
    row.str("");
    row << r.k << ',' << r.loss << ',' << r.kl_step << ',' << r.fv_var << ',' << r.inner_iters << ','
        << to_string(r.stop_reason) << ',' << r.wall_ms << ',' << r.seed << '\n';
    out << row.str();
  }
}

std::vector<RunRecord> read_run_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kRunRecordHeader) {
    throw ParseError("run record CSV: unexpected header");
  }
  std::vector<RunRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ParseError("run record CSV line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      RunRecord r;
      r.k = std::stoull(f[0]);
      r.loss = std::stod(f[1]);
      r.kl_step = std::stod(f[2]);
      r.fv_var = std::stod(f[3]);
      r.inner_iters = std::stoull(f[4]);
      r.stop_reason = parse_enum(f[5], kStopNames, "stop reason");
      r.wall_ms = std::stod(f[6]);
      r.seed = std::stoull(f[7]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError("run record CSV line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stopping

StopDecision stopping_check(const InnerWindow& w, const StopThresholds& t) {
  if (w.grad_norms.empty()) return {};
  if (w.grad_norms.back() < t.grad_tol) return {true, StopReason::kGradNorm};
  const auto& m = w.metric.empty() ? w.grad_norms : w.metric;
  // Steps since the watched quantity last reached a new minimum.
  std::size_t best = 0;
  for (std::size_t i = 1; i < m.size(); ++i) {
    if (m[i] < m[best]) best = i;
  }
  if (t.patience > 0 && m.size() - 1 - best >= t.patience) return {true, StopReason::kPatience};
  if (t.zeta && w.fv_variance && *w.fv_variance <= *t.zeta) return {true, StopReason::kFvVariance};
  if (w.grad_norms.size() > t.max_iters) return {true, StopReason::kMaxIters};
  return {};
}

StopDecision outer_stopping_check(double fv_variance, std::size_t k, double zeta, std::size_t burn_in) {
  if (k > burn_in && fv_variance <= zeta) return {true, StopReason::kOuterFvVariance};
  return {};
}

// ---------------------------------------------------------------------------
// Solvers

FlowModel initial_flow(const SolverConfig& c, std::size_t dim) {
  Rng rng = make_rng(c.seed, {0, kStreamInit});
  return FlowModel(BaseDistribution::isotropic(dim, c.base_variance),
                   identity_init(dim, c.blocks, c.width, rng, 0, c.hidden_layers));
}

DistillResult distill(const FlowModel& teacher, const Tensor& base, std::size_t student_blocks,
                      std::size_t width, std::size_t hidden_layers, std::size_t iters, double lr,
                      double tol, Rng& rng) {
  KLFLOW_REQUIRE(base.rows() >= 1, "distillation needs base points");
  FlowModel student(teacher.base(), identity_init(teacher.dim(), student_blocks, width, rng, 0, hidden_layers),
                    teacher.scale_range());
  const Tensor target = teacher.forward(base);
  std::vector<Tensor*> params = student.trainable_parameters();
  AdamState state = AdamState::for_parameters(params);
  std::vector<Tensor> best_params;
  DistillReport rep;
  rep.l2 = std::numeric_limits<double>::infinity();
  ad::Tape tape;
  std::vector<Tensor> grads;
  for (std::size_t it = 0; it <= iters; ++it) {
    tape.clear();
    BoundFlow bound = student.bind(tape);
    FlowPass pass = student.forward(tape, bound, tape.constant(base));
    ad::Var l2 = ad::mean(ad::sum_cols(ad::square(pass.out - tape.constant(target))));
    const double v = l2.value().item();
    if (v < rep.l2) {
      rep.l2 = v;
      rep.iters = it;
      best_params.clear();
      for (const Tensor* p : params) best_params.push_back(*p);
    }
    if (v <= tol) {
      rep.reached_tol = true;
      break;
    }
    if (it == iters) break;
    tape.backward(l2);
    grads.clear();
    for (const ad::Var& p : bound.trainable) grads.push_back(tape.grad(p));
    adam_step(params, grads, state, lr);
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = best_params[i];
  return {std::move(student), rep};
}

namespace {

using Clock = std::chrono::steady_clock;

struct Problem {
  const Functional* full = nullptr;
  std::function<const Functional&(std::size_t)> at;  // functional used at step k
  const ComposeConfig* compose = nullptr;
};

std::string context(std::size_t k, std::size_t it) {
  return "outer iteration " + std::to_string(k) + ", inner step " + std::to_string(it) + ": ";
}

SolveResult run(const Problem& pb, const SolverConfig& c, const SolveOptions& opt) {
  validate(c);
  if (pb.compose != nullptr) validate(*pb.compose);
  const std::size_t dim = pb.full->param_dim();
  SolveResult res;
  FlowModel flow = opt.resume_from != nullptr ? *opt.resume_from : initial_flow(c, dim);
  KLFLOW_REQUIRE(flow.dim() == dim, "flow and functional dimensions differ");
  flow.freeze_prefix(0);

  const std::size_t m_eval = c.eval_particles == 0 ? c.particles : c.eval_particles;
  Rng eval_rng = make_rng(c.seed, {0, kStreamEval});
  const Tensor eval_base = flow.base().sample(m_eval, eval_rng);
  Rng run_rng = make_rng(c.seed, {0, kStreamBase});
  const Tensor run_base = flow.base().sample(c.particles, run_rng);

  ad::Tape tape;
  std::vector<Tensor> grads;
  for (std::size_t k = std::max<std::size_t>(opt.start_k, 1); k <= c.outer_iters; ++k) {
    const auto t0 = Clock::now();
    const double tau = step_size(c, k);
    const double lr = learning_rate(c, k);
    const Functional& fk = pb.at(k);

    FlowModel prev = flow;
    if (pb.compose != nullptr) {
      Rng short_rng = make_rng(c.seed, {k, kStreamShort});
      flow = compose(prev, identity_init(dim, pb.compose->short_blocks, pb.compose->short_width, short_rng,
                                         prev.size(), c.hidden_layers));
    }
    Rng base_rng = make_rng(c.seed, {k, kStreamBase});
    Tensor base = c.resample == BaseResample::kPerRun ? run_base : flow.base().sample(c.particles, base_rng);
    PrefixCache cache = make_prefix_cache(flow, base);
    const SubproblemSpec spec{&fk, &prev, tau};

    std::vector<Tensor*> params = flow.trainable_parameters();
    AdamState state = AdamState::for_parameters(params);
    StopThresholds thr{c.grad_tol, c.patience, inner_zeta(c, k), c.max_inner};
    if (!c.early_stop) thr = StopThresholds{-1.0, 0, std::nullopt, c.max_inner};
    InnerTrace trace;
    trace.k = k;
    std::vector<double>& norms = trace.grad_norms;
    std::vector<double>& losses = trace.losses;
    std::vector<double> metric;
    StopDecision dec;
    std::size_t steps = 0;
    for (;; ++steps) {
      tape.clear();
      SubproblemTerms t;
      try {
        t = subproblem_loss(tape, spec, flow, cache);
        tape.backward(t.loss);
      } catch (const DomainError& e) {
        throw SolverError(context(k, steps) + "subproblem diverged: " + e.what());
      }
      grads.clear();
      for (const ad::Var& p : t.bound.trainable) grads.push_back(tape.grad(p));
      const double g = global_norm(grads);
      const double l = t.loss.value().item();
      if (!std::isfinite(g) || !std::isfinite(l)) {
        throw SolverError(context(k, steps) + "non-finite loss or gradient");
      }
      norms.push_back(g);
      losses.push_back(l);
      metric.push_back(c.patience_metric == PatienceMetric::kGradNorm ? g : l);

      std::optional<double> fv_var;
      if (thr.zeta && steps % c.fv_check_every == 0) {
        const Tensor& theta = t.theta.value();
        const auto lr_vals = t.log_rho.value().values();
        const auto lp_vals = t.log_prev.value().values();
        std::vector<double> ratio(lr_vals.size());
        for (std::size_t j = 0; j < ratio.size(); ++j) ratio[j] = lr_vals[j] - lp_vals[j];
        const std::vector<double> fv = fk.first_variation(theta, lr_vals);
        fv_var = subproblem_fv_variance(fv, ratio, tau);
        trace.fv_checks.emplace_back(steps, *fv_var);
      }
      dec = stopping_check(InnerWindow{norms, metric, fv_var}, thr);
      if (dec.stop) break;
      try {
        adam_step(params, grads, state, lr);
      } catch (const DomainError& e) {
        throw SolverError(context(k, steps) + e.what());
      }
      if (c.resample == BaseResample::kPerInner) {
        Rng inner_rng = make_rng(c.seed, {k, kStreamBase, steps + 1});
        cache = make_prefix_cache(flow, flow.base().sample(c.particles, inner_rng));
      }
    }
    if (dec.reason == StopReason::kMaxIters && c.early_stop) {
      res.converged_inner = false;
      const std::string msg = "outer iteration " + std::to_string(k) + ": inner loop reached its budget of " +
                              std::to_string(c.max_inner) + " steps";
      if (c.strict) throw SolverError(msg);
      res.warnings.push_back(msg);
    }

    if (pb.compose != nullptr && flow.size() > pb.compose->max_blocks) {
      Rng student_rng = make_rng(c.seed, {k, kStreamShort, 1});
      const std::size_t w = pb.compose->student_width == 0 ? c.width : pb.compose->student_width;
      DistillResult d = distill(flow, cache.base, pb.compose->student_blocks, w, c.hidden_layers,
                                pb.compose->distill_iters, pb.compose->distill_lr,
                                pb.compose->distill_tol, student_rng);
      d.report.k = k;
      if (!d.report.reached_tol) {
        std::ostringstream msg;
        msg << "outer iteration " << k << ": distillation stopped at L2 " << d.report.l2
            << " above tolerance " << pb.compose->distill_tol << "; keeping best student";
        res.warnings.push_back(msg.str());
      }
      res.distillations.push_back(d.report);
      flow = std::move(d.student);
    }
    flow.freeze_prefix(0);

    // Metrics on the fixed evaluation draws.
    ParticleBatch eb = push_forward(flow, eval_base);
    RunRecord rec;
    rec.k = k;
    rec.loss = pb.full->value(eb.points, eb.log_density);
    rec.fv_var = fv_variance(pb.full->first_variation(eb.points, eb.log_density));
    const std::vector<double> lp = prev.log_density(eb.points);
    std::vector<double> ratio(lp.size());
    for (std::size_t j = 0; j < lp.size(); ++j) ratio[j] = eb.log_density[j] - lp[j];
    rec.kl_step = pairwise_sum(ratio) / static_cast<double>(ratio.size());
    rec.inner_iters = steps;
    rec.stop_reason = dec.reason;
    rec.seed = c.seed;
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    res.records.push_back(rec);
    if (opt.record_traces) res.traces.push_back(std::move(trace));
    if (c.keep_trajectory) res.trajectory.push_back(flow);
    if (opt.on_iteration) opt.on_iteration(rec, flow);

    if (opt.stop_on_budget_after_burn_in && k > c.burn_in && dec.reason == StopReason::kMaxIters) break;
    if (c.outer_zeta > 0.0 && outer_stopping_check(rec.fv_var, k, c.outer_zeta, c.burn_in).stop) {
      res.outer_stop_k = k;
      break;
    }
  }
  res.flow = std::move(flow);
  return res;
}

}  // namespace

SolveResult solve_algorithm1(const Functional& f, const SolverConfig& c, const SolveOptions& opt) {
  Problem pb;
  pb.full = &f;
  pb.at = [&f](std::size_t) -> const Functional& { return f; };
  return run(pb, c, opt);
}

SolveResult solve_algorithm2(const Functional& f, const SolverConfig& c, const ComposeConfig& cc,
                             const SolveOptions& opt) {
  Problem pb;
  pb.full = &f;
  pb.at = [&f](std::size_t) -> const Functional& { return f; };
  pb.compose = &cc;
  return run(pb, c, opt);
}

SolveResult solve_stochastic(const NpmleFunctional& f, const SolverConfig& c, const StochasticConfig& sc,
                             const SolveOptions& opt) {
  KLFLOW_REQUIRE(sc.batch >= 1 && sc.batch <= f.data().n(), "mini-batch size must satisfy 1 <= m <= n");
  std::optional<NpmleFunctional> current;
  Problem pb;
  pb.full = &f;
  pb.at = [&](std::size_t k) -> const Functional& {
    Rng rng = make_rng(c.seed, {k, kStreamBatch});
    const std::vector<std::size_t> idx = minibatch_indices(f.data().n(), sc.batch, rng);
    current.emplace(f.restricted(idx));
    return *current;
  };
  return run(pb, c, opt);
}

}  // namespace klflow
