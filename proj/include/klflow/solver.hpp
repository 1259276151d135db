#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "klflow/flow.hpp"
#include "klflow/functionals.hpp"

namespace klflow {

enum class LrSchedule {
  kGeometric,      // gamma * beta1^(k-1)
  kHarmonic,       // 20 gamma / (19 + k)
  kInverseLinear,  // gamma / (1 + k / 27)
};

enum class TauSchedule {
  kGeometric,       // tau * beta2^(k-1)
  kConstant,        // tau
  kInverseSqrt,     // tau / sqrt(k + 1)
  kStronglyConvex,  // 2 / (lambda (k + 1))
};

enum class ZetaSchedule {
  kNone,      // no inner variance criterion
  kConstant,  // zeta0
  kHarmonic,  // zeta0 * 20 / (19 + k)
};

enum class BaseResample { kPerRun, kPerOuter, kPerInner };

/// What "stops decreasing" tracks for the patience rule.
enum class PatienceMetric { kGradNorm, kLoss };

enum class StopReason { kNone, kGradNorm, kPatience, kFvVariance, kMaxIters, kDiverged, kOuterFvVariance };

std::string_view to_string(StopReason r);
std::string_view to_string(LrSchedule s);
std::string_view to_string(TauSchedule s);
std::string_view to_string(ZetaSchedule s);
std::string_view to_string(BaseResample s);
std::string_view to_string(PatienceMetric s);
LrSchedule parse_lr_schedule(std::string_view s);
TauSchedule parse_tau_schedule(std::string_view s);
ZetaSchedule parse_zeta_schedule(std::string_view s);
BaseResample parse_base_resample(std::string_view s);
PatienceMetric parse_patience_metric(std::string_view s);

struct SolverConfig {
  // Step sizes and learning rates.
  double tau = 5.0;
  double beta2 = 1.15;
  TauSchedule tau_schedule = TauSchedule::kGeometric;
  double lambda = 1.0;  // only for kStronglyConvex
  double gamma = 1e-4;
  double beta1 = 0.912;
  LrSchedule lr_schedule = LrSchedule::kGeometric;

  std::size_t outer_iters = 25;  // N1
  std::size_t max_inner = 1000;  // N2
  std::size_t particles = 3000;  // M

  // Inner stopping.
  double grad_tol = 1e-4;
  std::size_t patience = 200;
  PatienceMetric patience_metric = PatienceMetric::kGradNorm;
  ZetaSchedule zeta_schedule = ZetaSchedule::kNone;
  double zeta0 = 0.07;
  std::size_t fv_check_every = 10;
  bool early_stop = true;  // false runs every inner loop to max_inner

  // Outer stopping on the first-variation variance; 0 disables.
  double outer_zeta = 0.0;
  std::size_t burn_in = 2;

  // Flow.
  std::size_t blocks = 10;
  std::size_t width = 64;
  std::size_t hidden_layers = 2;
  double base_variance = 4.0;

  BaseResample resample = BaseResample::kPerOuter;
  std::size_t eval_particles = 0;  // 0: same as particles
  bool keep_trajectory = false;
  bool strict = false;
  std::uint64_t seed = 0;

  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

struct ComposeConfig {
  std::size_t short_blocks = 4;    // k2
  std::size_t max_blocks = 40;     // k1
  std::size_t student_blocks = 20; // k0
  std::size_t distill_iters = 3000;  // N3
  double distill_lr = 1e-5;        // gamma'
  double distill_tol = 1e-4;       // epsilon
  std::size_t short_width = 512;
  std::size_t student_width = 0;   // 0: same as SolverConfig::width

  friend bool operator==(const ComposeConfig&, const ComposeConfig&) = default;
};

struct StochasticConfig {
  std::size_t batch = 500;  // m

  friend bool operator==(const StochasticConfig&, const StochasticConfig&) = default;
};

double step_size(const SolverConfig& c, std::size_t k);
double learning_rate(const SolverConfig& c, std::size_t k);
/// Inner first-variation variance threshold, or nullopt when disabled.
std::optional<double> inner_zeta(const SolverConfig& c, std::size_t k);
void validate(const SolverConfig& c);
void validate(const ComposeConfig& c);

/// One row per completed outer iteration.
struct RunRecord {
  std::size_t k = 0;
  double loss = 0.0;
  double kl_step = 0.0;
  double fv_var = 0.0;
  std::size_t inner_iters = 0;
  StopReason stop_reason = StopReason::kNone;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kRunRecordHeader =
    "k,loss,kl_step,fv_var,inner_iters,stop_reason,wall_ms,seed";

void write_run_records(std::ostream& out, std::span<const RunRecord> records);
std::vector<RunRecord> read_run_records(std::istream& in);

// ---------------------------------------------------------------------------
// Stopping rules

struct StopThresholds {
  double grad_tol = 1e-4;
  std::size_t patience = 200;
  std::optional<double> zeta;  // inner fv-variance threshold
  std::size_t max_iters = 1000;
};

/// Inner-loop history. `metric` is what the patience rule watches (gradient
/// norms by default); fv_variance is set only on steps where it was measured.
struct InnerWindow {
  std::span<const double> grad_norms;
  std::span<const double> metric;
  std::optional<double> fv_variance;
};

struct StopDecision {
  bool stop = false;
  StopReason reason = StopReason::kNone;
};

/// First satisfied criterion among grad-norm, patience, fv-variance, budget.
StopDecision stopping_check(const InnerWindow& window, const StopThresholds& t);
/// Outer rule: fv-variance <= zeta once the burn-in iterations have passed.
StopDecision outer_stopping_check(double fv_variance, std::size_t k, double zeta,
                                  std::size_t burn_in);

// ---------------------------------------------------------------------------
// Solvers

struct DistillReport {
  std::size_t k = 0;
  std::size_t iters = 0;
  double l2 = 0.0;
  bool reached_tol = false;
};

struct InnerTrace {
  std::size_t k = 0;
  std::vector<double> grad_norms;
  std::vector<double> losses;
  // (step, measured fv variance) at each check.
  std::vector<std::pair<std::size_t, double>> fv_checks;
};

struct SolveResult {
  FlowModel flow;
  std::vector<RunRecord> records;
  std::vector<FlowModel> trajectory;  // filled when keep_trajectory
  std::vector<DistillReport> distillations;
  std::vector<InnerTrace> traces;
  std::vector<std::string> warnings;
  bool converged_inner = true;  // false if any inner loop hit its budget
  std::size_t outer_stop_k = 0;  // iteration where the outer rule fired, 0 if never
};

/// Hooks for resuming and observing a run.
struct SolveOptions {
  const FlowModel* resume_from = nullptr;  // flow after outer iteration start_k - 1
  std::size_t start_k = 1;
  std::function<void(const RunRecord&, const FlowModel&)> on_iteration;
  bool record_traces = false;
  /// End the run once an inner loop exhausts its budget after the burn-in.
  bool stop_on_budget_after_burn_in = false;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Identity-initialised flow for the config's architecture.
FlowModel initial_flow(const SolverConfig& c, std::size_t dim);

/// Algorithm 1: warm-start T^(k) = T^(k-1) and retrain the whole flow each step.
SolveResult solve_algorithm1(const Functional& f, const SolverConfig& c,
                             const SolveOptions& opt = {});
/// Algorithm 2: append an identity short flow each step, train only it, and
/// distil into a fresh student whenever the stack grows past k1.
SolveResult solve_algorithm2(const Functional& f, const SolverConfig& c, const ComposeConfig& cc,
                             const SolveOptions& opt = {});
/// Mini-batch IKLPD: F_xi over m observations resampled each outer step.
SolveResult solve_stochastic(const NpmleFunctional& f, const SolverConfig& c,
                             const StochasticConfig& sc, const SolveOptions& opt = {});

/// Student of `student_blocks` blocks trained to match teacher outputs on
/// `base` (mean squared L2). Keeps the best iterate.
struct DistillResult {
  FlowModel student;
  DistillReport report;
};
DistillResult distill(const FlowModel& teacher, const Tensor& base, std::size_t student_blocks,
                      std::size_t width, std::size_t hidden_layers, std::size_t iters, double lr,
                      double tol, Rng& rng);

/// Loss-evaluation stream ids, shared with the harness so metrics line up.
inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamBase = 2;
inline constexpr std::uint64_t kStreamEval = 3;
inline constexpr std::uint64_t kStreamBatch = 4;
inline constexpr std::uint64_t kStreamShort = 5;

}  // namespace klflow
