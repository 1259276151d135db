#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klflow/functionals.hpp"
#include "klflow/rng.hpp"
#include "klflow/tensor.hpp"

namespace klflow {

/// Weights on a fixed set of atoms, stored as log-weights (-inf for empty atoms).
struct SimplexDistribution {
  Tensor atoms;  // G x d
  std::vector<double> log_weights;

  static SimplexDistribution uniform(Tensor atoms);
  static SimplexDistribution from_weights(Tensor atoms, std::span<const double> weights);
  /// Strictly positive weights drawn from a flat Dirichlet.
  static SimplexDistribution random(Tensor atoms, Rng& rng);

  std::size_t size() const { return log_weights.size(); }
  std::vector<double> weights() const;
};

/// Shift log-weights so that they sum to one in weight space.
void normalize_log_weights(std::vector<double>& lw);

/// sum_j a_j log(a_j / b_j) with 0 log 0 = 0; +inf if a charges an atom b does not.
double kl_divergence(std::span<const double> log_a, std::span<const double> log_b);

/// Equally spaced tensor grid. Axis a spans [lo[a], hi[a]] with count[a] points.
Tensor tensor_grid(std::span<const double> lo, std::span<const double> hi,
                   std::span<const std::size_t> count);
/// Per-axis counts as equal as possible whose product is the largest value <= total.
std::vector<std::size_t> balanced_counts(std::size_t total, std::size_t axes);

/// A functional restricted to a finite set of atoms.
class SimplexFunctional {
 public:
  enum class Kind { kKlTarget, kNpmle };

  /// KL(. || pi) with pi proportional to exp(-V) on the atoms.
  static SimplexFunctional kl_target(const Tensor& atoms, const PotentialTarget& target);
  static SimplexFunctional kl_target(std::vector<double> log_pi);
  /// L_n with log p(X_i | atom_j) precomputed as (G x n).
  static SimplexFunctional npmle(const Tensor& atoms, const Dataset& data, const LikelihoodKernel& kernel);
  static SimplexFunctional npmle(RowMatrix log_kernel);

  /// NPMLE over a subset of the observations (mini-batch F_xi).
  SimplexFunctional restricted(std::span<const std::size_t> observations) const;
  /// F + <a, w>; shifts the first variation by a.
  SimplexFunctional with_linear(std::vector<double> a) const;

  Kind kind() const { return kind_; }
  double lambda() const { return kind_ == Kind::kKlTarget ? 1.0 : 0.0; }
  std::size_t size() const { return size_; }
  std::size_t observations() const { return static_cast<std::size_t>(log_kernel_.cols()); }
  const std::vector<double>& log_pi() const { return log_pi_; }
  const RowMatrix& log_kernel() const { return log_kernel_; }

  double value(std::span<const double> log_w) const;
  /// First variation at every atom.
  std::vector<double> first_variation(std::span<const double> log_w) const;

 private:
  Kind kind_ = Kind::kKlTarget;
  std::size_t size_ = 0;
  std::vector<double> log_pi_;
  RowMatrix log_kernel_;
  RowMatrix kernel_;  // exp(log_kernel - column max)
  std::vector<double> column_shift_;
  std::vector<double> linear_;
};

std::vector<double> simplex_fv(const SimplexFunctional& f, const SimplexDistribution& rho);

/// max - min of v over atoms whose weight is positive (all atoms if mask empty).
double oscillation(std::span<const double> v);

struct InnerOptions {
  double tol = 1e-12;           // stop once osc(eta) <= tol
  std::size_t max_iters = 20000;
  double step_scale = 1.0;      // multiplies the initial mirror step tau / (1 + tau)
};

struct StepResult {
  std::vector<double> log_w;
  std::size_t iters = 0;
  double osc = 0.0;             // osc of the residual at the returned iterate
  bool converged = false;       // false: budget exhausted, best iterate returned
  double subproblem_value = 0.0;
};

/// Residual eta = FV(rho) + (1/tau) log(rho / rho_prev) at every atom.
std::vector<double> subproblem_residual(const SimplexFunctional& f, std::span<const double> log_w,
                                        std::span<const double> log_prev, double tau);

/// argmin F(rho) + (1/tau) KL(rho || rho_prev) by mirror steps
/// log w <- log w - s eta with backtracking on the subproblem value.
StepResult implicit_step_exact(const SimplexFunctional& f, std::span<const double> log_prev, double tau,
                               const InnerOptions& opt = {});

/// rho_next proportional to pi^(tau/(1+tau)) rho_prev^(1/(1+tau)).
std::vector<double> kl_target_closed_form(std::span<const double> log_pi, std::span<const double> log_prev,
                                          double tau);

/// Slack of the one-step inequality at a computed step: rhs - lhs, where
/// lhs = F(rho_k) - F(rho) and rhs = KL(rho||rho_{k-1})/tau - (1/tau + lambda/2) KL(rho||rho_k)
///       - KL(rho_k||rho_{k-1})/tau.
double three_point_slack(const SimplexFunctional& f, std::span<const double> log_prev,
                         std::span<const double> log_next, std::span<const double> log_probe, double tau);

/// Multiplicative EM updates w <- w * (-FV); the long-run NPMLE reference.
std::vector<double> npmle_reference(const SimplexFunctional& f, std::size_t iters,
                                    std::span<const double> log_init = {});

// ---------------------------------------------------------------------------
// Bound reports

struct BoundRow {
  std::size_t k = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool satisfied = false;
  bool excluded = false;  // iteration outside the check (e.g. infeasible tolerance)
};

struct BoundReport {
  std::string name;
  std::vector<BoundRow> rows;
  std::vector<std::string> notes;
  double constant = 0.0;  // fitted constant where one applies

  bool all_satisfied() const;
};

inline constexpr std::string_view kBoundReportHeader = "k,lhs,rhs_bound,satisfied";
void write_bound_report(std::ostream& out, const BoundReport& r);

/// lhs <= rhs up to rounding.
bool bound_holds(double lhs, double rhs);

struct ExactRun {
  std::vector<std::vector<double>> log_w;  // rho_0 .. rho_K
  std::vector<double> values;              // F(rho_k)
  std::vector<StepResult> steps;           // steps[k-1] produced rho_k
};

/// K implicit steps with step sizes taus[k-1] and inner tolerances tols[k-1].
ExactRun run_iklpd(const SimplexFunctional& f, std::span<const double> log_init,
                   std::span<const double> taus, std::span<const double> tols, const InnerOptions& opt = {});

struct Theorem2Result {
  BoundReport report;
  ExactRun run;
  std::vector<double> factors;  // D_k / D_{k-1} when lambda > 0
};

/// lambda > 0: KL(rho*||rho_k) <= (1 + lambda tau/2)^-k KL(rho*||rho_0).
/// lambda = 0: min_{l<=k} F(rho_l) - F(rho*) <= KL(rho*||rho_0) / sum tau_l.
Theorem2Result verify_theorem2(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_star, std::span<const double> taus,
                               const InnerOptions& opt = {});

enum class ToleranceSchedule { kZero, kGeometric, kPolynomial };

struct Theorem4Config {
  ToleranceSchedule schedule = ToleranceSchedule::kGeometric;
  double kappa = 0.1;
  double eps = 0.5;
  double alpha = 1.0;
  double tau = 1.0;
  std::size_t steps = 50;
  double inexact_step_scale = 0.25;  // slower inner solver so the tolerance binds
  double tol_floor = 1e-13;          // below this the schedule is infeasible
};

std::vector<double> tolerance_schedule(const Theorem4Config& c);

struct Theorem4Result {
  BoundReport report;
  BoundReport calibration;
  ExactRun run;
  double tail_slope = 0.0;  // least-squares slope of log D_k against log k, second half
};

/// Inexact run with tolerances from the schedule. The constant C is fitted on
/// a calibration run from `log_calib` and frozen before checking the run from
/// `log_init`.
Theorem4Result verify_theorem4(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_calib, std::span<const double> log_star,
                               const Theorem4Config& c);

struct Theorem5Config {
  std::size_t batch = 5;        // m
  double tau = 1.0;
  std::size_t steps = 500;
  std::size_t trials = 20;
  std::size_t lipschitz_draws = 200;  // xi draws for E L^2
  std::size_t probes = 40;            // random probe pairs per draw
  std::uint64_t seed = 1;
  double lambda = 0.0;  // > 0 uses tau_k = 2/(lambda (k+1)) and a KL target with linear noise
  double noise_scale = 0.5;  // amplitude of the linear perturbation for lambda > 0
  InnerOptions inner;
};

struct Theorem5Result {
  BoundReport report;
  std::vector<double> mean_values;  // E F(rho_l), l = 0..K
  double expected_l2 = 0.0;
  double f_star = 0.0;
};

/// Mini-batch IKLPD averaged over seeded trials. For lambda = 0, `f` must be
/// an NPMLE functional and F_xi uses `batch` observations drawn without
/// replacement; for lambda > 0, F_xi = F + <a_xi, w> with zero-mean a_xi.
Theorem5Result verify_theorem5(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_star, const Theorem5Config& c);

struct KlgfResult {
  std::vector<double> times;
  std::vector<double> kl_star;      // KL(rho* || rho_t)
  std::vector<double> values;       // F(rho_t)
  std::vector<double> avg_values;   // F(rho-bar_t)
  std::vector<double> log_w_final;
  double dt_used = 0.0;
  std::vector<std::string> warnings;
};

/// Explicit Euler for d/dt log rho = -(FV - <FV>_rho), renormalised each step.
KlgfResult integrate_klgf(const SimplexFunctional& f, std::span<const double> log_init,
                          std::span<const double> log_star, double dt, double horizon,
                          std::size_t record_every = 1);

/// Continuous-time bounds on a KLGF trajectory: exp(-lambda t/2) D0 or D0/t.
BoundReport verify_theorem1(const SimplexFunctional& f, const KlgfResult& traj,
                            std::span<const double> log_init, std::span<const double> log_star);

struct KwResult {
  std::vector<std::vector<double>> weights;  // w_0 .. w_K
  std::vector<double> values;
  std::vector<double> step_used;
};

/// Fixed-grid explicit Fisher-Rao steps w <- w (1 - tau (FV - <FV>)) from uniform
/// weights, with tau halved whenever a step would leave the simplex or raise L_n.
KwResult kw_grid_solver(const SimplexFunctional& f, double tau, std::size_t steps,
                        std::size_t record_every = 1);

}  // namespace klflow
