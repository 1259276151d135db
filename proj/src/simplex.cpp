#include "klflow/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "klflow/error.hpp"

namespace klflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_sum_exp(std::span<const double> v) {
  double c = -kInf;
  for (double x : v) c = std::max(c, x);
  if (!std::isfinite(c)) return c;
  double s = 0.0;
  for (double x : v) s += std::exp(x - c);
  return c + std::log(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

std::vector<double> exp_weights(std::span<const double> lw) {
  std::vector<double> w(lw.size());
  for (std::size_t j = 0; j < lw.size(); ++j) w[j] = std::exp(lw[j]);
  return w;
}

std::vector<double> log_of(std::span<const double> w) {
  std::vector<double> lw(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) lw[j] = w[j] > 0.0 ? std::log(w[j]) : -kInf;
  return lw;
}

double subproblem_value(const SimplexFunctional& f, std::span<const double> lw,
                        std::span<const double> lp, double tau) {
  return f.value(lw) + kl_divergence(lw, lp) / tau;
}

// Flat Dirichlet draw as log-weights.
std::vector<double> random_log_weights(std::size_t g, Rng& rng) {
  std::vector<double> w(g);
  for (auto& x : w) x = -std::log(1.0 - uniform01(rng));
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= s;
  return log_of(w);
}

double min_so_far_gap(std::span<const double> values, std::size_t first, std::size_t last, double f_star) {
  double m = kInf;
  for (std::size_t l = first; l <= last; ++l) m = std::min(m, values[l]);
  return m - f_star;
}

}  // namespace

// ---------------------------------------------------------------------------
// Distributions

void normalize_log_weights(std::vector<double>& lw) {
  KLFLOW_REQUIRE(!lw.empty(), "weights must be nonempty");
  for (double x : lw) {
    if (std::isnan(x) || x == kInf) throw DomainError("log-weights contain NaN or +inf");
  }
  const double z = log_sum_exp(lw);
  if (!std::isfinite(z)) throw DomainError("weights have zero total mass");
  for (auto& x : lw) x -= z;
}

SimplexDistribution SimplexDistribution::uniform(Tensor atoms) {
  const std::size_t g = atoms.rows();
  KLFLOW_REQUIRE(g >= 1, "grid must have at least one atom");
  return {std::move(atoms), std::vector<double>(g, -std::log(static_cast<double>(g)))};
}

SimplexDistribution SimplexDistribution::from_weights(Tensor atoms, std::span<const double> weights) {
  KLFLOW_REQUIRE(weights.size() == atoms.rows(), "one weight per atom");
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("weights must be finite and nonnegative");
  }
  auto lw = log_of(weights);
  normalize_log_weights(lw);
  return {std::move(atoms), std::move(lw)};
}

SimplexDistribution SimplexDistribution::random(Tensor atoms, Rng& rng) {
  const std::size_t g = atoms.rows();
  KLFLOW_REQUIRE(g >= 1, "grid must have at least one atom");
  return {std::move(atoms), random_log_weights(g, rng)};
}

std::vector<double> SimplexDistribution::weights() const { return exp_weights(log_weights); }

double kl_divergence(std::span<const double> log_a, std::span<const double> log_b) {
  KLFLOW_REQUIRE(log_a.size() == log_b.size(), "KL needs weight vectors of equal length");
  // Termwise nonnegative form sum a (d + e^-d - 1) + sum_{a=0} b, d = log(a/b).
  // Equal to the usual sum for normalised inputs but free of cancellation
  // when a and b nearly agree.
  double s = 0.0;
  for (std::size_t j = 0; j < log_a.size(); ++j) {
    if (log_a[j] == -kInf) {
      s += std::exp(log_b[j]);
      continue;
    }
    if (log_b[j] == -kInf) return kInf;
    const double d = log_a[j] - log_b[j];
    if (d < -1.0) {
      s += std::exp(log_a[j]) * (d - 1.0) + std::exp(log_b[j]);  // e^-d may overflow
      continue;
    }
    const double g = std::abs(d) < 1e-3 ? d * d * (0.5 - d * (1.0 / 6.0 - d * (1.0 / 24.0 - d / 120.0)))
                                        : d + std::expm1(-d);
    s += std::exp(log_a[j]) * g;
  }
  return s;
}

Tensor tensor_grid(std::span<const double> lo, std::span<const double> hi,
                   std::span<const std::size_t> count) {
  const std::size_t d = lo.size();
  KLFLOW_REQUIRE(d >= 1 && hi.size() == d && count.size() == d, "grid bounds must share one dimension");
  std::size_t total = 1;
  for (std::size_t a = 0; a < d; ++a) {
    KLFLOW_REQUIRE(count[a] >= 1, "every grid axis needs at least one point");
    KLFLOW_REQUIRE(hi[a] >= lo[a], "grid axis upper bound below lower bound");
    total *= count[a];
  }
  Tensor out(total, d);
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t r = 0; r < total; ++r) {
    for (std::size_t a = 0; a < d; ++a) {
      out(r, a) = count[a] == 1 ? 0.5 * (lo[a] + hi[a])
                                : lo[a] + (hi[a] - lo[a]) * static_cast<double>(idx[a]) /
                                              static_cast<double>(count[a] - 1);
    }
    for (std::size_t a = d; a-- > 0;) {  // last axis fastest
      if (++idx[a] < count[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

std::vector<std::size_t> balanced_counts(std::size_t total, std::size_t axes) {
  KLFLOW_REQUIRE(total >= 1 && axes >= 1, "grid needs a positive size and dimension");
  auto c = static_cast<std::size_t>(std::floor(std::pow(static_cast<double>(total), 1.0 / static_cast<double>(axes))));
  auto pow_le = [&](std::size_t base) {
    double p = 1.0;
    for (std::size_t a = 0; a < axes; ++a) p *= static_cast<double>(base);
    return p <= static_cast<double>(total);
  };
  while (c > 1 && !pow_le(c)) --c;
  while (pow_le(c + 1)) ++c;
  c = std::max<std::size_t>(c, 1);
  std::vector<std::size_t> counts(axes, c);
  std::size_t product = 1;
  for (auto v : counts) product *= v;
  for (std::size_t a = 0; a < axes; ++a) {
    if (product / c * (c + 1) > total) break;
    product = product / c * (c + 1);
    counts[a] = c + 1;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Functionals on the simplex

SimplexFunctional SimplexFunctional::kl_target(const Tensor& atoms, const PotentialTarget& target) {
  std::vector<double> lp(atoms.rows());
  for (std::size_t j = 0; j < atoms.rows(); ++j) lp[j] = -target.potential(atoms.row_span(j));
  return kl_target(std::move(lp));
}

SimplexFunctional SimplexFunctional::kl_target(std::vector<double> log_pi) {
  KLFLOW_REQUIRE(!log_pi.empty(), "target needs at least one atom");
  for (double x : log_pi) {
    if (!std::isfinite(x)) throw DomainError("target log-density must be finite on the grid");
  }
  normalize_log_weights(log_pi);
  SimplexFunctional f;
  f.kind_ = Kind::kKlTarget;
  f.size_ = log_pi.size();
  f.log_pi_ = std::move(log_pi);
  return f;
}

SimplexFunctional SimplexFunctional::npmle(const Tensor& atoms, const Dataset& data,
                                           const LikelihoodKernel& kernel) {
  return npmle(kernel.log_kernel(data, atoms));
}

SimplexFunctional SimplexFunctional::npmle(RowMatrix log_kernel) {
  KLFLOW_REQUIRE(log_kernel.rows() >= 1 && log_kernel.cols() >= 1, "kernel matrix must be nonempty");
  SimplexFunctional f;
  f.kind_ = Kind::kNpmle;
  f.size_ = static_cast<std::size_t>(log_kernel.rows());
  f.column_shift_.resize(static_cast<std::size_t>(log_kernel.cols()));
  f.kernel_.resize(log_kernel.rows(), log_kernel.cols());
  for (Eigen::Index i = 0; i < log_kernel.cols(); ++i) {
    const double c = log_kernel.col(i).maxCoeff();
    if (!std::isfinite(c)) {
      throw DomainError("kernel column " + std::to_string(i) + " has no finite entry");
    }
    f.column_shift_[static_cast<std::size_t>(i)] = c;
    f.kernel_.col(i) = (log_kernel.col(i).array() - c).exp().matrix();
  }
  f.log_kernel_ = std::move(log_kernel);
  return f;
}

SimplexFunctional SimplexFunctional::restricted(std::span<const std::size_t> observations) const {
  KLFLOW_REQUIRE(kind_ == Kind::kNpmle, "only NPMLE functionals have observations");
  KLFLOW_REQUIRE(!observations.empty(), "restriction needs at least one observation");
  RowMatrix lk(log_kernel_.rows(), static_cast<Eigen::Index>(observations.size()));
  for (std::size_t c = 0; c < observations.size(); ++c) {
    KLFLOW_REQUIRE(observations[c] < this->observations(), "observation index out of range");
    lk.col(static_cast<Eigen::Index>(c)) = log_kernel_.col(static_cast<Eigen::Index>(observations[c]));
  }
  auto out = npmle(std::move(lk));
  out.linear_ = linear_;
  return out;
}

SimplexFunctional SimplexFunctional::with_linear(std::vector<double> a) const {
  KLFLOW_REQUIRE(a.size() == size_, "linear term needs one coefficient per atom");
  SimplexFunctional out = *this;
  if (out.linear_.empty()) {
    out.linear_ = std::move(a);
  } else {
    for (std::size_t j = 0; j < size_; ++j) out.linear_[j] += a[j];
  }
  return out;
}

double SimplexFunctional::value(std::span<const double> log_w) const {
  KLFLOW_REQUIRE(log_w.size() == size_, "weights do not match the grid");
  const auto w = exp_weights(log_w);
  double v = 0.0;
  if (kind_ == Kind::kKlTarget) {
    v = kl_divergence(log_w, log_pi_);
  } else {
    const Eigen::Map<const Eigen::RowVectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
    const Eigen::RowVectorXd m = wv * kernel_;
    std::vector<double> terms(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (!(m[i] > 0.0)) throw DomainError("mixture density vanishes at observation " + std::to_string(i));
      terms[static_cast<std::size_t>(i)] = std::log(m[i]) + column_shift_[static_cast<std::size_t>(i)];
    }
    v = -pairwise_sum(terms) / static_cast<double>(terms.size());
  }
  if (!linear_.empty()) v += dot(linear_, w);
  return v;
}

std::vector<double> SimplexFunctional::first_variation(std::span<const double> log_w) const {
  KLFLOW_REQUIRE(log_w.size() == size_, "weights do not match the grid");
  std::vector<double> fv(size_);
  if (kind_ == Kind::kKlTarget) {
    for (std::size_t j = 0; j < size_; ++j) {
      if (log_w[j] == -kInf) throw DomainError("KL first variation undefined at a zero-weight atom");
      fv[j] = log_w[j] - log_pi_[j] + 1.0;
    }
  } else {
    const auto w = exp_weights(log_w);
    const Eigen::Map<const Eigen::RowVectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
    Eigen::RowVectorXd m = wv * kernel_;
    const double n = static_cast<double>(m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (!(m[i] > 0.0)) throw DomainError("mixture density vanishes at observation " + std::to_string(i));
      m[i] = 1.0 / (n * m[i]);
    }
    const Eigen::VectorXd g = kernel_ * m.transpose();
    for (std::size_t j = 0; j < size_; ++j) fv[j] = -g[static_cast<Eigen::Index>(j)];
  }
  if (!linear_.empty()) {
    for (std::size_t j = 0; j < size_; ++j) fv[j] += linear_[j];
  }
  return fv;
}

std::vector<double> simplex_fv(const SimplexFunctional& f, const SimplexDistribution& rho) {
  return f.first_variation(rho.log_weights);
}

double oscillation(std::span<const double> v) {
  KLFLOW_REQUIRE(!v.empty(), "oscillation of an empty vector");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

// ---------------------------------------------------------------------------
// Implicit steps

std::vector<double> subproblem_residual(const SimplexFunctional& f, std::span<const double> log_w,
                                        std::span<const double> log_prev, double tau) {
  KLFLOW_REQUIRE(tau > 0.0, "step size must be positive");
  auto eta = f.first_variation(log_w);
  for (std::size_t j = 0; j < eta.size(); ++j) eta[j] += (log_w[j] - log_prev[j]) / tau;
  return eta;
}

StepResult implicit_step_exact(const SimplexFunctional& f, std::span<const double> log_prev, double tau,
                               const InnerOptions& opt) {
  KLFLOW_REQUIRE(tau > 0.0 && std::isfinite(tau), "step size must be positive and finite");
  KLFLOW_REQUIRE(opt.step_scale > 0.0 && opt.step_scale <= 1.0, "step scale must be in (0, 1]");
  KLFLOW_REQUIRE(log_prev.size() == f.size(), "previous iterate does not match the grid");
  for (double x : log_prev) {
    if (!std::isfinite(x)) throw DomainError("implicit step needs strictly positive previous weights");
  }
  // Phi = F + KL(.||prev)/tau is (1 + 1/tau)-smooth relative to entropy for
  // both functional kinds, so tau/(1+tau) is a safe mirror step.
  const double s0 = opt.step_scale * tau / (1.0 + tau);

  std::vector<double> lw(log_prev.begin(), log_prev.end());
  StepResult best;
  best.osc = kInf;
  double phi = subproblem_value(f, lw, log_prev, tau);
  std::vector<double> cand(lw.size());
  for (std::size_t it = 0;; ++it) {
    const auto eta = subproblem_residual(f, lw, log_prev, tau);
    const double osc = oscillation(eta);
    if (osc < best.osc) {
      best.log_w = lw;
      best.osc = osc;
      best.iters = it;
      best.subproblem_value = phi;
    }
    if (osc <= opt.tol) {
      best.converged = true;
      return best;
    }
    if (it >= opt.max_iters) break;

    const auto w = exp_weights(lw);
    double s = s0;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      for (std::size_t j = 0; j < lw.size(); ++j) cand[j] = lw[j] - s * eta[j];
      normalize_log_weights(cand);
      const double phi_new = subproblem_value(f, cand, log_prev, tau);
      const auto wn = exp_weights(cand);
      double lin = 0.0;
      for (std::size_t j = 0; j < lw.size(); ++j) lin += eta[j] * (wn[j] - w[j]);
      const double model = phi + lin + kl_divergence(cand, lw) / s;
      const double slack = 64.0 * std::numeric_limits<double>::epsilon() * (std::abs(phi) + std::abs(phi_new) + 1.0);
      if (phi_new <= model + slack) {
        accepted = true;
        phi = phi_new;
        lw.swap(cand);
        break;
      }
      s *= 0.5;
    }
    if (!accepted) break;  // rounding floor reached
  }
  best.converged = best.osc <= opt.tol;
  return best;
}

std::vector<double> kl_target_closed_form(std::span<const double> log_pi, std::span<const double> log_prev,
                                          double tau) {
  KLFLOW_REQUIRE(log_pi.size() == log_prev.size(), "target and previous iterate differ in size");
  KLFLOW_REQUIRE(tau > 0.0, "step size must be positive");
  const double a = tau / (1.0 + tau);
  std::vector<double> out(log_pi.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = a * log_pi[j] + (1.0 - a) * log_prev[j];
  normalize_log_weights(out);
  return out;
}

double three_point_slack(const SimplexFunctional& f, std::span<const double> log_prev,
                         std::span<const double> log_next, std::span<const double> log_probe, double tau) {
  const double lhs = f.value(log_next) - f.value(log_probe);
  const double rhs = kl_divergence(log_probe, log_prev) / tau -
                     (1.0 / tau + f.lambda() / 2.0) * kl_divergence(log_probe, log_next) -
                     kl_divergence(log_next, log_prev) / tau;
  return rhs - lhs;
}

std::vector<double> npmle_reference(const SimplexFunctional& f, std::size_t iters,
                                    std::span<const double> log_init) {
  KLFLOW_REQUIRE(f.kind() == SimplexFunctional::Kind::kNpmle, "reference solve is for NPMLE functionals");
  const std::size_t g = f.size();
  std::vector<double> lw;
  if (log_init.empty()) {
    lw.assign(g, -std::log(static_cast<double>(g)));
  } else {
    KLFLOW_REQUIRE(log_init.size() == g, "initial weights do not match the grid");
    lw.assign(log_init.begin(), log_init.end());
  }
  // Multiplicative updates stay in weight space: 1e5 sweeps cost two mat-vecs each.
  const RowMatrix& lk = f.log_kernel();
  RowMatrix kernel(lk.rows(), lk.cols());
  for (Eigen::Index i = 0; i < lk.cols(); ++i) kernel.col(i) = (lk.col(i).array() - lk.col(i).maxCoeff()).exp().matrix();
  Eigen::VectorXd w(static_cast<Eigen::Index>(g));
  for (std::size_t j = 0; j < g; ++j) w[static_cast<Eigen::Index>(j)] = std::exp(lw[j]);
  w /= w.sum();
  const double n = static_cast<double>(lk.cols());
  Eigen::RowVectorXd m(lk.cols());
  for (std::size_t it = 0; it < iters; ++it) {
    m.noalias() = w.transpose() * kernel;
    m = (n * m.array()).inverse().matrix();
    w = w.cwiseProduct(kernel * m.transpose());
    w /= w.sum();
  }
  std::vector<double> out(g);
  for (std::size_t j = 0; j < g; ++j) out[j] = std::log(w[static_cast<Eigen::Index>(j)]);
  normalize_log_weights(out);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

bool BoundReport::all_satisfied() const {
  return std::all_of(rows.begin(), rows.end(), [](const BoundRow& r) { return r.excluded || r.satisfied; });
}

bool bound_holds(double lhs, double rhs) {
  if (std::isnan(lhs) || std::isnan(rhs)) return false;
  return lhs <= rhs + 1e-12 + 1e-9 * std::abs(rhs);
}

void write_bound_report(std::ostream& out, const BoundReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << kBoundReportHeader << '\n';
  for (const auto& row : r.rows) {
    s << row.k << ',' << row.lhs << ',' << row.rhs << ',' << (row.excluded ? "excluded" : row.satisfied ? "1" : "0")
      << '\n';
  }
  out << s.str();
}

ExactRun run_iklpd(const SimplexFunctional& f, std::span<const double> log_init,
                   std::span<const double> taus, std::span<const double> tols, const InnerOptions& opt) {
  KLFLOW_REQUIRE(taus.size() == tols.size(), "one tolerance per step");
  ExactRun run;
  run.log_w.emplace_back(log_init.begin(), log_init.end());
  normalize_log_weights(run.log_w.back());
  run.values.push_back(f.value(run.log_w.back()));
  for (std::size_t k = 0; k < taus.size(); ++k) {
    InnerOptions o = opt;
    o.tol = tols[k];
    auto step = implicit_step_exact(f, run.log_w.back(), taus[k], o);
    run.log_w.push_back(step.log_w);
    run.values.push_back(f.value(step.log_w));
    run.steps.push_back(std::move(step));
  }
  return run;
}

Theorem2Result verify_theorem2(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_star, std::span<const double> taus,
                               const InnerOptions& opt) {
  Theorem2Result res;
  const std::vector<double> tols(taus.size(), opt.tol);
  res.run = run_iklpd(f, log_init, taus, tols, opt);
  const double lambda = f.lambda();
  const double d0 = kl_divergence(log_star, res.run.log_w.front());
  const double f_star = f.value(log_star);
  res.report.name = lambda > 0.0 ? "exact contraction" : "exact sublinear";
  double factor = 1.0;
  double tau_sum = 0.0;
  double prev_d = d0;
  for (std::size_t k = 0; k < res.run.log_w.size(); ++k) {
    BoundRow row;
    row.k = k;
    if (k > 0) {
      factor /= 1.0 + lambda * taus[k - 1] / 2.0;
      tau_sum += taus[k - 1];
      if (!res.run.steps[k - 1].converged) {
        res.report.notes.push_back("step " + std::to_string(k) + " stopped at osc " +
                                   std::to_string(res.run.steps[k - 1].osc));
      }
    }
    if (lambda > 0.0) {
      row.lhs = kl_divergence(log_star, res.run.log_w[k]);
      row.rhs = factor * d0;
      if (k > 0) res.factors.push_back(prev_d > 0.0 ? row.lhs / prev_d : 0.0);
      prev_d = row.lhs;
    } else {
      row.lhs = min_so_far_gap(res.run.values, k == 0 ? 0 : 1, k, f_star);
      row.rhs = k == 0 ? kInf : d0 / tau_sum;
    }
    row.satisfied = bound_holds(row.lhs, row.rhs);
    res.report.rows.push_back(row);
  }
  return res;
}

std::vector<double> tolerance_schedule(const Theorem4Config& c) {
  std::vector<double> out(c.steps);
  for (std::size_t k = 1; k <= c.steps; ++k) {
    const double kd = static_cast<double>(k);
    switch (c.schedule) {
      case ToleranceSchedule::kZero: out[k - 1] = 0.0; break;
      case ToleranceSchedule::kGeometric: out[k - 1] = c.kappa * std::pow(c.eps, kd); break;
      case ToleranceSchedule::kPolynomial: out[k - 1] = c.eps * std::pow(kd, -c.alpha); break;
    }
  }
  return out;
}

namespace {

struct Theorem4Run {
  ExactRun run;
  std::vector<bool> excluded;  // per row k = 0..K
};

Theorem4Run theorem4_run(const SimplexFunctional& f, std::span<const double> log_init, const Theorem4Config& c) {
  const std::vector<double> taus(c.steps, c.tau);
  Theorem4Run out;
  InnerOptions opt;
  auto tols = tolerance_schedule(c);
  std::vector<bool> infeasible(c.steps, false);
  if (c.schedule == ToleranceSchedule::kZero) {
    std::fill(tols.begin(), tols.end(), opt.tol);
  } else {
    opt.step_scale = c.inexact_step_scale;
    for (std::size_t k = 0; k < c.steps; ++k) {
      if (tols[k] < c.tol_floor) {
        infeasible[k] = true;
        tols[k] = c.tol_floor;
      }
    }
  }
  out.run = run_iklpd(f, log_init, taus, tols, opt);
  out.excluded.assign(c.steps + 1, false);
  for (std::size_t k = 1; k <= c.steps; ++k) {
    out.excluded[k] = infeasible[k - 1] || !out.run.steps[k - 1].converged;
  }
  return out;
}

// Envelope without its C term, and the multiplier of C.
std::pair<double, double> theorem4_envelope(const Theorem4Config& c, double lambda, double d0, std::size_t k) {
  const double kd = static_cast<double>(k);
  const double q = 1.0 + lambda * c.tau / 2.0;
  if (c.schedule == ToleranceSchedule::kPolynomial) {
    const double base = 2.0 * d0 * std::pow(q, -kd);
    return {base, k == 0 ? 0.0 : c.eps * c.eps * std::pow(kd, -2.0 * c.alpha)};
  }
  const double rate = std::min(1.0 / (c.eps * c.eps), q);
  const double scale = std::pow(rate, -kd);
  if (c.schedule == ToleranceSchedule::kZero) return {d0 * std::pow(q, -kd), 0.0};
  return {2.0 * d0 * scale, c.kappa * c.kappa * scale};
}

}  // namespace

Theorem4Result verify_theorem4(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_calib, std::span<const double> log_star,
                               const Theorem4Config& c) {
  KLFLOW_REQUIRE(f.lambda() > 0.0, "inexact-step bounds need a strongly convex target");
  KLFLOW_REQUIRE(c.steps >= 1, "need at least one step");
  if (c.schedule == ToleranceSchedule::kGeometric) {
    KLFLOW_REQUIRE(std::abs(c.eps * std::sqrt(1.0 + f.lambda() * c.tau / 2.0) - 1.0) > 1e-12,
                   "geometric schedule needs eps sqrt(1 + lambda tau / 2) != 1");
  }
  const double lambda = f.lambda();
  Theorem4Result res;

  // Fit C on the calibration run.
  const auto calib = theorem4_run(f, log_calib, c);
  const double d0c = kl_divergence(log_star, calib.run.log_w.front());
  double cfit = 0.0;
  res.calibration.name = "calibration";
  for (std::size_t k = 0; k <= c.steps; ++k) {
    const double d = kl_divergence(log_star, calib.run.log_w[k]);
    const auto [base, mult] = theorem4_envelope(c, lambda, d0c, k);
    if (!calib.excluded[k] && mult > 0.0) cfit = std::max(cfit, (d - base) / mult);
    BoundRow row{k, d, base, bound_holds(d, base), calib.excluded[k]};
    res.calibration.rows.push_back(row);
  }
  res.calibration.constant = cfit;

  auto verify = theorem4_run(f, log_init, c);
  res.run = std::move(verify.run);
  res.report.name = c.schedule == ToleranceSchedule::kPolynomial ? "inexact polynomial"
                    : c.schedule == ToleranceSchedule::kGeometric ? "inexact geometric"
                                                                  : "inexact zero";
  res.report.constant = cfit;
  const double d0 = kl_divergence(log_star, res.run.log_w.front());
  std::size_t n_excluded = 0;
  std::vector<double> lx, ly;
  for (std::size_t k = 0; k <= c.steps; ++k) {
    const double d = kl_divergence(log_star, res.run.log_w[k]);
    const auto [base, mult] = theorem4_envelope(c, lambda, d0, k);
    BoundRow row{k, d, base + cfit * mult, false, verify.excluded[k]};
    row.satisfied = bound_holds(row.lhs, row.rhs);
    if (row.excluded) ++n_excluded;
    res.report.rows.push_back(row);
    if (k >= std::max<std::size_t>(1, c.steps / 2) && !row.excluded && d > 0.0) {
      lx.push_back(std::log(static_cast<double>(k)));
      ly.push_back(std::log(d));
    }
  }
  if (n_excluded > 0) {
    res.report.notes.push_back(std::to_string(n_excluded) +
                               " iterations excluded: tolerance below the inner solver's floor or budget exhausted");
  }
  if (lx.size() >= 2) {
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sxy += (lx[i] - mx) * (ly[i] - my);
      sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    res.tail_slope = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return res;
}

Theorem5Result verify_theorem5(const SimplexFunctional& f, std::span<const double> log_init,
                               std::span<const double> log_star, const Theorem5Config& c) {
  const bool strong = c.lambda > 0.0;
  if (!strong) {
    KLFLOW_REQUIRE(f.kind() == SimplexFunctional::Kind::kNpmle, "lambda = 0 run needs an NPMLE functional");
    KLFLOW_REQUIRE(c.batch >= 1 && c.batch <= f.observations(), "batch size out of range");
  } else {
    KLFLOW_REQUIRE(f.lambda() >= c.lambda, "functional is not that strongly convex");
  }
  KLFLOW_REQUIRE(c.trials >= 1 && c.steps >= 1, "need at least one trial and step");
  const std::size_t g = f.size();

  auto draw = [&](Rng& rng) {
    if (!strong) return f.restricted(minibatch_indices(f.observations(), c.batch, rng));
    std::vector<double> a(g);
    for (auto& x : a) x = c.noise_scale * standard_normal(rng);
    return f.with_linear(std::move(a));
  };
  auto tau_k = [&](std::size_t k) {
    const double kd = static_cast<double>(k);
    return strong ? 2.0 / (c.lambda * (kd + 1.0)) : c.tau / std::sqrt(kd + 1.0);
  };

  Theorem5Result res;
  res.mean_values.assign(c.steps + 1, 0.0);
  std::vector<std::vector<double>> probes;
  std::vector<double> init(log_init.begin(), log_init.end());
  normalize_log_weights(init);
  for (std::size_t t = 0; t < c.trials; ++t) {
    Rng rng = make_rng(c.seed, {t});
    std::vector<double> lw = init;
    res.mean_values[0] += f.value(lw);
    for (std::size_t k = 1; k <= c.steps; ++k) {
      const auto fx = draw(rng);
      auto step = implicit_step_exact(fx, lw, tau_k(k), c.inner);
      lw = std::move(step.log_w);
      res.mean_values[k] += f.value(lw);
      if (t == 0 && (k <= 20 || k % std::max<std::size_t>(1, c.steps / 25) == 0)) probes.push_back(lw);
    }
  }
  for (auto& v : res.mean_values) v /= static_cast<double>(c.trials);

  // E L(xi)^2: sup over probe pairs of (F_xi(a) - F_xi(b)) / sqrt(KL(b||a)), plus
  // the local limit sqrt(2 Var_a FV_xi(a)) as b -> a.
  probes.push_back(init);
  probes.emplace_back(log_star.begin(), log_star.end());
  Rng probe_rng = make_rng(c.seed, {c.trials, 1});
  for (std::size_t p = 0; p < c.probes; ++p) probes.push_back(random_log_weights(g, probe_rng));
  for (auto& p : probes) {
    for (auto& x : p) x = std::max(x, -700.0);  // keep every probe interior
    normalize_log_weights(p);
  }
  const std::size_t np = probes.size();
  std::vector<double> root_kl(np * np, 0.0);
  for (std::size_t a = 0; a < np; ++a) {
    for (std::size_t b = 0; b < np; ++b) {
      if (a != b) root_kl[a * np + b] = std::sqrt(kl_divergence(probes[b], probes[a]));
    }
  }
  Rng lip_rng = make_rng(c.seed, {c.trials, 2});
  double l2_sum = 0.0;
  std::vector<double> vals(np);
  for (std::size_t d = 0; d < c.lipschitz_draws; ++d) {
    const auto fx = draw(lip_rng);
    double best = 0.0;
    for (std::size_t a = 0; a < np; ++a) {
      vals[a] = fx.value(probes[a]);
      const auto fv = fx.first_variation(probes[a]);
      const auto w = exp_weights(probes[a]);
      const double mean = dot(w, fv);
      double var = 0.0;
      for (std::size_t j = 0; j < g; ++j) var += w[j] * (fv[j] - mean) * (fv[j] - mean);
      best = std::max(best, std::sqrt(2.0 * var));
    }
    for (std::size_t a = 0; a < np; ++a) {
      for (std::size_t b = 0; b < np; ++b) {
        const double r = root_kl[a * np + b];
        if (a != b && r > 1e-8) best = std::max(best, (vals[a] - vals[b]) / r);
      }
    }
    l2_sum += best * best;
  }
  res.expected_l2 = l2_sum / static_cast<double>(std::max<std::size_t>(1, c.lipschitz_draws));

  res.f_star = f.value(log_star);
  const double d0 = kl_divergence(log_star, init);
  res.report.name = strong ? "stochastic strongly convex" : "stochastic convex";
  res.report.constant = res.expected_l2;
  for (std::size_t k = 1; k <= c.steps; ++k) {
    const double kd = static_cast<double>(k);
    BoundRow row;
    row.k = k;
    row.lhs = min_so_far_gap(res.mean_values, 0, k - 1, res.f_star);
    if (strong) {
      row.rhs = (2.0 * c.lambda * c.lambda * d0 + std::log(kd + 1.0) * res.expected_l2) / (2.0 * c.lambda * kd);
    } else {
      row.rhs = (4.0 * d0 + c.tau * c.tau * std::log(kd + 1.0) * res.expected_l2) /
                (8.0 * c.tau * (std::sqrt(kd + 1.0) - 1.0));
    }
    row.satisfied = bound_holds(row.lhs, row.rhs);
    res.report.rows.push_back(row);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Continuous flow and fixed-grid baseline

KlgfResult integrate_klgf(const SimplexFunctional& f, std::span<const double> log_init,
                          std::span<const double> log_star, double dt, double horizon,
                          std::size_t record_every) {
  KLFLOW_REQUIRE(dt > 0.0 && horizon > 0.0, "time step and horizon must be positive");
  KLFLOW_REQUIRE(record_every >= 1, "record interval must be positive");
  KlgfResult res;
  for (int attempt = 0; attempt < 30; ++attempt, dt *= 0.5) {
    res = KlgfResult{};
    res.dt_used = dt;
    const auto steps = static_cast<std::size_t>(std::llround(horizon / dt));
    std::vector<double> lw(log_init.begin(), log_init.end());
    normalize_log_weights(lw);
    std::vector<double> wsum(lw.size(), 0.0);
    bool stable = true;
    auto record = [&](std::size_t s) {
      const double t = static_cast<double>(s) * dt;
      res.times.push_back(t);
      res.kl_star.push_back(kl_divergence(log_star, lw));
      res.values.push_back(f.value(lw));
      if (s == 0) {
        res.avg_values.push_back(res.values.back());
      } else {
        auto avg = wsum;
        for (auto& x : avg) x /= t;
        res.avg_values.push_back(f.value(log_of(avg)));
      }
    };
    record(0);
    for (std::size_t s = 1; s <= steps; ++s) {
      const auto fv = f.first_variation(lw);
      const auto w = exp_weights(lw);
      const double mean = dot(w, fv);
      for (std::size_t j = 0; j < lw.size(); ++j) wsum[j] += dt * w[j];
      for (std::size_t j = 0; j < lw.size(); ++j) lw[j] -= dt * (fv[j] - mean);
      if (!std::all_of(lw.begin(), lw.end(), [](double x) { return std::isfinite(x); })) {
        stable = false;
        break;
      }
      normalize_log_weights(lw);
      if (s % record_every == 0 || s == steps) record(s);
    }
    if (stable) {
      res.log_w_final = std::move(lw);
      return res;
    }
    res.warnings.push_back("unstable at dt " + std::to_string(dt) + ", halving");
  }
  throw DomainError("flow integration unstable after repeated step halving");
}

BoundReport verify_theorem1(const SimplexFunctional& f, const KlgfResult& traj,
                            std::span<const double> log_init, std::span<const double> log_star) {
  BoundReport r;
  const double lambda = f.lambda();
  r.name = lambda > 0.0 ? "flow exponential" : "flow averaged";
  const double d0 = kl_divergence(log_star, log_init);
  const double f_star = f.value(log_star);
  for (std::size_t i = 0; i < traj.times.size(); ++i) {
    const double t = traj.times[i];
    BoundRow row;
    row.k = i;
    if (lambda > 0.0) {
      row.lhs = traj.kl_star[i];
      row.rhs = std::exp(-lambda * t / 2.0) * d0;
    } else {
      row.lhs = traj.avg_values[i] - f_star;
      row.rhs = t > 0.0 ? d0 / t : kInf;
    }
    row.satisfied = bound_holds(row.lhs, row.rhs);
    r.rows.push_back(row);
  }
  return r;
}

KwResult kw_grid_solver(const SimplexFunctional& f, double tau, std::size_t steps, std::size_t record_every) {
  KLFLOW_REQUIRE(tau > 0.0, "step size must be positive");
  KLFLOW_REQUIRE(record_every >= 1, "record interval must be positive");
  const std::size_t g = f.size();
  std::vector<double> w(g, 1.0 / static_cast<double>(g));
  KwResult res;
  double value = f.value(log_of(w));
  res.weights.push_back(w);
  res.values.push_back(value);
  std::vector<double> cand(g);
  for (std::size_t s = 1; s <= steps; ++s) {
    const auto fv = f.first_variation(log_of(w));
    const double mean = dot(w, fv);
    double t = tau;
    double new_value = kInf;
    for (int tries = 0; tries < 60; ++tries, t *= 0.5) {
      bool feasible = true;
      for (std::size_t j = 0; j < g; ++j) {
        const double factor = 1.0 - t * (fv[j] - mean);
        if (factor < 0.0 && w[j] > 0.0) feasible = false;
        cand[j] = w[j] * std::max(factor, 0.0);
      }
      if (!feasible) continue;
      const double total = std::accumulate(cand.begin(), cand.end(), 0.0);
      if (!(total > 0.0)) continue;
      for (auto& x : cand) x /= total;
      new_value = f.value(log_of(cand));
      if (new_value <= value + 1e-15 * (1.0 + std::abs(value))) break;
      new_value = kInf;
    }
    if (std::isfinite(new_value)) {
      w = cand;
      value = new_value;
    } else {
      t = 0.0;  // no admissible step; weights unchanged
    }
    res.values.push_back(value);
    res.step_used.push_back(t);
    if (s % record_every == 0 || s == steps) res.weights.push_back(w);
  }
  return res;
}

}  // namespace klflow
