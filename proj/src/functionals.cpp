#include "klflow/functionals.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "klflow/error.hpp"

namespace klflow {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Tensor transpose(const Tensor& t) {
  Tensor out(t.cols(), t.rows());
  out.matrix() = t.matrix().transpose();
  return out;
}

Tensor column_selector(std::size_t total, std::size_t first, std::size_t count) {
  Tensor s(total, count, 0.0);
  for (std::size_t k = 0; k < count; ++k) s(first + k, k) = 1.0;
  return s;
}

// Per-observation log of the mixture density, (1 x n) from an (M x n) log-kernel.
Eigen::RowVectorXd log_mixture(const RowMatrix& log_kernel) {
  const auto m = static_cast<double>(log_kernel.rows());
  Eigen::RowVectorXd out(log_kernel.cols());
  for (Eigen::Index i = 0; i < log_kernel.cols(); ++i) {
    const double c = log_kernel.col(i).maxCoeff();
    if (!std::isfinite(c)) {
      throw DomainError("mixture density underflows for observation " + std::to_string(i));
    }
    out[i] = c + std::log((log_kernel.col(i).array() - c).exp().sum()) - std::log(m);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Data

Dataset::Dataset(Tensor observations) : x(std::move(observations)) {
  KLFLOW_REQUIRE(x.rows() >= 1 && x.cols() >= 1, "dataset must have at least one observation");
  if (x.first_non_finite() != x.size()) throw DomainError("dataset contains non-finite entries");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  KLFLOW_REQUIRE(!indices.empty(), "subset must be nonempty");
  Tensor out(indices.size(), dim());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    KLFLOW_REQUIRE(indices[r] < n(), "subset index out of range");
    auto src = x.row_span(indices[r]);
    std::copy(src.begin(), src.end(), out.values().begin() + r * dim());
  }
  return Dataset(std::move(out));
}

std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t m, Rng& rng) {
  KLFLOW_REQUIRE(m >= 1 && m <= n, "mini-batch size must satisfy 1 <= m <= n");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (m == n) return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// Kernels

std::size_t LikelihoodKernel::param_dim(std::size_t d_obs) const {
  return kind == KernelKind::kLocation ? d_obs : 2 * d_obs;
}

double LikelihoodKernel::log_density(std::span<const double> x, std::span<const double> theta) const {
  const std::size_t d = x.size();
  KLFLOW_REQUIRE(theta.size() == param_dim(d), "kernel: parameter dimension mismatch");
  double out = -0.5 * static_cast<double>(d) * kLog2Pi;
  for (std::size_t k = 0; k < d; ++k) {
    const double r = x[k] - theta[k];
    if (kind == KernelKind::kLocation) {
      out -= 0.5 * r * r;
    } else {
      const double v = theta[d + k];
      out -= 0.5 * (v + r * r * std::exp(-v));
    }
  }
  return out;
}

RowMatrix LikelihoodKernel::log_kernel(const Dataset& data, const Tensor& theta) const {
  const std::size_t d = data.dim();
  KLFLOW_REQUIRE(theta.cols() == param_dim(d), "kernel: parameter dimension mismatch");
  const auto m = static_cast<Eigen::Index>(theta.rows());
  const auto n = static_cast<Eigen::Index>(data.n());
  auto th = theta.matrix();
  auto x = data.x.matrix();
  RowMatrix out(m, n);
  const double c = -0.5 * static_cast<double>(d) * kLog2Pi;
  if (kind == KernelKind::kLocation) {
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        out(j, i) = c - 0.5 * (x.row(i) - th.row(j)).squaredNorm();
      }
    }
  } else {
    const auto dd = static_cast<Eigen::Index>(d);
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::RowVectorXd mu = th.row(j).head(dd);
      const Eigen::RowVectorXd v = th.row(j).tail(dd);
      const Eigen::RowVectorXd prec = (-v.array()).exp();
      const double half_logdet = 0.5 * v.sum();
      for (Eigen::Index i = 0; i < n; ++i) {
        out(j, i) = c - half_logdet -
                    0.5 * ((x.row(i) - mu).array().square() * prec.array()).sum();
      }
    }
  }
  if (!out.allFinite()) throw DomainError("log-kernel has non-finite entries");
  return out;
}

ad::Var LikelihoodKernel::log_kernel(ad::Tape& tape, const Dataset& data, ad::Var theta) const {
  const std::size_t d = data.dim();
  KLFLOW_REQUIRE(theta.cols() == param_dim(d), "kernel: parameter dimension mismatch");
  const double c = -0.5 * static_cast<double>(d) * kLog2Pi;
  const Tensor xt = transpose(data.x);
  if (kind == KernelKind::kLocation) {
    // -|x - theta|^2 / 2 = x.theta - |theta|^2/2 - |x|^2/2
    Tensor row(1, data.n());
    for (std::size_t i = 0; i < data.n(); ++i) {
      row[i] = c - 0.5 * data.x.matrix().row(static_cast<Eigen::Index>(i)).squaredNorm();
    }
    ad::Var cross = tape.matmul(theta, tape.constant(xt));
    ad::Var sq = ad::sum_cols(ad::square(theta));
    return (cross - 0.5 * sq) + tape.constant(row);
  }
  Tensor x_sq_t = xt;
  for (double& v : x_sq_t.values()) v *= v;
  ad::Var mu = tape.matmul(theta, tape.constant(column_selector(2 * d, 0, d)));
  ad::Var v = tape.matmul(theta, tape.constant(column_selector(2 * d, d, d)));
  ad::Var prec = ad::exp(-v);
  ad::Var mu_prec = mu * prec;
  ad::Var quad = tape.matmul(prec, tape.constant(x_sq_t)) -
                 2.0 * tape.matmul(mu_prec, tape.constant(xt)) + ad::sum_cols(mu_prec * mu);
  ad::Var per_particle = -0.5 * ad::sum_cols(v) + tape.constant(1, 1, c);
  return -0.5 * quad + per_particle;
}

// ---------------------------------------------------------------------------
// Potential

double PotentialTarget::potential(std::span<const double> theta) const {
  KLFLOW_REQUIRE(alpha >= 1, "potential exponent must be >= 1");
  double r2 = 0.0;
  for (double t : theta) r2 += t * t;
  double p = r2;
  for (int a = 1; a < alpha; ++a) p *= r2;
  return p / (2.0 * alpha) + offset;
}

ad::Var PotentialTarget::potential(ad::Tape& tape, ad::Var theta) const {
  KLFLOW_REQUIRE(alpha >= 1, "potential exponent must be >= 1");
  ad::Var r2 = ad::sum_cols(ad::square(theta));
  ad::Var p = r2;
  for (int a = 1; a < alpha; ++a) p = p * r2;
  ad::Var v = (1.0 / (2.0 * alpha)) * p;
  if (offset != 0.0) v = v + tape.constant(1, 1, offset);
  return v;
}

// ---------------------------------------------------------------------------
// Functionals

NpmleFunctional::NpmleFunctional(Dataset data, LikelihoodKernel kernel)
    : data_(std::move(data)), kernel_(kernel) {
  KLFLOW_REQUIRE(data_.n() >= 1, "NPMLE needs at least one observation");
}

NpmleFunctional NpmleFunctional::restricted(std::span<const std::size_t> indices) const {
  return NpmleFunctional(data_.subset(indices), kernel_);
}

ad::Var NpmleFunctional::loss(ad::Tape& tape, ad::Var theta, ad::Var /*log_rho*/) const {
  ad::Var lk = kernel_.log_kernel(tape, data_, theta);
  // Shift each column by its max, held constant, before exponentiating.
  const Tensor& vals = lk.value();
  Tensor shift(1, vals.cols());
  for (std::size_t i = 0; i < vals.cols(); ++i) {
    shift[i] = vals.matrix().col(static_cast<Eigen::Index>(i)).maxCoeff();
  }
  const double mean_shift = pairwise_sum(shift.values()) / static_cast<double>(shift.size());
  ad::Var s = ad::sum_rows(ad::exp(lk - tape.constant(shift)));
  ad::Var lse = ad::mean(ad::log(s));
  const double c = std::log(static_cast<double>(vals.rows())) - mean_shift;
  return tape.constant(1, 1, c) - lse;
}

double NpmleFunctional::value(const Tensor& theta, std::span<const double>) const {
  return npmle_loss(theta, data_, kernel_);
}

std::vector<double> NpmleFunctional::first_variation(const Tensor& theta,
                                                     std::span<const double>) const {
  return first_variation_npmle(theta, data_, theta, kernel_);
}

KlTargetFunctional::KlTargetFunctional(std::size_t dim, PotentialTarget target)
    : dim_(dim), target_(target) {
  KLFLOW_REQUIRE(dim >= 1, "target dimension must be >= 1");
  KLFLOW_REQUIRE(target.alpha >= 1, "potential exponent must be >= 1");
}

ad::Var KlTargetFunctional::loss(ad::Tape& tape, ad::Var theta, ad::Var log_rho) const {
  KLFLOW_REQUIRE(log_rho.valid(), "KL target loss needs per-particle log-densities");
  KLFLOW_REQUIRE(log_rho.rows() == theta.rows() && log_rho.cols() == 1,
                 "log-density must be one value per particle");
  return ad::mean(target_.potential(tape, theta) + log_rho);
}

double KlTargetFunctional::value(const Tensor& theta, std::span<const double> log_rho) const {
  return kl_target_loss(theta, log_rho, target_);
}

std::vector<double> KlTargetFunctional::first_variation(const Tensor& theta,
                                                        std::span<const double> log_rho) const {
  KLFLOW_REQUIRE(log_rho.size() == theta.rows(), "KL target first variation needs log-densities");
  std::vector<double> out(theta.rows());
  for (std::size_t j = 0; j < theta.rows(); ++j) {
    out[j] = target_.potential(theta.row_span(j)) + log_rho[j] + 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Free evaluators

double npmle_loss(const Tensor& theta, const Dataset& data, const LikelihoodKernel& kernel) {
  KLFLOW_REQUIRE(theta.rows() >= 1, "NPMLE loss needs at least one particle");
  const Eigen::RowVectorXd lm = log_mixture(kernel.log_kernel(data, theta));
  return -pairwise_sum(std::span<const double>(lm.data(), static_cast<std::size_t>(lm.size()))) /
         static_cast<double>(data.n());
}

double npmle_loss_weighted(const RowMatrix& log_kernel, std::span<const double> weights) {
  KLFLOW_REQUIRE(static_cast<std::size_t>(log_kernel.rows()) == weights.size(),
                 "weights must match kernel rows");
  const Eigen::Index n = log_kernel.cols();
  std::vector<double> per_obs(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double c = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < log_kernel.rows(); ++j) {
      if (weights[static_cast<std::size_t>(j)] > 0.0) c = std::max(c, log_kernel(j, i));
    }
    if (!std::isfinite(c)) {
      throw DomainError("mixture density underflows for observation " + std::to_string(i));
    }
    double s = 0.0;
    for (Eigen::Index j = 0; j < log_kernel.rows(); ++j) {
      const double w = weights[static_cast<std::size_t>(j)];
      if (w > 0.0) s += w * std::exp(log_kernel(j, i) - c);
    }
    per_obs[static_cast<std::size_t>(i)] = c + std::log(s);
  }
  return -pairwise_sum(per_obs) / static_cast<double>(n);
}

double kl_target_loss(const Tensor& theta, std::span<const double> log_rho,
                      const PotentialTarget& target) {
  KLFLOW_REQUIRE(theta.rows() >= 1, "KL target loss needs at least one particle");
  KLFLOW_REQUIRE(log_rho.size() == theta.rows(), "KL target loss needs one log-density per particle");
  std::vector<double> terms(theta.rows());
  for (std::size_t j = 0; j < theta.rows(); ++j) {
    terms[j] = target.potential(theta.row_span(j)) + log_rho[j];
  }
  return pairwise_sum(terms) / static_cast<double>(terms.size());
}

std::vector<double> first_variation_npmle(const Tensor& eval, const Dataset& data,
                                          const Tensor& particles, const LikelihoodKernel& kernel) {
  KLFLOW_REQUIRE(particles.rows() >= 1, "first variation needs at least one particle");
  const Eigen::RowVectorXd lm = log_mixture(kernel.log_kernel(data, particles));
  const RowMatrix le = kernel.log_kernel(data, eval);
  std::vector<double> out(eval.rows());
  std::vector<double> terms(data.n());
  for (std::size_t e = 0; e < eval.rows(); ++e) {
    for (std::size_t i = 0; i < data.n(); ++i) {
      terms[i] = std::exp(le(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(i)) -
                          lm[static_cast<Eigen::Index>(i)]);
    }
    out[e] = -pairwise_sum(terms) / static_cast<double>(data.n());
  }
  return out;
}

double sample_variance(std::span<const double> values) {
  KLFLOW_REQUIRE(values.size() >= 2, "variance needs at least two values");
  const double mean = pairwise_sum(values) / static_cast<double>(values.size());
  std::vector<double> dev(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) dev[i] = (values[i] - mean) * (values[i] - mean);
  return pairwise_sum(dev) / static_cast<double>(values.size() - 1);
}

double fv_variance(std::span<const double> first_variation) { return sample_variance(first_variation); }

double subproblem_fv_variance(std::span<const double> first_variation,
                              std::span<const double> log_ratio, double tau) {
  KLFLOW_REQUIRE(first_variation.size() == log_ratio.size(), "residual terms must align");
  KLFLOW_REQUIRE(tau > 0.0, "step size must be positive");
  std::vector<double> eta(first_variation.size());
  for (std::size_t j = 0; j < eta.size(); ++j) eta[j] = first_variation[j] + log_ratio[j] / tau;
  return sample_variance(eta);
}

// ---------------------------------------------------------------------------
// Subproblem

PrefixCache make_prefix_cache(const FlowModel& current, Tensor base) {
  KLFLOW_REQUIRE(base.cols() == current.dim(), "base points have the wrong dimension");
  PrefixCache cache;
  cache.log_density.resize(base.rows());
  for (std::size_t j = 0; j < base.rows(); ++j) {
    cache.log_density[j] = current.base().log_density(base.row_span(j));
  }
  if (current.frozen_prefix() == 0) {
    cache.points = base;
  } else {
    ad::Tape tape;
    BoundFlow bound = current.bind(tape, true);
    FlowPass pass = current.forward(tape, bound, tape.constant(base), 0, current.frozen_prefix());
    cache.points = pass.out.value();
    const Tensor& ld = pass.logdet.value();
    for (std::size_t j = 0; j < base.rows(); ++j) cache.log_density[j] -= ld[j];
  }
  cache.base = std::move(base);
  return cache;
}

SubproblemTerms subproblem_loss(ad::Tape& tape, const SubproblemSpec& spec, const FlowModel& current,
                                const PrefixCache& cache, bool trainable) {
  KLFLOW_REQUIRE(spec.functional != nullptr && spec.previous != nullptr, "incomplete subproblem");
  KLFLOW_REQUIRE(spec.tau > 0.0, "step size must be positive");
  KLFLOW_REQUIRE(cache.points.rows() >= 2, "subproblem needs at least two particles");
  const FlowModel& prev = *spec.previous;
  KLFLOW_REQUIRE(prev.dim() == current.dim() && prev.base().mean == current.base().mean &&
                     prev.base().variance == current.base().variance,
                 "current and anchor flows must share the base distribution");
  KLFLOW_REQUIRE(current.dim() == spec.functional->param_dim(), "flow and functional dimensions differ");

  SubproblemTerms t;
  t.bound = current.bind(tape, !trainable);
  FlowPass pass = current.forward(tape, t.bound, tape.constant(cache.points), current.frozen_prefix());
  t.theta = pass.out;
  t.log_rho = tape.constant(Tensor::column(cache.log_density)) - pass.logdet;

  BoundFlow anchor = prev.bind(tape, true);
  FlowPass back = prev.inverse(tape, anchor, t.theta);
  t.log_prev = prev.base().log_density(tape, back.out) + back.logdet;

  ad::Var ratio;
  try {
    ratio = t.log_rho - t.log_prev;
  } catch (const DomainError& e) {
    throw DomainError(std::string("non-finite log-ratio: ") + e.what());
  }
  t.kl = ad::mean(ratio);
  t.objective = spec.functional->loss(tape, t.theta, t.log_rho);
  t.loss = t.objective + (1.0 / spec.tau) * t.kl;
  return t;
}

SubproblemEval evaluate_subproblem(const SubproblemSpec& spec, const FlowModel& current,
                                   const PrefixCache& cache) {
  ad::Tape tape;
  SubproblemTerms t = subproblem_loss(tape, spec, current, cache, false);
  SubproblemEval out;
  out.theta = t.theta.value();
  const auto lr = t.log_rho.value().values();
  const auto lp = t.log_prev.value().values();
  out.log_rho.assign(lr.begin(), lr.end());
  out.log_prev.assign(lp.begin(), lp.end());
  out.objective = t.objective.value().item();
  out.kl = t.kl.value().item();
  out.loss = t.loss.value().item();
  return out;
}

}  // namespace klflow
