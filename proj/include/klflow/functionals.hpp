#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "klflow/flow.hpp"
#include "klflow/rng.hpp"
#include "klflow/tape.hpp"
#include "klflow/tensor.hpp"

namespace klflow {

/// Observations X (n x d_obs).
struct Dataset {
  Tensor x;

  Dataset() = default;
  explicit Dataset(Tensor observations);

  std::size_t n() const { return x.rows(); }
  std::size_t dim() const { return x.cols(); }
  /// Rows at the given indices, in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// m indices drawn uniformly without replacement from {0..n-1}, sorted. m == n
/// returns 0..n-1 without touching the generator.
std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t m, Rng& rng);

enum class KernelKind { kLocation, kLocationScale };

/// p(x | theta). Location: N(theta, I). Location-scale: theta = (mu, log sigma^2)
/// and p = N(mu, diag(sigma^2)).
struct LikelihoodKernel {
  KernelKind kind = KernelKind::kLocation;

  /// Dimension of theta for observations of dimension d_obs.
  std::size_t param_dim(std::size_t d_obs) const;
  double log_density(std::span<const double> x, std::span<const double> theta) const;
  /// log p(X_i | theta_j) as an (M x n) matrix: rows are particles.
  RowMatrix log_kernel(const Dataset& data, const Tensor& theta) const;
  /// Same matrix recorded on a tape, differentiable in theta.
  ad::Var log_kernel(ad::Tape& tape, const Dataset& data, ad::Var theta) const;
};

/// pi(theta) proportional to exp(-V), V(theta) = |theta|^(2 alpha) / (2 alpha).
struct PotentialTarget {
  int alpha = 1;
  double offset = 0.0;  // additive constant in V; only shifts the objective

  double potential(std::span<const double> theta) const;
  /// V per row, (M x 1).
  ad::Var potential(ad::Tape& tape, ad::Var theta) const;
};

/// An objective over distributions evaluated on particle clouds.
class Functional {
 public:
  virtual ~Functional() = default;

  virtual std::size_t param_dim() const = 0;
  /// Relative strong-convexity constant: 1 for KL targets, 0 for NPMLE.
  virtual double lambda() const = 0;
  /// Whether value() needs per-particle log-densities.
  virtual bool needs_log_density() const = 0;

  /// F on the empirical measure of theta. log_rho is (M x 1); ignored by NPMLE.
  virtual ad::Var loss(ad::Tape& tape, ad::Var theta, ad::Var log_rho) const = 0;
  virtual double value(const Tensor& theta, std::span<const double> log_rho) const = 0;
  /// First variation at the particles themselves, up to an additive constant.
  virtual std::vector<double> first_variation(const Tensor& theta,
                                              std::span<const double> log_rho) const = 0;
};

class NpmleFunctional final : public Functional {
 public:
  NpmleFunctional(Dataset data, LikelihoodKernel kernel);

  const Dataset& data() const { return data_; }
  const LikelihoodKernel& kernel() const { return kernel_; }
  /// F_xi: the same functional on a subset of the observations.
  NpmleFunctional restricted(std::span<const std::size_t> indices) const;

  std::size_t param_dim() const override { return kernel_.param_dim(data_.dim()); }
  double lambda() const override { return 0.0; }
  bool needs_log_density() const override { return false; }
  ad::Var loss(ad::Tape& tape, ad::Var theta, ad::Var log_rho) const override;
  double value(const Tensor& theta, std::span<const double> log_rho) const override;
  std::vector<double> first_variation(const Tensor& theta,
                                      std::span<const double> log_rho) const override;

 private:
  Dataset data_;
  LikelihoodKernel kernel_;
};

class KlTargetFunctional final : public Functional {
 public:
  KlTargetFunctional(std::size_t dim, PotentialTarget target);

  const PotentialTarget& target() const { return target_; }

  std::size_t param_dim() const override { return dim_; }
  double lambda() const override { return 1.0; }
  bool needs_log_density() const override { return true; }
  ad::Var loss(ad::Tape& tape, ad::Var theta, ad::Var log_rho) const override;
  double value(const Tensor& theta, std::span<const double> log_rho) const override;
  std::vector<double> first_variation(const Tensor& theta,
                                      std::span<const double> log_rho) const override;

 private:
  std::size_t dim_;
  PotentialTarget target_;
};

/// -(1/n) sum_i log((1/M) sum_j p(X_i | theta_j)), log-sum-exp stabilised.
double npmle_loss(const Tensor& theta, const Dataset& data, const LikelihoodKernel& kernel);
/// Weighted version on fixed atoms; zero weights are skipped.
double npmle_loss_weighted(const RowMatrix& log_kernel, std::span<const double> weights);

/// (1/M) sum_j [V(theta_j) + log rho(theta_j)].
double kl_target_loss(const Tensor& theta, std::span<const double> log_rho,
                      const PotentialTarget& target);

/// -(1/n) sum_i p(X_i | e) / ((1/M) sum_j p(X_i | theta_j)) at each eval point e.
std::vector<double> first_variation_npmle(const Tensor& eval, const Dataset& data,
                                          const Tensor& particles, const LikelihoodKernel& kernel);

/// Unbiased sample variance (two-pass). Needs at least two values.
double sample_variance(std::span<const double> values);
/// Variance of the first variation at the particles.
double fv_variance(std::span<const double> first_variation);
/// Variance of FV + (1/tau) log(rho / rho_prev) at the particles.
double subproblem_fv_variance(std::span<const double> first_variation,
                              std::span<const double> log_ratio, double tau);

/// One IKLPD subproblem: min F(rho) + (1/tau) KL(rho || rho_prev).
struct SubproblemSpec {
  const Functional* functional = nullptr;
  const FlowModel* previous = nullptr;  // frozen anchor T^(k-1)
  double tau = 1.0;
};

/// Forward pass through the frozen prefix of the current flow, computed once
/// outside the tape because those blocks never change during an inner loop.
struct PrefixCache {
  Tensor base;
  Tensor points;
  std::vector<double> log_density;  // log rho_0(base) - prefix logdet
};

PrefixCache make_prefix_cache(const FlowModel& current, Tensor base);

struct SubproblemTerms {
  BoundFlow bound;
  ad::Var theta;     // (M x p) particles T^(k)(base)
  ad::Var log_rho;   // (M x 1) log rho_k at theta, pathwise
  ad::Var log_prev;  // (M x 1) log rho_{k-1} at theta via the anchor inverse
  ad::Var objective; // F estimate
  ad::Var kl;        // (1/M) sum (log_rho - log_prev)
  ad::Var loss;      // objective + kl / tau
};

/// F(rho~_k) + (1/(M tau)) sum_j [log rho_k(theta_j) - log rho_{k-1}(theta_j)].
/// With trainable = false every parameter of `current` is bound as a constant.
SubproblemTerms subproblem_loss(ad::Tape& tape, const SubproblemSpec& spec,
                                const FlowModel& current, const PrefixCache& cache,
                                bool trainable = true);

/// Values of a subproblem evaluated without gradients.
struct SubproblemEval {
  Tensor theta;
  std::vector<double> log_rho;
  std::vector<double> log_prev;
  double objective = 0.0;
  double kl = 0.0;
  double loss = 0.0;
};

SubproblemEval evaluate_subproblem(const SubproblemSpec& spec, const FlowModel& current,
                                   const PrefixCache& cache);

}  // namespace klflow
