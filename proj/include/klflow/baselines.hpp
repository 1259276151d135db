#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "klflow/functionals.hpp"
#include "klflow/rng.hpp"
#include "klflow/tensor.hpp"

namespace klflow {

/// M x d particle positions. Plain tensors; the helpers below check finiteness.
using ParticleCloud = Tensor;

// ---------------------------------------------------------------------------
// Langevin baseline

struct LangevinConfig {
  int alpha = 2;
  double dt = 1e-2;
  std::size_t steps = 25;
  double overflow_norm = 1e100;  // larger particle norms count as divergence
};

struct LangevinResult {
  std::vector<ParticleCloud> trajectory;  // cloud after each step, index 0 = initial
  bool diverged = false;
  std::size_t diverged_at = 0;  // first step whose cloud overflowed
};

/// theta <- theta - dt |theta|^(2 alpha - 2) theta + sqrt(2 dt) u, in place.
void langevin_step(ParticleCloud& theta, int alpha, double dt, Rng& rng);
LangevinResult langevin_run(const LangevinConfig& c, ParticleCloud init, Rng& rng);

// ---------------------------------------------------------------------------
// Distances

/// Exact W1 between two equal-size uniform clouds by optimal assignment.
double w1_exact(const ParticleCloud& a, const ParticleCloud& b);

struct W1Options {
  std::size_t cap = 512;     // sub-sample size limit
  std::size_t repeats = 8;   // sub-sample draws averaged
};

/// Sub-sampled exact W1. Equal-size clouds share the sub-sample indices so that
/// a matched pair keeps its matching; unequal sizes are sub-sampled separately
/// to min(|a|, |b|, cap). Without sub-sampling the single exact value is returned.
double w1_distance(const ParticleCloud& a, const ParticleCloud& b, Rng& rng, const W1Options& opt = {});

/// W1 between sorted samples in one dimension (equal sizes).
double w1_sorted_1d(std::vector<double> a, std::vector<double> b);

// ---------------------------------------------------------------------------
// NLL gap series

inline constexpr double kGapFloor = 1e-12;

struct GapSeries {
  std::vector<double> log_gap;
  std::vector<bool> floored;  // raw gap was below the floor (or negative)
};

/// log(max(loss_k - reference, floor)).
GapSeries nll_gap(const std::vector<double>& losses, double reference);

// ---------------------------------------------------------------------------
// Samplers

struct TwoMoonsSpec {
  double radius = 2.0;
  double radial_width = 0.2;
  double offset = 2.0;
  double mode_width = 0.3;
  double separation = 1.0;  // scales radius and mode offset together

  double log_density(double x, double y) const;  // unnormalised
  void validate() const;
};

ParticleCloud two_moons_sample(const TwoMoonsSpec& spec, std::size_t m, Rng& rng);

/// Mixing distribution for synthetic NPMLE data.
struct MixingSpec {
  enum class Kind { kTwoMoons, kTwoMoonsNormal, kPoint };
  Kind kind = Kind::kTwoMoons;
  TwoMoonsSpec moons;
  std::size_t dim = 2;             // location dimension
  std::vector<double> point;       // kPoint location
};

/// theta_i ~ P*, X_i | theta_i ~ p(. | theta_i). Location-scale draws
/// sigma^2 coordinates i.i.d. chi-square(1).
Dataset mixture_data_gen(const MixingSpec& mix, KernelKind kernel, std::size_t n, Rng& rng);

/// Scrambled Sobol points in [0,1)^d with a seed-dependent random shift.
Tensor qmc_uniform(std::size_t n, std::size_t d, std::uint64_t seed);
/// QMC points of N(mean, variance I).
Tensor qmc_normal(std::size_t n, std::size_t d, std::uint64_t seed, double variance = 1.0,
                  double mean = 0.0);

/// Exact sampler for pi(theta) proportional to exp(-|theta|^(2 alpha)/(2 alpha)):
/// tabulated radial inverse CDF plus a uniform direction.
class RadialTarget {
 public:
  RadialTarget(int alpha, std::size_t dim, std::size_t table = 20001);

  /// Radius for a uniform u in [0,1].
  double radius_quantile(double u) const;
  /// Samples from n QMC points (low-discrepancy reference cloud).
  ParticleCloud sample_qmc(std::size_t n, std::uint64_t seed) const;
  ParticleCloud sample(std::size_t n, Rng& rng) const;

  std::size_t dim() const { return dim_; }

 private:
  ParticleCloud from_uniforms(const Tensor& u) const;

  int alpha_;
  std::size_t dim_;
  std::vector<double> r_;
  std::vector<double> cdf_;
};

// ---------------------------------------------------------------------------
// Cloud CSV: first line is the dimension d, then one row of d floats per point.

void write_cloud_csv(std::ostream& out, const ParticleCloud& cloud);
ParticleCloud read_cloud_csv(std::istream& in);

}  // namespace klflow
