#include "klflow/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include <boost/math/special_functions/erf.hpp>
#include <boost/random/sobol.hpp>

#include "klflow/error.hpp"

namespace klflow {

namespace {

void require_finite(const ParticleCloud& c, const char* what) {
  KLFLOW_REQUIRE(c.rows() >= 1 && c.cols() >= 1, std::string(what) + " must be a nonempty cloud");
  if (c.first_non_finite() != c.size()) throw DomainError(std::string(what) + " has non-finite entries");
}

double normal_quantile(double u) { return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * u); }

// Row subset in the given order.
ParticleCloud take_rows(const ParticleCloud& c, std::span<const std::size_t> idx) {
  ParticleCloud out(idx.size(), c.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t a = 0; a < c.cols(); ++a) out(r, a) = c(idx[r], a);
  }
  return out;
}

// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
// paths with potentials). Returns the total cost.
double assignment_cost(const RowMatrix& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = cost.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) total += cost(static_cast<Eigen::Index>(p[j] - 1), static_cast<Eigen::Index>(j - 1));
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// Langevin

void langevin_step(ParticleCloud& theta, int alpha, double dt, Rng& rng) {
  KLFLOW_REQUIRE(alpha >= 1, "potential exponent must be >= 1");
  KLFLOW_REQUIRE(dt > 0.0, "Langevin step must be positive");
  const double noise = std::sqrt(2.0 * dt);
  for (std::size_t j = 0; j < theta.rows(); ++j) {
    double r2 = 0.0;
    for (std::size_t a = 0; a < theta.cols(); ++a) r2 += theta(j, a) * theta(j, a);
    double scale = 1.0;  // |theta|^(2 alpha - 2)
    for (int p = 1; p < alpha; ++p) scale *= r2;
    for (std::size_t a = 0; a < theta.cols(); ++a) {
      theta(j, a) = theta(j, a) - dt * scale * theta(j, a) + noise * standard_normal(rng);
    }
  }
}

LangevinResult langevin_run(const LangevinConfig& c, ParticleCloud init, Rng& rng) {
  require_finite(init, "Langevin initial cloud");
  LangevinResult res;
  res.trajectory.push_back(init);
  for (std::size_t k = 1; k <= c.steps; ++k) {
    langevin_step(init, c.alpha, c.dt, rng);
    bool ok = init.first_non_finite() == init.size();
    for (std::size_t j = 0; ok && j < init.rows(); ++j) {
      double r2 = 0.0;
      for (std::size_t a = 0; a < init.cols(); ++a) r2 += init(j, a) * init(j, a);
      ok = std::sqrt(r2) <= c.overflow_norm;
    }
    if (!ok) {
      res.diverged = true;
      res.diverged_at = k;
      break;
    }
    res.trajectory.push_back(init);
  }
  return res;
}

// ---------------------------------------------------------------------------
// W1

double w1_exact(const ParticleCloud& a, const ParticleCloud& b) {
  require_finite(a, "first cloud");
  require_finite(b, "second cloud");
  KLFLOW_REQUIRE(a.rows() == b.rows(), "exact W1 needs clouds of equal size");
  KLFLOW_REQUIRE(a.cols() == b.cols(), "clouds must share a dimension");
  const auto n = static_cast<Eigen::Index>(a.rows());
  RowMatrix cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double d = a(static_cast<std::size_t>(i), c) - b(static_cast<std::size_t>(j), c);
        s += d * d;
      }
      cost(i, j) = std::sqrt(s);
    }
  }
  return assignment_cost(cost) / static_cast<double>(n);
}

double w1_distance(const ParticleCloud& a, const ParticleCloud& b, Rng& rng, const W1Options& opt) {
  require_finite(a, "first cloud");
  require_finite(b, "second cloud");
  KLFLOW_REQUIRE(opt.cap >= 1 && opt.repeats >= 1, "W1 sub-sample size and repeats must be positive");
  const std::size_t m = std::min({a.rows(), b.rows(), opt.cap});
  const bool same = a.rows() == b.rows();
  if (same && m == a.rows()) return w1_exact(a, b);
  double total = 0.0;
  for (std::size_t r = 0; r < opt.repeats; ++r) {
    const auto ia = minibatch_indices(a.rows(), m, rng);
    const auto ib = same ? ia : minibatch_indices(b.rows(), m, rng);
    total += w1_exact(take_rows(a, ia), take_rows(b, ib));
  }
  return total / static_cast<double>(opt.repeats);
}

double w1_sorted_1d(std::vector<double> a, std::vector<double> b) {
  KLFLOW_REQUIRE(!a.empty() && a.size() == b.size(), "sorted W1 needs equal nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Gaps

GapSeries nll_gap(const std::vector<double>& losses, double reference) {
  GapSeries g;
  for (double l : losses) {
    const double gap = l - reference;
    const bool floored = !(gap > kGapFloor);
    g.floored.push_back(floored);
    g.log_gap.push_back(std::log(floored ? kGapFloor : gap));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Two moons and mixture data

void TwoMoonsSpec::validate() const {
  KLFLOW_REQUIRE(radius > 0.0 && radial_width > 0.0 && mode_width > 0.0 && separation > 0.0,
                 "two-moons widths, radius and separation must be positive");
}

double TwoMoonsSpec::log_density(double x, double y) const {
  const double r0 = radius * separation;
  const double off = offset * separation;
  const double r = std::hypot(x, y);
  const double radial = -0.5 * ((r - r0) / radial_width) * ((r - r0) / radial_width);
  const double a = -0.5 * ((x - off) / mode_width) * ((x - off) / mode_width);
  const double b = -0.5 * ((x + off) / mode_width) * ((x + off) / mode_width);
  const double m = std::max(a, b);
  return radial + m + std::log(std::exp(a - m) + std::exp(b - m));
}

ParticleCloud two_moons_sample(const TwoMoonsSpec& spec, std::size_t m, Rng& rng) {
  spec.validate();
  KLFLOW_REQUIRE(m >= 1, "sample size must be >= 1");
  const double r0 = spec.radius * spec.separation;
  const double w = spec.radial_width;
  const double s = std::max(r0, 2.0 * w);  // proposal N(0, s^2 I)
  // The unnormalised density is at most 2 exp(-((r - r0)/w)^2 / 2); its ratio
  // to the proposal peaks at r = r0 s^2 / (s^2 - w^2).
  const double rs = r0 * s * s / (s * s - w * w);
  const double log_bound = std::log(2.0) - 0.5 * ((rs - r0) / w) * ((rs - r0) / w) + rs * rs / (2.0 * s * s);
  ParticleCloud out(m, 2);
  std::size_t accepted = 0;
  std::size_t proposed = 0;
  while (accepted < m) {
    const double x = s * standard_normal(rng);
    const double y = s * standard_normal(rng);
    ++proposed;
    const double log_ratio = spec.log_density(x, y) + (x * x + y * y) / (2.0 * s * s) - log_bound;
    if (std::log(uniform01(rng)) < log_ratio) {
      out(accepted, 0) = x;
      out(accepted, 1) = y;
      ++accepted;
    }
    if (proposed >= 10000 && static_cast<double>(accepted) < 1e-3 * static_cast<double>(proposed)) {
      std::ostringstream msg;
      msg << "two-moons rejection sampler acceptance " << static_cast<double>(accepted) / static_cast<double>(proposed)
          << " below 1e-3 (radius " << spec.radius << ", radial width " << spec.radial_width << ", offset "
          << spec.offset << ", mode width " << spec.mode_width << ", separation " << spec.separation << ")";
      throw DomainError(msg.str());
    }
  }
  return out;
}

Dataset mixture_data_gen(const MixingSpec& mix, KernelKind kernel, std::size_t n, Rng& rng) {
  KLFLOW_REQUIRE(n >= 1, "sample size must be >= 1");
  const std::size_t d = mix.dim;
  Tensor mu(n, d);
  switch (mix.kind) {
    case MixingSpec::Kind::kTwoMoons: {
      KLFLOW_REQUIRE(d == 2, "two-moons mixing needs dimension 2");
      mu = two_moons_sample(mix.moons, n, rng);
      break;
    }
    case MixingSpec::Kind::kTwoMoonsNormal: {
      KLFLOW_REQUIRE(d >= 3, "two-moons-normal mixing needs dimension >= 3");
      const auto moons = two_moons_sample(mix.moons, n, rng);
      for (std::size_t i = 0; i < n; ++i) {
        mu(i, 0) = moons(i, 0);
        mu(i, 1) = moons(i, 1);
        for (std::size_t a = 2; a < d; ++a) mu(i, a) = standard_normal(rng);
      }
      break;
    }
    case MixingSpec::Kind::kPoint: {
      KLFLOW_REQUIRE(mix.point.size() == d, "point mixing needs one coordinate per dimension");
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) mu(i, a) = mix.point[a];
      }
      break;
    }
  }
  Tensor x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      double sd = 1.0;
      if (kernel == KernelKind::kLocationScale) {
        const double z = standard_normal(rng);
        sd = std::abs(z);  // sigma^2 = z^2 ~ chi-square(1)
      }
      x(i, a) = mu(i, a) + sd * standard_normal(rng);
    }
  }
  return Dataset(std::move(x));
}

// ---------------------------------------------------------------------------
// Quasi-Monte Carlo

Tensor qmc_uniform(std::size_t n, std::size_t d, std::uint64_t seed) {
  KLFLOW_REQUIRE(n >= 1 && d >= 1, "QMC set needs positive size and dimension");
  boost::random::sobol engine(d);
  Rng rng = make_rng(seed, {0x51u});
  std::vector<double> shift(d);
  for (auto& s : shift) s = uniform01(rng);
  Tensor out(n, d);
  const double scale = std::ldexp(1.0, -64);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      double u = static_cast<double>(engine()) * scale + shift[a];
      u -= std::floor(u);
      out(i, a) = std::clamp(u, 1e-15, 1.0 - 1e-15);
    }
  }
  return out;
}

Tensor qmc_normal(std::size_t n, std::size_t d, std::uint64_t seed, double variance, double mean) {
  KLFLOW_REQUIRE(variance > 0.0, "variance must be positive");
  Tensor u = qmc_uniform(n, d, seed);
  const double sd = std::sqrt(variance);
  for (auto& x : u.values()) x = mean + sd * normal_quantile(x);
  return u;
}

RadialTarget::RadialTarget(int alpha, std::size_t dim, std::size_t table) : alpha_(alpha), dim_(dim) {
  KLFLOW_REQUIRE(alpha >= 1 && dim >= 1, "radial target needs alpha >= 1 and dim >= 1");
  KLFLOW_REQUIRE(table >= 3, "radial table too small");
  // Beyond r_max the density is below exp(-60) of its scale.
  const double two_alpha = 2.0 * alpha;
  const double r_max = std::pow(60.0 * two_alpha, 1.0 / two_alpha) + 1.0;
  r_.resize(table);
  cdf_.assign(table, 0.0);
  auto density = [&](double r) {
    return std::pow(r, static_cast<double>(dim) - 1.0) * std::exp(-std::pow(r, two_alpha) / two_alpha);
  };
  double prev = density(0.0);
  r_[0] = 0.0;
  for (std::size_t i = 1; i < table; ++i) {
    r_[i] = r_max * static_cast<double>(i) / static_cast<double>(table - 1);
    // Simpson on each cell.
    const double mid = density(0.5 * (r_[i - 1] + r_[i]));
    const double cur = density(r_[i]);
    cdf_[i] = cdf_[i - 1] + (r_[i] - r_[i - 1]) * (prev + 4.0 * mid + cur) / 6.0;
    prev = cur;
  }
  const double total = cdf_.back();
  for (auto& c : cdf_) c /= total;
}

double RadialTarget::radius_quantile(double u) const {
  KLFLOW_REQUIRE(u >= 0.0 && u <= 1.0, "quantile level must be in [0, 1]");
  const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
  if (it == cdf_.begin()) return 0.0;
  if (it == cdf_.end()) return r_.back();
  const auto i = static_cast<std::size_t>(it - cdf_.begin());
  const double t = (u - cdf_[i - 1]) / (cdf_[i] - cdf_[i - 1]);
  return r_[i - 1] + t * (r_[i] - r_[i - 1]);
}

ParticleCloud RadialTarget::from_uniforms(const Tensor& u) const {
  ParticleCloud out(u.rows(), dim_);
  for (std::size_t i = 0; i < u.rows(); ++i) {
    const double r = radius_quantile(u(i, 0));
    if (dim_ == 1) {
      out(i, 0) = u(i, 1) < 0.5 ? -r : r;
    } else if (dim_ == 2) {
      const double phi = 2.0 * std::numbers::pi * u(i, 1);
      out(i, 0) = r * std::cos(phi);
      out(i, 1) = r * std::sin(phi);
    } else {
      double norm = 0.0;
      for (std::size_t a = 0; a < dim_; ++a) {
        out(i, a) = normal_quantile(u(i, a + 1));
        norm += out(i, a) * out(i, a);
      }
      norm = std::sqrt(norm);
      for (std::size_t a = 0; a < dim_; ++a) out(i, a) *= r / norm;
    }
  }
  return out;
}

ParticleCloud RadialTarget::sample_qmc(std::size_t n, std::uint64_t seed) const {
  const std::size_t cols = dim_ <= 2 ? 2 : dim_ + 1;
  return from_uniforms(qmc_uniform(n, cols, seed));
}

ParticleCloud RadialTarget::sample(std::size_t n, Rng& rng) const {
  const std::size_t cols = dim_ <= 2 ? 2 : dim_ + 1;
  Tensor u(n, cols);
  for (auto& x : u.values()) x = std::clamp(uniform01(rng), 1e-15, 1.0 - 1e-15);
  return from_uniforms(u);
}

// ---------------------------------------------------------------------------
// CSV

void write_cloud_csv(std::ostream& out, const ParticleCloud& cloud) {
  std::ostringstream s;
  s.precision(17);
  s << cloud.cols() << '\n';
  for (std::size_t i = 0; i < cloud.rows(); ++i) {
    for (std::size_t a = 0; a < cloud.cols(); ++a) s << (a ? "," : "") << cloud(i, a);
    s << '\n';
  }
  out << s.str();
}

ParticleCloud read_cloud_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("cloud csv: missing dimension header on line 1");
  std::size_t d = 0;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(line, &pos);
    if (pos != line.size() || v < 1) throw ParseError("");
    d = static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ParseError("cloud csv: line 1: expected a positive dimension, got '" + line + "'");
  }
  std::vector<double> data;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        data.push_back(std::stod(cell, &pos));
        if (pos != cell.size()) throw ParseError("");
      } catch (const std::exception&) {
        throw ParseError("cloud csv: line " + std::to_string(lineno) + ", column " + std::to_string(cols + 1) +
                         ": not a number: '" + cell + "'");
      }
      ++cols;
    }
    if (cols != d) {
      throw ParseError("cloud csv: line " + std::to_string(lineno) + ": expected " + std::to_string(d) +
                       " values, got " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw ParseError("cloud csv: no rows after the header");
  return Tensor(rows, d, std::move(data));
}

}  // namespace klflow
