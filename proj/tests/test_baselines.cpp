#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "klflow/baselines.hpp"
#include "klflow/error.hpp"
#include "oracles.hpp"

using namespace klflow;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Kolmogorov-Smirnov statistic against a continuous CDF.
template <class Cdf>
double ks_statistic(std::vector<double> v, Cdf cdf) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = cdf(v[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

Tensor shifted(Tensor t, double c) {
  for (auto& v : t.values()) v += c;
  return t;
}

}  // namespace

TEST_CASE("Langevin step follows the literal update") {
  Rng rng = make_rng(1);
  Tensor theta = oracle::uniform_tensor(5, 2, rng);
  const Tensor before = theta;
  Rng a = make_rng(2), b = make_rng(2);
  const double dt = 0.01;
  langevin_step(theta, 2, dt, a);
  for (std::size_t j = 0; j < 5; ++j) {
    const double r2 = before(j, 0) * before(j, 0) + before(j, 1) * before(j, 1);
    for (std::size_t c = 0; c < 2; ++c) {
      const double expect = before(j, c) - dt * r2 * before(j, c) + std::sqrt(2 * dt) * standard_normal(b);
      CHECK(theta(j, c) == doctest::Approx(expect).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS(langevin_step(theta, 0, dt, a), ContractViolation);
}

TEST_CASE("Langevin with a quadratic potential keeps the OU variance") {
  // alpha = 1: theta' = (1 - dt) theta + sqrt(2 dt) u has stationary variance 2 dt / (1 - (1 - dt)^2).
  Rng rng = make_rng(3);
  const double dt = 0.05;
  const double var = 2 * dt / (1 - (1 - dt) * (1 - dt));
  Tensor init(20000, 1);
  for (auto& v : init.values()) v = std::sqrt(var) * standard_normal(rng);
  const LangevinResult r = langevin_run({1, dt, 30, 1e100}, init, rng);
  CHECK_FALSE(r.diverged);
  REQUIRE(r.trajectory.size() == 31);
  const auto v = r.trajectory.back().values();
  const double s = oracle::two_pass_variance({v.begin(), v.end()});
  CHECK(std::abs(s - var) < 4.5 * var * std::sqrt(2.0 / 19999));
}

TEST_CASE("Langevin divergence is reported") {
  Rng rng = make_rng(4);
  Tensor init(3, 2, 30.0);
  const LangevinResult r = langevin_run({3, 1.0, 10, 1e100}, init, rng);
  CHECK(r.diverged);
  CHECK(r.diverged_at >= 1);
}

TEST_CASE("W1 axioms and the one-dimensional oracle") {
  Rng rng = make_rng(5);
  const Tensor a = oracle::uniform_tensor(40, 2, rng), b = oracle::uniform_tensor(40, 2, rng),
               c = oracle::uniform_tensor(40, 2, rng);
  CHECK(w1_exact(a, a) == doctest::Approx(0.0));
  CHECK(w1_exact(a, b) == doctest::Approx(w1_exact(b, a)).epsilon(1e-12));
  CHECK(w1_exact(a, c) <= w1_exact(a, b) + w1_exact(b, c) + 1e-12);
  CHECK(w1_exact(a, b) > 0.0);
  // A rigid shift moves every point by the same distance.
  Tensor s = a;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    s(i, 0) += 0.3;
    s(i, 1) -= 0.4;
  }
  CHECK(w1_exact(a, s) == doctest::Approx(0.5).epsilon(1e-12));

  const Tensor x = oracle::uniform_tensor(60, 1, rng), y = oracle::uniform_tensor(60, 1, rng);
  const auto xv = x.values(), yv = y.values();
  CHECK(w1_exact(x, y) == doctest::Approx(w1_sorted_1d({xv.begin(), xv.end()}, {yv.begin(), yv.end()})).epsilon(1e-12));
  CHECK(w1_exact(x, shifted(x, 2.0)) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("sub-sampled W1") {
  Rng rng = make_rng(6);
  const Tensor a = oracle::uniform_tensor(100, 2, rng), b = oracle::uniform_tensor(100, 2, rng);
  Rng r1 = make_rng(7), r2 = make_rng(7);
  CHECK(w1_distance(a, b, r1, {100, 3}) == w1_exact(a, b));
  CHECK(w1_distance(a, b, r1, {30, 4}) == w1_distance(a, b, r2, {30, 4}));
  // Shared indices keep a rigid shift exact under sub-sampling.
  CHECK(w1_distance(a, shifted(a, 1.0), r1, {20, 3}) == doctest::Approx(std::numbers::sqrt2).epsilon(1e-12));
  const Tensor big = oracle::uniform_tensor(150, 2, rng);
  CHECK(std::isfinite(w1_distance(a, big, r1, {50, 2})));
  Tensor bad = a;
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(w1_distance(bad, b, r1), DomainError);
}

TEST_CASE("NLL gap series") {
  const GapSeries g = nll_gap({2.0, 1.5, 1.0 + 1e-14, 0.5}, 1.0);
  CHECK(g.log_gap[0] == doctest::Approx(0.0));
  CHECK(g.log_gap[1] == doctest::Approx(std::log(0.5)));
  CHECK(g.log_gap[2] == doctest::Approx(std::log(kGapFloor)));
  CHECK(g.log_gap[3] == doctest::Approx(std::log(kGapFloor)));
  CHECK(g.floored == std::vector<bool>{false, false, true, true});
}

TEST_CASE("two-moons density and sampler") {
  TwoMoonsSpec s;
  CHECK(s.log_density(1.3, 0.7) == doctest::Approx(s.log_density(-1.3, 0.7)).epsilon(1e-14));
  CHECK(s.log_density(1.3, 0.7) == doctest::Approx(s.log_density(1.3, -0.7)).epsilon(1e-14));
  CHECK(s.log_density(2.0, 0.0) > s.log_density(0.0, 2.0));
  Rng rng = make_rng(8);
  const Tensor m = two_moons_sample(s, 4000, rng);
  double mx = 0.0, my = 0.0, mr = 0.0;
  std::size_t right = 0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    mx += m(i, 0);
    my += m(i, 1);
    mr += std::hypot(m(i, 0), m(i, 1));
    right += m(i, 0) > 0;
  }
  CHECK(std::abs(mx / 4000) < 0.1);
  CHECK(std::abs(my / 4000) < 0.05);
  CHECK(mr / 4000 == doctest::Approx(2.0).epsilon(0.03));
  CHECK(std::abs(static_cast<double>(right) / 4000 - 0.5) < 0.04);
  s.separation = 1.4;
  Rng rng2 = make_rng(9);
  const Tensor wide = two_moons_sample(s, 1000, rng2);
  double wr = 0.0;
  for (std::size_t i = 0; i < wide.rows(); ++i) wr += std::hypot(wide(i, 0), wide(i, 1));
  CHECK(wr / 1000 == doctest::Approx(2.8).epsilon(0.03));
}

TEST_CASE("point mixtures give the kernel's own law") {
  MixingSpec mix;
  mix.kind = MixingSpec::Kind::kPoint;
  mix.dim = 1;
  mix.point = {0.0};
  Rng rng = make_rng(10);
  const Dataset d = mixture_data_gen(mix, KernelKind::kLocation, 5000, rng);
  const auto v = d.x.values();
  // 1.63 / sqrt(n) is the 1% critical value.
  CHECK(ks_statistic({v.begin(), v.end()}, normal_cdf) < 1.63 / std::sqrt(5000.0));

  const Dataset ls = mixture_data_gen(mix, KernelKind::kLocationScale, 20000, rng);
  const auto w = ls.x.values();
  // X = |z1| z2: unit variance.
  CHECK(oracle::two_pass_variance({w.begin(), w.end()}) == doctest::Approx(1.0).epsilon(0.06));

  MixingSpec moons;
  moons.dim = 2;
  const Dataset dm = mixture_data_gen(moons, KernelKind::kLocation, 100, rng);
  CHECK(dm.dim() == 2);
  moons.kind = MixingSpec::Kind::kTwoMoonsNormal;
  moons.dim = 4;
  CHECK(mixture_data_gen(moons, KernelKind::kLocation, 10, rng).dim() == 4);
  moons.dim = 2;
  CHECK_THROWS_AS(mixture_data_gen(moons, KernelKind::kLocation, 10, rng), ContractViolation);
}

TEST_CASE("radial target sampler") {
  // alpha = 1, d = 2: the radius is Rayleigh.
  const RadialTarget gauss(1, 2);
  for (double u : {0.1, 0.5, 0.9}) CHECK(gauss.radius_quantile(u) == doctest::Approx(std::sqrt(-2 * std::log(1 - u))).epsilon(1e-5));
  const Tensor q = gauss.sample_qmc(4096, 3);
  std::vector<double> xs;
  for (std::size_t i = 0; i < q.rows(); ++i) xs.push_back(q(i, 0));
  CHECK(ks_statistic(xs, normal_cdf) < 0.02);

  // alpha = 2, d = 2: E |theta|^4 = 2.
  const RadialTarget quart(2, 2);
  Rng rng = make_rng(11);
  const Tensor s = quart.sample(20000, rng);
  double m4 = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) m4 += std::pow(s(i, 0) * s(i, 0) + s(i, 1) * s(i, 1), 2);
  CHECK(m4 / 20000 == doctest::Approx(2.0).epsilon(0.03));
}

TEST_CASE("qmc points") {
  const Tensor u = qmc_uniform(1024, 2, 1);
  for (double v : u.values()) {
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
  CHECK(qmc_uniform(64, 3, 5) == qmc_uniform(64, 3, 5));
  CHECK_FALSE(qmc_uniform(64, 3, 5) == qmc_uniform(64, 3, 6));
  const Tensor z = qmc_normal(4096, 1, 2, 4.0, 1.0);
  const auto zv = z.values();
  CHECK(ks_statistic({zv.begin(), zv.end()}, [](double x) { return normal_cdf((x - 1.0) / 2.0); }) < 0.01);
}

TEST_CASE("cloud CSV round trip") {
  Rng rng = make_rng(12);
  const Tensor c = oracle::uniform_tensor(7, 3, rng);
  std::stringstream ss;
  write_cloud_csv(ss, c);
  CHECK(read_cloud_csv(ss) == c);
  std::stringstream bad("2\n1.0,2.0\n3.0\n");
  CHECK_THROWS_AS(read_cloud_csv(bad), ParseError);
}

TEST_CASE("samplers are deterministic per seed") {
  TwoMoonsSpec s;
  Rng a = make_rng(13), b = make_rng(13);
  CHECK(two_moons_sample(s, 50, a) == two_moons_sample(s, 50, b));
  const RadialTarget t(2, 3);
  CHECK(t.sample_qmc(32, 4) == t.sample_qmc(32, 4));
}
