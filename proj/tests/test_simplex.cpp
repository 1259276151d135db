#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "klflow/error.hpp"
#include "klflow/simplex.hpp"
#include "oracles.hpp"

using namespace klflow;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor line(double lo, double hi, std::size_t n) {
  const std::vector<double> a{lo}, b{hi};
  const std::vector<std::size_t> c{n};
  return tensor_grid(a, b, c);
}

Dataset bimodal(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> z;
  Tensor x(n, 1);
  for (std::size_t i = 0; i < n; ++i) x(i, 0) = (i % 2 == 0 ? 2.0 : -2.0) + z(rng);
  return Dataset(x);
}

std::vector<double> logs(const std::vector<double>& w) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] > 0 ? std::log(w[i]) : -kInf;
  return out;
}

double naive_kl(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] > 0) s += a[i] * std::log(a[i] / b[i]);
  return s;
}

double l1(std::span<const double> la, std::span<const double> lb) {
  double s = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) s += std::abs(std::exp(la[i]) - std::exp(lb[i]));
  return s;
}

}  // namespace

TEST_CASE("kl divergence") {
  const std::vector<double> a{0.2, 0.3, 0.5}, b{0.4, 0.4, 0.2};
  CHECK(kl_divergence(logs(a), logs(b)) == doctest::Approx(naive_kl(a, b)).epsilon(1e-13));
  CHECK(kl_divergence(logs(a), logs(a)) == 0.0);
  const std::vector<double> z{0.0, 0.5, 0.5};
  CHECK(kl_divergence(logs(z), logs(b)) == doctest::Approx(naive_kl(z, b)).epsilon(1e-13));
  CHECK(kl_divergence(logs(b), logs(z)) == kInf);
  // Nearly equal distributions: nonnegative and second order.
  const std::vector<double> c{0.2 + 1e-9, 0.3 - 1e-9, 0.5};
  const double k = kl_divergence(logs(c), logs(a));
  CHECK(k >= 0.0);
  CHECK(k == doctest::Approx(0.5 * (1e-18 / 0.2 + 1e-18 / 0.3)).epsilon(1e-4));
}

TEST_CASE("grids and weights") {
  CHECK(balanced_counts(3025, 2) == std::vector<std::size_t>{55, 55});
  const auto c4 = balanced_counts(2041, 4);
  const std::size_t prod = std::accumulate(c4.begin(), c4.end(), std::size_t{1}, std::multiplies<>());
  CHECK(prod <= 2041);
  CHECK(*std::max_element(c4.begin(), c4.end()) - *std::min_element(c4.begin(), c4.end()) <= 1);
  const Tensor g = line(-1, 1, 5);
  CHECK(g.rows() == 5);
  CHECK(g(0, 0) == -1.0);
  CHECK(g(2, 0) == doctest::Approx(0.0));
  CHECK(g(4, 0) == 1.0);
  const std::vector<double> lo{0, 0}, hi{1, 2};
  const std::vector<std::size_t> cnt{2, 3};
  CHECK(tensor_grid(lo, hi, cnt).rows() == 6);

  Rng rng = make_rng(1);
  const SimplexDistribution r = SimplexDistribution::random(line(0, 1, 20), rng);
  const auto w = r.weights();
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-14));
  for (double v : w) CHECK(v > 0.0);
  std::vector<double> lw{1.0, 2.0, 3.0};
  normalize_log_weights(lw);
  CHECK(std::exp(lw[0]) + std::exp(lw[1]) + std::exp(lw[2]) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(oscillation(std::vector<double>{3.0, -1.0, 2.0}) == 4.0);
}

TEST_CASE("kl-target step: closed form, solver and optimality conditions agree") {
  const Tensor atoms = line(-4, 4, 81);
  const SimplexFunctional f = SimplexFunctional::kl_target(atoms, {2, 0.0});
  Rng rng = make_rng(2);
  const SimplexDistribution prev = SimplexDistribution::random(atoms, rng);
  for (double tau : {0.1, 1.0, 10.0}) {
    const auto closed = kl_target_closed_form(f.log_pi(), prev.log_weights, tau);
    const StepResult step = implicit_step_exact(f, prev.log_weights, tau);
    CHECK(step.converged);
    CHECK(l1(closed, step.log_w) < 1e-8);
    // Stationarity: log(w/pi) + (1/tau) log(w/prev) is constant on the support.
    std::vector<double> eta(closed.size());
    for (std::size_t j = 0; j < eta.size(); ++j)
      eta[j] = closed[j] - f.log_pi()[j] + (closed[j] - prev.log_weights[j]) / tau;
    CHECK(oscillation(eta) < 1e-10);
  }
}

TEST_CASE("npmle step reaches a stationary point that beats perturbations") {
  const Tensor atoms = line(-5, 5, 41);
  const SimplexFunctional f = SimplexFunctional::npmle(atoms, bimodal(60, 3), {});
  const SimplexDistribution prev = SimplexDistribution::uniform(atoms);
  const double tau = 2.0;
  const StepResult step = implicit_step_exact(f, prev.log_weights, tau);
  CHECK(step.converged);
  CHECK(oscillation(subproblem_residual(f, step.log_w, prev.log_weights, tau)) < 1e-9);
  auto obj = [&](std::span<const double> lw) { return f.value(lw) + kl_divergence(lw, prev.log_weights) / tau; };
  const double best = obj(step.log_w);
  CHECK(step.subproblem_value == doctest::Approx(best).epsilon(1e-12));
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const SimplexDistribution q = SimplexDistribution::random(atoms, rng);
    const auto wq = q.weights();
    auto w = SimplexDistribution{atoms, step.log_w}.weights();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = 0.99 * w[j] + 0.01 * wq[j];
    CHECK(obj(logs(w)) >= best - 1e-12);
  }
}

TEST_CASE("first variation is the directional derivative") {
  const Tensor atoms = line(-3, 3, 15);
  Rng rng = make_rng(5);
  const SimplexDistribution rho = SimplexDistribution::random(atoms, rng);
  const auto w = rho.weights();
  for (const SimplexFunctional& f : {SimplexFunctional::kl_target(atoms, {1, 0.0}),
                                     SimplexFunctional::npmle(atoms, bimodal(30, 6), {})}) {
    const auto fv = simplex_fv(f, rho);
    double mean = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) mean += w[j] * fv[j];
    for (std::size_t j : {0u, 7u, 14u}) {
      const double h = 1e-6;
      std::vector<double> wp(w);
      for (std::size_t i = 0; i < wp.size(); ++i) wp[i] = (1 - h) * w[i] + (i == j ? h : 0.0);
      const double deriv = (f.value(logs(wp)) - f.value(rho.log_weights)) / h;
      CHECK(deriv == doctest::Approx(fv[j] - mean).epsilon(1e-4));
    }
  }
}

TEST_CASE("constant linear terms do not move the step") {
  const Tensor atoms = line(-3, 3, 21);
  const SimplexFunctional f = SimplexFunctional::npmle(atoms, bimodal(20, 7), {});
  const SimplexFunctional g = f.with_linear(std::vector<double>(21, 3.5));
  const SimplexDistribution prev = SimplexDistribution::uniform(atoms);
  CHECK(g.value(prev.log_weights) == doctest::Approx(f.value(prev.log_weights) + 3.5).epsilon(1e-13));
  const StepResult a = implicit_step_exact(f, prev.log_weights, 1.0);
  const StepResult b = implicit_step_exact(g, prev.log_weights, 1.0);
  CHECK(l1(a.log_w, b.log_w) < 1e-9);
}

TEST_CASE("functionals are convex along chords") {
  const Tensor atoms = line(-3, 3, 12);
  Rng rng = make_rng(8);
  for (const SimplexFunctional& f : {SimplexFunctional::kl_target(atoms, {2, 0.0}),
                                     SimplexFunctional::npmle(atoms, bimodal(25, 9), {})}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto a = SimplexDistribution::random(atoms, rng).weights();
      const auto b = SimplexDistribution::random(atoms, rng).weights();
      for (double t : {0.25, 0.5, 0.75}) {
        std::vector<double> m(a.size());
        for (std::size_t j = 0; j < m.size(); ++j) m[j] = (1 - t) * a[j] + t * b[j];
        CHECK(f.value(logs(m)) <= (1 - t) * f.value(logs(a)) + t * f.value(logs(b)) + 1e-12);
      }
    }
  }
}

TEST_CASE("three-point inequality holds at exact steps") {
  const Tensor atoms = line(-4, 4, 31);
  Rng rng = make_rng(10);
  for (const SimplexFunctional& f : {SimplexFunctional::kl_target(atoms, {2, 0.0}),
                                     SimplexFunctional::npmle(atoms, bimodal(30, 11), {})}) {
    const SimplexDistribution prev = SimplexDistribution::random(atoms, rng);
    const StepResult step = implicit_step_exact(f, prev.log_weights, 1.5);
    for (int trial = 0; trial < 30; ++trial) {
      const SimplexDistribution probe = SimplexDistribution::random(atoms, rng);
      CHECK(three_point_slack(f, prev.log_weights, step.log_w, probe.log_weights, 1.5) >= -1e-8);
    }
  }
}

TEST_CASE("kw grid solver stays on the simplex and decreases the loss") {
  const Tensor atoms = line(-5, 5, 101);
  const SimplexFunctional f = SimplexFunctional::npmle(atoms, bimodal(200, 12), {});
  const KwResult kw = kw_grid_solver(f, 1.0, 3000, 1);
  REQUIRE(kw.values.size() == 3001);
  std::size_t increases = 0;
  for (std::size_t k = 1; k < kw.values.size(); ++k) increases += kw.values[k] > kw.values[k - 1] + 1e-12;
  CHECK(increases == 0);
  double lowest = 1.0, worst_sum = 0.0;
  for (const auto& w : kw.weights) {
    lowest = std::min(lowest, *std::min_element(w.begin(), w.end()));
    worst_sum = std::max(worst_sum, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
  }
  CHECK(lowest >= 0.0);
  CHECK(worst_sum < 1e-12);
  const auto em = npmle_reference(f, 20000);
  CHECK(std::abs(kw.values.back() - f.value(em)) < 1e-3);
  CHECK(f.value(em) <= kw.values.back() + 1e-9);
}

TEST_CASE("exact runs converge on a strongly convex target") {
  const Tensor atoms = line(-4, 4, 41);
  const SimplexFunctional f = SimplexFunctional::kl_target(atoms, {2, 0.0});
  Rng rng = make_rng(13);
  const SimplexDistribution init = SimplexDistribution::random(atoms, rng);
  std::vector<double> star = f.log_pi();
  normalize_log_weights(star);
  const std::vector<double> taus(10, 1.0), tols(10, 1e-12);
  const ExactRun run = run_iklpd(f, init.log_weights, taus, tols);
  REQUIRE(run.log_w.size() == 11);
  for (std::size_t k = 1; k <= 10; ++k) {
    const double ratio = kl_divergence(star, run.log_w[k]) / kl_divergence(star, run.log_w[k - 1]);
    CHECK(ratio <= 1.0 / 1.5 + 1e-8);
  }
  const Theorem2Result t2 = verify_theorem2(f, init.log_weights, star, taus);
  CHECK(t2.report.all_satisfied());
}

TEST_CASE("bound report CSV") {
  BoundReport r;
  r.name = "demo";
  r.rows.push_back({1, 0.5, 1.0, true, false});
  r.rows.push_back({2, 0.2, 0.1, false, false});
  CHECK_FALSE(r.all_satisfied());
  std::ostringstream os;
  write_bound_report(os, r);
  const std::string s = os.str();
  CHECK(s.substr(0, s.find('\n')) == "k,lhs,rhs_bound,satisfied");
  CHECK(bound_holds(1.0, 1.0));
  CHECK_FALSE(bound_holds(1.1, 1.0));
}
