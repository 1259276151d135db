#include <doctest.h>

#include <cmath>
#include <numbers>

#include "klflow/error.hpp"
#include "klflow/functionals.hpp"
#include "oracles.hpp"

using namespace klflow;

namespace {

Dataset uniform_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return Dataset(oracle::uniform_tensor(n, d, rng, -3, 3));
}

// Direct double loop, no log-sum-exp.
double naive_npmle(const Tensor& theta, const Dataset& data) {
  double s = 0.0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    double mix = 0.0;
    for (std::size_t j = 0; j < theta.rows(); ++j) {
      double q = 0.0;
      for (std::size_t c = 0; c < data.dim(); ++c) q += std::pow(data.x(i, c) - theta(j, c), 2);
      mix += std::exp(-0.5 * q) / std::pow(2 * std::numbers::pi, 0.5 * static_cast<double>(data.dim()));
    }
    s -= std::log(mix / static_cast<double>(theta.rows()));
  }
  return s / static_cast<double>(data.n());
}

FlowModel shifted_1d(double s, double b, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  FlowModel f(BaseDistribution::isotropic(1, 1.0), identity_init(1, 1, 4, rng));
  f.blocks()[0].scale_net.layers.back().bias[0] = s;
  f.blocks()[0].shift_net.layers.back().bias[0] = b;
  return f;
}

}  // namespace

TEST_CASE("single atom at a single observation") {
  const Dataset data(Tensor::scalar(0.0));
  CHECK(npmle_loss(Tensor::scalar(0.0), data, {}) == doctest::Approx(0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(npmle_loss(Tensor::scalar(0.0), data, {}) == doctest::Approx(0.91894).epsilon(1e-5));
}

TEST_CASE("npmle loss matches a naive double loop") {
  const Dataset data = uniform_data(40, 2, 1);
  Rng rng = make_rng(2);
  const Tensor theta = oracle::uniform_tensor(15, 2, rng);
  CHECK(npmle_loss(theta, data, {}) == doctest::Approx(naive_npmle(theta, data)).epsilon(1e-12));
}

TEST_CASE("npmle loss is stable far from the data") {
  const Dataset data(Tensor::scalar(0.0));
  const double v = npmle_loss(Tensor::scalar(60.0), data, {});
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(0.5 * std::log(2 * std::numbers::pi) + 1800.0).epsilon(1e-14));
}

TEST_CASE("npmle loss is translation invariant") {
  Dataset data = uniform_data(30, 2, 3);
  Rng rng = make_rng(4);
  Tensor theta = oracle::uniform_tensor(10, 2, rng);
  const double before = npmle_loss(theta, data, {});
  for (std::size_t i = 0; i < data.n(); ++i) data.x(i, 1) += 7.5;
  for (std::size_t j = 0; j < theta.rows(); ++j) theta(j, 1) += 7.5;
  CHECK(npmle_loss(theta, data, {}) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("npmle loss averages over disjoint data subsets") {
  const Dataset data = uniform_data(30, 2, 5);
  Rng rng = make_rng(6);
  const Tensor theta = oracle::uniform_tensor(8, 2, rng);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < 30; ++i) (i < 12 ? a : b).push_back(i);
  const double whole = npmle_loss(theta, data, {});
  const double split = (12.0 * npmle_loss(theta, data.subset(a), {}) + 18.0 * npmle_loss(theta, data.subset(b), {})) / 30.0;
  CHECK(whole == doctest::Approx(split).epsilon(1e-13));
  NpmleFunctional f(data, {});
  CHECK(f.restricted(a).value(theta, {}) == doctest::Approx(npmle_loss(theta, data.subset(a), {})).epsilon(1e-15));
}

TEST_CASE("location-scale kernel density") {
  LikelihoodKernel k{KernelKind::kLocationScale};
  CHECK(k.param_dim(2) == 4);
  const std::vector<double> x{1.0, -0.5}, theta{0.2, 0.1, std::log(2.0), std::log(0.5)};
  const double ref = -std::log(2 * std::numbers::pi) - 0.5 * std::log(2.0 * 0.5) - 0.5 * (0.64 / 2.0 + 0.36 / 0.5);
  CHECK(k.log_density(x, theta) == doctest::Approx(ref).epsilon(1e-14));
}

TEST_CASE("taped losses match values and have correct gradients") {
  const Dataset data = uniform_data(12, 2, 7);
  Rng rng = make_rng(8);
  const Tensor theta = oracle::uniform_tensor(6, 2, rng);
  NpmleFunctional f(data, {});
  ad::Tape tape;
  ad::Var out = f.loss(tape, tape.constant(theta), tape.constant(Tensor(6, 1, 0.0)));
  CHECK(out.value().item() == doctest::Approx(f.value(theta, {})).epsilon(1e-13));
  const double err = oracle::gradient_error({theta}, [&](ad::Tape& t, std::vector<ad::Var>& v) {
    return f.loss(t, v[0], t.constant(Tensor(6, 1, 0.0)));
  });
  CHECK(err < 1e-4);

  NpmleFunctional fs(uniform_data(10, 1, 9), {KernelKind::kLocationScale});
  const Tensor ts = oracle::uniform_tensor(4, 2, rng, -1, 1);
  CHECK(oracle::gradient_error({ts}, [&](ad::Tape& t, std::vector<ad::Var>& v) {
          return fs.loss(t, v[0], t.constant(Tensor(4, 1, 0.0)));
        }) < 1e-4);

  KlTargetFunctional kl(2, {2, 0.0});
  const Tensor lr = oracle::uniform_tensor(6, 1, rng);
  CHECK(oracle::gradient_error({theta, lr}, [&](ad::Tape& t, std::vector<ad::Var>& v) { return kl.loss(t, v[0], v[1]); }) < 1e-4);
}

TEST_CASE("npmle first variation integrates to minus one") {
  const Dataset data = uniform_data(25, 2, 10);
  Rng rng = make_rng(11);
  const Tensor theta = oracle::uniform_tensor(9, 2, rng);
  const auto fv = first_variation_npmle(theta, data, theta, {});
  double m = 0.0;
  for (double v : fv) m += v;
  CHECK(m / 9.0 == doctest::Approx(-1.0).epsilon(1e-13));
  NpmleFunctional f(data, {});
  const auto fv2 = f.first_variation(theta, {});
  for (std::size_t j = 0; j < 9; ++j) CHECK(fv2[j] == doctest::Approx(fv[j]).epsilon(1e-14));
}

TEST_CASE("npmle first variation is the mixing directional derivative") {
  const Dataset data = uniform_data(20, 1, 12);
  Rng rng = make_rng(13);
  const Tensor theta = oracle::uniform_tensor(5, 1, rng);
  const Tensor e = Tensor::scalar(0.7);
  Tensor atoms(6, 1);
  for (std::size_t j = 0; j < 5; ++j) atoms(j, 0) = theta(j, 0);
  atoms(5, 0) = 0.7;
  const RowMatrix lk = LikelihoodKernel{}.log_kernel(data, atoms);
  auto mixed = [&](double eps) {
    std::vector<double> w(6, (1 - eps) / 5.0);
    w[5] = eps;
    return npmle_loss_weighted(lk, w);
  };
  const double h = 1e-6;
  const double deriv = (mixed(h) - mixed(0.0)) / h;
  const double fv = first_variation_npmle(e, data, theta, {})[0];
  CHECK(deriv == doctest::Approx(fv + 1.0).epsilon(1e-4));
  CHECK(mixed(0.0) == doctest::Approx(npmle_loss(theta, data, {})).epsilon(1e-14));
}

TEST_CASE("kl target objective and first variation") {
  PotentialTarget quad{1, 0.0};
  const std::vector<double> th{3.0, 4.0};
  CHECK(quad.potential(th) == doctest::Approx(12.5));
  PotentialTarget quart{2, 0.0};
  CHECK(quart.potential(th) == doctest::Approx(625.0 / 4.0));

  // rho = pi = N(0, I) for alpha = 1: V + log rho is constant.
  KlTargetFunctional f(2, quad);
  Rng rng = make_rng(14);
  const Tensor theta = oracle::uniform_tensor(10, 2, rng);
  std::vector<double> log_rho(10);
  for (std::size_t j = 0; j < 10; ++j) log_rho[j] = -std::log(2 * std::numbers::pi) - quad.potential(theta.row_span(j));
  const auto fv = f.first_variation(theta, log_rho);
  for (std::size_t j = 1; j < 10; ++j) CHECK(fv[j] == doctest::Approx(fv[0]).epsilon(1e-13));
  CHECK(fv_variance(fv) < 1e-24);
  CHECK(f.value(theta, log_rho) == doctest::Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-13));
  CHECK(kl_target_loss(theta, log_rho, quad) == doctest::Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-13));
}

TEST_CASE("subproblem anchored at itself has zero KL") {
  const Dataset data = uniform_data(30, 2, 15);
  NpmleFunctional f(data, {});
  Rng rng = make_rng(16);
  FlowModel flow(BaseDistribution::isotropic(2, 4.0), identity_init(2, 3, 8, rng));
  oracle::randomize(flow, rng, 0.3);
  SubproblemSpec spec{&f, &flow, 2.0};
  const PrefixCache cache = make_prefix_cache(flow, flow.base().sample(200, rng));
  const SubproblemEval ev = evaluate_subproblem(spec, flow, cache);
  CHECK(std::abs(ev.kl) < 1e-10);
  CHECK(ev.loss == doctest::Approx(ev.objective).epsilon(1e-12));
  CHECK(ev.objective == doctest::Approx(npmle_loss(ev.theta, data, {})).epsilon(1e-12));

  ad::Tape tape;
  const SubproblemTerms terms = subproblem_loss(tape, spec, flow, cache);
  CHECK(terms.loss.value().item() == doctest::Approx(ev.loss).epsilon(1e-12));
}

TEST_CASE("subproblem KL estimates the Gaussian KL") {
  // rho = N(b, e^{2s}), rho_prev = N(0, 1).
  const double s = 0.4, b = -0.8;
  const FlowModel prev = shifted_1d(0.0, 0.0, 17);
  const FlowModel cur = shifted_1d(s * 5.0, b, 17);
  const double se = cur.scale_range() * std::tanh(s);  // raw 5s through the soft clamp
  const double ref = 0.5 * (std::exp(2 * se) + b * b - 1.0) - se;
  KlTargetFunctional f(1, {1, 0.0});
  SubproblemSpec spec{&f, &prev, 1.0};
  Rng rng = make_rng(18);
  const PrefixCache cache = make_prefix_cache(cur, cur.base().sample(40000, rng));
  const SubproblemEval ev = evaluate_subproblem(spec, cur, cache);
  CHECK(ev.kl == doctest::Approx(ref).epsilon(0.03));
  // For alpha = 1 the target is N(0, 1), so F(rho) is the same KL shifted by log(2 pi)/2.
  CHECK(ev.objective == doctest::Approx(ref - 0.5 * std::log(2 * std::numbers::pi)).epsilon(0.03));
}

TEST_CASE("variance helpers") {
  const std::vector<double> v{1e9 + 1, 1e9 + 2, 1e9 + 3, 1e9 + 4};
  CHECK(sample_variance(v) == doctest::Approx(oracle::two_pass_variance(v)).epsilon(1e-12));
  CHECK(sample_variance(v) == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  CHECK(fv_variance(v) == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  const std::vector<double> fv{1.0, 2.0, 3.0}, lr{2.0, 0.0, -2.0};
  // fv + lr / 2 is constant.
  CHECK(subproblem_fv_variance(fv, lr, 2.0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(sample_variance(std::vector<double>{1.0}), ContractViolation);
}

TEST_CASE("minibatch indices") {
  Rng rng = make_rng(19);
  const auto idx = minibatch_indices(100, 30, rng);
  CHECK(idx.size() == 30);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  CHECK(idx.back() < 100);
  const auto all = minibatch_indices(5, 5, rng);
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4});
  Rng a = make_rng(20), b = make_rng(20);
  CHECK(minibatch_indices(1000, 10, a) == minibatch_indices(1000, 10, b));
  CHECK_THROWS_AS(minibatch_indices(5, 6, rng), ContractViolation);
}
