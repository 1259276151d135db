#include <doctest.h>

#include <cmath>
#include <numbers>

#include "klflow/error.hpp"
#include "klflow/flow.hpp"
#include "oracles.hpp"

using namespace klflow;

namespace {

FlowModel random_flow(std::size_t dim, std::size_t blocks, std::uint64_t seed, double scale = 0.5,
                      double variance = 1.0) {
  Rng rng = make_rng(seed);
  FlowModel f(BaseDistribution::isotropic(dim, variance), identity_init(dim, blocks, 8, rng));
  oracle::randomize(f, rng, scale);
  return f;
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  auto s = t.row_span(r);
  return {s.begin(), s.end()};
}

void zero_all(FlowModel& f) {
  for (auto& b : f.blocks())
    for (auto* net : {&b.scale_net, &b.shift_net})
      for (auto& l : net->layers) {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
      }
}

}  // namespace

TEST_CASE("identity initialisation is exactly the identity") {
  for (std::size_t d : {1, 2, 5}) {
    Rng rng = make_rng(d);
    FlowModel f(BaseDistribution::isotropic(d, 1.0), identity_init(d, 4, 16, rng));
    const Tensor x = oracle::uniform_tensor(10, d, rng);
    std::vector<double> ld;
    CHECK(f.forward(x, &ld) == x);
    for (double v : ld) CHECK(v == 0.0);
    CHECK(f.inverse(x) == x);
  }
}

TEST_CASE("masks alternate with parity") {
  std::vector<std::size_t> p, t;
  coupling_masks(5, 0, p, t);
  CHECK(p == std::vector<std::size_t>{0, 2, 4});
  CHECK(t == std::vector<std::size_t>{1, 3});
  coupling_masks(5, 1, p, t);
  CHECK(p == std::vector<std::size_t>{1, 3});
  coupling_masks(1, 0, p, t);
  CHECK(p.empty());
  CHECK(t == std::vector<std::size_t>{0});
}

TEST_CASE("constant-output block is a known affine map") {
  Rng rng = make_rng(7);
  FlowModel f(BaseDistribution::isotropic(2, 1.0), identity_init(2, 1, 4, rng));
  zero_all(f);
  f.blocks()[0].scale_net.layers.back().bias[0] = 0.3;
  f.blocks()[0].shift_net.layers.back().bias[0] = -1.2;
  const double s = f.scale_range() * std::tanh(0.3 / f.scale_range());
  const Tensor x = Tensor::from_rows({{0.5, 2.0}, {-1.0, 0.0}});
  std::vector<double> ld;
  const Tensor y = f.forward(x, &ld);
  CHECK(y(0, 0) == 0.5);
  CHECK(y(0, 1) == doctest::Approx(2.0 * std::exp(s) - 1.2).epsilon(1e-14));
  CHECK(y(1, 1) == doctest::Approx(-1.2).epsilon(1e-14));
  CHECK(ld[0] == doctest::Approx(s).epsilon(1e-14));

  // Density of (x0, e^s x1 - 1.2) with x ~ N(0, I).
  const auto lp = f.log_density(y);
  for (std::size_t i = 0; i < 2; ++i) {
    const double a = y(i, 0), b = (y(i, 1) + 1.2) * std::exp(-s);
    const double ref = -std::log(2 * std::numbers::pi) - 0.5 * (a * a + b * b) - s;
    CHECK(lp[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("scale output stays inside the soft clamp") {
  Rng rng = make_rng(8);
  FlowModel f(BaseDistribution::isotropic(2, 1.0), identity_init(2, 1, 4, rng));
  zero_all(f);
  f.blocks()[0].scale_net.layers.back().bias[0] = 1e6;
  std::vector<double> ld;
  f.forward(Tensor(1, 2, 1.0), &ld);
  CHECK(ld[0] <= f.scale_range());
  CHECK(ld[0] == doctest::Approx(f.scale_range()));
}

TEST_CASE("random flows invert to round-off") {
  for (std::size_t d : {1, 2, 3, 6}) {
    FlowModel f = random_flow(d, 6, 10 + d);
    Rng rng = make_rng(20 + d);
    const Tensor x = oracle::uniform_tensor(50, d, rng, -3, 3);
    std::vector<double> ld, ldi;
    const Tensor y = f.forward(x, &ld);
    const Tensor back = f.inverse(y, &ldi);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
    CHECK(worst < 1e-6);
    for (std::size_t i = 0; i < x.rows(); ++i) CHECK(ld[i] == doctest::Approx(-ldi[i]).epsilon(1e-9));
  }
}

TEST_CASE("logdet matches the numerical Jacobian") {
  for (std::size_t d : {2, 3, 4}) {
    FlowModel f = random_flow(d, 5, 30 + d);
    Rng rng = make_rng(40 + d);
    const Tensor x = oracle::uniform_tensor(6, d, rng);
    std::vector<double> ld;
    f.forward(x, &ld);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto map = [&](const std::vector<double>& p) { return row_of(f.forward(Tensor(1, d, p)), 0); };
      const double ref = oracle::log_abs_det(oracle::jacobian(map, row_of(x, i)));
      CHECK(std::abs(ld[i] - ref) < 1e-5);
    }
  }
}

TEST_CASE("taped and plain evaluation agree, with correct parameter gradients") {
  FlowModel f = random_flow(3, 3, 50);
  Rng rng = make_rng(51);
  const Tensor x = oracle::uniform_tensor(5, 3, rng);
  ad::Tape tape;
  BoundFlow bound = f.bind(tape);
  FlowPass p = f.forward(tape, bound, tape.constant(x));
  std::vector<double> ld;
  const Tensor y = f.forward(x, &ld);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(p.out.value()[i] == doctest::Approx(y[i]).epsilon(1e-13));

  const CouplingBlock& blk = f.blocks()[1];
  std::vector<Tensor> params;
  for (auto* net : {&blk.scale_net, &blk.shift_net})
    for (const auto& l : net->layers) {
      params.push_back(l.weight);
      params.push_back(l.bias);
    }
  const double err = oracle::gradient_error(params, [&](ad::Tape& t, std::vector<ad::Var>& v) {
    FlowPass q = block_forward(t, blk, v, t.constant(x), f.scale_range());
    return ad::sum(ad::square(q.out)) + ad::sum(q.logdet);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("flow density integrates to one") {
  FlowModel f = random_flow(2, 4, 60, 0.3);
  const int n = 301;
  const double lo = -10, hi = 10, h = (hi - lo) / (n - 1);
  Tensor grid(static_cast<std::size_t>(n) * n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      grid(static_cast<std::size_t>(i * n + j), 0) = lo + i * h;
      grid(static_cast<std::size_t>(i * n + j), 1) = lo + j * h;
    }
  const auto lp = f.log_density(grid);
  double mass = 0.0;
  for (double v : lp) mass += std::exp(v);
  CHECK(mass * h * h == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("identity flow samples match the base moments") {
  Rng rng = make_rng(70);
  FlowModel f(BaseDistribution::isotropic(2, 4.0), identity_init(2, 3, 8, rng));
  const ParticleBatch b = sample(f, 20000, rng);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < b.points.rows(); ++i) m += b.points(i, c);
    m /= 20000.0;
    for (std::size_t i = 0; i < b.points.rows(); ++i) v += (b.points(i, c) - m) * (b.points(i, c) - m);
    v /= 19999.0;
    CHECK(std::abs(m) < 4.5 * std::sqrt(4.0 / 20000));
    CHECK(std::abs(v - 4.0) < 4.5 * 4.0 * std::sqrt(2.0 / 19999));
  }
  const double ref = -std::log(2 * std::numbers::pi * 4.0) - (b.points(0, 0) * b.points(0, 0) + b.points(0, 1) * b.points(0, 1)) / 8.0;
  CHECK(b.log_density[0] == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("composition freezes the front blocks") {
  FlowModel front = random_flow(2, 3, 80);
  Rng rng = make_rng(81);
  FlowModel g = compose(front, identity_init(2, 2, 8, rng, 1));
  CHECK(g.size() == 5);
  CHECK(g.frozen_prefix() == 3);
  CHECK(g.trainable_parameters().size() == 2 * g.blocks()[3].parameter_count());
  ad::Tape tape;
  BoundFlow bound = g.bind(tape);
  CHECK(bound.params.size() == 5 * g.blocks()[0].parameter_count());
  CHECK(bound.trainable.size() == 2 * g.blocks()[0].parameter_count());
  // The appended identity blocks leave the front map unchanged.
  const Tensor x = oracle::uniform_tensor(4, 2, rng);
  CHECK(g.forward(x) == front.forward(x));
  CHECK_THROWS_AS(g.freeze_prefix(6), ContractViolation);
}

TEST_CASE("checkpoints round-trip and reject damage") {
  FlowModel f = random_flow(3, 4, 90);
  f.freeze_prefix(2);
  const auto bytes = serialize(f);
  FlowModel g = deserialize(bytes);
  CHECK(g.frozen_prefix() == 2);
  CHECK(g.scale_range() == f.scale_range());
  Rng rng = make_rng(91);
  const Tensor x = oracle::uniform_tensor(7, 3, rng);
  CHECK(g.forward(x) == f.forward(x));

  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize(std::span(bytes).first(cut)), ParseError);
  }
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), ParseError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(deserialize(extra), ParseError);

  const auto path = std::filesystem::temp_directory_path() / "klflow_test_ckpt.bin";
  save_checkpoint(f, path);
  CHECK(load_checkpoint(path).forward(x) == f.forward(x));
  std::filesystem::remove(path);
}

TEST_CASE("dimension mismatches are contract violations") {
  FlowModel f = random_flow(2, 2, 100);
  CHECK_THROWS_AS(f.forward(Tensor(3, 3, 0.0)), ContractViolation);
  CHECK_THROWS_AS(f.inverse(Tensor(3, 1, 0.0)), ContractViolation);
  CHECK_THROWS_AS(BaseDistribution::isotropic(2, -1.0), ContractViolation);
}
