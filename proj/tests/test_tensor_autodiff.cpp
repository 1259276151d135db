#include <doctest.h>

#include <cmath>

#include "klflow/adam.hpp"
#include "klflow/error.hpp"
#include "klflow/tape.hpp"
#include "oracles.hpp"

using namespace klflow;
using ad::Tape;
using ad::Var;

TEST_CASE("identity matmul keeps the operand") {
  Tape tape;
  Rng rng = make_rng(1);
  const Tensor x = oracle::uniform_tensor(3, 4, rng);
  const Tensor eye = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  Var y = ad::matmul(tape.constant(eye), tape.constant(x));
  CHECK(y.value() == x);
}

TEST_CASE("scalar derivatives") {
  Tape tape;
  SUBCASE("tanh at zero") {
    Var x = tape.parameter(Tensor::scalar(0.0));
    Var y = ad::sum(ad::tanh(x));
    tape.backward(y);
    CHECK(y.value().item() == 0.0);
    CHECK(tape.grad(x).item() == doctest::Approx(1.0));
  }
  SUBCASE("square at three") {
    Var x = tape.parameter(Tensor::scalar(3.0));
    Var y = ad::sum(ad::square(x));
    tape.backward(y);
    CHECK(tape.grad(x).item() == doctest::Approx(6.0));
  }
  SUBCASE("sum of logs") {
    Var x = tape.parameter(Tensor::row(std::vector<double>{1.0, 2.0}));
    tape.backward(ad::sum(ad::log(x)));
    CHECK(tape.grad(x)[0] == doctest::Approx(1.0));
    CHECK(tape.grad(x)[1] == doctest::Approx(0.5));
  }
}

TEST_CASE("contract and domain errors") {
  Tape tape;
  Var a = tape.constant(Tensor(2, 3, 1.0));
  Var b = tape.constant(Tensor(2, 2, 1.0));
  CHECK_THROWS_AS(ad::matmul(a, a), ContractViolation);
  CHECK_THROWS_AS(a + b, ContractViolation);
  Var neg = tape.constant(Tensor::row(std::vector<double>{1.0, -1.0}));
  CHECK_THROWS_AS(ad::log(neg), DomainError);
  try {
    ad::log(neg);
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
  Var p = tape.parameter(Tensor(2, 2, 1.0));
  CHECK_THROWS_AS(tape.backward(p), ContractViolation);
}

TEST_CASE("unreachable leaves get zero gradients") {
  Tape tape;
  Var x = tape.parameter(Tensor(2, 2, 0.3));
  Var unused = tape.parameter(Tensor(3, 1, 0.7));
  tape.backward(ad::sum(ad::square(x)));
  for (double g : tape.grad(unused).values()) CHECK(g == 0.0);
}

TEST_CASE("every op matches central differences") {
  Rng rng = make_rng(2);
  const Tensor a = oracle::uniform_tensor(3, 4, rng);
  const Tensor b = oracle::uniform_tensor(3, 4, rng);
  const Tensor row = oracle::uniform_tensor(1, 4, rng);
  const Tensor col = oracle::uniform_tensor(3, 1, rng);
  const Tensor m = oracle::uniform_tensor(4, 2, rng);
  const Tensor pos = oracle::uniform_tensor(3, 4, rng, 0.5, 2.0);
  using Vs = std::vector<Var>;
  CHECK(oracle::gradient_error({a, m}, [](Tape&, Vs& v) { return ad::sum(ad::square(ad::matmul(v[0], v[1]))); }) < 1e-4);
  CHECK(oracle::gradient_error({a, b}, [](Tape&, Vs& v) { return ad::sum(ad::square(v[0] + v[1])); }) < 1e-4);
  CHECK(oracle::gradient_error({a, row}, [](Tape&, Vs& v) { return ad::sum(ad::square(v[0] + v[1])); }) < 1e-4);
  CHECK(oracle::gradient_error({a, col}, [](Tape&, Vs& v) { return ad::sum(ad::square(v[0] - v[1])); }) < 1e-4);
  CHECK(oracle::gradient_error({a, b}, [](Tape&, Vs& v) { return ad::sum(v[0] * v[1]); }) < 1e-4);
  CHECK(oracle::gradient_error({a, col}, [](Tape&, Vs& v) { return ad::sum(ad::square(v[0] * v[1])); }) < 1e-4);
  CHECK(oracle::gradient_error({a}, [](Tape&, Vs& v) { return ad::sum(ad::tanh(v[0]) * 2.5); }) < 1e-4);
  CHECK(oracle::gradient_error({a}, [](Tape&, Vs& v) { return ad::mean(ad::exp(v[0])); }) < 1e-4);
  CHECK(oracle::gradient_error({pos}, [](Tape&, Vs& v) { return ad::sum(ad::log(v[0])); }) < 1e-4);
  CHECK(oracle::gradient_error({a}, [](Tape&, Vs& v) { return ad::sum(ad::square(ad::sum_rows(v[0]))); }) < 1e-4);
  CHECK(oracle::gradient_error({a}, [](Tape&, Vs& v) { return ad::sum(ad::square(ad::sum_cols(v[0]))); }) < 1e-4);
}

TEST_CASE("three-layer tanh MLP gradients match central differences") {
  Rng rng = make_rng(3);
  std::vector<Tensor> p = {oracle::uniform_tensor(2, 5, rng, -1, 1), oracle::uniform_tensor(1, 5, rng, -1, 1),
                           oracle::uniform_tensor(5, 5, rng, -1, 1), oracle::uniform_tensor(1, 5, rng, -1, 1),
                           oracle::uniform_tensor(5, 1, rng, -1, 1), oracle::uniform_tensor(1, 1, rng, -1, 1)};
  const Tensor x = oracle::uniform_tensor(7, 2, rng);
  const double err = oracle::gradient_error(p, [&](Tape& t, std::vector<Var>& v) {
    Var h = ad::tanh(ad::matmul(t.constant(x), v[0]) + v[1]);
    h = ad::tanh(ad::matmul(h, v[2]) + v[3]);
    return ad::mean(ad::square(ad::matmul(h, v[4]) + v[5]));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("backward is linear in the output") {
  Rng rng = make_rng(4);
  const Tensor x0 = oracle::uniform_tensor(3, 3, rng);
  auto grad_of = [&](double a, double b) {
    Tape t;
    Var x = t.parameter(x0);
    Var f = ad::sum(ad::tanh(x));
    Var g = ad::sum(ad::square(x));
    t.backward(f * a + g * b);
    return t.grad(x);
  };
  const Tensor gf = grad_of(1, 0), gg = grad_of(0, 1), mix = grad_of(2.0, -3.0);
  for (std::size_t i = 0; i < mix.size(); ++i) CHECK(mix[i] == doctest::Approx(2.0 * gf[i] - 3.0 * gg[i]).epsilon(1e-12));
}

TEST_CASE("tapes are deterministic") {
  Rng r1 = make_rng(5), r2 = make_rng(5);
  auto run = [](Rng& rng) {
    Tape t;
    Var w = t.parameter(oracle::uniform_tensor(4, 4, rng));
    Var x = t.constant(oracle::uniform_tensor(6, 4, rng));
    t.backward(ad::mean(ad::exp(ad::tanh(ad::matmul(x, w)))));
    return t.grad(w);
  };
  CHECK(run(r1) == run(r2));
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor w(2, 2, 1.5);
    std::vector<Tensor*> ps{&w};
    AdamState s = AdamState::for_parameters(ps);
    std::vector<Tensor> g{Tensor(2, 2, 0.0)};
    adam_step(ps, g, s, 0.1);
    CHECK(w == Tensor(2, 2, 1.5));
    CHECK(s.step_count == 1);
  }
  SUBCASE("first step moves by lr times the sign") {
    Tensor w = Tensor::row(std::vector<double>{1.0, 1.0});
    std::vector<Tensor*> ps{&w};
    AdamState s = AdamState::for_parameters(ps);
    std::vector<Tensor> g{Tensor::row(std::vector<double>{3.0, -0.2})};
    adam_step(ps, g, s, 0.01);
    CHECK(w[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(w[1] == doctest::Approx(1.01).epsilon(1e-6));
  }
  SUBCASE("quadratic converges") {
    Tensor w = Tensor::scalar(0.0);
    std::vector<Tensor*> ps{&w};
    AdamState s = AdamState::for_parameters(ps);
    for (int i = 0; i < 100; ++i) {
      std::vector<Tensor> g{Tensor::scalar(2.0 * (w.item() - 2.0))};
      adam_step(ps, g, s, 0.1);
    }
    CHECK(std::abs(w.item() - 2.0) < 0.05);
  }
  SUBCASE("non-finite gradient aborts the step") {
    Tensor w = Tensor::scalar(1.0);
    std::vector<Tensor*> ps{&w};
    AdamState s = AdamState::for_parameters(ps);
    std::vector<Tensor> g{Tensor::scalar(std::nan(""))};
    CHECK_THROWS_AS(adam_step(ps, g, s, 0.1), DomainError);
    CHECK(w.item() == 1.0);
    CHECK(s.step_count == 0);
  }
}
