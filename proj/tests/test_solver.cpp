#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "klflow/error.hpp"
#include "klflow/solver.hpp"
#include "oracles.hpp"

using namespace klflow;

namespace {

SolverConfig tiny_config() {
  SolverConfig c;
  c.particles = 64;
  c.blocks = 2;
  c.width = 8;
  c.outer_iters = 4;
  c.max_inner = 15;
  c.gamma = 5e-3;
  c.tau = 1.0;
  c.tau_schedule = TauSchedule::kConstant;
  c.seed = 11;
  return c;
}

Dataset two_clusters(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> z;
  Tensor x(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = i % 2 == 0 ? 2.0 : -2.0;
    x(i, 0) = c + z(rng);
    x(i, 1) = z(rng);
  }
  return Dataset(x);
}

void same_records(const std::vector<RunRecord>& a, const std::vector<RunRecord>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].k == b[i].k);
    CHECK(a[i].loss == b[i].loss);
    CHECK(a[i].kl_step == b[i].kl_step);
    CHECK(a[i].fv_var == b[i].fv_var);
    CHECK(a[i].inner_iters == b[i].inner_iters);
    CHECK(a[i].stop_reason == b[i].stop_reason);
  }
}

}  // namespace

TEST_CASE("step-size, learning-rate and zeta schedules") {
  SolverConfig c;
  c.tau = 5.0;
  c.beta2 = 1.15;
  CHECK(step_size(c, 1) == 5.0);
  CHECK(step_size(c, 3) == doctest::Approx(5.0 * 1.15 * 1.15));
  c.tau_schedule = TauSchedule::kConstant;
  CHECK(step_size(c, 9) == 5.0);
  c.tau_schedule = TauSchedule::kInverseSqrt;
  CHECK(step_size(c, 3) == doctest::Approx(2.5));
  c.tau_schedule = TauSchedule::kStronglyConvex;
  c.lambda = 0.5;
  CHECK(step_size(c, 3) == doctest::Approx(1.0));

  c.gamma = 1e-3;
  c.beta1 = 0.9;
  CHECK(learning_rate(c, 1) == doctest::Approx(1e-3));
  CHECK(learning_rate(c, 2) == doctest::Approx(9e-4));
  c.lr_schedule = LrSchedule::kHarmonic;
  CHECK(learning_rate(c, 1) == doctest::Approx(1e-3));
  CHECK(learning_rate(c, 21) == doctest::Approx(5e-4));
  c.lr_schedule = LrSchedule::kInverseLinear;
  CHECK(learning_rate(c, 27) == doctest::Approx(5e-4));

  CHECK_FALSE(inner_zeta(c, 1).has_value());
  c.zeta_schedule = ZetaSchedule::kHarmonic;
  c.zeta0 = 0.07;
  CHECK(*inner_zeta(c, 1) == doctest::Approx(0.07));
  CHECK(*inner_zeta(c, 21) == doctest::Approx(0.035));
}

TEST_CASE("schedule names round-trip") {
  for (auto s : {LrSchedule::kGeometric, LrSchedule::kHarmonic, LrSchedule::kInverseLinear})
    CHECK(parse_lr_schedule(to_string(s)) == s);
  for (auto s : {TauSchedule::kGeometric, TauSchedule::kConstant, TauSchedule::kInverseSqrt, TauSchedule::kStronglyConvex})
    CHECK(parse_tau_schedule(to_string(s)) == s);
  for (auto s : {ZetaSchedule::kNone, ZetaSchedule::kConstant, ZetaSchedule::kHarmonic})
    CHECK(parse_zeta_schedule(to_string(s)) == s);
  for (auto s : {BaseResample::kPerRun, BaseResample::kPerOuter, BaseResample::kPerInner})
    CHECK(parse_base_resample(to_string(s)) == s);
  CHECK_THROWS(parse_lr_schedule("cosine"));
}

TEST_CASE("config validation") {
  SolverConfig c;
  CHECK_NOTHROW(validate(c));
  c.tau = 0.0;
  CHECK_THROWS_AS(validate(c), ContractViolation);
  c = SolverConfig{};
  c.particles = 1;
  CHECK_THROWS_AS(validate(c), ContractViolation);
  c = SolverConfig{};
  c.tau_schedule = TauSchedule::kStronglyConvex;
  c.lambda = 0.0;
  CHECK_THROWS_AS(validate(c), ContractViolation);
  ComposeConfig cc;
  CHECK_NOTHROW(validate(cc));
}

TEST_CASE("inner stopping rules") {
  StopThresholds t{1e-3, 3, 0.5, 10};
  auto check = [&](std::vector<double> g, std::optional<double> fv = std::nullopt) {
    return stopping_check(InnerWindow{g, {}, fv}, t);
  };
  CHECK_FALSE(check({}).stop);
  CHECK(check({1.0, 0.5, 1e-4}).reason == StopReason::kGradNorm);
  CHECK_FALSE(check({1.0, 0.9, 0.8}).stop);
  CHECK_FALSE(check({1.0, 0.5, 0.6, 0.7}).stop);
  CHECK(check({1.0, 0.5, 0.6, 0.7, 0.8}).reason == StopReason::kPatience);
  CHECK(check({1.0, 0.9}, 0.4).reason == StopReason::kFvVariance);
  CHECK_FALSE(check({1.0, 0.9}, 0.6).stop);
  std::vector<double> down(11);
  for (std::size_t i = 0; i < down.size(); ++i) down[i] = 1.0 - 0.01 * static_cast<double>(i);
  CHECK_FALSE(check(std::vector<double>(down.begin(), down.begin() + 10)).stop);
  CHECK(check(down).reason == StopReason::kMaxIters);

  // Patience watches the supplied metric, not the gradient norm.
  const std::vector<double> g{1.0, 0.9, 0.8, 0.7, 0.6}, loss{1.0, 1.1, 1.2, 1.3, 1.4};
  CHECK(stopping_check(InnerWindow{g, loss, std::nullopt}, t).reason == StopReason::kPatience);

  CHECK_FALSE(outer_stopping_check(0.01, 2, 0.05, 2).stop);
  CHECK(outer_stopping_check(0.01, 3, 0.05, 2).reason == StopReason::kOuterFvVariance);
  CHECK_FALSE(outer_stopping_check(0.06, 3, 0.05, 2).stop);
}

TEST_CASE("run records CSV") {
  std::vector<RunRecord> recs(2);
  recs[0] = {1, 2.5, 0.125, 1e-3, 7, StopReason::kPatience, 12.5, 3};
  recs[1] = {2, -1.0 / 3.0, 0.0, 0.0, 100, StopReason::kMaxIters, 1.0, 3};
  std::stringstream ss;
  write_run_records(ss, recs);
  std::string header;
  std::getline(ss, header);
  CHECK(header == "k,loss,kl_step,fv_var,inner_iters,stop_reason,wall_ms,seed");
  CHECK(header == kRunRecordHeader);
  ss.seekg(0);
  const auto back = read_run_records(ss);
  same_records(back, recs);
  CHECK(back[1].seed == 3);
  std::stringstream bad("k,loss\n1,2\n");
  CHECK_THROWS_AS(read_run_records(bad), ParseError);
}

TEST_CASE("the warm start has zero KL to its anchor") {
  NpmleFunctional f(two_clusters(40, 1), {});
  SolverConfig c = tiny_config();
  c.outer_iters = 1;
  c.max_inner = 1;
  SolveOptions opt;
  opt.record_traces = true;
  const SolveResult r = solve_algorithm1(f, c, opt);
  REQUIRE(r.traces.size() == 1);
  // The first inner loss is F at T^(k-1) because the KL term vanishes there.
  Rng eval = make_rng(c.seed, {1, kStreamBase});
  const FlowModel init = initial_flow(c, 2);
  const Tensor base = init.base().sample(c.particles, eval);
  CHECK(r.traces[0].losses[0] == doctest::Approx(npmle_loss(init.forward(base), f.data(), {})).epsilon(1e-12));
}

TEST_CASE("solver runs are deterministic and resumable") {
  NpmleFunctional f(two_clusters(40, 2), {});
  SolverConfig c = tiny_config();
  c.keep_trajectory = true;
  const SolveResult a = solve_algorithm1(f, c);
  const SolveResult b = solve_algorithm1(f, c);
  same_records(a.records, b.records);
  CHECK(a.records.size() == 4);
  for (const auto& r : a.records) {
    CHECK(std::isfinite(r.loss));
    CHECK(r.kl_step >= -1e-9);
    CHECK(r.inner_iters <= c.max_inner);
  }
  CHECK(a.records.back().loss < a.records.front().loss + 1e-9);
  REQUIRE(a.trajectory.size() == 4);

  SolveOptions opt;
  opt.resume_from = &a.trajectory[1];
  opt.start_k = 3;
  const SolveResult resumed = solve_algorithm1(f, c, opt);
  same_records(resumed.records, std::vector<RunRecord>(a.records.begin() + 2, a.records.end()));

  c.seed = 12;
  const SolveResult other = solve_algorithm1(f, c);
  CHECK(other.records.back().loss != a.records.back().loss);
}

TEST_CASE("full-batch stochastic run equals the deterministic run") {
  NpmleFunctional f(two_clusters(30, 3), {});
  const SolverConfig c = tiny_config();
  const SolveResult a = solve_algorithm1(f, c);
  const SolveResult s = solve_stochastic(f, c, {30});
  same_records(a.records, s.records);
  CHECK_THROWS_AS(solve_stochastic(f, c, {31}), ContractViolation);
  const SolveResult half = solve_stochastic(f, c, {15});
  CHECK(half.records.front().loss != a.records.front().loss);
}

TEST_CASE("budget exhaustion warns, or throws when strict") {
  NpmleFunctional f(two_clusters(30, 4), {});
  SolverConfig c = tiny_config();
  c.outer_iters = 1;
  c.max_inner = 3;
  c.grad_tol = 0.0;
  c.patience = 0;
  const SolveResult r = solve_algorithm1(f, c);
  CHECK_FALSE(r.converged_inner);
  CHECK(r.records[0].stop_reason == StopReason::kMaxIters);
  CHECK(r.records[0].inner_iters == 3);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("budget") != std::string::npos);
  c.strict = true;
  CHECK_THROWS_AS(solve_algorithm1(f, c), SolverError);
}

TEST_CASE("composed solver grows, freezes and distils") {
  NpmleFunctional f(two_clusters(30, 5), {});
  SolverConfig c = tiny_config();
  c.outer_iters = 3;
  c.max_inner = 5;
  ComposeConfig cc;
  cc.short_blocks = 2;
  cc.max_blocks = 5;
  cc.student_blocks = 2;
  cc.distill_iters = 50;
  cc.distill_lr = 1e-3;
  cc.short_width = 8;
  std::vector<std::size_t> sizes;
  SolveOptions opt;
  opt.on_iteration = [&](const RunRecord&, const FlowModel& fl) { sizes.push_back(fl.size()); };
  const SolveResult r = solve_algorithm2(f, c, cc, opt);
  // 2 -> 4 -> 6 (distilled to 2) -> 4.
  CHECK(sizes == std::vector<std::size_t>{4, 2, 4});
  REQUIRE(r.distillations.size() == 1);
  CHECK(r.distillations[0].k == 2);
  CHECK(r.distillations[0].iters <= 50);
  CHECK(std::isfinite(r.distillations[0].l2));
}

TEST_CASE("distillation reproduces an identity teacher") {
  Rng rng = make_rng(6);
  FlowModel teacher(BaseDistribution::isotropic(2, 1.0), identity_init(2, 3, 8, rng));
  const Tensor base = teacher.base().sample(50, rng);
  const DistillResult d = distill(teacher, base, 2, 8, 2, 10, 1e-3, 1e-8, rng);
  CHECK(d.report.l2 < 1e-8);
  CHECK(d.report.reached_tol);
  CHECK(d.student.size() == 2);
}

TEST_CASE("KL descent approaches the Gaussian target") {
  // alpha = 1: pi = N(0, I), so min F = -log Z = -log(2 pi) in two dimensions.
  KlTargetFunctional f(2, {1, 0.0});
  SolverConfig c = tiny_config();
  c.particles = 400;
  c.blocks = 2;
  c.width = 16;
  c.outer_iters = 6;
  c.max_inner = 150;
  c.gamma = 1e-2;
  c.tau = 5.0;
  c.base_variance = 4.0;
  c.eval_particles = 4000;
  // With one cloud per outer step the flow overfits 400 points; fresh draws do not.
  c.resample = BaseResample::kPerInner;
  const SolveResult r = solve_algorithm1(f, c);
  const double opt = -std::log(2 * std::numbers::pi);
  CHECK(r.records.front().loss > opt - 0.01);
  CHECK(r.records.back().loss - opt < 0.01);
  CHECK(r.records.back().loss < r.records.front().loss);
}
