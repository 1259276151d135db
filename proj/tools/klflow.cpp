// klflow: run | compare | verify | study <config.toml>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "klflow/config.hpp"
#include "klflow/error.hpp"
#include "klflow/harness.hpp"

namespace {

constexpr int kExitSolver = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

struct Flags {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> profile;
  std::optional<std::size_t> threads;
  bool strict = false;
};

klflow::ExperimentConfig load(const Flags& f) {
  std::ifstream in(f.config);
  if (!in) throw klflow::ParseError("cannot open config file '" + f.config + "'");
  klflow::TomlDocument doc = klflow::parse_toml(in);
  if (f.profile) {
    klflow::parse_profile(*f.profile);
    doc.tables[""]["profile"] = klflow::TomlValue{klflow::TomlValue::Scalar{*f.profile}, 0};
  }
  klflow::ExperimentConfig c = klflow::config_from_toml(doc);
  if (f.seed) c.seeds = {*f.seed};
  if (f.out) c.output = *f.out;
  if (f.threads) {
    c.threads = *f.threads;
  } else if (const char* env = std::getenv("KLFLOW_THREADS")) {
    try {
      c.threads = std::stoul(env);
    } catch (const std::exception&) {
      throw klflow::ParseError(std::string("KLFLOW_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  if (f.strict) c.solver.strict = true;
  klflow::validate(c);
  return c;
}

int execute(const Flags& f) {
  using klflow::ExperimentKind;
  klflow::ExperimentConfig c = load(f);
  klflow::HarnessOptions opt;
  opt.log = [](const std::string& line) { std::cerr << line << '\n'; };
  const std::filesystem::path dir = c.output;

  if (c.kind == ExperimentKind::kSimplexVerify || f.command == "verify") {
    if (c.kind != ExperimentKind::kSimplexVerify) {
      throw klflow::ParseError("verify needs experiment = \"simplex-verify\"");
    }
    const klflow::VerifyResult r = klflow::run_simplex_verify(c.verify, c.seeds.front());
    klflow::write_verify_artifacts(r, c, dir);
    for (const auto& check : r.checks) {
      std::cout << (check.pass ? "PASS " : "FAIL ") << check.id << ": " << check.detail << '\n';
    }
    return r.all_pass() ? 0 : kExitVerify;
  }
  if (c.kind == ExperimentKind::kStepSizeStudy || f.command == "study") {
    if (c.kind != ExperimentKind::kStepSizeStudy) {
      throw klflow::ParseError("study needs experiment = \"step-size-study\"");
    }
    const klflow::StudyResult r = klflow::run_step_size_study(c, opt);
    klflow::write_study_artifacts(r, dir);
    std::cout << klflow::kStudyHeader << '\n';
    for (const auto& row : r.rows) {
      std::cout << row.tau << ',' << row.gamma << ',' << row.mean_inner << ',' << row.stderr_inner << ','
                << row.mean_outer << ',' << row.stderr_outer << ',' << row.failed_trials << ','
                << row.unreached_trials << ',' << (row.converged() ? 1 : 0) << '\n';
    }
    return 0;
  }

  const std::vector<std::string> methods =
      f.command == "compare" ? c.methods : std::vector<std::string>{c.methods.front()};
  const klflow::ExperimentResult r = klflow::run_experiment(c, methods, opt);
  klflow::write_experiment_artifacts(r, dir);
  for (const auto& t : r.trials) {
    if (!t.ok()) std::cerr << "error: " << t.method << " seed " << t.seed << ": " << t.error << '\n';
    for (const auto& w : t.warnings) std::cerr << "warning: " << t.method << " seed " << t.seed << ": " << w << '\n';
  }
  std::cout << "wrote " << dir.string() << '\n';
  return r.any_failed() ? kExitSolver : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit KL proximal descent with normalizing flows"};
  app.require_subcommand(1);
  Flags f;
  for (const char* name : {"run", "compare", "verify", "study"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("config", f.config, "experiment config (TOML)")->required();
    sub->add_option("--seed", f.seed, "run a single seed instead of the configured list");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--profile", f.profile, "scale profile: paper or desk");
    sub->add_option("--threads", f.threads, "worker threads (default: KLFLOW_THREADS, then config)");
    sub->add_flag("--strict", f.strict, "fail when an inner loop exhausts its budget");
    sub->callback([&f, name] { f.command = name; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    return execute(f);
  } catch (const klflow::ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const klflow::ContractViolation& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitSolver;
  }
}
