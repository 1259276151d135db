#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "klflow/baselines.hpp"
#include "klflow/functionals.hpp"
#include "klflow/solver.hpp"

namespace klflow {

// ---------------------------------------------------------------------------
// Minimal TOML: [tables], key = value with strings, integers, floats, booleans
// and flat arrays of those; '#' comments.

struct TomlValue {
  using Scalar = std::variant<bool, std::int64_t, double, std::string>;
  std::variant<Scalar, std::vector<Scalar>> v;
  std::size_t line = 0;
};

struct TomlDocument {
  // table name ("" for the root) -> key -> value
  std::map<std::string, std::map<std::string, TomlValue>> tables;
};

TomlDocument parse_toml(std::istream& in);
TomlDocument parse_toml_string(std::string_view text);

// ---------------------------------------------------------------------------
// Experiment configuration

enum class ExperimentKind {
  kNpmleLocation,
  kNpmleLocationScale,
  kBayesSampling,
  kSimplexVerify,
  kStepSizeStudy,
  kDistillStudy,
};

enum class Profile { kDesk, kPaper };

std::string_view to_string(ExperimentKind k);
std::string_view to_string(Profile p);
ExperimentKind parse_experiment_kind(std::string_view s);
Profile parse_profile(std::string_view s);

struct DataSettings {
  std::size_t n = 500;
  std::size_t dim = 2;       // location dimension
  double separation = 1.0;   // two-moons mode-separation multiplier

  friend bool operator==(const DataSettings&, const DataSettings&) = default;
};

/// Overrides applied to the solver config for the mini-batch variant.
struct StochasticSettings {
  std::size_t batch = 500;
  double beta2 = 1.0;
  double gamma = 1.0;
  LrSchedule lr_schedule = LrSchedule::kInverseLinear;

  friend bool operator==(const StochasticSettings&, const StochasticSettings&) = default;
};

struct KwSettings {
  std::size_t grid = 3025;   // total grid points
  double tau = 1.0;
  std::size_t steps = 2000;  // KW iterations; the series is reported for k <= outer iterations

  friend bool operator==(const KwSettings&, const KwSettings&) = default;
};

struct ReferenceSettings {
  std::size_t em_iters = 20000;  // EM sweeps over the union of flow particles and the grid

  friend bool operator==(const ReferenceSettings&, const ReferenceSettings&) = default;
};

struct BayesSettings {
  int alpha = 2;
  double langevin_dt = 1e-2;
  std::size_t w1_cap = 512;
  std::size_t w1_repeats = 8;

  friend bool operator==(const BayesSettings&, const BayesSettings&) = default;
};

struct StudySettings {
  std::vector<double> taus{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<double> gammas;  // one Adam rate per tau; empty uses solver.gamma for all

  friend bool operator==(const StudySettings&, const StudySettings&) = default;
};

struct VerifySettings {
  std::size_t kl_atoms = 20;
  std::size_t npmle_atoms = 50;
  std::size_t npmle_n = 50;
  std::size_t stochastic_atoms = 20;
  std::size_t kl_steps = 30;
  std::size_t npmle_steps = 200;
  std::size_t reference_iters = 100000;
  double tau = 1.0;
  double flow_dt = 1e-3;
  double flow_horizon = 10.0;
  std::size_t inexact_steps = 50;
  double kappa = 0.1;
  double eps = 0.5;
  double alpha = 1.0;
  std::size_t stochastic_batch = 5;
  std::size_t stochastic_steps = 500;
  std::size_t stochastic_trials = 20;
  std::size_t lemma_pairs = 1000;

  friend bool operator==(const VerifySettings&, const VerifySettings&) = default;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kNpmleLocation;
  Profile profile = Profile::kDesk;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output = "klflow_out";
  std::vector<std::string> methods{"iklpd"};
  std::size_t threads = 1;

  DataSettings data;
  SolverConfig solver;
  StochasticSettings stochastic;
  ComposeConfig compose;
  KwSettings kw;
  ReferenceSettings reference;
  BayesSettings bayes;
  StudySettings study;
  VerifySettings verify;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Constants of the chosen scale profile for an experiment kind.
ExperimentConfig profile_defaults(ExperimentKind kind, Profile profile);

/// Profile defaults overridden by the document. Unknown tables or keys and
/// ill-typed values raise ParseError naming the line and field.
ExperimentConfig config_from_toml(const TomlDocument& doc);
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_string(std::string_view text);
/// Every field, so that parsing the output reproduces the config exactly.
std::string serialize_config(const ExperimentConfig& c);

/// Cross-field checks (methods valid for the kind, nonempty seeds, ...).
void validate(const ExperimentConfig& c);

/// Methods allowed for an experiment kind.
std::vector<std::string> allowed_methods(ExperimentKind kind);

}  // namespace klflow
