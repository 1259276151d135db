#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "klflow/baselines.hpp"
#include "klflow/config.hpp"
#include "klflow/simplex.hpp"
#include "klflow/solver.hpp"

namespace klflow {

/// One point of a per-iteration accuracy metric (log NLL gap or log W1).
struct MetricRow {
  std::size_t k = 0;
  double value = 0.0;
  bool floored = false;
};

struct TrialResult {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<RunRecord> records;
  std::vector<MetricRow> metric;
  std::vector<std::string> warnings;
  std::vector<DistillReport> distillations;
  bool converged_inner = true;
  std::size_t outer_stop_k = 0;
  double terminal_loss = 0.0;  // last recorded loss; the long-run plateau for kw-grid
  std::string error;           // set when the trial failed
  Tensor final_cloud;          // evaluation particles of the final iterate (flow methods)

  bool ok() const { return error.empty(); }
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string metric_name;  // "log_nll_gap" or "log_w1"
  std::vector<std::string> methods;
  std::vector<TrialResult> trials;
  std::map<std::uint64_t, double> reference_loss;  // per dataset seed

  std::vector<const TrialResult*> of(const std::string& method) const;
  bool any_failed() const;
};

/// Seeded experiment inputs, shared by all methods of a trial.
Dataset experiment_data(const ExperimentConfig& c, std::uint64_t seed);
LikelihoodKernel experiment_kernel(const ExperimentConfig& c);
/// Fixed grid for the kw-grid baseline: locations on [-L, L]^d with L the
/// largest absolute observation, and log sigma^2 for sigma^2 on [0.01, 4]^d.
Tensor kw_grid_atoms(const ExperimentConfig& c, const Dataset& data);

struct HarnessOptions {
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

/// Runs every listed method for every seed, then the NLL reference and metrics.
ExperimentResult run_experiment(const ExperimentConfig& c, const std::vector<std::string>& methods,
                                const HarnessOptions& opt = {});

/// Mean and standard error (two-pass) of one metric across trials at each k.
struct AggregateRow {
  std::string method;
  std::size_t k = 0;
  std::string metric;
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t trials = 0;
};
inline constexpr std::string_view kAggregateHeader = "method,k,metric,mean,stderr,trials";
inline constexpr std::string_view kCompareHeader = "method,seed,k,loss,metric,value,floored,inner_iters";

std::vector<AggregateRow> aggregate(const ExperimentResult& r);
/// Standard error of the mean, sqrt(s^2 / n) with the two-pass variance; 0 for n < 2.
double standard_error(std::span<const double> values);

/// Writes trial CSVs, aggregate.csv, compare.csv (several methods), SVG charts,
/// config_echo.toml and report.json into c.output.
void write_experiment_artifacts(const ExperimentResult& r, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Step-size study

struct StudyRow {
  double tau = 0.0;
  double gamma = 0.0;
  double mean_inner = 0.0;  // per outer iteration, over trials
  double stderr_inner = 0.0;
  double mean_outer = 0.0;  // outer iterations until the fv-variance criterion
  double stderr_outer = 0.0;
  std::size_t failed_trials = 0;     // an inner loop exhausted its budget after burn-in
  std::size_t unreached_trials = 0;  // the outer criterion never fired
  bool converged() const { return failed_trials == 0 && unreached_trials == 0; }
};

inline constexpr std::string_view kStudyHeader =
    "tau,gamma,mean_inner,stderr_inner,mean_outer,stderr_outer,failed_trials,unreached_trials,converged";

struct StudyResult {
  ExperimentConfig config;
  std::vector<StudyRow> rows;
  std::vector<std::string> warnings;
};

StudyResult run_step_size_study(const ExperimentConfig& c, const HarnessOptions& opt = {});
void write_study_artifacts(const StudyResult& r, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Simplex verification suite

struct VerifyCheck {
  std::string id;  // file stem of the bound report
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  std::vector<BoundReport> reports;
};

struct VerifyResult {
  std::vector<VerifyCheck> checks;
  bool all_pass() const;
  const VerifyCheck* find(const std::string& id) const;
};

/// Check ids: theorem2-strong, theorem2-npmle, theorem1, theorem4, theorem5,
/// three-point. An empty selection runs all of them.
VerifyResult run_simplex_verify(const VerifySettings& v, std::uint64_t seed,
                                const std::vector<std::string>& only = {});
void write_verify_artifacts(const VerifyResult& r, const ExperimentConfig& c,
                            const std::filesystem::path& dir);

}  // namespace klflow
