#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "learned_iv/kiv.hpp"
#include "learned_iv/simgen.hpp"
#include "learned_iv/validation.hpp"

namespace learned_iv {

// Bayesian-model-averaging grid over second-stage hyperparameters: prior
// scales (kernel variance sigma^2) crossed with bandwidth multipliers applied
// to the resolved base bandwidth.
struct BMAGridConfig {
  std::vector<double> sigmas;
  std::vector<double> bandwidth_multipliers;
};

void to_json(nlohmann::json& j, const BMAGridConfig& g);
void from_json(const nlohmann::json& j, BMAGridConfig& g);

struct ExperimentConfig {
  ScenarioConfig scenario;
  OracleConfig oracle;  // first-stage denoising oracle
  KIVConfig kiv;
  int m = 32;
  int replicates = 1;
  std::vector<double> levels = {0.9};
  std::optional<BMAGridConfig> bma_grid;
  std::string output_dir = "experiment-out";
  uint64_t master_seed = 0;

  // Estimator plumbing.
  std::string first_stage = "learned";         // learned | rbf (median-trick dense Gram)
  std::string second_stage_policy = "median";  // median | scenario | config
  OracleConfig theta;     // readout network for the exogenous-covariate design
  int posterior_samples = 400;  // draws behind the ball-radius / CI summaries
  int threads = 1;

  ExperimentConfig();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// One row of the experiment table. Numeric fields are NaN when a quantity was
// not produced (error rows, or designs without posterior summaries).
struct MetricsRecord {
  int replicate = 0;
  double test_mse = std::numeric_limits<double>::quiet_NaN();
  double cb_radius = std::numeric_limits<double>::quiet_NaN();
  double cb_covered = std::numeric_limits<double>::quiet_NaN();  // 0/1 when evaluated
  double ci_coverage_avg = std::numeric_limits<double>::quiet_NaN();
  double log_ml = std::numeric_limits<double>::quiet_NaN();
  double runtime_s = std::numeric_limits<double>::quiet_NaN();
  uint64_t seed = 0;
  std::string error;  // empty when the replicate succeeded
};

inline constexpr const char* kMetricsHeader =
    "replicate,test_mse,cb_radius,cb_covered,ci_coverage_avg,log_ml,runtime_s,seed";

std::string metrics_csv_row(const MetricsRecord& r);

// Resolve the structural (second-stage) kernel for one dataset under the
// configured policy: "config" passes kiv.second_stage through, "median" sets
// an RBF at the median pairwise distance of the training treatments, and
// "scenario" demands the generator's GP-truth kernel rescaled to standardized
// responses (variance / sigma^2).
KernelSpec resolve_second_stage(const ExperimentConfig& config,
                                const Eigen::Ref<const Eigen::MatrixXd>& x_train,
                                const std::optional<KernelSpec>& scenario_kernel, double sigma,
                                uint64_t seed);
KernelSpec resolve_second_stage(const ExperimentConfig& config, const IVDataset& data,
                                uint64_t seed);

// Log hyperprior weight of one BMA grid candidate: an InvGamma(2,2) density on
// the prior scale sigma times a Gamma(2,1) density on the bandwidth. Added to
// the log marginal likelihood before the softmax over the grid.
double bma_candidate_log_prior(double sigma, double bandwidth);

// Metric evaluation on the frozen test grid against the standardized truth.
MetricsRecord evaluate_metrics(const QuasiPosterior& post, const IVDataset& data,
                               const std::vector<double>& levels, int n_samples, uint64_t seed);
MetricsRecord evaluate_metrics(const BMAResult& mixture, const IVDataset& data,
                               const std::vector<double>& levels, int n_samples, uint64_t seed);

// One replicate end to end: generate -> learn features -> fit -> evaluate.
// Failures are captured in the record's error field, never thrown.
MetricsRecord run_replicate(const ExperimentConfig& config, int replicate_index);

// All replicates; writes output_dir/metrics.csv incrementally (one flushed row
// per finished replicate, in replicate order), then summary.json and one
// static SVG plot per metric. Replicate seeds derive from master_seed, so any
// thread count yields the same table.
std::vector<MetricsRecord> run_experiment(const ExperimentConfig& config);

// Pure aggregation used for summary.json: per-metric mean/sd/count over
// non-error rows plus a Wilson 95% interval for the credible-ball coverage.
nlohmann::json aggregate_metrics(const std::vector<MetricsRecord>& records);

void write_metric_plots(const std::string& dir, const std::vector<MetricsRecord>& records);

// --- First-stage sweep (validation statistic vs. achieved error) -------------

struct FirstStageArm {
  std::string label;
  OracleConfig oracle;
  int m = 32;
};

struct FirstStageSweepRow {
  std::string label;
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double counterfactual_mse = std::numeric_limits<double>::quiet_NaN();
  double log_ml = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

// Builds one learned feature map per arm on a fixed dataset and pairs the
// first-stage validation statistic with the counterfactual test error of the
// resulting posterior. The validation tasks are drawn once (same seed) so the
// statistic is comparable across arms.
std::vector<FirstStageSweepRow> first_stage_sweep(const IVDataset& data,
                                                  const ExperimentConfig& config,
                                                  const std::vector<FirstStageArm>& arms, int m_v,
                                                  uint64_t seed);

}  // namespace learned_iv
