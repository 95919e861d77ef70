#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <json.hpp>
#include <string>
#include <vector>

#include "learned_iv/kiv.hpp"
#include "learned_iv/learned_kernel.hpp"

namespace learned_iv {

// Held-out diagnostic for a learned instrument kernel: how well kernel ridge
// regression under that kernel predicts (a) fresh GP-prior tasks evaluated at
// the stage-2 regressor values and (b) the observed responses.
struct ValidationReport {
  double task_generalization_mse = 0.0;  // (1/m_v) * sum of held-out task MSEs
  double reduced_form_mse = 0.0;         // held-out MSE on (z, y)
  double total = 0.0;                    // task_generalization_mse + reduced_form_mse
  int m_v = 0;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ValidationReport& r);

// Computes the validation statistic for `map` on stage-2 data. Draws m_v fresh
// GP samples from kx, evaluates them at stage2.x to form noiseless task
// targets, then fits a centered ridge regression in the learned feature space
// (equivalently, kernel ridge with the learned kernel plus an intercept) on a
// seeded 50/50 row split. The ridge is the estimator's grid-selected nu,
// chosen once from the reduced-form fit and reused for every target. Stage-2
// data must have at least 8 rows; m_v >= 1.
ValidationReport first_stage_validation(const LearnedFeatureMap& map, const Stage2Data& stage2,
                                        const KernelSpec& kx, int m_v, uint64_t seed);

struct SecondStageCandidate {
  KernelSpec spec;
  double log_ml = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // empty when the fit succeeded
};

struct SecondStageSelection {
  KernelSpec best;
  std::vector<SecondStageCandidate> table;  // one row per candidate, input order
};

// Fits one quasi-posterior per candidate second-stage kernel and returns the
// candidate with the highest log marginal quasi-likelihood; exact ties break
// toward the smaller bandwidth. Candidates whose fits throw (or produce a
// non-finite score) are recorded in the table with the error message; if every
// candidate fails, throws with the per-candidate failures listed.
SecondStageSelection select_second_stage(const std::vector<KernelSpec>& candidates,
                                         const Stage2Data& stage2, const LearnedFeatureMap& map,
                                         const KIVConfig& config);

}  // namespace learned_iv
