#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "learned_iv/kernels.hpp"
#include "learned_iv/oracle.hpp"
#include "learned_iv/simgen.hpp"

namespace learned_iv {

struct ExoOptions {
  double clamp_constant = 5.0;  // tau = clamp_constant * log(max(m, 2)), as in learned_kernel
  int rff_features = 512;       // fidelity of the treatment-side GP draws
  double oracle_holdout = 0.2;  // holdout passed to the first-stage oracle
  // Standardize the response internally while training the readout network and
  // undo the affine map at prediction time. With false, predictions are the
  // exact inner product of treatment-sample evaluations and network outputs.
  bool standardize_y = true;

  void validate() const;
};

// Estimator for designs with exogenous covariates: the structural function is
// modeled as f(x_o, w) = sum_j f_j(x_o) * theta_j(w), where f_j are m fixed
// GP(0, k_xo) draws over the endogenous coordinate and theta is a trained
// multi-output network over the exogenous covariates.
struct ExoEstimator {
  std::vector<GPSample> treatment_samples;  // the m fixed draws f_j
  FittedRegressor stage1_regressor;  // vector-valued: (z_o, w) -> m raw estimates
  double clamp_threshold = 0.0;      // truncation applied to the raw estimates
  FittedRegressor theta_net;         // w -> m readout weights
  int m = 0;
  double y_mean = 0.0;  // response location/scale restored at prediction time
  double y_scale = 1.0;

  // Readout-training record; losses are the per-row reduced-form square error.
  double initial_loss = 0.0;          // on stage-2 rows at initialization
  double final_loss = 0.0;            // on stage-2 rows at the restored best epoch
  double best_validation_loss = 0.0;  // on stage-1 rows (the early-stop monitor)
  int epochs_run = 0;
  int best_epoch = 0;
};

// Two-stage fit: draw m GP(0, k_xo) samples over the treatment, fit one
// vector-valued oracle (z_o, w) -> f_j(x_o) on stage-1 rows, clamp its
// estimates at +-tau, then train theta by Adam on the reduced-form loss
//   l'(theta) = mean_i ( sum_j ghat_j(z_oi, w_i) * theta_j(w_i) - y_i )^2
// over stage-2 rows, early-stopped on the same loss evaluated on stage-1 rows.
// theta_cfg must be an MLP config; its hidden layers/optimizer fields are used
// and the output width is forced to m.
ExoEstimator fit_exo(const ExoDataset& data, const KernelSpec& k_xo, int m,
                     const OracleConfig& oracle, const OracleConfig& theta_cfg, uint64_t seed,
                     const ExoOptions& options = {});

// Clamped first-stage estimates ghat_j over instrument/covariate rows (n x m).
Eigen::MatrixXd exo_feature_matrix(const ExoEstimator& est,
                                   const Eigen::Ref<const Eigen::VectorXd>& z_o,
                                   const Eigen::Ref<const Eigen::MatrixXd>& w);

// Reduced-form prediction g(z_o, w) = sum_j ghat_j(z_o, w) theta_j(w) on the
// original response scale (the function the readout is trained to match to y).
Eigen::VectorXd reduced_form_predict(const ExoEstimator& est,
                                     const Eigen::Ref<const Eigen::VectorXd>& z_o,
                                     const Eigen::Ref<const Eigen::MatrixXd>& w);

// Structural prediction f(x_o, w) = sum_j f_j(x_o) theta_j(w), rescaled to the
// original response units. Throws on w-dimension mismatch.
double predict_exo(const ExoEstimator& est, double x_o,
                   const Eigen::Ref<const Eigen::RowVectorXd>& w);
Eigen::VectorXd predict_exo(const ExoEstimator& est,
                            const Eigen::Ref<const Eigen::VectorXd>& x_o,
                            const Eigen::Ref<const Eigen::MatrixXd>& w);

}  // namespace learned_iv
