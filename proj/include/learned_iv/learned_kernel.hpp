#pragma once

#include <memory>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "learned_iv/kernels.hpp"
#include "learned_iv/oracle.hpp"

namespace learned_iv {

// First-stage sample: instrument rows z with treatment rows x, plus responses
// when the generator carries them (used to fit the reduced-form feature
// without touching second-stage responses).
struct Stage1Data {
  Eigen::MatrixXd z;  // n1 x dz
  Eigen::MatrixXd x;  // n1 x dx
  std::optional<Eigen::VectorXd> y;

  void validate() const;
};

// Second-stage sample used by the estimator itself.
struct Stage2Data {
  Eigen::MatrixXd z;  // n2 x dz
  Eigen::MatrixXd x;  // n2 x dx
  Eigen::VectorXd y;  // n2

  void validate() const;
};

struct LearnedKernelOptions {
  double clamp_constant = 5.0;        // tau = clamp_constant * log(max(m, 2))
  int rff_features = 512;             // fidelity of the GP prior draws
  bool include_reduced_form = true;   // append the E(y|z) feature
  // Fraction of stage-1 rows dedicated to fitting the reduced-form feature
  // (the denoising oracle trains on the complement). Values outside (0,1)
  // share all rows for both fits.
  double reduced_form_fraction = 0.5;
  double oracle_holdout = 0.2;        // holdout passed to the fitted oracles
};

// The approximate instrument space: m clamped denoised GP features scaled by
// 1/sqrt(m), optionally extended with the clamped reduced-form feature.
class LearnedFeatureMap {
 public:
  FittedRegressor denoiser;      // vector-valued oracle with m outputs
  FittedRegressor reduced_form;  // null when the extension is disabled
  double tau = 0.0;
  int m = 0;
  int input_dim = 0;
  bool reduced_form_used_stage2 = false;  // fallback warning flag

  int feature_dim() const { return m + (reduced_form ? 1 : 0); }
  bool has_reduced_form() const { return static_cast<bool>(reduced_form); }
  // Single-output view of estimate j (0-based), as a standalone regressor.
  FittedRegressor estimator_view(int j) const;
};

double truncation_threshold(int m, double clamp_constant);

// Algorithm: draw m GP(0, kx) samples via random Fourier features, evaluate
// them on the stage-1 treatments, denoise with one vector-valued oracle fit on
// the stage-1 instruments, and (optionally) fit the reduced-form feature on
// stage-1 responses — falling back to the supplied stage-2 rows, with the
// fallback recorded on the returned map.
LearnedFeatureMap build_learned_feature_map(const Stage1Data& stage1, const KernelSpec& kx,
                                            int m, const OracleConfig& oracle, uint64_t seed,
                                            const LearnedKernelOptions& opts = {},
                                            const Stage2Data* stage2_fallback = nullptr);

// Assemble a map from already-fitted models (stub injection for tests and for
// oracle-swapping experiments). m is the denoiser's output width.
LearnedFeatureMap make_feature_map_from_models(FittedRegressor denoiser,
                                               FittedRegressor reduced_form,
                                               double clamp_constant = 5.0);

// n x feature_dim matrix: column j < m is clamp(estimate_j, ±tau)/sqrt(m), the
// optional last column is clamp(reduced_form, ±tau). Rows are feature vectors,
// so feature_matrix(Z) * feature_matrix(Z')ᵀ realizes the learned Gram.
Eigen::MatrixXd feature_matrix(const LearnedFeatureMap& map,
                               const Eigen::Ref<const Eigen::MatrixXd>& Z);

Eigen::MatrixXd learned_gram(const LearnedFeatureMap& map,
                             const Eigen::Ref<const Eigen::MatrixXd>& Z,
                             const Eigen::Ref<const Eigen::MatrixXd>& Zp);

// CSV export of a feature matrix with header g1..gm[,h].
void write_feature_csv(const LearnedFeatureMap& map, const Eigen::Ref<const Eigen::MatrixXd>& Phi,
                       const std::string& path);

// Conditioning diagnostic: coefficients of m GP draws on the top m_prime
// principal directions of their mutual Gram, both built from one shared RFF
// map at n seeded evaluation points in [-3,3]^input_dim. Rows index draws.
// For well-conditioned draws the singular values concentrate near sqrt(m).
Eigen::MatrixXd gp_coefficient_matrix(const KernelSpec& kx, int input_dim, int num_rff, int m,
                                      int n_points, int m_prime, uint64_t seed);

}  // namespace learned_iv
