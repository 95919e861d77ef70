#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "learned_iv/kernels.hpp"
#include "learned_iv/learned_kernel.hpp"

namespace learned_iv {

// Estimator configuration. lambda unset selects the empirical-Bayes residual
// rule; nu unset selects the validation-grid rule (multipliers scaled by n2).
struct KIVConfig {
  std::optional<double> lambda;  // prior/noise scale
  std::optional<double> nu;      // first-stage ridge
  std::vector<double> nu_grid_multipliers = {0.01, 0.1, 1.0, 10.0};
  double kappa = 0.5;                // minimax variant
  std::optional<double> mu;          // minimax variant; unset derives from (lambda, nu)
  double jitter = 1e-8;
  KernelSpec second_stage{KernelFamily::RBF, 1.0, 1.0};
  uint64_t seed = 0;  // drives the nu-grid validation split

  void validate() const;
};

void to_json(nlohmann::json& j, const KIVConfig& c);
void from_json(const nlohmann::json& j, KIVConfig& c);

// Quasi-Bayesian posterior over the structural function, held in low-rank
// form: with feature matrix Phi (n2 x r) and A such that L = Phi A Phiᵀ, the
// data operator is Lambda = Phi C Phiᵀ with C = (lambda I + A M)⁻¹ A and
// M = Phiᵀ K_xx Phi. All posterior queries reduce to r x r algebra plus
// kernel evaluations against the training inputs.
struct QuasiPosterior {
  Eigen::MatrixXd X_train;  // n2 x dx
  Eigen::VectorXd Y;        // n2
  KernelSpec second_stage;
  double lambda = 1.0;
  double nu = 1.0;
  double jitter = 1e-8;

  Eigen::MatrixXd Phi;      // n2 x r
  Eigen::MatrixXd A;        // r x r, L = Phi A Phiᵀ
  Eigen::MatrixXd C;        // r x r, Lambda = Phi C Phiᵀ (symmetrized)
  Eigen::MatrixXd M;        // r x r, Phiᵀ K_xx Phi
  Eigen::VectorXd weights;  // Lambda Y

  Eigen::Index n2() const { return Y.size(); }
};

// --- Construction ------------------------------------------------------------

// Low-rank first-stage smoother L = Phi (PhiᵀPhi + nu I)⁻¹ Phiᵀ, materialized
// (for tests and the dense fallback; production paths never form it).
Eigen::MatrixXd low_rank_l_matrix(const Eigen::Ref<const Eigen::MatrixXd>& Phi, double nu);

// Assemble a posterior from explicit factors L = Phi A Phiᵀ. Computes M, the
// symmetrized C (asserting the r x r asymmetry stays below 1e-6 relative), and
// the weight vector.
QuasiPosterior assemble_posterior(const Eigen::MatrixXd& X, const Eigen::VectorXd& Y,
                                  const Eigen::MatrixXd& Phi, const Eigen::MatrixXd& A,
                                  const KernelSpec& second_stage, double lambda, double nu,
                                  double jitter);

// Empirical-Bayes noise scale: mean squared reduced-form residual, floored.
double empirical_bayes_lambda(const Eigen::VectorXd& Y, const Eigen::VectorXd& h_hat_at_Z);

// Grid search for the first-stage ridge nu. Candidates are {multiplier * n}
// over the sorted multipliers, scored by the held-out error of a feature-space
// ridge fit of y on Phi over a seeded 50/50 row split; ties go to the smaller
// value. This is the policy fit_quasi_posterior applies when config.nu is
// unset, exposed so diagnostics can reuse the identical rule.
double select_nu_on_grid(const Eigen::MatrixXd& Phi, const Eigen::VectorXd& y,
                         const std::vector<double>& multipliers, uint64_t seed);

// Fit with a learned feature map. The first-stage operator is computed through
// the (m+1)-dimensional feature system; no n2 x n2 inversion is performed.
QuasiPosterior fit_quasi_posterior(const Stage2Data& stage2, const LearnedFeatureMap& map,
                                   const KIVConfig& config);

// Fit with an explicit instrument kernel (dense-Gram path): L solved from
// (K_zz + nu I) L = K_zz at O(n2^3). Baseline arm for comparisons.
QuasiPosterior fit_quasi_posterior_gram(const Stage2Data& stage2, const KernelSpec& kz,
                                        const KIVConfig& config);

// Materialize Lambda (n2 x n2) — test/diagnostic helper.
Eigen::MatrixXd lambda_matrix(const QuasiPosterior& post);

// --- Queries -----------------------------------------------------------------

Eigen::VectorXd posterior_mean(const QuasiPosterior& post,
                               const Eigen::Ref<const Eigen::MatrixXd>& X_star);

Eigen::MatrixXd posterior_cov(const QuasiPosterior& post,
                              const Eigen::Ref<const Eigen::MatrixXd>& X_star);

// Rows are joint draws of f(X_star) under the posterior (jitter escalated x10
// up to 3 times on Cholesky failure; an exactly zero covariance yields the
// mean itself).
Eigen::MatrixXd sample_posterior(const QuasiPosterior& post,
                                 const Eigen::Ref<const Eigen::MatrixXd>& X_star, int n_samples,
                                 uint64_t seed);

// -1/2 (Yᵀ Lambda Y + log|I + lambda⁻¹ L^{1/2} K_xx L^{1/2}|), constant 0.
// The log-determinant is evaluated on the r x r symmetric form through the
// low-rank factors of L, via Cholesky.
double log_marginal_quasi_likelihood(const QuasiPosterior& post);

struct CredibleSummaries {
  double ball_radius = 0.0;     // level-quantile of the grid-RMS deviation
  Eigen::VectorXd ci_lower;     // mean - z * pointwise sd
  Eigen::VectorXd ci_upper;
};

CredibleSummaries credible_summaries(const QuasiPosterior& post,
                                     const Eigen::Ref<const Eigen::MatrixXd>& X_star, double level,
                                     int n_samples, uint64_t seed);

// --- Minimax point estimator ---------------------------------------------------

struct MinimaxEstimate {
  Eigen::VectorXd alpha;      // f̂ = Σ alpha_i k_x(x_i, ·)
  double saddle_value = 0.0;  // objective at the saddle
};

// Adversarial-instrument point estimator: the inner maximization over the
// learned instrument space is eliminated in closed form, leaving an
// r-dimensional system by the push-through identity.
MinimaxEstimate solve_minimax_point_estimate(const Stage2Data& stage2,
                                             const LearnedFeatureMap& map, double kappa,
                                             double lambda_g, double mu,
                                             const KernelSpec& second_stage);

// Saddle objective value at a given alpha (inner player at its best response).
double minimax_objective(const Stage2Data& stage2, const LearnedFeatureMap& map, double kappa,
                         double lambda_g, double mu, const KernelSpec& second_stage,
                         const Eigen::VectorXd& alpha);

Eigen::VectorXd minimax_predict(const MinimaxEstimate& est, const Stage2Data& stage2,
                                const KernelSpec& second_stage,
                                const Eigen::Ref<const Eigen::MatrixXd>& X_star);

// Hyperparameters under which the minimax estimate coincides with the
// quasi-Bayes posterior mean: lambda_g = kappa nu / n2, mu = lambda/(4 kappa n2).
struct MinimaxCorrespondence {
  double kappa;
  double lambda_g;
  double mu;
};
MinimaxCorrespondence quasi_bayes_correspondence(double lambda, double nu, Eigen::Index n2,
                                                 double kappa = 0.5);

// --- Bayesian model averaging ---------------------------------------------------

struct BMACandidate {
  std::shared_ptr<const QuasiPosterior> posterior;
  double log_prior = 0.0;
  nlohmann::json label;  // carried through to reports
};

struct BMAResult {
  std::vector<BMACandidate> candidates;
  Eigen::VectorXd log_ml;   // per candidate
  Eigen::VectorXd weights;  // softmax(log_ml + log_prior)

  Eigen::VectorXd mixture_mean(const Eigen::Ref<const Eigen::MatrixXd>& X_star) const;
  // Pointwise mixture quantiles via pooled sampling with per-candidate counts
  // proportional to weights. Returns levels.size() x rows(X_star).
  Eigen::MatrixXd mixture_quantiles(const Eigen::Ref<const Eigen::MatrixXd>& X_star,
                                    const std::vector<double>& levels, int n_samples,
                                    uint64_t seed) const;
};

BMAResult bma_combine(std::vector<BMACandidate> candidates);

}  // namespace learned_iv
