#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

namespace learned_iv {

enum class KernelFamily { RBF, Matern32, Matern52, Linear };

std::string to_string(KernelFamily f);
KernelFamily kernel_family_from_string(const std::string& s);

// Parametric reproducing kernel: family, length-scale `bandwidth` and output
// scale `variance` (k(x,x) == variance for stationary families).
struct KernelSpec {
  KernelFamily family = KernelFamily::RBF;
  double bandwidth = 1.0;
  double variance = 1.0;

  void validate() const;  // throws std::invalid_argument on bad parameters
  bool stationary() const { return family != KernelFamily::Linear; }
};

void to_json(nlohmann::json& j, const KernelSpec& s);
void from_json(const nlohmann::json& j, KernelSpec& s);

double eval_kernel(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& y);

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X,
                     const Eigen::Ref<const Eigen::MatrixXd>& Y);

// Median of pairwise Euclidean distances; all n(n-1)/2 pairs for n <= 2000,
// otherwise a seeded subsample of 2e6 pairs. Throws on n < 2 or when the
// median distance is zero ("degenerate inputs").
double median_heuristic(const Eigen::Ref<const Eigen::MatrixXd>& X, uint64_t seed = 0);

// Random Fourier feature map: phi_i(x) = scale * cos(frequencies.row(i) * x + phases_i),
// with scale = sqrt(variance) * sqrt(2 / num_features), so that phi(x).phi(y)
// approximates eval_kernel(spec, x, y).
struct FeatureMapRFF {
  Eigen::MatrixXd frequencies;  // num_features x d
  Eigen::VectorXd phases;       // num_features
  double scale = 0.0;           // per-feature amplitude bound
  KernelSpec source_spec;
  uint64_t seed = 0;

  int num_features() const { return static_cast<int>(frequencies.rows()); }
  int input_dim() const { return static_cast<int>(frequencies.cols()); }
  Eigen::MatrixXd features(const Eigen::Ref<const Eigen::MatrixXd>& X) const;  // n x F
};

// Spectral sampling for RBF / Matern32 / Matern52. Linear has exact finite
// features and is rejected here. The 3-argument form assumes univariate inputs.
FeatureMapRFF rff_feature_map(const KernelSpec& spec, int input_dim, int num_features,
                              uint64_t seed);
FeatureMapRFF rff_feature_map(const KernelSpec& spec, int num_features, uint64_t seed);

// A GP(0, k) prior sample realized as f(x) = weights . phi(x), weights iid N(0,1).
struct GPSample {
  Eigen::VectorXd weights;
  std::shared_ptr<const FeatureMapRFF> feature_map;

  Eigen::VectorXd evaluate(const Eigen::Ref<const Eigen::MatrixXd>& X) const;
  double operator()(double x) const;  // univariate convenience
};

GPSample draw_gp_sample(std::shared_ptr<const FeatureMapRFF> map, uint64_t seed);

// Weights for m independent draws; column j equals draw_gp_sample with child
// seed derive_seed(seed, j), so batched and individual draws coincide.
Eigen::MatrixXd draw_gp_weights(const FeatureMapRFF& map, int m, uint64_t seed);

// Evaluations of the draws with weight columns W at rows of X (chunked so that
// large X never materializes an n x F feature matrix). Returns n x cols(W).
Eigen::MatrixXd gp_values(const FeatureMapRFF& map, const Eigen::Ref<const Eigen::MatrixXd>& W,
                          const Eigen::Ref<const Eigen::MatrixXd>& X);

}  // namespace learned_iv
