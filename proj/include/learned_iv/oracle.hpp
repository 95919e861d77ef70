#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "learned_iv/kernels.hpp"

namespace learned_iv {

// A (possibly vector-valued) supervised regression problem. holdout_fraction
// carves a seeded validation split out of the rows for hyperparameter
// selection / early stopping; 0 selects by generalized cross-validation
// (KRR/RFRidge) or stops on training loss (MLP).
struct RegressionTask {
  Eigen::MatrixXd inputs;   // n x d
  Eigen::MatrixXd targets;  // n x q
  double holdout_fraction = 0.0;

  void validate() const;
};

enum class OracleKind { KRR, RFRidge, MLP };
enum class Activation { ReLU, Tanh, Swish };

std::string to_string(OracleKind k);
std::string to_string(Activation a);
OracleKind oracle_kind_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

struct OracleConfig {
  OracleKind kind = OracleKind::KRR;

  // KRR: explicit kernel, or median-trick RBF on standardized inputs when unset.
  std::optional<KernelSpec> krr_kernel;
  std::vector<double> ridge_grid = {1e-4, 1e-2, 1.0, 10.0, 100.0, 1000.0};

  // RFRidge: random Fourier features of a median-trick RBF kernel + ridge.
  int rf_num_features = 512;

  // MLP.
  std::vector<int> hidden_layers = {100, 100, 100};
  Activation activation = Activation::Swish;
  double learning_rate = 1e-3;
  double dropout = 0.2;
  int max_epochs = 300;
  int patience = 20;
  int batch_size = 128;
  double weight_decay = 0.0;  // decoupled (AdamW) when > 0

  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const OracleConfig& c);
void from_json(const nlohmann::json& j, OracleConfig& c);

// Immutable fitted model. Predictions are deterministic and repeatable.
class Regressor {
 public:
  virtual ~Regressor() = default;
  virtual Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  // Parameter arrays for the flat binary export (reproducibility audits).
  virtual std::vector<Eigen::MatrixXd> parameter_arrays() const = 0;
  // Fit metadata (selected ridge, training-loss trajectory endpoints, ...).
  virtual nlohmann::json diagnostics() const { return nlohmann::json::object(); }
};

using FittedRegressor = std::shared_ptr<const Regressor>;

FittedRegressor fit_oracle(const OracleConfig& config, const RegressionTask& task);

Eigen::MatrixXd predict(const FittedRegressor& reg, const Eigen::Ref<const Eigen::MatrixXd>& Z);

// Flat binary export: "LIVW" magic, int32 array count, then per array an int32
// rank + int32 dims followed by row-major doubles.
void export_weights(const FittedRegressor& reg, const std::string& path);

// --- Building blocks (exposed for reuse and white-box tests) ----------------

// Per-column affine input normalization fitted on the training rows.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;  // std floored away from zero
  bool identity = true;

  static Standardizer fit(const Eigen::Ref<const Eigen::MatrixXd>& X);
  static Standardizer none(int d);
  Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& X) const;
};

// Minimal fully-connected network with Adam/AdamW updates. The trainer drives
// it with an arbitrary gradient of the loss w.r.t. the network output, so the
// same core serves both square-loss oracles and custom objectives.
struct MLPCore {
  std::vector<Eigen::MatrixXd> W;       // layer l: d_{l-1} x d_l
  std::vector<Eigen::RowVectorXd> b;
  Activation act = Activation::Swish;

  std::vector<Eigen::MatrixXd> mW, vW;
  std::vector<Eigen::RowVectorXd> mb, vb;
  int adam_t = 0;

  void init(const std::vector<int>& dims, Activation a, uint64_t seed);
  int input_dim() const { return static_cast<int>(W.front().rows()); }
  int output_dim() const { return static_cast<int>(W.back().cols()); }

  // Forward pass; when `cache` is non-null it stores per-layer pre-activations
  // and activations for backward(). Dropout masks (inverted scaling) apply to
  // hidden activations only.
  Eigen::MatrixXd forward(const Eigen::Ref<const Eigen::MatrixXd>& X,
                          std::vector<Eigen::MatrixXd>* cache = nullptr,
                          const std::vector<Eigen::MatrixXd>* dropout_masks = nullptr) const;
  // Gradients from dL/d(output); requires the cache of the matching forward.
  void backward(const Eigen::Ref<const Eigen::MatrixXd>& X,
                const std::vector<Eigen::MatrixXd>& cache,
                const Eigen::Ref<const Eigen::MatrixXd>& dout,
                const std::vector<Eigen::MatrixXd>* dropout_masks,
                std::vector<Eigen::MatrixXd>& gW, std::vector<Eigen::RowVectorXd>& gb) const;
  void adam_step(const std::vector<Eigen::MatrixXd>& gW,
                 const std::vector<Eigen::RowVectorXd>& gb, double lr, double weight_decay);

  std::vector<Eigen::MatrixXd> make_dropout_masks(const std::vector<int>& hidden_rows,
                                                  Eigen::Index batch, double rate,
                                                  std::mt19937_64& rng) const;
};

// Seeded holdout split: returns (train_idx, holdout_idx).
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> holdout_split(
    Eigen::Index n, double fraction, uint64_t seed);

}  // namespace learned_iv
