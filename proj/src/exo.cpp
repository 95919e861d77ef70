#include "learned_iv/exo.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "learned_iv/learned_kernel.hpp"
#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

void require_finite(const Eigen::Ref<const Eigen::MatrixXd>& M, const char* what) {
  if (!M.allFinite()) throw std::invalid_argument(std::string("non-finite values in ") + what);
}

void validate_split(const ExoSplit& split, const char* name) {
  const Eigen::Index n = split.z_o.size();
  if (n < 1) throw std::invalid_argument(std::string(name) + ": empty split");
  if (split.x_o.size() != n || split.y.size() != n || split.w.rows() != n)
    throw std::invalid_argument(std::string(name) + ": row counts disagree");
  if (split.w.cols() < 1)
    throw std::invalid_argument(std::string(name) + ": needs at least one covariate column");
  require_finite(split.z_o, name);
  require_finite(split.w, name);
  require_finite(split.x_o, name);
  require_finite(split.y, name);
}

Eigen::MatrixXd stack_inputs(const Eigen::Ref<const Eigen::VectorXd>& z_o,
                             const Eigen::Ref<const Eigen::MatrixXd>& w) {
  Eigen::MatrixXd inputs(w.rows(), 1 + w.cols());
  inputs.col(0) = z_o;
  inputs.rightCols(w.cols()) = w;
  return inputs;
}

// Readout network over the exogenous covariates; outputs the m weights
// theta_j(w) applied to the treatment-sample evaluations.
class ThetaNet final : public Regressor {
 public:
  MLPCore core;
  Standardizer input_std;
  int epochs_run = 0;
  int best_epoch = 0;

  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    if (X.cols() != input_std.mean.cols())
      throw std::invalid_argument("theta net: covariate dimension mismatch");
    require_finite(X, "readout inputs");
    return core.forward(input_std.apply(X));
  }
  int input_dim() const override { return static_cast<int>(input_std.mean.cols()); }
  int output_dim() const override { return core.output_dim(); }
  std::vector<Eigen::MatrixXd> parameter_arrays() const override {
    std::vector<Eigen::MatrixXd> arrays;
    for (size_t l = 0; l < core.W.size(); ++l) {
      arrays.push_back(core.W[l]);
      arrays.push_back(core.b[l]);
    }
    arrays.push_back(input_std.mean);
    arrays.push_back(input_std.scale);
    return arrays;
  }
  nlohmann::json diagnostics() const override {
    return {{"kind", "exo-readout"}, {"epochs_run", epochs_run}, {"best_epoch", best_epoch}};
  }
};

// Mean reduced-form square error mean_i (G_i . O_i - y_i)^2 at the current
// network weights, with X already standardized.
double reduced_form_loss(const MLPCore& core, const Eigen::MatrixXd& X, const Eigen::MatrixXd& G,
                         const Eigen::VectorXd& y) {
  const Eigen::MatrixXd O = core.forward(X);
  const Eigen::VectorXd g = G.cwiseProduct(O).rowwise().sum();
  return (g - y).squaredNorm() / static_cast<double>(X.rows());
}

}  // namespace

void ExoOptions::validate() const {
  if (!(clamp_constant > 0.0)) throw std::invalid_argument("clamp_constant must be positive");
  if (rff_features < 1) throw std::invalid_argument("rff_features must be >= 1");
  if (!(oracle_holdout >= 0.0 && oracle_holdout < 1.0))
    throw std::invalid_argument("oracle_holdout must lie in [0, 1)");
}

ExoEstimator fit_exo(const ExoDataset& data, const KernelSpec& k_xo, int m,
                     const OracleConfig& oracle, const OracleConfig& theta_cfg, uint64_t seed,
                     const ExoOptions& options) {
  if (m < 1) throw std::invalid_argument("fit_exo: m must be >= 1");
  if (theta_cfg.kind != OracleKind::MLP)
    throw std::invalid_argument("fit_exo: theta_cfg must be an MLP configuration");
  options.validate();
  k_xo.validate();
  oracle.validate();
  theta_cfg.validate();
  validate_split(data.stage1, "stage1");
  validate_split(data.stage2, "stage2");
  if (data.stage1.w.cols() != data.stage2.w.cols())
    throw std::invalid_argument("fit_exo: covariate widths disagree across stages");

  const Eigen::Index n1 = data.stage1.z_o.size();
  const Eigen::Index n2 = data.stage2.z_o.size();
  const int w_cols = static_cast<int>(data.stage2.w.cols());

  ExoEstimator est;
  est.m = m;
  est.clamp_threshold = truncation_threshold(m, options.clamp_constant);

  // Fixed GP(0, k_xo) draws over the (univariate) treatment coordinate. Child
  // seeds follow the batched-draw convention so column j of draw_gp_weights
  // with the same base seed reproduces sample j.
  auto map = std::make_shared<const FeatureMapRFF>(
      rff_feature_map(k_xo, 1, options.rff_features, derive_seed(seed, "xo-map")));
  const uint64_t draw_base = derive_seed(seed, "xo-draws");
  est.treatment_samples.reserve(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j)
    est.treatment_samples.push_back(draw_gp_sample(map, derive_seed(draw_base, j)));

  // First stage: one vector-valued oracle (z_o, w) -> f_j(x_o).
  RegressionTask task;
  task.inputs = stack_inputs(data.stage1.z_o, data.stage1.w);
  task.targets.resize(n1, m);
  for (int j = 0; j < m; ++j)
    task.targets.col(j) = est.treatment_samples[static_cast<size_t>(j)].evaluate(data.stage1.x_o);
  task.holdout_fraction = options.oracle_holdout;
  OracleConfig stage1_cfg = oracle;
  stage1_cfg.seed = derive_seed(seed, "denoise");
  est.stage1_regressor = fit_oracle(stage1_cfg, task);

  if (options.standardize_y) {
    est.y_mean = data.stage2.y.mean();
    const double sd = std::sqrt((data.stage2.y.array() - est.y_mean).square().mean());
    est.y_scale = sd > 1e-12 ? sd : 1.0;
  }

  // Readout training data: clamped first-stage estimates and scaled responses.
  const Eigen::MatrixXd G2 = exo_feature_matrix(est, data.stage2.z_o, data.stage2.w);
  const Eigen::MatrixXd G1 = exo_feature_matrix(est, data.stage1.z_o, data.stage1.w);
  const Eigen::VectorXd y2 = (data.stage2.y.array() - est.y_mean).matrix() / est.y_scale;
  const Eigen::VectorXd y1 = (data.stage1.y.array() - est.y_mean).matrix() / est.y_scale;

  auto net = std::make_shared<ThetaNet>();
  net->input_std = Standardizer::fit(data.stage2.w);
  const Eigen::MatrixXd W2 = net->input_std.apply(data.stage2.w);
  const Eigen::MatrixXd W1 = net->input_std.apply(data.stage1.w);

  std::vector<int> dims;
  dims.push_back(w_cols);
  for (int h : theta_cfg.hidden_layers) dims.push_back(h);
  dims.push_back(m);
  net->core.init(dims, theta_cfg.activation, derive_seed(seed, "theta-init"));

  est.initial_loss = reduced_form_loss(net->core, W2, G2, y2);
  double best_monitor = reduced_form_loss(net->core, W1, G1, y1);
  std::vector<Eigen::MatrixXd> best_W = net->core.W;
  std::vector<Eigen::RowVectorXd> best_b = net->core.b;
  int best_epoch = 0;
  int since_best = 0;

  auto rng = make_rng(derive_seed(seed, "theta-train"));
  std::vector<Eigen::Index> order(static_cast<size_t>(n2));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  std::vector<Eigen::MatrixXd> cache, gW;
  std::vector<Eigen::RowVectorXd> gb;
  for (int epoch = 1; epoch <= theta_cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n2; start += theta_cfg.batch_size) {
      const Eigen::Index nb = std::min<Eigen::Index>(theta_cfg.batch_size, n2 - start);
      Eigen::MatrixXd Xb(nb, W2.cols()), Gb(nb, m);
      Eigen::VectorXd yb(nb);
      for (Eigen::Index i = 0; i < nb; ++i) {
        const Eigen::Index row = order[static_cast<size_t>(start + i)];
        Xb.row(i) = W2.row(row);
        Gb.row(i) = G2.row(row);
        yb(i) = y2(row);
      }
      std::optional<std::vector<Eigen::MatrixXd>> masks;
      if (theta_cfg.dropout > 0.0)
        masks = net->core.make_dropout_masks(theta_cfg.hidden_layers, nb, theta_cfg.dropout, rng);
      const Eigen::MatrixXd O = net->core.forward(Xb, &cache, masks ? &*masks : nullptr);
      const Eigen::VectorXd r = Gb.cwiseProduct(O).rowwise().sum() - yb;
      // d l' / d O_i = (2 / nb) * r_i * G_i (the readout enters linearly with
      // per-row coefficients G_i).
      const Eigen::MatrixXd dout =
          (2.0 / static_cast<double>(nb)) * (Gb.array().colwise() * r.array()).matrix();
      if (!dout.allFinite())
        throw std::runtime_error("readout training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      net->core.backward(Xb, cache, dout, masks ? &*masks : nullptr, gW, gb);
      net->core.adam_step(gW, gb, theta_cfg.learning_rate, theta_cfg.weight_decay);
    }
    const double monitor = reduced_form_loss(net->core, W1, G1, y1);
    if (!std::isfinite(monitor))
      throw std::runtime_error("readout training diverged (non-finite loss) at epoch " +
                               std::to_string(epoch));
    if (monitor < best_monitor - 1e-12) {
      best_monitor = monitor;
      best_W = net->core.W;
      best_b = net->core.b;
      best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= theta_cfg.patience) {
      est.epochs_run = epoch;
      break;
    }
    est.epochs_run = epoch;
  }
  net->core.W = std::move(best_W);
  net->core.b = std::move(best_b);
  net->best_epoch = best_epoch;
  net->epochs_run = est.epochs_run;
  est.best_epoch = best_epoch;
  est.final_loss = reduced_form_loss(net->core, W2, G2, y2);
  est.best_validation_loss = best_monitor;
  est.theta_net = net;
  return est;
}

Eigen::MatrixXd exo_feature_matrix(const ExoEstimator& est,
                                   const Eigen::Ref<const Eigen::VectorXd>& z_o,
                                   const Eigen::Ref<const Eigen::MatrixXd>& w) {
  if (!est.stage1_regressor) throw std::invalid_argument("estimator has no first-stage fit");
  if (z_o.size() != w.rows())
    throw std::invalid_argument("exo_feature_matrix: instrument/covariate row mismatch");
  const Eigen::MatrixXd inputs = stack_inputs(z_o, w);
  if (inputs.cols() != est.stage1_regressor->input_dim())
    throw std::invalid_argument("exo_feature_matrix: covariate dimension mismatch");
  Eigen::MatrixXd raw = est.stage1_regressor->predict(inputs);
  const double tau = est.clamp_threshold;
  return raw.cwiseMax(-tau).cwiseMin(tau);
}

Eigen::VectorXd reduced_form_predict(const ExoEstimator& est,
                                     const Eigen::Ref<const Eigen::VectorXd>& z_o,
                                     const Eigen::Ref<const Eigen::MatrixXd>& w) {
  if (!est.theta_net) throw std::invalid_argument("estimator has no readout fit");
  const Eigen::MatrixXd G = exo_feature_matrix(est, z_o, w);
  const Eigen::MatrixXd O = est.theta_net->predict(w);
  return (est.y_mean + est.y_scale * G.cwiseProduct(O).rowwise().sum().array()).matrix();
}

Eigen::VectorXd predict_exo(const ExoEstimator& est, const Eigen::Ref<const Eigen::VectorXd>& x_o,
                            const Eigen::Ref<const Eigen::MatrixXd>& w) {
  if (!est.theta_net) throw std::invalid_argument("estimator has no readout fit");
  if (est.treatment_samples.size() != static_cast<size_t>(est.m) || est.m < 1)
    throw std::invalid_argument("estimator holds no treatment samples");
  if (x_o.size() != w.rows())
    throw std::invalid_argument("predict_exo: treatment/covariate row mismatch");
  Eigen::MatrixXd F(x_o.size(), est.m);
  for (int j = 0; j < est.m; ++j)
    F.col(j) = est.treatment_samples[static_cast<size_t>(j)].evaluate(x_o);
  const Eigen::MatrixXd O = est.theta_net->predict(w);
  return (est.y_mean + est.y_scale * F.cwiseProduct(O).rowwise().sum().array()).matrix();
}

double predict_exo(const ExoEstimator& est, double x_o,
                   const Eigen::Ref<const Eigen::RowVectorXd>& w) {
  Eigen::VectorXd x(1);
  x(0) = x_o;
  Eigen::MatrixXd W(1, w.size());
  W.row(0) = w;
  return predict_exo(est, x, W)(0);
}

}  // namespace learned_iv
