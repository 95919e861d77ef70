#include "learned_iv/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

Eigen::MatrixXd take_rows(const Eigen::Ref<const Eigen::MatrixXd>& X,
                          const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = X.row(idx[static_cast<size_t>(i)]);
  return out;
}

void require_finite(const Eigen::Ref<const Eigen::MatrixXd>& M, const char* what) {
  if (!M.allFinite()) throw std::invalid_argument(std::string(what) + " contain non-finite values");
}

}  // namespace

// --- Task / config validation ------------------------------------------------

void RegressionTask::validate() const {
  if (inputs.rows() < 2) throw std::invalid_argument("regression task needs at least 2 rows");
  if (inputs.rows() != targets.rows())
    throw std::invalid_argument("inputs and targets row counts differ");
  if (inputs.cols() < 1 || targets.cols() < 1)
    throw std::invalid_argument("inputs and targets need at least one column");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("holdout_fraction must lie in [0, 1)");
  require_finite(inputs, "task inputs");
  require_finite(targets, "task targets");
}

void OracleConfig::validate() const {
  if (kind == OracleKind::KRR || kind == OracleKind::RFRidge) {
    if (ridge_grid.empty()) throw std::invalid_argument("ridge_grid must be non-empty");
    for (double r : ridge_grid)
      if (!(r > 0.0) || !std::isfinite(r))
        throw std::invalid_argument("ridge_grid entries must be positive and finite");
  }
  if (krr_kernel) krr_kernel->validate();
  if (kind == OracleKind::RFRidge && rf_num_features < 1)
    throw std::invalid_argument("rf_num_features must be >= 1");
  if (kind == OracleKind::MLP) {
    if (hidden_layers.empty()) throw std::invalid_argument("hidden_layers must be non-empty");
    for (int h : hidden_layers)
      if (h < 1) throw std::invalid_argument("hidden layer widths must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw std::invalid_argument("dropout must lie in [0, 1)");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  }
}

std::string to_string(OracleKind k) {
  switch (k) {
    case OracleKind::KRR: return "krr";
    case OracleKind::RFRidge: return "rfridge";
    case OracleKind::MLP: return "mlp";
  }
  throw std::logic_error("unreachable oracle kind");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Swish: return "swish";
  }
  throw std::logic_error("unreachable activation");
}

OracleKind oracle_kind_from_string(const std::string& s) {
  if (s == "krr") return OracleKind::KRR;
  if (s == "rfridge") return OracleKind::RFRidge;
  if (s == "mlp") return OracleKind::MLP;
  throw std::invalid_argument("unknown oracle kind: " + s);
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  if (s == "swish") return Activation::Swish;
  throw std::invalid_argument("unknown activation: " + s);
}

void to_json(nlohmann::json& j, const OracleConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"ridge_grid", c.ridge_grid},
                     {"rf_num_features", c.rf_num_features},
                     {"hidden_layers", c.hidden_layers},
                     {"activation", to_string(c.activation)},
                     {"learning_rate", c.learning_rate},
                     {"dropout", c.dropout},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed}};
  if (c.krr_kernel) {
    j["krr_kernel"] = *c.krr_kernel;
  } else {
    j["krr_kernel"] = "median-auto";
  }
}

void from_json(const nlohmann::json& j, OracleConfig& c) {
  c = OracleConfig{};
  c.kind = oracle_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("krr_kernel")) {
    const auto& jk = j.at("krr_kernel");
    if (jk.is_string()) {
      if (jk.get<std::string>() != "median-auto")
        throw std::invalid_argument("krr_kernel string must be \"median-auto\"");
      c.krr_kernel.reset();
    } else {
      c.krr_kernel = jk.get<KernelSpec>();
    }
  }
  if (j.contains("ridge_grid")) c.ridge_grid = j.at("ridge_grid").get<std::vector<double>>();
  if (j.contains("rf_num_features")) c.rf_num_features = j.at("rf_num_features").get<int>();
  if (j.contains("hidden_layers")) c.hidden_layers = j.at("hidden_layers").get<std::vector<int>>();
  if (j.contains("activation"))
    c.activation = activation_from_string(j.at("activation").get<std::string>());
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("patience")) c.patience = j.at("patience").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  c.validate();
}

// --- Standardizer ------------------------------------------------------------

Standardizer Standardizer::fit(const Eigen::Ref<const Eigen::MatrixXd>& X) {
  Standardizer s;
  s.identity = false;
  s.mean = X.colwise().mean();
  Eigen::RowVectorXd var =
      (X.rowwise() - s.mean).array().square().colwise().sum() / std::max<double>(1.0, X.rows() - 1);
  s.scale = var.array().sqrt().max(1e-12);
  return s;
}

Standardizer Standardizer::none(int d) {
  Standardizer s;
  s.identity = true;
  s.mean = Eigen::RowVectorXd::Zero(d);
  s.scale = Eigen::RowVectorXd::Ones(d);
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::Ref<const Eigen::MatrixXd>& X) const {
  if (identity) return X;
  return (X.rowwise() - mean).array().rowwise() / scale.array();
}

// --- Holdout split -----------------------------------------------------------

std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> holdout_split(
    Eigen::Index n, double fraction, uint64_t seed) {
  std::vector<Eigen::Index> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  if (fraction <= 0.0) return {perm, {}};
  auto rng = make_rng(derive_seed(seed, "holdout-split"));
  std::shuffle(perm.begin(), perm.end(), rng);
  auto n_hold = static_cast<Eigen::Index>(std::llround(fraction * static_cast<double>(n)));
  n_hold = std::max<Eigen::Index>(1, std::min(n_hold, n - 2));
  std::vector<Eigen::Index> hold(perm.begin(), perm.begin() + n_hold);
  std::vector<Eigen::Index> train(perm.begin() + n_hold, perm.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());
  return {train, hold};
}

// --- KRR ---------------------------------------------------------------------

namespace {

class KRRRegressor final : public Regressor {
 public:
  KernelSpec kernel;
  Standardizer input_std;
  Eigen::MatrixXd train_inputs;  // standardized coordinates
  Eigen::MatrixXd dual_coeffs;   // n x q
  double ridge = 0.0;
  double selection_score = 0.0;
  std::string selection_mode;

  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    if (X.cols() != input_std.mean.cols())
      throw std::invalid_argument("predict: input dimension mismatch");
    require_finite(X, "prediction inputs");
    return gram(kernel, input_std.apply(X), train_inputs) * dual_coeffs;
  }
  int input_dim() const override { return static_cast<int>(input_std.mean.cols()); }
  int output_dim() const override { return static_cast<int>(dual_coeffs.cols()); }
  std::vector<Eigen::MatrixXd> parameter_arrays() const override {
    return {train_inputs, dual_coeffs, input_std.mean, input_std.scale};
  }
  nlohmann::json diagnostics() const override {
    return {{"kind", "krr"},
            {"ridge", ridge},
            {"selection_mode", selection_mode},
            {"selection_score", selection_score},
            {"kernel", nlohmann::json(kernel)}};
  }
};

// Dual solve through a shared eigendecomposition: (K + r I)^{-1} Y for every
// ridge in the grid and every output column at the cost of one factorization.
Eigen::MatrixXd dual_solve(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& eig,
                           const Eigen::MatrixXd& Y, double ridge) {
  Eigen::VectorXd d = eig.eigenvalues().array().max(0.0) + ridge;
  Eigen::MatrixXd Ut_y = eig.eigenvectors().transpose() * Y;
  return eig.eigenvectors() * (Ut_y.array().colwise() / d.array()).matrix();
}

FittedRegressor fit_krr(const OracleConfig& config, const RegressionTask& task) {
  const auto [train_idx, hold_idx] = holdout_split(
      task.inputs.rows(), task.holdout_fraction, derive_seed(config.seed, "krr"));
  const Eigen::MatrixXd train_raw = take_rows(task.inputs, train_idx);

  auto model = std::make_shared<KRRRegressor>();
  // Explicit kernels see raw coordinates (their bandwidth is in caller units);
  // the median-trick default standardizes before measuring distances.
  if (config.krr_kernel) {
    model->kernel = *config.krr_kernel;
    model->input_std = Standardizer::none(static_cast<int>(task.inputs.cols()));
  } else {
    model->input_std = Standardizer::fit(train_raw);
    double h = median_heuristic(model->input_std.apply(train_raw),
                                derive_seed(config.seed, "krr-median"));
    model->kernel = KernelSpec{KernelFamily::RBF, h, 1.0};
  }

  const Eigen::MatrixXd X_all = model->input_std.apply(task.inputs);
  double best_ridge = config.ridge_grid.front();
  double best_score = std::numeric_limits<double>::infinity();

  if (!hold_idx.empty()) {
    model->selection_mode = "holdout";
    const Eigen::MatrixXd X_tr = take_rows(X_all, train_idx);
    const Eigen::MatrixXd X_ho = take_rows(X_all, hold_idx);
    const Eigen::MatrixXd Y_tr = take_rows(task.targets, train_idx);
    const Eigen::MatrixXd Y_ho = take_rows(task.targets, hold_idx);
    const auto eig = sym_eig(gram(model->kernel, X_tr, X_tr));
    const Eigen::MatrixXd K_ho = gram(model->kernel, X_ho, X_tr);
    for (double r : config.ridge_grid) {
      Eigen::MatrixXd A = dual_solve(eig, Y_tr, r);
      double mse = (K_ho * A - Y_ho).squaredNorm() / static_cast<double>(Y_ho.rows());
      if (mse < best_score) {
        best_score = mse;
        best_ridge = r;
      }
    }
  } else {
    model->selection_mode = "gcv";
    const auto eig = sym_eig(gram(model->kernel, X_all, X_all));
    const Eigen::VectorXd d = eig.eigenvalues().array().max(0.0);
    const Eigen::MatrixXd Ut_y = eig.eigenvectors().transpose() * task.targets;
    const auto n = static_cast<double>(X_all.rows());
    for (double r : config.ridge_grid) {
      Eigen::ArrayXd shrink = r / (d.array() + r);
      double rss = (Ut_y.array().colwise() * shrink).matrix().squaredNorm();
      double edf = (d.array() / (d.array() + r)).sum();
      double denom = 1.0 - edf / n;
      double gcv = (denom > 1e-12) ? (rss / n) / (denom * denom)
                                   : std::numeric_limits<double>::infinity();
      if (gcv < best_score) {
        best_score = gcv;
        best_ridge = r;
      }
    }
  }

  // Refit dual coefficients on every row at the selected ridge.
  const auto eig_all = sym_eig(gram(model->kernel, X_all, X_all));
  model->train_inputs = X_all;
  model->dual_coeffs = dual_solve(eig_all, task.targets, best_ridge);
  model->ridge = best_ridge;
  model->selection_score = best_score;
  return model;
}

// --- RFRidge -----------------------------------------------------------------

class RFRidgeRegressor final : public Regressor {
 public:
  std::shared_ptr<const FeatureMapRFF> map;
  Standardizer input_std;
  Eigen::MatrixXd beta;  // F x q
  double ridge = 0.0;
  double selection_score = 0.0;
  std::string selection_mode;

  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    if (X.cols() != input_std.mean.cols())
      throw std::invalid_argument("predict: input dimension mismatch");
    require_finite(X, "prediction inputs");
    return map->features(input_std.apply(X)) * beta;
  }
  int input_dim() const override { return static_cast<int>(input_std.mean.cols()); }
  int output_dim() const override { return static_cast<int>(beta.cols()); }
  std::vector<Eigen::MatrixXd> parameter_arrays() const override {
    return {map->frequencies, map->phases.transpose(), beta, input_std.mean, input_std.scale};
  }
  nlohmann::json diagnostics() const override {
    return {{"kind", "rfridge"},
            {"ridge", ridge},
            {"selection_mode", selection_mode},
            {"selection_score", selection_score},
            {"num_features", map->frequencies.rows()}};
  }
};

// Primal ridge solve via shared eigendecomposition of Phi^T Phi.
Eigen::MatrixXd primal_solve(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& eig,
                             const Eigen::MatrixXd& Phit_y, double ridge) {
  Eigen::VectorXd d = eig.eigenvalues().array().max(0.0) + ridge;
  Eigen::MatrixXd Vt_y = eig.eigenvectors().transpose() * Phit_y;
  return eig.eigenvectors() * (Vt_y.array().colwise() / d.array()).matrix();
}

FittedRegressor fit_rfridge(const OracleConfig& config, const RegressionTask& task) {
  const auto [train_idx, hold_idx] = holdout_split(
      task.inputs.rows(), task.holdout_fraction, derive_seed(config.seed, "rfridge"));
  const Eigen::MatrixXd train_raw = take_rows(task.inputs, train_idx);

  auto model = std::make_shared<RFRidgeRegressor>();
  model->input_std = Standardizer::fit(train_raw);
  double h = median_heuristic(model->input_std.apply(train_raw),
                              derive_seed(config.seed, "rf-median"));
  KernelSpec spec{KernelFamily::RBF, h, 1.0};
  model->map = std::make_shared<FeatureMapRFF>(rff_feature_map(
      spec, static_cast<int>(task.inputs.cols()), config.rf_num_features,
      derive_seed(config.seed, "rf-map")));

  const Eigen::MatrixXd Phi_all = model->map->features(model->input_std.apply(task.inputs));
  double best_ridge = config.ridge_grid.front();
  double best_score = std::numeric_limits<double>::infinity();

  if (!hold_idx.empty()) {
    model->selection_mode = "holdout";
    const Eigen::MatrixXd P_tr = take_rows(Phi_all, train_idx);
    const Eigen::MatrixXd P_ho = take_rows(Phi_all, hold_idx);
    const Eigen::MatrixXd Y_tr = take_rows(task.targets, train_idx);
    const Eigen::MatrixXd Y_ho = take_rows(task.targets, hold_idx);
    const auto eig = sym_eig(P_tr.transpose() * P_tr);
    const Eigen::MatrixXd Pt_y = P_tr.transpose() * Y_tr;
    for (double r : config.ridge_grid) {
      Eigen::MatrixXd B = primal_solve(eig, Pt_y, r);
      double mse = (P_ho * B - Y_ho).squaredNorm() / static_cast<double>(Y_ho.rows());
      if (mse < best_score) {
        best_score = mse;
        best_ridge = r;
      }
    }
  } else {
    model->selection_mode = "gcv";
    const auto eig = sym_eig(Phi_all.transpose() * Phi_all);
    const Eigen::MatrixXd Pt_y = Phi_all.transpose() * task.targets;
    const auto n = static_cast<double>(Phi_all.rows());
    const Eigen::VectorXd d = eig.eigenvalues().array().max(0.0);
    for (double r : config.ridge_grid) {
      Eigen::MatrixXd B = primal_solve(eig, Pt_y, r);
      double rss = (Phi_all * B - task.targets).squaredNorm();
      double edf = (d.array() / (d.array() + r)).sum();
      double denom = 1.0 - edf / n;
      double gcv = (denom > 1e-12) ? (rss / n) / (denom * denom)
                                   : std::numeric_limits<double>::infinity();
      if (gcv < best_score) {
        best_score = gcv;
        best_ridge = r;
      }
    }
  }

  const auto eig_all = sym_eig(Phi_all.transpose() * Phi_all);
  model->beta = primal_solve(eig_all, Phi_all.transpose() * task.targets, best_ridge);
  model->ridge = best_ridge;
  model->selection_score = best_score;
  return model;
}

}  // namespace

// --- MLP core ----------------------------------------------------------------

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::MatrixXd activate(const Eigen::MatrixXd& Z, Activation a) {
  switch (a) {
    case Activation::ReLU: return Z.array().max(0.0).matrix();
    case Activation::Tanh: return Z.array().tanh().matrix();
    case Activation::Swish:
      return Z.unaryExpr([](double v) { return v * sigmoid(v); });
  }
  throw std::logic_error("unreachable activation");
}

Eigen::MatrixXd activate_grad(const Eigen::MatrixXd& Z, Activation a) {
  switch (a) {
    case Activation::ReLU: return (Z.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: return (1.0 - Z.array().tanh().square()).matrix();
    case Activation::Swish:
      return Z.unaryExpr([](double v) {
        double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
  }
  throw std::logic_error("unreachable activation");
}

}  // namespace

void MLPCore::init(const std::vector<int>& dims, Activation a, uint64_t seed) {
  if (dims.size() < 2) throw std::invalid_argument("MLP needs at least input and output dims");
  act = a;
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const size_t L = dims.size() - 1;
  W.assign(L, {});
  b.assign(L, {});
  mW.assign(L, {});
  vW.assign(L, {});
  mb.assign(L, {});
  vb.assign(L, {});
  for (size_t l = 0; l < L; ++l) {
    const int fan_in = dims[l], fan_out = dims[l + 1];
    W[l].resize(fan_in, fan_out);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));  // Glorot
    for (Eigen::Index i = 0; i < W[l].size(); ++i) W[l].data()[i] = sd * gauss(rng);
    b[l] = Eigen::RowVectorXd::Zero(fan_out);
    mW[l] = Eigen::MatrixXd::Zero(fan_in, fan_out);
    vW[l] = Eigen::MatrixXd::Zero(fan_in, fan_out);
    mb[l] = Eigen::RowVectorXd::Zero(fan_out);
    vb[l] = Eigen::RowVectorXd::Zero(fan_out);
  }
  adam_t = 0;
}

Eigen::MatrixXd MLPCore::forward(const Eigen::Ref<const Eigen::MatrixXd>& X,
                                 std::vector<Eigen::MatrixXd>* cache,
                                 const std::vector<Eigen::MatrixXd>* dropout_masks) const {
  const size_t L = W.size();
  if (cache) cache->clear();
  Eigen::MatrixXd A = X;
  for (size_t l = 0; l + 1 < L; ++l) {
    Eigen::MatrixXd Z = (A * W[l]).rowwise() + b[l];
    if (cache) cache->push_back(Z);  // pre-activation
    A = activate(Z, act);
    if (dropout_masks) A.array() *= (*dropout_masks)[l].array();
    if (cache) cache->push_back(A);  // (possibly masked) activation
  }
  return (A * W[L - 1]).rowwise() + b[L - 1];
}

void MLPCore::backward(const Eigen::Ref<const Eigen::MatrixXd>& X,
                       const std::vector<Eigen::MatrixXd>& cache,
                       const Eigen::Ref<const Eigen::MatrixXd>& dout,
                       const std::vector<Eigen::MatrixXd>* dropout_masks,
                       std::vector<Eigen::MatrixXd>& gW,
                       std::vector<Eigen::RowVectorXd>& gb) const {
  const size_t L = W.size();
  gW.assign(L, {});
  gb.assign(L, {});
  // cache layout: [Z_0, A_0, Z_1, A_1, ...] for the L-1 hidden layers.
  Eigen::MatrixXd delta = dout;
  for (size_t l = L; l-- > 0;) {
    const Eigen::MatrixXd A_prev = (l == 0) ? Eigen::MatrixXd(X) : cache[2 * (l - 1) + 1];
    gW[l] = A_prev.transpose() * delta;
    gb[l] = delta.colwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd dA = delta * W[l].transpose();
    if (dropout_masks) dA.array() *= (*dropout_masks)[l - 1].array();
    delta = dA.array() * activate_grad(cache[2 * (l - 1)], act).array();
  }
}

void MLPCore::adam_step(const std::vector<Eigen::MatrixXd>& gW,
                        const std::vector<Eigen::RowVectorXd>& gb, double lr,
                        double weight_decay) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++adam_t;
  const double bc1 = 1.0 - std::pow(beta1, adam_t);
  const double bc2 = 1.0 - std::pow(beta2, adam_t);
  for (size_t l = 0; l < W.size(); ++l) {
    mW[l] = beta1 * mW[l] + (1.0 - beta1) * gW[l];
    vW[l] = beta2 * vW[l] + (1.0 - beta2) * gW[l].cwiseProduct(gW[l]);
    mb[l] = beta1 * mb[l] + (1.0 - beta1) * gb[l];
    vb[l] = beta2 * vb[l] + (1.0 - beta2) * gb[l].cwiseProduct(gb[l]);
    W[l].array() -= lr * ((mW[l].array() / bc1) / ((vW[l].array() / bc2).sqrt() + eps) +
                          weight_decay * W[l].array());
    b[l].array() -= lr * (mb[l].array() / bc1) / ((vb[l].array() / bc2).sqrt() + eps);
  }
}

std::vector<Eigen::MatrixXd> MLPCore::make_dropout_masks(const std::vector<int>& hidden_rows,
                                                         Eigen::Index batch, double rate,
                                                         std::mt19937_64& rng) const {
  std::vector<Eigen::MatrixXd> masks;
  masks.reserve(hidden_rows.size());
  std::bernoulli_distribution keep(1.0 - rate);
  for (int width : hidden_rows) {
    Eigen::MatrixXd m(batch, width);
    if (rate <= 0.0) {
      m.setOnes();
    } else {
      const double inv = 1.0 / (1.0 - rate);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? inv : 0.0;
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

// --- MLP oracle ----------------------------------------------------------------

namespace {

class MLPRegressor final : public Regressor {
 public:
  MLPCore core;
  Standardizer input_std;
  double train_loss_initial = 0.0;
  double train_loss_final = 0.0;
  int epochs_run = 0;
  int best_epoch = 0;

  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    if (X.cols() != input_std.mean.cols())
      throw std::invalid_argument("predict: input dimension mismatch");
    require_finite(X, "prediction inputs");
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
    return {{"kind", "mlp"},
            {"train_loss_initial", train_loss_initial},
            {"train_loss_final", train_loss_final},
            {"epochs_run", epochs_run},
            {"best_epoch", best_epoch}};
  }
};

double mse_loss(const MLPCore& core, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  return (core.forward(X) - Y).squaredNorm() / static_cast<double>(X.rows() * Y.cols());
}

FittedRegressor fit_mlp(const OracleConfig& config, const RegressionTask& task) {
  const auto [train_idx, hold_idx] = holdout_split(
      task.inputs.rows(), task.holdout_fraction, derive_seed(config.seed, "mlp"));

  auto model = std::make_shared<MLPRegressor>();
  model->input_std = Standardizer::fit(take_rows(task.inputs, train_idx));
  const Eigen::MatrixXd X_all = model->input_std.apply(task.inputs);
  const Eigen::MatrixXd X_tr = take_rows(X_all, train_idx);
  const Eigen::MatrixXd Y_tr = take_rows(task.targets, train_idx);
  const Eigen::MatrixXd X_ho = hold_idx.empty() ? Eigen::MatrixXd() : take_rows(X_all, hold_idx);
  const Eigen::MatrixXd Y_ho =
      hold_idx.empty() ? Eigen::MatrixXd() : take_rows(task.targets, hold_idx);

  std::vector<int> dims;
  dims.push_back(static_cast<int>(task.inputs.cols()));
  for (int h : config.hidden_layers) dims.push_back(h);
  dims.push_back(static_cast<int>(task.targets.cols()));
  model->core.init(dims, config.activation, derive_seed(config.seed, "mlp-init"));

  const auto n_tr = X_tr.rows();
  const auto q = static_cast<double>(task.targets.cols());
  auto rng = make_rng(derive_seed(config.seed, "mlp-train"));
  std::vector<Eigen::Index> order(static_cast<size_t>(n_tr));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  auto monitor_loss = [&]() {
    return hold_idx.empty() ? mse_loss(model->core, X_tr, Y_tr)
                            : mse_loss(model->core, X_ho, Y_ho);
  };

  model->train_loss_initial = mse_loss(model->core, X_tr, Y_tr);
  double best_monitor = monitor_loss();
  std::vector<Eigen::MatrixXd> best_W = model->core.W;
  std::vector<Eigen::RowVectorXd> best_b = model->core.b;
  int best_epoch = 0;
  int since_best = 0;

  std::vector<Eigen::MatrixXd> cache, gW;
  std::vector<Eigen::RowVectorXd> gb;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n_tr; start += config.batch_size) {
      const Eigen::Index nb = std::min<Eigen::Index>(config.batch_size, n_tr - start);
      Eigen::MatrixXd Xb(nb, X_tr.cols()), Yb(nb, Y_tr.cols());
      for (Eigen::Index i = 0; i < nb; ++i) {
        Xb.row(i) = X_tr.row(order[static_cast<size_t>(start + i)]);
        Yb.row(i) = Y_tr.row(order[static_cast<size_t>(start + i)]);
      }
      std::optional<std::vector<Eigen::MatrixXd>> masks;
      if (config.dropout > 0.0)
        masks = model->core.make_dropout_masks(config.hidden_layers, nb, config.dropout, rng);
      Eigen::MatrixXd pred = model->core.forward(Xb, &cache, masks ? &*masks : nullptr);
      Eigen::MatrixXd dout = 2.0 * (pred - Yb) / (static_cast<double>(nb) * q);
      if (!dout.allFinite())
        throw std::runtime_error("MLP training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      model->core.backward(Xb, cache, dout, masks ? &*masks : nullptr, gW, gb);
      model->core.adam_step(gW, gb, config.learning_rate, config.weight_decay);
    }
    const double monitor = monitor_loss();
    if (!std::isfinite(monitor))
      throw std::runtime_error("MLP training diverged (non-finite loss) at epoch " +
                               std::to_string(epoch));
    if (monitor < best_monitor - 1e-12) {
      best_monitor = monitor;
      best_W = model->core.W;
      best_b = model->core.b;
      best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      model->epochs_run = epoch;
      break;
    }
    model->epochs_run = epoch;
  }
  model->core.W = std::move(best_W);
  model->core.b = std::move(best_b);
  model->best_epoch = best_epoch;
  model->train_loss_final = mse_loss(model->core, X_tr, Y_tr);
  return model;
}

}  // namespace

// --- Entry points --------------------------------------------------------------

FittedRegressor fit_oracle(const OracleConfig& config, const RegressionTask& task) {
  config.validate();
  task.validate();
  switch (config.kind) {
    case OracleKind::KRR: return fit_krr(config, task);
    case OracleKind::RFRidge: return fit_rfridge(config, task);
    case OracleKind::MLP: return fit_mlp(config, task);
  }
  throw std::logic_error("unreachable oracle kind");
}

Eigen::MatrixXd predict(const FittedRegressor& reg, const Eigen::Ref<const Eigen::MatrixXd>& Z) {
  if (!reg) throw std::invalid_argument("predict: null regressor");
  return reg->predict(Z);
}

void export_weights(const FittedRegressor& reg, const std::string& path) {
  if (!reg) throw std::invalid_argument("export_weights: null regressor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const auto arrays = reg->parameter_arrays();
  out.write("LIVW", 4);
  auto write_i32 = [&out](int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  write_i32(static_cast<int32_t>(arrays.size()));
  for (const auto& A : arrays) {
    write_i32(2);
    write_i32(static_cast<int32_t>(A.rows()));
    write_i32(static_cast<int32_t>(A.cols()));
    // Row-major payload for language-agnostic readers.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> R = A;
    out.write(reinterpret_cast<const char*>(R.data()),
              static_cast<std::streamsize>(sizeof(double)) * R.size());
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace learned_iv
