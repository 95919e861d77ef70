#include "learned_iv/kiv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "learned_iv/oracle.hpp"
#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = X.row(idx[static_cast<size_t>(i)]);
  return out;
}

Eigen::VectorXd take(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = v(idx[static_cast<size_t>(i)]);
  return out;
}

// Solve (S + nu I) X = B for symmetric PSD S.
Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& S, double nu, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd R = S + nu * Eigen::MatrixXd::Identity(S.rows(), S.cols());
  Eigen::LLT<Eigen::MatrixXd> llt(R);
  if (llt.info() == Eigen::Success) return llt.solve(B);
  return jittered_llt(R).solve(B);
}

double select_nu_gram(const Eigen::MatrixXd& K, const Eigen::VectorXd& Y,
                      const std::vector<double>& multipliers, uint64_t seed) {
  const Eigen::Index n = K.rows();
  auto [train_idx, hold_idx] = holdout_split(n, 0.5, derive_seed(seed, "nu-grid"));
  Eigen::MatrixXd K_tr(static_cast<Eigen::Index>(train_idx.size()),
                       static_cast<Eigen::Index>(train_idx.size()));
  Eigen::MatrixXd K_ho(static_cast<Eigen::Index>(hold_idx.size()),
                       static_cast<Eigen::Index>(train_idx.size()));
  for (size_t i = 0; i < train_idx.size(); ++i)
    for (size_t j = 0; j < train_idx.size(); ++j)
      K_tr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          K(train_idx[i], train_idx[j]);
  for (size_t i = 0; i < hold_idx.size(); ++i)
    for (size_t j = 0; j < train_idx.size(); ++j)
      K_ho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          K(hold_idx[i], train_idx[j]);
  const Eigen::VectorXd y_tr = take(Y, train_idx);
  const Eigen::VectorXd y_ho = take(Y, hold_idx);

  std::vector<double> grid = multipliers;
  std::sort(grid.begin(), grid.end());
  double best_nu = grid.front() * static_cast<double>(n);
  double best_mse = std::numeric_limits<double>::infinity();
  for (double mult : grid) {
    const double nu = mult * static_cast<double>(n);
    Eigen::VectorXd alpha = ridge_solve(K_tr, nu, y_tr);
    double mse = (K_ho * alpha - y_ho).squaredNorm() / static_cast<double>(y_ho.size());
    if (mse < best_mse) {
      best_mse = mse;
      best_nu = nu;
    }
  }
  return best_nu;
}

}  // namespace

// Held-out reduced-form error of a feature-space ridge at each nu candidate.
double select_nu_on_grid(const Eigen::MatrixXd& Phi, const Eigen::VectorXd& Y,
                         const std::vector<double>& multipliers, uint64_t seed) {
  const Eigen::Index n = Phi.rows();
  auto [train_idx, hold_idx] = holdout_split(n, 0.5, derive_seed(seed, "nu-grid"));
  const Eigen::MatrixXd P_tr = take_rows(Phi, train_idx);
  const Eigen::MatrixXd P_ho = take_rows(Phi, hold_idx);
  const Eigen::VectorXd y_tr = take(Y, train_idx);
  const Eigen::VectorXd y_ho = take(Y, hold_idx);
  const Eigen::MatrixXd PtP = P_tr.transpose() * P_tr;
  const Eigen::VectorXd Pty = P_tr.transpose() * y_tr;

  std::vector<double> grid = multipliers;
  std::sort(grid.begin(), grid.end());
  double best_nu = grid.front() * static_cast<double>(n);
  double best_mse = std::numeric_limits<double>::infinity();
  for (double mult : grid) {
    const double nu = mult * static_cast<double>(n);
    Eigen::VectorXd beta = ridge_solve(PtP, nu, Pty);
    double mse = (P_ho * beta - y_ho).squaredNorm() / static_cast<double>(y_ho.size());
    if (mse < best_mse) {
      best_mse = mse;
      best_nu = nu;
    }
  }
  return best_nu;
}

// --- Config -------------------------------------------------------------------

void KIVConfig::validate() const {
  if (lambda && !(*lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  if (nu && !(*nu >= 0.0)) throw std::invalid_argument("nu must be nonnegative");
  if (nu_grid_multipliers.empty()) throw std::invalid_argument("nu grid must be nonempty");
  for (double m : nu_grid_multipliers)
    if (!(m > 0.0)) throw std::invalid_argument("nu grid multipliers must be positive");
  if (!(kappa >= 0.0)) throw std::invalid_argument("kappa must be nonnegative");
  if (mu && !(*mu > 0.0)) throw std::invalid_argument("mu must be positive");
  if (!(jitter > 0.0)) throw std::invalid_argument("jitter must be positive");
  second_stage.validate();
}

void to_json(nlohmann::json& j, const KIVConfig& c) {
  j = nlohmann::json::object();
  if (c.lambda)
    j["lambda"] = *c.lambda;
  else
    j["lambda"] = "empirical-bayes";
  if (c.nu)
    j["nu"] = *c.nu;
  else
    j["nu"] = nlohmann::json{{"validation-grid", c.nu_grid_multipliers}};
  j["kappa"] = c.kappa;
  if (c.mu)
    j["mu"] = *c.mu;
  else
    j["mu"] = "correspondence";
  j["jitter"] = c.jitter;
  j["second_stage"] = c.second_stage;
  j["seed"] = c.seed;
}

void from_json(const nlohmann::json& j, KIVConfig& c) {
  c = KIVConfig{};
  if (j.contains("lambda")) {
    const auto& jl = j.at("lambda");
    if (jl.is_string()) {
      if (jl.get<std::string>() != "empirical-bayes")
        throw std::invalid_argument("lambda string must be \"empirical-bayes\"");
      c.lambda.reset();
    } else {
      c.lambda = jl.get<double>();
    }
  }
  if (j.contains("nu")) {
    const auto& jn = j.at("nu");
    if (jn.is_string()) {
      if (jn.get<std::string>() != "validation-grid")
        throw std::invalid_argument("nu string must be \"validation-grid\"");
      c.nu.reset();
    } else if (jn.is_object()) {
      c.nu.reset();
      c.nu_grid_multipliers = jn.at("validation-grid").get<std::vector<double>>();
    } else {
      c.nu = jn.get<double>();
    }
  }
  if (j.contains("kappa")) c.kappa = j.at("kappa").get<double>();
  if (j.contains("mu")) {
    const auto& jm = j.at("mu");
    if (jm.is_string()) {
      if (jm.get<std::string>() != "correspondence")
        throw std::invalid_argument("mu string must be \"correspondence\"");
      c.mu.reset();
    } else {
      c.mu = jm.get<double>();
    }
  }
  if (j.contains("jitter")) c.jitter = j.at("jitter").get<double>();
  if (j.contains("second_stage")) c.second_stage = j.at("second_stage").get<KernelSpec>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  c.validate();
}

// --- Construction ---------------------------------------------------------------

Eigen::MatrixXd low_rank_l_matrix(const Eigen::Ref<const Eigen::MatrixXd>& Phi, double nu) {
  if (!(nu >= 0.0)) throw std::invalid_argument("nu must be nonnegative");
  const Eigen::MatrixXd PtP = Phi.transpose() * Phi;
  return Phi * ridge_solve(PtP, nu, Eigen::MatrixXd(Phi.transpose()));
}

QuasiPosterior assemble_posterior(const Eigen::MatrixXd& X, const Eigen::VectorXd& Y,
                                  const Eigen::MatrixXd& Phi, const Eigen::MatrixXd& A,
                                  const KernelSpec& second_stage, double lambda, double nu,
                                  double jitter) {
  if (X.rows() != Y.size() || X.rows() != Phi.rows())
    throw std::invalid_argument("assemble_posterior: row counts differ");
  if (A.rows() != Phi.cols() || A.cols() != Phi.cols())
    throw std::invalid_argument("assemble_posterior: factor shape mismatch");
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");

  QuasiPosterior post;
  post.X_train = X;
  post.Y = Y;
  post.second_stage = second_stage;
  post.lambda = lambda;
  post.nu = nu;
  post.jitter = jitter;
  post.Phi = Phi;
  post.A = 0.5 * (A + A.transpose());

  const Eigen::MatrixXd K = gram(second_stage, X, X);
  Eigen::MatrixXd M = Phi.transpose() * K * Phi;
  post.M = 0.5 * (M + M.transpose());

  const Eigen::Index r = Phi.cols();
  Eigen::MatrixXd inner = lambda * Eigen::MatrixXd::Identity(r, r) + post.A * post.M;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(inner);
  Eigen::MatrixXd C_raw = lu.solve(post.A);
  // (lambda I + A M)^{-1} A is symmetric in exact arithmetic; enforce it and
  // reject factorizations whose roundoff asymmetry is out of character.
  const double asym = (C_raw - C_raw.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, C_raw.cwiseAbs().maxCoeff());
  if (!(asym <= 1e-6 * scale))
    throw std::runtime_error("posterior operator asymmetry " + std::to_string(asym) +
                             " exceeds tolerance (ill-conditioned system)");
  post.C = 0.5 * (C_raw + C_raw.transpose());
  post.weights = Phi * (post.C * (Phi.transpose() * Y));
  return post;
}

double empirical_bayes_lambda(const Eigen::VectorXd& Y, const Eigen::VectorXd& h_hat_at_Z) {
  if (Y.size() != h_hat_at_Z.size())
    throw std::invalid_argument("empirical_bayes_lambda: length mismatch");
  if (Y.size() < 1) throw std::invalid_argument("empirical_bayes_lambda: empty input");
  const double mse = (Y - h_hat_at_Z).squaredNorm() / static_cast<double>(Y.size());
  return std::max(mse, 1e-8);
}

QuasiPosterior fit_quasi_posterior(const Stage2Data& stage2, const LearnedFeatureMap& map,
                                   const KIVConfig& config) {
  config.validate();
  stage2.validate();
  const Eigen::MatrixXd Phi = feature_matrix(map, stage2.z);

  const double nu = config.nu ? *config.nu
                              : select_nu_on_grid(Phi, stage2.y, config.nu_grid_multipliers,
                                                   config.seed);
  double lambda;
  if (config.lambda) {
    lambda = *config.lambda;
  } else if (map.has_reduced_form()) {
    // The clamped reduced-form feature is the last column of Phi.
    lambda = empirical_bayes_lambda(stage2.y, Phi.col(map.m));
  } else {
    // Fall back to the first-stage smoother applied to Y.
    Eigen::VectorXd h_hat =
        Phi * ridge_solve(Phi.transpose() * Phi, nu, Eigen::MatrixXd(Phi.transpose() * stage2.y));
    lambda = empirical_bayes_lambda(stage2.y, h_hat);
  }

  const Eigen::Index r = Phi.cols();
  const Eigen::MatrixXd A =
      ridge_solve(Phi.transpose() * Phi, nu, Eigen::MatrixXd::Identity(r, r));
  return assemble_posterior(stage2.x, stage2.y, Phi, A, config.second_stage, lambda, nu,
                            config.jitter);
}

QuasiPosterior fit_quasi_posterior_gram(const Stage2Data& stage2, const KernelSpec& kz,
                                        const KIVConfig& config) {
  config.validate();
  stage2.validate();
  const Eigen::MatrixXd K_zz = gram(kz, stage2.z, stage2.z);
  const double nu = config.nu ? *config.nu
                              : select_nu_gram(K_zz, stage2.y, config.nu_grid_multipliers,
                                               config.seed);
  Eigen::MatrixXd L = ridge_solve(K_zz, nu, K_zz);
  L = 0.5 * (L + L.transpose());

  double lambda;
  if (config.lambda) {
    lambda = *config.lambda;
  } else {
    lambda = empirical_bayes_lambda(stage2.y, L * stage2.y);
  }
  const Eigen::Index n = stage2.y.size();
  return assemble_posterior(stage2.x, stage2.y, Eigen::MatrixXd::Identity(n, n), L,
                            config.second_stage, lambda, nu, config.jitter);
}

Eigen::MatrixXd lambda_matrix(const QuasiPosterior& post) {
  return post.Phi * post.C * post.Phi.transpose();
}

// --- Queries ---------------------------------------------------------------------

Eigen::VectorXd posterior_mean(const QuasiPosterior& post,
                               const Eigen::Ref<const Eigen::MatrixXd>& X_star) {
  if (X_star.cols() != post.X_train.cols())
    throw std::invalid_argument("posterior_mean: dimension mismatch");
  return gram(post.second_stage, X_star, post.X_train) * post.weights;
}

Eigen::MatrixXd posterior_cov(const QuasiPosterior& post,
                              const Eigen::Ref<const Eigen::MatrixXd>& X_star) {
  if (X_star.cols() != post.X_train.cols())
    throw std::invalid_argument("posterior_cov: dimension mismatch");
  const Eigen::MatrixXd K_star = gram(post.second_stage, X_star, X_star);
  const Eigen::MatrixXd B = gram(post.second_stage, X_star, post.X_train) * post.Phi;
  Eigen::MatrixXd cov = K_star - B * post.C * B.transpose();
  return 0.5 * (cov + cov.transpose());
}

Eigen::MatrixXd sample_posterior(const QuasiPosterior& post,
                                 const Eigen::Ref<const Eigen::MatrixXd>& X_star, int n_samples,
                                 uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  const Eigen::VectorXd mean = posterior_mean(post, X_star);
  const Eigen::MatrixXd cov = posterior_cov(post, X_star);
  const Eigen::Index g = mean.size();

  if (cov.cwiseAbs().maxCoeff() == 0.0)
    return mean.transpose().replicate(n_samples, 1);

  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = post.jitter;
  bool ok = false;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Eigen::MatrixXd Mj = cov + jitter * Eigen::MatrixXd::Identity(g, g);
    llt.compute(Mj);
    if (llt.info() == Eigen::Success) {
      ok = true;
      break;
    }
    jitter *= 10.0;
  }
  if (!ok) {
    const auto eig = sym_eig(cov);
    throw std::runtime_error(
        "posterior covariance Cholesky failed after jitter escalation; smallest eigenvalue " +
        std::to_string(eig.eigenvalues().minCoeff()));
  }

  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd Z(n_samples, g);
  for (int i = 0; i < n_samples; ++i)
    for (Eigen::Index j = 0; j < g; ++j) Z(i, j) = gauss(rng);
  Eigen::MatrixXd samples = Z * llt.matrixU();  // (L Zᵀ)ᵀ
  samples.rowwise() += mean.transpose();
  return samples;
}

double log_marginal_quasi_likelihood(const QuasiPosterior& post) {
  const double quad = post.Y.dot(post.weights);

  const auto eig = sym_eig(post.A);
  const double min_eig = eig.eigenvalues().minCoeff();
  if (min_eig < -1e-8)
    throw std::runtime_error("first-stage operator is not PSD (eigenvalue " +
                             std::to_string(min_eig) + ")");
  const Eigen::VectorXd root = eig.eigenvalues().array().max(0.0).sqrt();
  const Eigen::MatrixXd A_half =
      eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
  Eigen::MatrixXd S = A_half * post.M * A_half;
  S = 0.5 * (S + S.transpose());

  const Eigen::Index r = S.rows();
  Eigen::MatrixXd T = Eigen::MatrixXd::Identity(r, r) + S / post.lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(T);
  if (llt.info() != Eigen::Success) llt = jittered_llt(T);
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < r; ++i) log_det += 2.0 * std::log(llt.matrixLLT()(i, i));

  return -0.5 * (quad + log_det);
}

CredibleSummaries credible_summaries(const QuasiPosterior& post,
                                     const Eigen::Ref<const Eigen::MatrixXd>& X_star, double level,
                                     int n_samples, uint64_t seed) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must lie in (0,1)");
  const Eigen::VectorXd mean = posterior_mean(post, X_star);
  const Eigen::MatrixXd cov = posterior_cov(post, X_star);

  CredibleSummaries out;
  const double z = normal_quantile(0.5 * (1.0 + level));
  const Eigen::VectorXd sd = cov.diagonal().array().max(0.0).sqrt();
  out.ci_lower = mean - z * sd;
  out.ci_upper = mean + z * sd;

  const Eigen::MatrixXd samples = sample_posterior(post, X_star, n_samples, seed);
  std::vector<double> dists(static_cast<size_t>(n_samples));
  const double g = static_cast<double>(mean.size());
  for (int i = 0; i < n_samples; ++i)
    dists[static_cast<size_t>(i)] =
        std::sqrt((samples.row(i).transpose() - mean).squaredNorm() / g);
  out.ball_radius = quantile(std::move(dists), level);
  return out;
}

// --- Minimax point estimator --------------------------------------------------------

namespace {

// Best-response system for the inner (instrument) player.
struct MinimaxParts {
  Eigen::MatrixXd Phi;  // n x r
  Eigen::MatrixXd K;    // n x n
  Eigen::LLT<Eigen::MatrixXd> G_llt;  // G = 2 kappa PhiᵀPhi + 2 n lambda_g I
};

MinimaxParts minimax_parts(const Stage2Data& stage2, const LearnedFeatureMap& map, double kappa,
                           double lambda_g, const KernelSpec& second_stage) {
  if (!(kappa >= 0.0)) throw std::invalid_argument("kappa must be nonnegative");
  if (!(lambda_g > 0.0)) throw std::invalid_argument("lambda_g must be positive");
  stage2.validate();
  MinimaxParts parts;
  parts.Phi = feature_matrix(map, stage2.z);
  parts.K = gram(second_stage, stage2.x, stage2.x);
  const Eigen::Index n = stage2.y.size(), r = parts.Phi.cols();
  Eigen::MatrixXd G = 2.0 * kappa * (parts.Phi.transpose() * parts.Phi) +
                      2.0 * static_cast<double>(n) * lambda_g *
                          Eigen::MatrixXd::Identity(r, r);
  parts.G_llt.compute(G);
  if (parts.G_llt.info() != Eigen::Success)
    throw std::runtime_error("inner best-response system is singular");
  return parts;
}

}  // namespace

MinimaxEstimate solve_minimax_point_estimate(const Stage2Data& stage2,
                                             const LearnedFeatureMap& map, double kappa,
                                             double lambda_g, double mu,
                                             const KernelSpec& second_stage) {
  if (!(mu > 0.0)) throw std::invalid_argument("mu must be positive");
  auto parts = minimax_parts(stage2, map, kappa, lambda_g, second_stage);
  const Eigen::Index n = stage2.y.size(), r = parts.Phi.cols();
  const double a = 2.0 * static_cast<double>(n) * mu;

  const Eigen::MatrixXd T = parts.Phi.transpose() * parts.K * parts.Phi;       // r x r
  const Eigen::VectorXd t = parts.Phi.transpose() * stage2.y;
  const Eigen::MatrixXd Q = parts.G_llt.solve(T);                              // G⁻¹ T
  const Eigen::VectorXd q = parts.G_llt.solve(t);

  Eigen::MatrixXd Msys = a * Eigen::MatrixXd::Identity(r, r) + Q;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(Msys);
  if (!lu.isInvertible()) throw std::runtime_error("minimax outer system is singular");

  MinimaxEstimate est;
  est.alpha = parts.Phi * lu.solve(q);
  est.saddle_value = minimax_objective(stage2, map, kappa, lambda_g, mu, second_stage, est.alpha);
  return est;
}

double minimax_objective(const Stage2Data& stage2, const LearnedFeatureMap& map, double kappa,
                         double lambda_g, double mu, const KernelSpec& second_stage,
                         const Eigen::VectorXd& alpha) {
  auto parts = minimax_parts(stage2, map, kappa, lambda_g, second_stage);
  const Eigen::Index n = stage2.y.size();
  const Eigen::VectorXd resid = stage2.y - parts.K * alpha;
  const Eigen::VectorXd c = parts.G_llt.solve(parts.Phi.transpose() * resid);
  const double inner = resid.dot(parts.Phi * c) / (2.0 * static_cast<double>(n));
  return inner + mu * alpha.dot(parts.K * alpha);
}

Eigen::VectorXd minimax_predict(const MinimaxEstimate& est, const Stage2Data& stage2,
                                const KernelSpec& second_stage,
                                const Eigen::Ref<const Eigen::MatrixXd>& X_star) {
  return gram(second_stage, X_star, stage2.x) * est.alpha;
}

MinimaxCorrespondence quasi_bayes_correspondence(double lambda, double nu, Eigen::Index n2,
                                                 double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be positive");
  if (n2 < 1) throw std::invalid_argument("n2 must be >= 1");
  const double n = static_cast<double>(n2);
  return {kappa, kappa * nu / n, lambda / (4.0 * kappa * n)};
}

// --- Bayesian model averaging ---------------------------------------------------------

BMAResult bma_combine(std::vector<BMACandidate> candidates) {
  if (candidates.empty()) throw std::invalid_argument("bma_combine: no candidates");
  BMAResult out;
  const auto k = static_cast<Eigen::Index>(candidates.size());
  out.log_ml.resize(k);
  Eigen::VectorXd score(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    if (!candidates[static_cast<size_t>(j)].posterior)
      throw std::invalid_argument("bma_combine: null posterior");
    out.log_ml(j) = log_marginal_quasi_likelihood(*candidates[static_cast<size_t>(j)].posterior);
    score(j) = out.log_ml(j) + candidates[static_cast<size_t>(j)].log_prior;
  }
  const double m = score.maxCoeff();
  Eigen::VectorXd w = (score.array() - m).exp();
  out.weights = w / w.sum();
  out.candidates = std::move(candidates);
  return out;
}

Eigen::VectorXd BMAResult::mixture_mean(const Eigen::Ref<const Eigen::MatrixXd>& X_star) const {
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(X_star.rows());
  for (size_t j = 0; j < candidates.size(); ++j)
    mean += weights(static_cast<Eigen::Index>(j)) *
            posterior_mean(*candidates[j].posterior, X_star);
  return mean;
}

Eigen::MatrixXd BMAResult::mixture_quantiles(const Eigen::Ref<const Eigen::MatrixXd>& X_star,
                                             const std::vector<double>& levels, int n_samples,
                                             uint64_t seed) const {
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  // Deterministic largest-remainder apportionment of samples to candidates.
  const size_t k = candidates.size();
  std::vector<int> counts(k, 0);
  std::vector<std::pair<double, size_t>> remainders;
  int assigned = 0;
  for (size_t j = 0; j < k; ++j) {
    const double share = weights(static_cast<Eigen::Index>(j)) * n_samples;
    counts[j] = static_cast<int>(std::floor(share));
    assigned += counts[j];
    remainders.push_back({share - std::floor(share), j});
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int i = 0; i < n_samples - assigned; ++i) counts[remainders[static_cast<size_t>(i)].second]++;

  Eigen::MatrixXd pooled(n_samples, X_star.rows());
  Eigen::Index row = 0;
  for (size_t j = 0; j < k; ++j) {
    if (counts[j] == 0) continue;
    pooled.middleRows(row, counts[j]) = sample_posterior(
        *candidates[j].posterior, X_star, counts[j], derive_seed(seed, "bma", j));
    row += counts[j];
  }

  Eigen::MatrixXd out(static_cast<Eigen::Index>(levels.size()), X_star.rows());
  for (Eigen::Index col = 0; col < X_star.rows(); ++col) {
    std::vector<double> vals(static_cast<size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) vals[static_cast<size_t>(i)] = pooled(i, col);
    for (size_t li = 0; li < levels.size(); ++li)
      out(static_cast<Eigen::Index>(li), col) = quantile(vals, levels[li]);
  }
  return out;
}

}  // namespace learned_iv
