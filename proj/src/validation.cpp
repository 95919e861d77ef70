#include "learned_iv/validation.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "learned_iv/kernels.hpp"
#include "learned_iv/oracle.hpp"
#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& M, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), M.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = M.row(idx[static_cast<size_t>(i)]);
  return out;
}

constexpr int kTaskRFFFeatures = 512;

}  // namespace

void to_json(nlohmann::json& j, const ValidationReport& r) {
  j = nlohmann::json{{"task_generalization_mse", r.task_generalization_mse},
                     {"reduced_form_mse", r.reduced_form_mse},
                     {"total", r.total},
                     {"m_v", r.m_v},
                     {"seed", r.seed}};
}

ValidationReport first_stage_validation(const LearnedFeatureMap& map, const Stage2Data& stage2,
                                        const KernelSpec& kx, int m_v, uint64_t seed) {
  stage2.validate();
  kx.validate();
  if (m_v < 1) throw std::invalid_argument("first_stage_validation: m_v must be >= 1");
  const Eigen::Index n = stage2.z.rows();
  if (n < 8)
    throw std::invalid_argument("first_stage_validation: need at least 8 stage-2 rows to split");

  // Fresh GP tasks evaluated at the stage-2 regressor values; the response
  // column rides along so every target shares one factorization.
  FeatureMapRFF gp_map = rff_feature_map(kx, static_cast<int>(stage2.x.cols()),
                                         kTaskRFFFeatures, derive_seed(seed, "val-map"));
  Eigen::MatrixXd W = draw_gp_weights(gp_map, m_v, derive_seed(seed, "val-draws"));
  Eigen::MatrixXd targets(n, m_v + 1);
  targets.leftCols(m_v) = gp_values(gp_map, W, stage2.x);
  targets.col(m_v) = stage2.y;

  const Eigen::MatrixXd Phi = feature_matrix(map, stage2.z);
  const double nu = select_nu_on_grid(Phi, stage2.y, KIVConfig{}.nu_grid_multipliers, seed);

  auto [train_idx, hold_idx] = holdout_split(n, 0.5, derive_seed(seed, "split"));
  const Eigen::MatrixXd P_tr = take_rows(Phi, train_idx);
  const Eigen::MatrixXd P_ho = take_rows(Phi, hold_idx);
  const Eigen::MatrixXd T_tr = take_rows(targets, train_idx);
  const Eigen::MatrixXd T_ho = take_rows(targets, hold_idx);

  // Intercept handling: center features and targets on the training half so a
  // degenerate feature map degrades to predicting the training mean.
  const Eigen::RowVectorXd t_mean = T_tr.colwise().mean();
  const Eigen::RowVectorXd p_mean = P_tr.colwise().mean();
  const Eigen::MatrixXd Pc_tr = P_tr.rowwise() - p_mean;
  const Eigen::MatrixXd Pc_ho = P_ho.rowwise() - p_mean;
  const Eigen::MatrixXd resid = T_tr.rowwise() - t_mean;
  const Eigen::Index r = Phi.cols();
  Eigen::MatrixXd R = Pc_tr.transpose() * Pc_tr + nu * Eigen::MatrixXd::Identity(r, r);
  Eigen::LLT<Eigen::MatrixXd> llt(R);
  Eigen::MatrixXd coef = (llt.info() == Eigen::Success)
                             ? Eigen::MatrixXd(llt.solve(Pc_tr.transpose() * resid))
                             : Eigen::MatrixXd(jittered_llt(R).solve(Pc_tr.transpose() * resid));
  Eigen::MatrixXd err = ((Pc_ho * coef).rowwise() + t_mean) - T_ho;
  Eigen::VectorXd mse = err.colwise().squaredNorm() / static_cast<double>(T_ho.rows());

  ValidationReport rep;
  rep.task_generalization_mse = mse.head(m_v).mean();
  rep.reduced_form_mse = mse(m_v);
  rep.total = rep.task_generalization_mse + rep.reduced_form_mse;
  rep.m_v = m_v;
  rep.seed = seed;
  return rep;
}

SecondStageSelection select_second_stage(const std::vector<KernelSpec>& candidates,
                                         const Stage2Data& stage2, const LearnedFeatureMap& map,
                                         const KIVConfig& config) {
  if (candidates.empty())
    throw std::invalid_argument("select_second_stage: candidate list is empty");

  SecondStageSelection out;
  out.table.reserve(candidates.size());
  bool have_best = false;
  double best_ml = -std::numeric_limits<double>::infinity();
  for (const KernelSpec& spec : candidates) {
    SecondStageCandidate row;
    row.spec = spec;
    try {
      KIVConfig cfg = config;
      cfg.second_stage = spec;
      QuasiPosterior post = fit_quasi_posterior(stage2, map, cfg);
      const double ml = log_marginal_quasi_likelihood(post);
      if (!std::isfinite(ml)) throw std::runtime_error("non-finite log marginal likelihood");
      row.log_ml = ml;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    out.table.push_back(row);
    if (row.error.empty()) {
      const bool better = !have_best || row.log_ml > best_ml ||
                          (row.log_ml == best_ml && spec.bandwidth < out.best.bandwidth);
      if (better) {
        out.best = spec;
        best_ml = row.log_ml;
        have_best = true;
      }
    }
  }
  if (!have_best) {
    std::ostringstream msg;
    msg << "select_second_stage: every candidate fit failed:";
    for (const auto& row : out.table)
      msg << "\n  " << to_string(row.spec.family) << " bandwidth=" << row.spec.bandwidth
          << " variance=" << row.spec.variance << ": " << row.error;
    throw std::runtime_error(msg.str());
  }
  return out;
}

}  // namespace learned_iv
