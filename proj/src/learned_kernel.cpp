#include "learned_iv/learned_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = X.row(idx[static_cast<size_t>(i)]);
  return out;
}

// Single-output column view of a vector-valued regressor.
class SliceRegressor final : public Regressor {
 public:
  FittedRegressor base;
  int col = 0;

  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    return base->predict(X).col(col);
  }
  int input_dim() const override { return base->input_dim(); }
  int output_dim() const override { return 1; }
  std::vector<Eigen::MatrixXd> parameter_arrays() const override {
    return base->parameter_arrays();
  }
};

}  // namespace

void Stage1Data::validate() const {
  if (z.rows() < 1) throw std::invalid_argument("stage-1 data is empty");
  if (z.rows() != x.rows()) throw std::invalid_argument("stage-1 z and x row counts differ");
  if (y && y->size() != z.rows())
    throw std::invalid_argument("stage-1 responses length mismatch");
  if (!z.allFinite() || !x.allFinite() || (y && !y->allFinite()))
    throw std::invalid_argument("stage-1 data contains non-finite values");
}

void Stage2Data::validate() const {
  if (z.rows() < 2) throw std::invalid_argument("stage-2 data needs at least 2 rows");
  if (z.rows() != x.rows() || y.size() != z.rows())
    throw std::invalid_argument("stage-2 row counts differ");
  if (!z.allFinite() || !x.allFinite() || !y.allFinite())
    throw std::invalid_argument("stage-2 data contains non-finite values");
}

double truncation_threshold(int m, double clamp_constant) {
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  if (!(clamp_constant > 0.0)) throw std::invalid_argument("clamp constant must be positive");
  return clamp_constant * std::log(static_cast<double>(std::max(m, 2)));
}

FittedRegressor LearnedFeatureMap::estimator_view(int j) const {
  if (j < 0 || j >= m) throw std::out_of_range("estimator index out of range");
  auto view = std::make_shared<SliceRegressor>();
  view->base = denoiser;
  view->col = j;
  return view;
}

LearnedFeatureMap make_feature_map_from_models(FittedRegressor denoiser,
                                               FittedRegressor reduced_form,
                                               double clamp_constant) {
  if (!denoiser) throw std::invalid_argument("denoiser must be non-null");
  LearnedFeatureMap map;
  map.denoiser = std::move(denoiser);
  map.reduced_form = std::move(reduced_form);
  map.m = map.denoiser->output_dim();
  map.input_dim = map.denoiser->input_dim();
  map.tau = truncation_threshold(map.m, clamp_constant);
  if (map.reduced_form && map.reduced_form->input_dim() != map.input_dim)
    throw std::invalid_argument("reduced-form input dimension mismatch");
  return map;
}

LearnedFeatureMap build_learned_feature_map(const Stage1Data& stage1, const KernelSpec& kx,
                                            int m, const OracleConfig& oracle, uint64_t seed,
                                            const LearnedKernelOptions& opts,
                                            const Stage2Data* stage2_fallback) {
  stage1.validate();
  kx.validate();
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  if (opts.rff_features < 1) throw std::invalid_argument("rff_features must be >= 1");

  // GP prior draws evaluated on the stage-1 treatments.
  auto rff = std::make_shared<FeatureMapRFF>(
      rff_feature_map(kx, static_cast<int>(stage1.x.cols()), opts.rff_features,
                      derive_seed(seed, "gp-map")));
  const Eigen::MatrixXd W = draw_gp_weights(*rff, m, derive_seed(seed, "gp-draws"));
  const Eigen::MatrixXd targets = gp_values(*rff, W, stage1.x);  // n1 x m

  // Row budget: optionally dedicate a split of stage-1 rows to the
  // reduced-form fit so it never sees the second stage.
  const Eigen::Index n1 = stage1.z.rows();
  std::vector<Eigen::Index> denoise_rows(static_cast<size_t>(n1));
  std::iota(denoise_rows.begin(), denoise_rows.end(), Eigen::Index{0});
  std::vector<Eigen::Index> h_rows = denoise_rows;
  const bool split_for_h = opts.include_reduced_form && stage1.y.has_value() &&
                           opts.reduced_form_fraction > 0.0 && opts.reduced_form_fraction < 1.0 &&
                           n1 >= 4;
  if (split_for_h) {
    auto [keep, dedicate] =
        holdout_split(n1, opts.reduced_form_fraction, derive_seed(seed, "h-split"));
    denoise_rows = std::move(keep);
    h_rows = std::move(dedicate);
  }

  LearnedFeatureMap map;
  map.m = m;
  map.input_dim = static_cast<int>(stage1.z.cols());
  map.tau = truncation_threshold(m, opts.clamp_constant);

  OracleConfig denoise_cfg = oracle;
  denoise_cfg.seed = derive_seed(seed, "denoise");
  RegressionTask denoise_task{take_rows(stage1.z, denoise_rows), take_rows(targets, denoise_rows),
                              opts.oracle_holdout};
  map.denoiser = fit_oracle(denoise_cfg, denoise_task);

  if (opts.include_reduced_form) {
    OracleConfig h_cfg = oracle;
    h_cfg.seed = derive_seed(seed, "reduced-form");
    if (stage1.y.has_value()) {
      Eigen::MatrixXd hy = take_rows(Eigen::MatrixXd(*stage1.y), h_rows);
      RegressionTask h_task{take_rows(stage1.z, h_rows), hy, opts.oracle_holdout};
      map.reduced_form = fit_oracle(h_cfg, h_task);
      map.reduced_form_used_stage2 = false;
    } else if (stage2_fallback) {
      stage2_fallback->validate();
      if (stage2_fallback->z.cols() != stage1.z.cols())
        throw std::invalid_argument("stage-2 instrument dimension mismatch");
      RegressionTask h_task{stage2_fallback->z, Eigen::MatrixXd(stage2_fallback->y),
                            opts.oracle_holdout};
      map.reduced_form = fit_oracle(h_cfg, h_task);
      map.reduced_form_used_stage2 = true;
    } else {
      throw std::invalid_argument(
          "reduced-form feature requested but no responses available (stage-1 responses "
          "missing and no stage-2 fallback supplied)");
    }
  }
  return map;
}

Eigen::MatrixXd feature_matrix(const LearnedFeatureMap& map,
                               const Eigen::Ref<const Eigen::MatrixXd>& Z) {
  if (!map.denoiser) throw std::invalid_argument("feature map has no fitted denoiser");
  if (Z.cols() != map.input_dim)
    throw std::invalid_argument("feature_matrix: input dimension mismatch");
  const double tau = map.tau;
  const double scale = 1.0 / std::sqrt(static_cast<double>(map.m));
  Eigen::MatrixXd Phi(Z.rows(), map.feature_dim());
  Phi.leftCols(map.m) =
      map.denoiser->predict(Z).cwiseMax(-tau).cwiseMin(tau) * scale;
  if (map.reduced_form)
    Phi.col(map.m) = map.reduced_form->predict(Z).col(0).cwiseMax(-tau).cwiseMin(tau);
  return Phi;
}

Eigen::MatrixXd learned_gram(const LearnedFeatureMap& map,
                             const Eigen::Ref<const Eigen::MatrixXd>& Z,
                             const Eigen::Ref<const Eigen::MatrixXd>& Zp) {
  return feature_matrix(map, Z) * feature_matrix(map, Zp).transpose();
}

void write_feature_csv(const LearnedFeatureMap& map, const Eigen::Ref<const Eigen::MatrixXd>& Phi,
                       const std::string& path) {
  if (Phi.cols() != map.feature_dim())
    throw std::invalid_argument("feature matrix width does not match the map");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (int j = 0; j < map.m; ++j) out << (j ? ",g" : "g") << (j + 1);
  if (map.has_reduced_form()) out << ",h";
  out << "\n";
  const Eigen::IOFormat csv(Eigen::FullPrecision, Eigen::DontAlignCols, ",", "\n");
  out << Phi.format(csv) << "\n";
  if (!out) throw std::runtime_error("failed writing " + path);
}

Eigen::MatrixXd gp_coefficient_matrix(const KernelSpec& kx, int input_dim, int num_rff, int m,
                                      int n_points, int m_prime, uint64_t seed) {
  if (m < 1 || m_prime < 1 || m_prime > n_points)
    throw std::invalid_argument("gp_coefficient_matrix: invalid sizes");
  auto rng = make_rng(derive_seed(seed, "xi-points"));
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  Eigen::MatrixXd X(n_points, input_dim);
  for (int i = 0; i < n_points; ++i)
    for (int j = 0; j < input_dim; ++j) X(i, j) = unif(rng);

  auto rff = std::make_shared<FeatureMapRFF>(
      rff_feature_map(kx, input_dim, num_rff, derive_seed(seed, "xi-map")));
  const Eigen::MatrixXd W = draw_gp_weights(*rff, m, derive_seed(seed, "xi-draws"));
  const Eigen::MatrixXd Phi = rff->features(X);       // n x F
  const Eigen::MatrixXd V = Phi * W;                  // n x m draw values
  const auto eig = sym_eig(Phi * Phi.transpose());    // Gram from the same map

  // Eigenvalues ascend; take the top m_prime directions.
  Eigen::MatrixXd Xi(m, m_prime);
  const Eigen::Index n = eig.eigenvalues().size();
  for (int i = 0; i < m_prime; ++i) {
    const Eigen::Index k = n - 1 - i;
    const double mu = eig.eigenvalues()(k);
    if (!(mu > 0.0))
      throw std::runtime_error("gp_coefficient_matrix: rank-deficient Gram at direction " +
                               std::to_string(i));
    Xi.col(i) = (V.transpose() * eig.eigenvectors().col(k)) / std::sqrt(mu);
  }
  return Xi;
}

}  // namespace learned_iv
