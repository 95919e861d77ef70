#include "learned_iv/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "learned_iv/util.hpp"

namespace learned_iv {

std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::RBF: return "rbf";
    case KernelFamily::Matern32: return "matern32";
    case KernelFamily::Matern52: return "matern52";
    case KernelFamily::Linear: return "linear";
  }
  throw std::logic_error("to_string: unknown kernel family");
}

KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "rbf") return KernelFamily::RBF;
  if (s == "matern32") return KernelFamily::Matern32;
  if (s == "matern52") return KernelFamily::Matern52;
  if (s == "linear") return KernelFamily::Linear;
  throw std::invalid_argument("unknown kernel family: " + s);
}

void KernelSpec::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth))
    throw std::invalid_argument("KernelSpec: bandwidth must be positive");
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw std::invalid_argument("KernelSpec: variance must be positive");
}

void to_json(nlohmann::json& j, const KernelSpec& s) {
  j = nlohmann::json{{"family", to_string(s.family)},
                     {"bandwidth", s.bandwidth},
                     {"variance", s.variance}};
}

void from_json(const nlohmann::json& j, KernelSpec& s) {
  s.family = kernel_family_from_string(j.at("family").get<std::string>());
  s.bandwidth = j.at("bandwidth").get<double>();
  s.variance = j.at("variance").get<double>();
  s.validate();
}

namespace {

inline double stationary_from_r2(const KernelSpec& spec, double r2) {
  const double h = spec.bandwidth;
  switch (spec.family) {
    case KernelFamily::RBF:
      return spec.variance * std::exp(-r2 / (2.0 * h * h));
    case KernelFamily::Matern32: {
      const double a = std::sqrt(3.0 * r2) / h;
      return spec.variance * (1.0 + a) * std::exp(-a);
    }
    case KernelFamily::Matern52: {
      const double a = std::sqrt(5.0 * r2) / h;
      return spec.variance * (1.0 + a + a * a / 3.0) * std::exp(-a);
    }
    default:
      throw std::logic_error("stationary_from_r2: non-stationary family");
  }
}

}  // namespace

double eval_kernel(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& y) {
  spec.validate();
  if (x.size() != y.size()) throw std::invalid_argument("eval_kernel: dimension mismatch");
  if (!x.allFinite() || !y.allFinite())
    throw std::invalid_argument("eval_kernel: non-finite input");
  if (spec.family == KernelFamily::Linear) return spec.variance * x.dot(y);
  return stationary_from_r2(spec, (x - y).squaredNorm());
}

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X,
                     const Eigen::Ref<const Eigen::MatrixXd>& Y) {
  spec.validate();
  if (X.cols() != Y.cols()) throw std::invalid_argument("gram: column counts differ");
  if (spec.family == KernelFamily::Linear)
    return spec.variance * (X * Y.transpose());
  // Squared distances via the expansion |x|^2 + |y|^2 - 2 x.y (clamped at 0).
  const Eigen::VectorXd xn = X.rowwise().squaredNorm();
  const Eigen::VectorXd yn = Y.rowwise().squaredNorm();
  Eigen::MatrixXd D2 = -2.0 * (X * Y.transpose());
  D2.colwise() += xn;
  D2.rowwise() += yn.transpose();
  Eigen::MatrixXd K(X.rows(), Y.rows());
  for (Eigen::Index j = 0; j < D2.cols(); ++j)
    for (Eigen::Index i = 0; i < D2.rows(); ++i)
      K(i, j) = stationary_from_r2(spec, std::max(0.0, D2(i, j)));
  return K;
}

double median_heuristic(const Eigen::Ref<const Eigen::MatrixXd>& X, uint64_t seed) {
  const Eigen::Index n = X.rows();
  if (n < 2) throw std::invalid_argument("median_heuristic: need at least 2 points");
  std::vector<double> dists;
  if (n <= 2000) {
    dists.reserve(static_cast<size_t>(n) * (n - 1) / 2);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j)
        dists.push_back((X.row(i) - X.row(j)).norm());
  } else {
    const size_t n_pairs = 2000000;
    dists.reserve(n_pairs);
    auto rng = make_rng(derive_seed(seed, "median_heuristic"));
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    while (dists.size() < n_pairs) {
      const Eigen::Index i = pick(rng), j = pick(rng);
      if (i == j) continue;
      dists.push_back((X.row(i) - X.row(j)).norm());
    }
  }
  const size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
  double med = dists[mid];
  if (dists.size() % 2 == 0) {
    std::nth_element(dists.begin(), dists.begin() + mid - 1, dists.begin() + mid);
    med = 0.5 * (med + dists[mid - 1]);
  }
  if (!(med > 0.0)) throw std::invalid_argument("median_heuristic: degenerate inputs");
  return med;
}

FeatureMapRFF rff_feature_map(const KernelSpec& spec, int input_dim, int num_features,
                              uint64_t seed) {
  spec.validate();
  if (input_dim < 1) throw std::invalid_argument("rff_feature_map: input_dim must be >= 1");
  if (num_features < 1) throw std::invalid_argument("rff_feature_map: num_features must be >= 1");
  if (spec.family == KernelFamily::Linear)
    throw std::invalid_argument(
        "rff_feature_map: the linear kernel has exact finite features; use them directly");

  FeatureMapRFF map;
  map.frequencies.resize(num_features, input_dim);
  map.phases.resize(num_features);
  map.scale = std::sqrt(spec.variance) * std::sqrt(2.0 / static_cast<double>(num_features));
  map.source_spec = spec;
  map.seed = seed;

  auto rng = make_rng(derive_seed(seed, "rff"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * M_PI);
  const double h = spec.bandwidth;
  // Spectral sampling: RBF frequencies are N(0, h^-2 I); Matern-nu frequencies
  // follow the multivariate Student-t with 2*nu dof, drawn as z*sqrt(2nu/u)/h
  // with u ~ chi^2_{2nu}.
  double dof = 0.0;
  if (spec.family == KernelFamily::Matern32) dof = 3.0;
  if (spec.family == KernelFamily::Matern52) dof = 5.0;
  std::chi_squared_distribution<double> chi2(dof > 0 ? dof : 1.0);
  for (int i = 0; i < num_features; ++i) {
    for (int c = 0; c < input_dim; ++c) map.frequencies(i, c) = normal(rng) / h;
    if (dof > 0) {
      const double u = chi2(rng);
      map.frequencies.row(i) *= std::sqrt(dof / u);
    }
  }
  for (int i = 0; i < num_features; ++i) map.phases[i] = unif(rng);
  return map;
}

FeatureMapRFF rff_feature_map(const KernelSpec& spec, int num_features, uint64_t seed) {
  return rff_feature_map(spec, 1, num_features, seed);
}

Eigen::MatrixXd FeatureMapRFF::features(const Eigen::Ref<const Eigen::MatrixXd>& X) const {
  if (X.cols() != frequencies.cols())
    throw std::invalid_argument("FeatureMapRFF::features: dimension mismatch");
  Eigen::MatrixXd F = X * frequencies.transpose();
  F.rowwise() += phases.transpose();
  return scale * F.array().cos().matrix();
}

GPSample draw_gp_sample(std::shared_ptr<const FeatureMapRFF> map, uint64_t seed) {
  if (!map) throw std::invalid_argument("draw_gp_sample: null feature map");
  auto rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd w(map->num_features());
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = normal(rng);
  return GPSample{std::move(w), std::move(map)};
}

Eigen::VectorXd GPSample::evaluate(const Eigen::Ref<const Eigen::MatrixXd>& X) const {
  return gp_values(*feature_map, weights, X).col(0);
}

double GPSample::operator()(double x) const {
  Eigen::MatrixXd X(1, 1);
  X(0, 0) = x;
  return evaluate(X)[0];
}

Eigen::MatrixXd draw_gp_weights(const FeatureMapRFF& map, int m, uint64_t seed) {
  if (m < 1) throw std::invalid_argument("draw_gp_weights: m must be >= 1");
  Eigen::MatrixXd W(map.num_features(), m);
  for (int j = 0; j < m; ++j) {
    auto rng = make_rng(derive_seed(seed, static_cast<uint64_t>(j)));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = normal(rng);
  }
  return W;
}

Eigen::MatrixXd gp_values(const FeatureMapRFF& map, const Eigen::Ref<const Eigen::MatrixXd>& W,
                          const Eigen::Ref<const Eigen::MatrixXd>& X) {
  if (W.rows() != map.num_features())
    throw std::invalid_argument("gp_values: weight rows must equal num_features");
  Eigen::MatrixXd vals(X.rows(), W.cols());
  const Eigen::Index block = 2048;
  for (Eigen::Index start = 0; start < X.rows(); start += block) {
    const Eigen::Index len = std::min(block, X.rows() - start);
    vals.middleRows(start, len) = map.features(X.middleRows(start, len)) * W;
  }
  return vals;
}

}  // namespace learned_iv
