#include <doctest.h>

#include <cmath>
#include <random>

#include "learned_iv/kernels.hpp"
#include "learned_iv/util.hpp"

using namespace learned_iv;

namespace {

Eigen::MatrixXd random_points(int n, int d, uint64_t seed, double lo = -3.0, double hi = 3.0) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(lo, hi);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = unif(rng);
  return X;
}

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("eval_kernel closed forms") {
  KernelSpec rbf{KernelFamily::RBF, 1.0, 1.0};
  CHECK(eval_kernel(rbf, vec1(0.7), vec1(0.7)) == doctest::Approx(1.0));
  // (x-y)^2 / (2 h^2) = 1 at distance sqrt(2)
  CHECK(eval_kernel(rbf, vec1(0.0), vec1(std::sqrt(2.0))) ==
        doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

  KernelSpec lin{KernelFamily::Linear, 1.0, 1.0};
  Eigen::VectorXd a(2), b(2);
  a << 1, 2;
  b << 3, 4;
  CHECK(eval_kernel(lin, a, b) == doctest::Approx(11.0));

  KernelSpec m32{KernelFamily::Matern32, 0.7, 2.0};
  const double r = 1.3;
  const double s = std::sqrt(3.0) * r / 0.7;
  CHECK(eval_kernel(m32, vec1(0.0), vec1(r)) ==
        doctest::Approx(2.0 * (1.0 + s) * std::exp(-s)).epsilon(1e-12));

  CHECK_THROWS_AS(eval_kernel(rbf, a, vec1(0.0)), std::invalid_argument);
  Eigen::VectorXd bad = vec1(std::nan(""));
  CHECK_THROWS_AS(eval_kernel(rbf, bad, vec1(0.0)), std::invalid_argument);
}

TEST_CASE("gram basics") {
  KernelSpec spec{KernelFamily::Matern52, 1.3, 2.5};
  Eigen::MatrixXd one = random_points(1, 3, 11);
  Eigen::MatrixXd G1 = gram(spec, one, one);
  CHECK(G1.rows() == 1);
  CHECK(G1(0, 0) == doctest::Approx(2.5));

  Eigen::MatrixXd X = random_points(7, 3, 12), Y = random_points(5, 3, 13);
  Eigen::MatrixXd Gxy = gram(spec, X, Y), Gyx = gram(spec, Y, X);
  CHECK((Gxy - Gyx.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

  // Entries agree with eval_kernel.
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(Gxy(i, j) == doctest::Approx(eval_kernel(spec, X.row(i), Y.row(j))).epsilon(1e-12));

  // Eigendecomposition oracle: jittered Gram is positive definite.
  KernelSpec rbf{KernelFamily::RBF, 1.0, 1.0};
  Eigen::MatrixXd P = random_points(10, 2, 14);
  Eigen::MatrixXd G = gram(rbf, P, P);
  G.diagonal().array() += 1e-8;
  CHECK(sym_eig(G).eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("gram PSD invariant on random points") {
  for (uint64_t seed : {21, 22, 23}) {
    for (auto family : {KernelFamily::RBF, KernelFamily::Matern32, KernelFamily::Matern52}) {
      KernelSpec spec{family, 0.8, 1.7};
      Eigen::MatrixXd X = random_points(20, 3, seed);
      Eigen::MatrixXd G = gram(spec, X, X);
      G.diagonal().array() += 1e-8 * G.trace();
      CHECK(sym_eig(G).eigenvalues().minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("stationarity is exact under common shifts") {
  // Lattice-aligned points and integer shifts keep x+c exact in floating point.
  auto rng = make_rng(31);
  std::uniform_int_distribution<int> grid(-3000000, 3000000);
  const double step = std::ldexp(1.0, -20);
  for (auto family : {KernelFamily::RBF, KernelFamily::Matern32, KernelFamily::Matern52}) {
    KernelSpec spec{family, 1.1, 1.4};
    for (int t = 0; t < 50; ++t) {
      Eigen::VectorXd x(2), y(2), c(2);
      for (int j = 0; j < 2; ++j) {
        x[j] = grid(rng) * step;
        y[j] = grid(rng) * step;
        c[j] = static_cast<double>(grid(rng) % 64);
      }
      CHECK(eval_kernel(spec, x + c, y + c) == eval_kernel(spec, x, y));
    }
  }
}

TEST_CASE("median_heuristic") {
  Eigen::MatrixXd X(2, 1);
  X << 0, 1;
  CHECK(median_heuristic(X) == doctest::Approx(1.0));

  Eigen::MatrixXd X3(3, 1);
  X3 << 0, 1, 3;  // pairwise distances {1, 3, 2}
  CHECK(median_heuristic(X3) == doctest::Approx(2.0));

  Eigen::MatrixXd Xdeg(2, 1);
  Xdeg << 0, 0;
  CHECK_THROWS_AS(median_heuristic(Xdeg), std::invalid_argument);
  Eigen::MatrixXd X1(1, 1);
  X1 << 0;
  CHECK_THROWS_AS(median_heuristic(X1), std::invalid_argument);

  // Permutation invariance and scale equivariance.
  Eigen::MatrixXd P = random_points(41, 2, 32);
  Eigen::MatrixXd Pperm = P.colwise().reverse().eval();
  CHECK(median_heuristic(P) == doctest::Approx(median_heuristic(Pperm)).epsilon(1e-14));
  CHECK(median_heuristic((2.0 * P).eval()) ==
        doctest::Approx(2.0 * median_heuristic(P)).epsilon(1e-14));
}

TEST_CASE("rff approximates the kernel") {
  KernelSpec rbf{KernelFamily::RBF, 1.0, 1.0};
  FeatureMapRFF map = rff_feature_map(rbf, 1 << 14, 77);
  Eigen::MatrixXd X = random_points(200, 1, 78);
  Eigen::MatrixXd F = map.features(X);
  Eigen::MatrixXd K = gram(rbf, X, X);
  CHECK(((F * F.transpose()) - K).cwiseAbs().maxCoeff() <= 0.02);

  // Determinism.
  FeatureMapRFF map2 = rff_feature_map(rbf, 1 << 14, 77);
  CHECK(map.frequencies == map2.frequencies);
  CHECK(map.phases == map2.phases);

  // Output-scale check on the diagonal.
  KernelSpec rbf4{KernelFamily::RBF, 1.0, 4.0};
  FeatureMapRFF map4 = rff_feature_map(rbf4, 1 << 14, 79);
  Eigen::VectorXd phi = map4.features(vec1(0.4).transpose()).row(0);
  CHECK(phi.squaredNorm() == doctest::Approx(4.0).epsilon(0.0125));
  CHECK(phi.cwiseAbs().maxCoeff() <= map4.scale);

  KernelSpec lin{KernelFamily::Linear, 1.0, 1.0};
  CHECK_THROWS_AS(rff_feature_map(lin, 16, 1), std::invalid_argument);
}

TEST_CASE("rff error shrinks as features double") {
  KernelSpec spec{KernelFamily::Matern32, 1.0, 1.0};
  Eigen::MatrixXd X = random_points(60, 1, 80);
  Eigen::MatrixXd K = gram(spec, X, X);
  double prev = 1e100;
  for (int F : {1 << 10, 1 << 11, 1 << 12, 1 << 13}) {
    double err = 0.0;
    for (uint64_t s : {101, 102, 103}) {
      FeatureMapRFF map = rff_feature_map(spec, F, s);
      Eigen::MatrixXd Phi = map.features(X);
      err += ((Phi * Phi.transpose()) - K).cwiseAbs().maxCoeff();
    }
    err /= 3.0;
    CHECK(err < prev);
    prev = err;
  }
}

TEST_CASE("gp samples have the right moments") {
  KernelSpec rbf{KernelFamily::RBF, 1.0, 1.0};
  auto map = std::make_shared<const FeatureMapRFF>(rff_feature_map(rbf, 2048, 91));
  Eigen::MatrixXd pts(3, 1);
  pts << -1.0, 0.2, 1.5;

  const int n_draws = 8000;
  Eigen::MatrixXd vals(n_draws, 3);
  for (int s = 0; s < n_draws; ++s)
    vals.row(s) = draw_gp_sample(map, derive_seed(92, s)).evaluate(pts).transpose();

  Eigen::RowVectorXd mean = vals.colwise().mean();
  CHECK(mean.cwiseAbs().maxCoeff() <= 3.0 / std::sqrt(static_cast<double>(n_draws)) * 1.5);

  Eigen::MatrixXd centered = vals.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n_draws);
  CHECK((cov - gram(rbf, pts, pts)).norm() <= 0.1);

  // Determinism under an identical seed.
  GPSample a = draw_gp_sample(map, 4242), b = draw_gp_sample(map, 4242);
  CHECK(a.evaluate(pts) == b.evaluate(pts));

  // Batched draws match individual draws with derived child seeds.
  Eigen::MatrixXd W = draw_gp_weights(*map, 4, 555);
  for (int j = 0; j < 4; ++j) {
    GPSample single = draw_gp_sample(map, derive_seed(555, static_cast<uint64_t>(j)));
    CHECK(W.col(j) == single.weights);
  }
  Eigen::MatrixXd batched = gp_values(*map, W, pts);
  GPSample s0 = draw_gp_sample(map, derive_seed(555, uint64_t{0}));
  CHECK((batched.col(0) - s0.evaluate(pts)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("kernel spec serialization round-trips") {
  KernelSpec spec{KernelFamily::Matern52, 2.5, 0.7};
  nlohmann::json j = spec;
  CHECK(j["family"] == "matern52");
  KernelSpec back = j.get<KernelSpec>();
  CHECK(back.family == spec.family);
  CHECK(back.bandwidth == spec.bandwidth);
  CHECK(back.variance == spec.variance);
  CHECK_THROWS(nlohmann::json{{"family", "cubic"}, {"bandwidth", 1.0}, {"variance", 1.0}}
                   .get<KernelSpec>());
}

}  // TEST_SUITE
