#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "learned_iv/oracle.hpp"
#include "learned_iv/util.hpp"

using namespace learned_iv;

namespace {

Eigen::MatrixXd random_mat(int n, int d, uint64_t seed, double lo = -3.0, double hi = 3.0) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(lo, hi);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = unif(rng);
  return X;
}

OracleConfig krr_config(KernelSpec spec, std::vector<double> grid, uint64_t seed = 7) {
  OracleConfig c;
  c.kind = OracleKind::KRR;
  c.krr_kernel = spec;
  c.ridge_grid = std::move(grid);
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("KRR linear kernel interpolates a line") {
  RegressionTask task;
  task.inputs = Eigen::MatrixXd(2, 1);
  task.inputs << 0.0, 1.0;
  task.targets = Eigen::MatrixXd(2, 1);
  task.targets << 0.0, 1.0;
  auto reg = fit_oracle(krr_config({KernelFamily::Linear, 1.0, 1.0}, {1e-10}), task);
  Eigen::MatrixXd q(1, 1);
  q << 0.5;
  CHECK(reg->predict(q)(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(reg->input_dim() == 1);
  CHECK(reg->output_dim() == 1);
}

TEST_CASE("KRR RBF near-interpolates training targets at tiny ridge") {
  Eigen::MatrixXd X = random_mat(25, 2, 11);
  Eigen::MatrixXd Y = (X.col(0).array().sin() + 0.5 * X.col(1).array()).matrix();
  RegressionTask task{X, Y, 0.0};
  auto reg = fit_oracle(krr_config({KernelFamily::RBF, 1.0, 1.0}, {1e-8}), task);
  Eigen::MatrixXd P = reg->predict(X);
  CHECK((P - Y).cwiseAbs().maxCoeff() <= 1e-3);
}

TEST_CASE("KRR holdout selection picks a sane ridge and median-auto works") {
  Eigen::MatrixXd X = random_mat(120, 1, 21);
  auto rng = make_rng(22);
  std::normal_distribution<double> noise(0.0, 0.05);
  Eigen::MatrixXd Y(120, 1);
  for (int i = 0; i < 120; ++i) Y(i, 0) = std::sin(X(i, 0)) + noise(rng);

  OracleConfig c;
  c.kind = OracleKind::KRR;  // kernel unset -> median-trick RBF on standardized inputs
  c.ridge_grid = {1e-6, 1e-4, 1e-2, 1.0, 100.0};
  c.seed = 5;
  RegressionTask task{X, Y, 0.2};
  auto reg = fit_oracle(c, task);

  Eigen::MatrixXd grid = random_mat(200, 1, 23, -2.5, 2.5);
  Eigen::MatrixXd truth = grid.array().sin().matrix();
  double mse = (reg->predict(grid) - truth).squaredNorm() / 200.0;
  CHECK(mse <= 0.02);
  auto diag = reg->diagnostics();
  CHECK(diag.at("selection_mode").get<std::string>() == "holdout");
  CHECK(diag.at("ridge").get<double>() <= 1.0);
}

TEST_CASE("KRR GCV path selects against over- and under-smoothing") {
  Eigen::MatrixXd X = random_mat(150, 1, 31);
  auto rng = make_rng(32);
  std::normal_distribution<double> noise(0.0, 0.1);
  Eigen::MatrixXd Y(150, 1);
  for (int i = 0; i < 150; ++i) Y(i, 0) = std::abs(X(i, 0)) + noise(rng);
  RegressionTask task{X, Y, 0.0};
  auto reg = fit_oracle(krr_config({KernelFamily::RBF, 0.7, 1.0}, {1e-8, 1e-3, 0.1, 10.0, 1e4}), task);
  CHECK(reg->diagnostics().at("selection_mode").get<std::string>() == "gcv");
  Eigen::MatrixXd grid = random_mat(300, 1, 33, -2.5, 2.5);
  Eigen::MatrixXd truth = grid.array().abs().matrix();
  double mse = (reg->predict(grid) - truth).squaredNorm() / 300.0;
  CHECK(mse <= 0.03);
}

TEST_CASE("shared factorization equals independent per-output KRR fits") {
  Eigen::MatrixXd X = random_mat(40, 3, 41);
  Eigen::MatrixXd Y = random_mat(40, 5, 42, -1.0, 1.0);
  KernelSpec spec{KernelFamily::Matern32, 1.2, 0.8};
  auto cfg = krr_config(spec, {0.05});

  RegressionTask joint{X, Y, 0.0};
  auto reg_joint = fit_oracle(cfg, joint);
  Eigen::MatrixXd Q = random_mat(15, 3, 43);
  Eigen::MatrixXd P_joint = reg_joint->predict(Q);
  CHECK(P_joint.rows() == 15);
  CHECK(P_joint.cols() == 5);

  for (int j = 0; j < 5; ++j) {
    RegressionTask single{X, Y.col(j), 0.0};
    auto reg_j = fit_oracle(cfg, single);
    CHECK((reg_j->predict(Q) - P_joint.col(j)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("increasing ridge strictly shrinks KRR dual coefficient norm") {
  Eigen::MatrixXd X = random_mat(30, 2, 51);
  Eigen::MatrixXd Y = random_mat(30, 1, 52, -1.0, 1.0);
  KernelSpec spec{KernelFamily::RBF, 1.0, 1.0};
  double prev = std::numeric_limits<double>::infinity();
  for (double ridge : {1e-4, 1e-2, 1.0, 100.0}) {
    auto reg = fit_oracle(krr_config(spec, {ridge}), RegressionTask{X, Y, 0.0});
    double norm = reg->parameter_arrays()[1].norm();  // dual coefficients
    CHECK(norm < prev);
    prev = norm;
  }
}

TEST_CASE("KRR prediction is linear in targets at fixed ridge") {
  Eigen::MatrixXd X = random_mat(25, 2, 61);
  Eigen::MatrixXd Y1 = random_mat(25, 1, 62, -1.0, 1.0);
  Eigen::MatrixXd Y2 = random_mat(25, 1, 63, -1.0, 1.0);
  const double a = 1.7, b = -0.4;
  KernelSpec spec{KernelFamily::RBF, 0.9, 1.3};
  auto cfg = krr_config(spec, {0.01});
  Eigen::MatrixXd Q = random_mat(10, 2, 64);

  auto p1 = fit_oracle(cfg, RegressionTask{X, Y1, 0.0})->predict(Q);
  auto p2 = fit_oracle(cfg, RegressionTask{X, Y2, 0.0})->predict(Q);
  auto pc = fit_oracle(cfg, RegressionTask{X, a * Y1 + b * Y2, 0.0})->predict(Q);
  CHECK((pc - (a * p1 + b * p2)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("RFRidge fits a smooth function and selects by holdout") {
  Eigen::MatrixXd X = random_mat(400, 1, 71);
  auto rng = make_rng(72);
  std::normal_distribution<double> noise(0.0, 0.05);
  Eigen::MatrixXd Y(400, 1);
  for (int i = 0; i < 400; ++i) Y(i, 0) = std::sin(X(i, 0)) + noise(rng);

  OracleConfig c;
  c.kind = OracleKind::RFRidge;
  c.rf_num_features = 256;
  c.ridge_grid = {1e-4, 1e-2, 1.0, 100.0};
  c.seed = 9;
  auto reg = fit_oracle(c, RegressionTask{X, Y, 0.15});

  Eigen::MatrixXd grid = random_mat(200, 1, 73, -2.5, 2.5);
  Eigen::MatrixXd truth = grid.array().sin().matrix();
  double mse = (reg->predict(grid) - truth).squaredNorm() / 200.0;
  CHECK(mse <= 0.02);
  CHECK(reg->diagnostics().at("selection_mode").get<std::string>() == "holdout");
}

TEST_CASE("MLP learns sin with holdout RMSE at most 0.1") {
  const int n = 500;
  Eigen::MatrixXd X = random_mat(n, 1, 81);
  Eigen::MatrixXd Y = X.array().sin().matrix();

  OracleConfig c;
  c.kind = OracleKind::MLP;
  c.hidden_layers = {64, 64};
  c.activation = Activation::Swish;
  c.learning_rate = 1e-3;
  c.dropout = 0.0;
  c.max_epochs = 400;
  c.patience = 40;
  c.batch_size = 64;
  c.seed = 3;
  auto reg = fit_oracle(c, RegressionTask{X, Y, 0.1});

  Eigen::MatrixXd grid = random_mat(300, 1, 82, -2.8, 2.8);
  Eigen::MatrixXd truth = grid.array().sin().matrix();
  double rmse = std::sqrt((reg->predict(grid) - truth).squaredNorm() / 300.0);
  CHECK(rmse <= 0.1);

  auto diag = reg->diagnostics();
  CHECK(diag.at("train_loss_final").get<double>() <=
        diag.at("train_loss_initial").get<double>());
  CHECK(diag.at("epochs_run").get<int>() >= 1);
}

TEST_CASE("MLP vector-valued output and purity") {
  Eigen::MatrixXd X = random_mat(80, 2, 91);
  Eigen::MatrixXd Y(80, 3);
  Y.col(0) = X.col(0);
  Y.col(1) = X.col(1).array().tanh();
  Y.col(2) = (X.col(0).array() * X.col(1).array());

  OracleConfig c;
  c.kind = OracleKind::MLP;
  c.hidden_layers = {32};
  c.activation = Activation::Tanh;
  c.dropout = 0.1;
  c.max_epochs = 30;
  c.patience = 10;
  c.batch_size = 32;
  c.seed = 13;
  auto reg = fit_oracle(c, RegressionTask{X, Y, 0.1});

  Eigen::MatrixXd P1 = reg->predict(X);
  Eigen::MatrixXd P2 = reg->predict(X);
  CHECK(P1.rows() == 80);
  CHECK(P1.cols() == 3);
  CHECK(P1.allFinite());
  CHECK((P1 - P2).cwiseAbs().maxCoeff() == 0.0);  // no hidden state
}

TEST_CASE("oracle determinism: same config and task give identical predictions") {
  Eigen::MatrixXd X = random_mat(100, 2, 101);
  Eigen::MatrixXd Y = (X.col(0).array().abs() + X.col(1).array()).matrix();
  Eigen::MatrixXd Q = random_mat(20, 2, 102);

  for (auto kind : {OracleKind::KRR, OracleKind::RFRidge, OracleKind::MLP}) {
    OracleConfig c;
    c.kind = kind;
    c.ridge_grid = {1e-3, 0.1, 10.0};
    c.rf_num_features = 64;
    c.hidden_layers = {16, 16};
    c.max_epochs = 10;
    c.patience = 5;
    c.dropout = 0.2;
    c.seed = 17;
    auto r1 = fit_oracle(c, RegressionTask{X, Y, 0.2});
    auto r2 = fit_oracle(c, RegressionTask{X, Y, 0.2});
    CHECK((r1->predict(Q) - r2->predict(Q)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("validation and error paths") {
  Eigen::MatrixXd X = random_mat(10, 2, 111);
  Eigen::MatrixXd Y = random_mat(10, 1, 112);

  OracleConfig c;
  c.kind = OracleKind::KRR;
  c.krr_kernel = KernelSpec{KernelFamily::RBF, 1.0, 1.0};

  SUBCASE("row count mismatch") {
    RegressionTask bad{X, Y.topRows(5), 0.0};
    CHECK_THROWS_AS(fit_oracle(c, bad), std::invalid_argument);
  }
  SUBCASE("non-finite entries") {
    Eigen::MatrixXd Xb = X;
    Xb(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_oracle(c, RegressionTask{Xb, Y, 0.0}), std::invalid_argument);
  }
  SUBCASE("empty or invalid ridge grid") {
    OracleConfig bad = c;
    bad.ridge_grid = {};
    CHECK_THROWS_AS(fit_oracle(bad, RegressionTask{X, Y, 0.0}), std::invalid_argument);
    bad.ridge_grid = {-1.0};
    CHECK_THROWS_AS(fit_oracle(bad, RegressionTask{X, Y, 0.0}), std::invalid_argument);
  }
  SUBCASE("predict dimension mismatch") {
    auto reg = fit_oracle(c, RegressionTask{X, Y, 0.0});
    CHECK_THROWS_AS(reg->predict(random_mat(4, 3, 113)), std::invalid_argument);
  }
  SUBCASE("holdout fraction bounds") {
    CHECK_THROWS_AS(fit_oracle(c, RegressionTask{X, Y, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(fit_oracle(c, RegressionTask{X, Y, -0.1}), std::invalid_argument);
  }
}

TEST_CASE("OracleConfig JSON round-trip") {
  OracleConfig c;
  c.kind = OracleKind::MLP;
  c.hidden_layers = {100, 100, 100};
  c.activation = Activation::Swish;
  c.learning_rate = 5e-3;
  c.dropout = 0.2;
  c.max_epochs = 77;
  c.patience = 8;
  c.batch_size = 256;
  c.weight_decay = 1e-4;
  c.seed = 99;

  nlohmann::json j = c;
  auto back = j.get<OracleConfig>();
  CHECK(back.kind == OracleKind::MLP);
  CHECK(back.hidden_layers == c.hidden_layers);
  CHECK(back.activation == Activation::Swish);
  CHECK(back.learning_rate == doctest::Approx(5e-3));
  CHECK(back.max_epochs == 77);
  CHECK(back.weight_decay == doctest::Approx(1e-4));
  CHECK(back.seed == 99);

  OracleConfig k;
  k.kind = OracleKind::KRR;
  k.krr_kernel = KernelSpec{KernelFamily::Matern52, 2.0, 0.5};
  nlohmann::json jk = k;
  auto back_k = jk.get<OracleConfig>();
  REQUIRE(back_k.krr_kernel.has_value());
  CHECK(back_k.krr_kernel->family == KernelFamily::Matern52);

  OracleConfig med;
  med.kind = OracleKind::KRR;  // median-auto (kernel unset)
  nlohmann::json jm = med;
  CHECK(jm.at("krr_kernel").get<std::string>() == "median-auto");
  CHECK_FALSE(jm.get<OracleConfig>().krr_kernel.has_value());
}

TEST_CASE("weight export writes a parseable shape-header binary") {
  Eigen::MatrixXd X = random_mat(40, 2, 121);
  Eigen::MatrixXd Y = random_mat(40, 1, 122);
  OracleConfig c;
  c.kind = OracleKind::MLP;
  c.hidden_layers = {8};
  c.max_epochs = 3;
  c.patience = 2;
  c.dropout = 0.0;
  c.seed = 1;
  auto reg = fit_oracle(c, RegressionTask{X, Y, 0.0});

  const std::string path = "test_weights.bin";
  export_weights(reg, path);
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "LIVW");
  int32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  CHECK(count == static_cast<int32_t>(reg->parameter_arrays().size()));
  // First array: W0 with shape 2 x 8.
  int32_t rank = 0, rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&rank), 4);
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  CHECK(rank == 2);
  CHECK(rows == 2);
  CHECK(cols == 8);
  std::vector<double> payload(static_cast<size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(double)));
  REQUIRE(in.good());
  Eigen::MatrixXd W0 = reg->parameter_arrays()[0];
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      CHECK(payload[static_cast<size_t>(i) * cols + j] == W0(i, j));
  std::remove(path.c_str());
}

}  // TEST_SUITE
