#pragma once

// Shared helpers for the test binaries: deterministic random matrices and a
// function-backed regressor for injecting exact oracles into feature maps.

#include <functional>
#include <memory>
#include <random>

#include <Eigen/Dense>

#include "learned_iv/oracle.hpp"
#include "learned_iv/util.hpp"

namespace test_support {

inline Eigen::MatrixXd random_mat(int n, int d, uint64_t seed, double lo = -3.0, double hi = 3.0) {
  auto rng = learned_iv::make_rng(seed);
  std::uniform_real_distribution<double> unif(lo, hi);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = unif(rng);
  return X;
}

inline Eigen::VectorXd random_vec(int n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return random_mat(n, 1, seed, lo, hi).col(0);
}

class FnRegressor final : public learned_iv::Regressor {
 public:
  using Fn = std::function<double(const Eigen::RowVectorXd&, int)>;
  Fn fn;
  int d = 1, q = 1;

  FnRegressor(Fn f, int in_dim, int out_dim) : fn(std::move(f)), d(in_dim), q(out_dim) {}
  Eigen::MatrixXd predict(const Eigen::Ref<const Eigen::MatrixXd>& X) const override {
    Eigen::MatrixXd P(X.rows(), q);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (int j = 0; j < q; ++j) P(i, j) = fn(X.row(i), j);
    return P;
  }
  int input_dim() const override { return d; }
  int output_dim() const override { return q; }
  std::vector<Eigen::MatrixXd> parameter_arrays() const override { return {}; }
};

inline learned_iv::FittedRegressor fn_regressor(FnRegressor::Fn f, int d, int q) {
  return std::make_shared<FnRegressor>(std::move(f), d, q);
}

}  // namespace test_support
