#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace learned_iv {

// --- Deterministic seed derivation -----------------------------------------
// All randomized components consume child seeds derived from a master seed so
// that results are reproducible under any execution order or thread count.

uint64_t splitmix64(uint64_t& state);
uint64_t derive_seed(uint64_t master, uint64_t stream);
uint64_t derive_seed(uint64_t master, const char* tag);
uint64_t derive_seed(uint64_t master, const char* tag, uint64_t index);

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

// --- Small statistics helpers ----------------------------------------------

// Standard-normal quantile function.
double normal_quantile(double p);

// Empirical quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double level);

// 95% (default z) Wilson score interval for a binomial proportion.
std::pair<double, double> wilson_interval(int successes, int trials,
                                          double z = 1.959963984540054);

// Spearman rank correlation (average ranks on ties).
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// --- Linear algebra helpers -------------------------------------------------

// Cholesky of M + jitter*I with jitter = rel_jitter * mean(diag(M)) escalated
// x10 up to `escalations` extra attempts. Throws std::runtime_error naming the
// smallest eigenvalue if every attempt fails.
Eigen::LLT<Eigen::MatrixXd> jittered_llt(const Eigen::MatrixXd& M,
                                         double rel_jitter = 1e-8,
                                         int escalations = 3);

// Symmetric eigendecomposition helper guarding against silent failure.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sym_eig(const Eigen::MatrixXd& M);

}  // namespace learned_iv
