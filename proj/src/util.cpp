#include "learned_iv/util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

namespace learned_iv {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t master, uint64_t stream) {
  uint64_t state = master ^ (0xA0761D6478BD642FULL + stream * 0xE7037ED1A0B428DBULL);
  return splitmix64(state);
}

namespace {
uint64_t fnv1a(const char* s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (; *s; ++s) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(*s));
    h *= 0x100000001B3ULL;
  }
  return h;
}
}  // namespace

uint64_t derive_seed(uint64_t master, const char* tag) {
  return derive_seed(master, fnv1a(tag));
}

uint64_t derive_seed(uint64_t master, const char* tag, uint64_t index) {
  return derive_seed(derive_seed(master, fnv1a(tag)), index);
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

double quantile(std::vector<double> values, double level) {
  if (values.empty()) throw std::invalid_argument("quantile: empty sample");
  if (level <= 0.0) return *std::min_element(values.begin(), values.end());
  if (level >= 1.0) return *std::max_element(values.begin(), values.end());
  std::sort(values.begin(), values.end());
  const double pos = level * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

std::pair<double, double> wilson_interval(int successes, int trials, double z) {
  if (trials <= 0) throw std::invalid_argument("wilson_interval: trials must be positive");
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {center - half, center + half};
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman_rho: need two equal-length samples of size >= 2");
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const size_t n = a.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) { ma += ra[i]; mb += rb[i]; }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < n; ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return num / std::sqrt(va * vb);
}

Eigen::LLT<Eigen::MatrixXd> jittered_llt(const Eigen::MatrixXd& M, double rel_jitter,
                                         int escalations) {
  if (M.rows() != M.cols()) throw std::invalid_argument("jittered_llt: matrix must be square");
  const double mean_diag = M.diagonal().mean();
  double jitter = rel_jitter * (mean_diag > 0 ? mean_diag : 1.0);
  Eigen::MatrixXd J = M;
  for (int attempt = 0; attempt <= escalations; ++attempt) {
    J = M;
    J.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(J);
    if (llt.info() == Eigen::Success) return llt;
    jitter *= 10.0;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
  std::ostringstream msg;
  msg << "jittered_llt: factorization failed after " << escalations
      << " jitter escalations; smallest eigenvalue = " << es.eigenvalues().minCoeff();
  throw std::runtime_error(msg.str());
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sym_eig(const Eigen::MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("sym_eig: eigendecomposition did not converge");
  return es;
}

}  // namespace learned_iv
