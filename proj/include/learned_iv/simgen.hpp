#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "learned_iv/kernels.hpp"
#include "learned_iv/learned_kernel.hpp"

namespace learned_iv {

enum class DesignKind { Identity, NNInstrument, Demand };

std::string to_string(DesignKind d);
DesignKind design_from_string(const std::string& s);

// A synthetic scenario. `D` is the ambient scale of the instrument map: the
// latent draw is Unif[-3,3]^{D/2} and the observed instrument has D/2 columns
// (Identity passes the latent through) or D columns (NNInstrument). Demand
// ignores D and f0 and uses `rho` as the confounding strength.
struct ScenarioConfig {
  DesignKind design = DesignKind::Identity;
  int D = 2;
  double rho = 0.5;
  std::string f0 = "abs";  // abs | sin | linear | step | gp
  int n1 = 500;
  int n2 = 500;
  int n_test = 1000;
  uint64_t seed = 0;
  std::string demand_psi = "quartic";  // quartic | quadratic numerator variant

  void validate() const;
};

void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);

// Instrument-and-treatment dataset with standardized responses and the
// matching standardized ground truth for counterfactual evaluation.
struct IVDataset {
  Stage1Data stage1;
  Stage2Data stage2;
  Eigen::MatrixXd test_x;                 // n_test x 1, fresh marginal draws
  std::function<double(double)> f0_std;   // x -> (f0(x) - mu) / sigma
  double mu = 0.0;
  double sigma = 1.0;
  // Kernel the GP truth was drawn from (set only when f0 == "gp"); a correctly
  // specified second stage is this kernel with variance divided by sigma^2.
  std::optional<KernelSpec> scenario_kernel;
  nlohmann::json manifest;
};

IVDataset generate_main(const ScenarioConfig& config);

// One observational split of the demand design: instrument c, exogenous
// covariates (t, s), treatment p, response y.
struct ExoSplit {
  Eigen::VectorXd z_o;
  Eigen::MatrixXd w;  // columns (t, s)
  Eigen::VectorXd x_o;
  Eigen::VectorXd y;
};

struct ExoDataset {
  ExoSplit stage1;
  ExoSplit stage2;
  Eigen::VectorXd test_p;  // fresh counterfactual prices
  Eigen::MatrixXd test_w;  // fresh (t, s) draws
  std::function<double(double, double, double)> f0;  // (p, t, s) -> demand
  std::function<double(double)> psi;
  nlohmann::json manifest;
};

ExoDataset generate_demand(const ScenarioConfig& config);

// Ground-truth structural functions. `kx` is consulted only by "gp", which
// returns a fixed random-feature draw from GP(0, kx); all handles are
// deterministic given (name, seed).
std::function<double(double)> f0_registry(const std::string& name, uint64_t seed,
                                          const KernelSpec& kx);

// Fixed random network mapping the latent instrument to a D-dimensional
// observation: three tanh layers of width 64 and a linear readout, weights
// N(0, 1/fan_in), zero biases.
struct InstrumentNet {
  std::vector<Eigen::MatrixXd> weights;
  Eigen::MatrixXd operator()(const Eigen::Ref<const Eigen::MatrixXd>& Zbar) const;
};

InstrumentNet make_instrument_net(int in_dim, int out_dim, uint64_t seed);

// CSV export with a sidecar manifest.json: stage1.csv / stage2.csv hold
// columns z_1..z_D,x,y and test.csv holds x,f0_std (resp. the demand columns
// c,t,s,p,y and p,t,s,f0).
void export_dataset(const IVDataset& data, const std::string& dir);
void export_dataset(const ExoDataset& data, const std::string& dir);

}  // namespace learned_iv
