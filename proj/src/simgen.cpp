#include "learned_iv/simgen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <stdexcept>

#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

constexpr double kObsNoiseSd = 0.1;
constexpr int kPilotSize = 100000;
constexpr int kMedianSubsample = 2000;
constexpr int kTruthRFFFeatures = 512;

Eigen::MatrixXd draw_uniform(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d, double lo,
                             double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd M(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) M(i, j) = u(rng);
  return M;
}

Eigen::VectorXd draw_normal(std::mt19937_64& rng, Eigen::Index n, double sd) {
  std::normal_distribution<double> g(0.0, sd);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

// Scalar handle plus a vectorized twin for bulk evaluation of the same truth.
struct TruthFn {
  std::function<double(double)> scalar;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> batch;
};

TruthFn make_truth(const std::string& name, uint64_t seed, const KernelSpec& kx) {
  TruthFn t;
  if (name == "abs") {
    t.scalar = [](double x) { return std::abs(x); };
  } else if (name == "sin") {
    t.scalar = [](double x) { return std::sin(x); };
  } else if (name == "linear") {
    t.scalar = [](double x) { return x; };
  } else if (name == "step") {
    t.scalar = [](double x) { return x >= 0.0 ? 1.0 : -1.0; };
  } else if (name == "gp") {
    auto map = std::make_shared<const FeatureMapRFF>(
        rff_feature_map(kx, 1, kTruthRFFFeatures, derive_seed(seed, "map")));
    GPSample sample = draw_gp_sample(map, derive_seed(seed, "draw"));
    t.scalar = [sample](double x) { return sample(x); };
    t.batch = [sample](const Eigen::VectorXd& x) { return sample.evaluate(x); };
    return t;
  } else {
    throw std::invalid_argument("f0_registry: unknown structural function '" + name + "'");
  }
  auto scalar = t.scalar;
  t.batch = [scalar](const Eigen::VectorXd& x) {
    Eigen::VectorXd out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = scalar(x(i));
    return out;
  };
  return t;
}

double psi_quartic(double t) {
  const double d = t - 5.0;
  return 2.0 * (d * d * d * d / 600.0 + std::exp(-4.0 * d * d) + t / 10.0 - 1.0);
}

double psi_quadratic(double t) {
  const double d = t - 5.0;
  return 2.0 * (d * d / 600.0 + std::exp(-4.0 * d * d) + t / 10.0 - 2.0);
}

void write_csv_matrix(const std::string& path, const std::vector<std::string>& header,
                      const Eigen::MatrixXd& body) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_dataset: cannot open " + path);
  out.precision(17);
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (Eigen::Index r = 0; r < body.rows(); ++r) {
    for (Eigen::Index c = 0; c < body.cols(); ++c) out << (c ? "," : "") << body(r, c);
    out << "\n";
  }
}

void write_manifest(const std::string& dir, const nlohmann::json& manifest) {
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("export_dataset: cannot open " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
}

std::vector<std::string> z_header(Eigen::Index d) {
  std::vector<std::string> h;
  for (Eigen::Index j = 0; j < d; ++j) h.push_back("z_" + std::to_string(j + 1));
  h.push_back("x");
  h.push_back("y");
  return h;
}

}  // namespace

std::string to_string(DesignKind d) {
  switch (d) {
    case DesignKind::Identity: return "identity";
    case DesignKind::NNInstrument: return "nn-instrument";
    case DesignKind::Demand: return "demand";
  }
  throw std::logic_error("to_string: unknown design");
}

DesignKind design_from_string(const std::string& s) {
  if (s == "identity") return DesignKind::Identity;
  if (s == "nn-instrument") return DesignKind::NNInstrument;
  if (s == "demand") return DesignKind::Demand;
  throw std::invalid_argument("unknown design: " + s);
}

void ScenarioConfig::validate() const {
  if (n1 < 1 || n2 < 1 || n_test < 1)
    throw std::invalid_argument("ScenarioConfig: sample sizes must be >= 1");
  if (design == DesignKind::Identity && D != 2)
    throw std::invalid_argument("ScenarioConfig: the identity design is defined for D = 2");
  if (design == DesignKind::NNInstrument && (D < 2 || D % 2 != 0))
    throw std::invalid_argument("ScenarioConfig: NN-instrument D must be even and >= 2");
  if (design == DesignKind::Demand && !(rho >= 0.0 && rho < 1.0))
    throw std::invalid_argument("ScenarioConfig: rho must lie in [0, 1)");
  if (design != DesignKind::Demand && f0 != "abs" && f0 != "sin" && f0 != "linear" &&
      f0 != "step" && f0 != "gp")
    throw std::invalid_argument("ScenarioConfig: unknown f0 '" + f0 + "'");
  if (demand_psi != "quartic" && demand_psi != "quadratic")
    throw std::invalid_argument("ScenarioConfig: demand_psi must be 'quartic' or 'quadratic'");
}

void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  j = nlohmann::json{{"design", to_string(c.design)},
                     {"D", c.D},
                     {"rho", c.rho},
                     {"f0", c.f0},
                     {"n1", c.n1},
                     {"n2", c.n2},
                     {"n_test", c.n_test},
                     {"seed", c.seed},
                     {"demand_psi", c.demand_psi}};
}

void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  c = ScenarioConfig{};
  if (j.contains("design")) c.design = design_from_string(j.at("design").get<std::string>());
  if (j.contains("D")) c.D = j.at("D").get<int>();
  if (j.contains("rho")) c.rho = j.at("rho").get<double>();
  if (j.contains("f0")) c.f0 = j.at("f0").get<std::string>();
  if (j.contains("n1")) c.n1 = j.at("n1").get<int>();
  if (j.contains("n2")) c.n2 = j.at("n2").get<int>();
  if (j.contains("n_test")) c.n_test = j.at("n_test").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("demand_psi")) c.demand_psi = j.at("demand_psi").get<std::string>();
  c.validate();
}

std::function<double(double)> f0_registry(const std::string& name, uint64_t seed,
                                          const KernelSpec& kx) {
  return make_truth(name, seed, kx).scalar;
}

Eigen::MatrixXd InstrumentNet::operator()(const Eigen::Ref<const Eigen::MatrixXd>& Zbar) const {
  if (weights.empty()) throw std::logic_error("InstrumentNet: empty network");
  if (Zbar.cols() != weights.front().rows())
    throw std::invalid_argument("InstrumentNet: input dimension mismatch");
  Eigen::MatrixXd H = Zbar;
  for (size_t l = 0; l + 1 < weights.size(); ++l)
    H = (H * weights[l]).array().tanh().matrix();
  return H * weights.back();
}

InstrumentNet make_instrument_net(int in_dim, int out_dim, uint64_t seed) {
  if (in_dim < 1 || out_dim < 1)
    throw std::invalid_argument("make_instrument_net: dimensions must be >= 1");
  constexpr int kWidth = 64;
  const std::vector<int> dims = {in_dim, kWidth, kWidth, kWidth, out_dim};
  auto rng = make_rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  InstrumentNet net;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    Eigen::MatrixXd W(dims[l], dims[l + 1]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = scale * g(rng);
    net.weights.push_back(std::move(W));
  }
  return net;
}

IVDataset generate_main(const ScenarioConfig& config) {
  config.validate();
  if (config.design == DesignKind::Demand)
    throw std::invalid_argument("generate_main: demand scenarios use generate_demand");

  const int d_latent = config.D / 2;
  IVDataset data;

  // Pilot sample: fixes the GP-truth kernel (median bandwidth) and the
  // standardization constants, which are population quantities.
  Eigen::VectorXd pilot_x;
  {
    auto rng = make_rng(derive_seed(config.seed, "pilot"));
    Eigen::VectorXd z1 = draw_uniform(rng, kPilotSize, 1, -3.0, 3.0).col(0);
    Eigen::VectorXd u = draw_normal(rng, kPilotSize, 1.0);
    Eigen::VectorXd ex = draw_normal(rng, kPilotSize, kObsNoiseSd);
    Eigen::VectorXd ey = draw_normal(rng, kPilotSize, kObsNoiseSd);
    pilot_x = z1 + u + ex;

    TruthFn truth;
    if (config.f0 == "gp") {
      const double bw =
          median_heuristic(pilot_x.head(kMedianSubsample), derive_seed(config.seed, "median"));
      data.scenario_kernel = KernelSpec{KernelFamily::RBF, bw, 1.0};
      truth = make_truth("gp", derive_seed(config.seed, "f0"), *data.scenario_kernel);
    } else {
      truth = make_truth(config.f0, derive_seed(config.seed, "f0"),
                         KernelSpec{KernelFamily::RBF, 1.0, 1.0});
    }

    Eigen::VectorXd y_raw = truth.batch(pilot_x) + u + ey;
    data.mu = y_raw.mean();
    data.sigma = std::sqrt((y_raw.array() - data.mu).square().mean());
    if (!(data.sigma > 0.0))
      throw std::runtime_error("generate_main: degenerate response scale");

    const double mu = data.mu, sigma = data.sigma;
    auto scalar = truth.scalar;
    data.f0_std = [scalar, mu, sigma](double x) { return (scalar(x) - mu) / sigma; };

    InstrumentNet net;
    if (config.design == DesignKind::NNInstrument)
      net = make_instrument_net(d_latent, config.D, derive_seed(config.seed, "instrument-net"));

    auto draw_stage = [&](const char* stream, int n, Eigen::MatrixXd& z, Eigen::MatrixXd& x,
                          Eigen::VectorXd& y) {
      auto srng = make_rng(derive_seed(config.seed, stream));
      Eigen::MatrixXd Zbar = draw_uniform(srng, n, d_latent, -3.0, 3.0);
      Eigen::VectorXd su = draw_normal(srng, n, 1.0);
      Eigen::VectorXd sex = draw_normal(srng, n, kObsNoiseSd);
      Eigen::VectorXd sey = draw_normal(srng, n, kObsNoiseSd);
      Eigen::VectorXd xv = Zbar.col(0) + su + sex;
      x = xv;
      y = (((truth.batch(xv) + su + sey).array() - mu) / sigma).matrix();
      z = (config.design == DesignKind::NNInstrument) ? net(Zbar) : Zbar;
    };

    Eigen::MatrixXd z1m, x1m, z2m, x2m;
    Eigen::VectorXd y1v, y2v;
    draw_stage("stage1", config.n1, z1m, x1m, y1v);
    draw_stage("stage2", config.n2, z2m, x2m, y2v);
    data.stage1.z = z1m;
    data.stage1.x = x1m;
    data.stage1.y = y1v;
    data.stage2.z = z2m;
    data.stage2.x = x2m;
    data.stage2.y = y2v;

    auto trng = make_rng(derive_seed(config.seed, "test"));
    Eigen::VectorXd tz1 = draw_uniform(trng, config.n_test, 1, -3.0, 3.0).col(0);
    Eigen::VectorXd tu = draw_normal(trng, config.n_test, 1.0);
    Eigen::VectorXd tex = draw_normal(trng, config.n_test, kObsNoiseSd);
    data.test_x = tz1 + tu + tex;
  }

  data.manifest["config"] = config;
  data.manifest["mu"] = data.mu;
  data.manifest["sigma"] = data.sigma;
  if (data.scenario_kernel) data.manifest["scenario_kernel"] = *data.scenario_kernel;
  data.manifest["streams"] = {{"pilot", derive_seed(config.seed, "pilot")},
                              {"f0", derive_seed(config.seed, "f0")},
                              {"stage1", derive_seed(config.seed, "stage1")},
                              {"stage2", derive_seed(config.seed, "stage2")},
                              {"test", derive_seed(config.seed, "test")}};
  return data;
}

ExoDataset generate_demand(const ScenarioConfig& config) {
  config.validate();
  if (config.design != DesignKind::Demand)
    throw std::invalid_argument("generate_demand: config.design must be demand");

  ExoDataset data;
  const bool quartic = (config.demand_psi == "quartic");
  data.psi = quartic ? std::function<double(double)>(psi_quartic)
                     : std::function<double(double)>(psi_quadratic);
  auto psi = data.psi;
  data.f0 = [psi](double p, double t, double s) {
    return 100.0 + (10.0 + p) * s * psi(t) - 2.0 * p;
  };

  const double rho = config.rho;
  auto draw_split = [&](const char* stream, int n) {
    ExoSplit split;
    auto rng = make_rng(derive_seed(config.seed, stream));
    std::uniform_int_distribution<int> s_dist(1, 7);
    Eigen::VectorXd s(n), t(n), c(n), v(n), eps(n);
    for (int i = 0; i < n; ++i) s(i) = static_cast<double>(s_dist(rng));
    t = draw_uniform(rng, n, 1, 0.0, 10.0).col(0);
    c = draw_normal(rng, n, 1.0);
    v = draw_normal(rng, n, 1.0);
    eps = draw_normal(rng, n, 1.0);
    split.z_o = c;
    split.w.resize(n, 2);
    split.w.col(0) = t;
    split.w.col(1) = s;
    split.x_o.resize(n);
    split.y.resize(n);
    const double u_sd = std::sqrt(1.0 - rho * rho);
    for (int i = 0; i < n; ++i) {
      split.x_o(i) = 25.0 + (c(i) + 3.0) * psi(t(i)) + v(i);
      const double u = rho * v(i) + u_sd * eps(i);
      split.y(i) = data.f0(split.x_o(i), t(i), s(i)) + u;
    }
    return split;
  };

  data.stage1 = draw_split("stage1", config.n1);
  data.stage2 = draw_split("stage2", config.n2);

  {
    auto rng = make_rng(derive_seed(config.seed, "test"));
    std::uniform_int_distribution<int> s_dist(1, 7);
    data.test_p = draw_uniform(rng, config.n_test, 1, 10.0, 25.0).col(0);
    data.test_w.resize(config.n_test, 2);
    data.test_w.col(0) = draw_uniform(rng, config.n_test, 1, 0.0, 10.0).col(0);
    for (int i = 0; i < config.n_test; ++i)
      data.test_w(i, 1) = static_cast<double>(s_dist(rng));
  }

  data.manifest["config"] = config;
  data.manifest["psi"] = config.demand_psi;
  data.manifest["streams"] = {{"stage1", derive_seed(config.seed, "stage1")},
                              {"stage2", derive_seed(config.seed, "stage2")},
                              {"test", derive_seed(config.seed, "test")}};
  return data;
}

void export_dataset(const IVDataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const Eigen::Index d = data.stage1.z.cols();

  auto stage_body = [](const Eigen::MatrixXd& z, const Eigen::MatrixXd& x,
                       const Eigen::VectorXd& y) {
    Eigen::MatrixXd body(z.rows(), z.cols() + 2);
    body.leftCols(z.cols()) = z;
    body.col(z.cols()) = x.col(0);
    body.col(z.cols() + 1) = y;
    return body;
  };
  if (!data.stage1.y)
    throw std::invalid_argument("export_dataset: stage-1 responses missing");
  write_csv_matrix(dir + "/stage1.csv", z_header(d),
                   stage_body(data.stage1.z, data.stage1.x, *data.stage1.y));
  write_csv_matrix(dir + "/stage2.csv", z_header(d),
                   stage_body(data.stage2.z, data.stage2.x, data.stage2.y));

  Eigen::MatrixXd test(data.test_x.rows(), 2);
  test.col(0) = data.test_x.col(0);
  for (Eigen::Index i = 0; i < test.rows(); ++i) test(i, 1) = data.f0_std(test(i, 0));
  write_csv_matrix(dir + "/test.csv", {"x", "f0_std"}, test);
  write_manifest(dir, data.manifest);
}

void export_dataset(const ExoDataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto split_body = [](const ExoSplit& s) {
    Eigen::MatrixXd body(s.z_o.size(), 5);
    body.col(0) = s.z_o;
    body.col(1) = s.w.col(0);
    body.col(2) = s.w.col(1);
    body.col(3) = s.x_o;
    body.col(4) = s.y;
    return body;
  };
  write_csv_matrix(dir + "/stage1.csv", {"c", "t", "s", "p", "y"}, split_body(data.stage1));
  write_csv_matrix(dir + "/stage2.csv", {"c", "t", "s", "p", "y"}, split_body(data.stage2));

  Eigen::MatrixXd test(data.test_p.size(), 4);
  test.col(0) = data.test_p;
  test.col(1) = data.test_w.col(0);
  test.col(2) = data.test_w.col(1);
  for (Eigen::Index i = 0; i < test.rows(); ++i)
    test(i, 3) = data.f0(test(i, 0), test(i, 1), test(i, 2));
  write_csv_matrix(dir + "/test.csv", {"p", "t", "s", "f0"}, test);
  write_manifest(dir, data.manifest);
}

}  // namespace learned_iv
