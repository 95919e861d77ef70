// Command-line front end: dataset simulation, single fits, replicated
// experiments, model averaging and first-stage validation sweeps.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "learned_iv/exo.hpp"
#include "learned_iv/harness.hpp"
#include "learned_iv/kiv.hpp"
#include "learned_iv/learned_kernel.hpp"
#include "learned_iv/simgen.hpp"
#include "learned_iv/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace learned_iv;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  json j;
  in >> j;
  return j;
}

// LEARNED_IV_SEED overrides the configured master seed when set.
void apply_seed_override(uint64_t& seed) {
  const char* env = std::getenv("LEARNED_IV_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw std::invalid_argument(std::string("LEARNED_IV_SEED is not an integer: ") + env);
  seed = static_cast<uint64_t>(v);
}

std::string fmt_cell(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

struct LoadedData {
  Stage1Data stage1;
  Stage2Data stage2;
};

// CSV with header columns z_*, x, y in any order (the simulate export format).
LoadedData read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open data file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty data file: " + path);
  std::vector<std::string> names;
  {
    std::stringstream header(line);
    std::string tok;
    while (std::getline(header, tok, ',')) names.push_back(tok);
  }
  std::vector<int> z_cols;
  int x_col = -1, y_col = -1;
  for (int i = 0; i < static_cast<int>(names.size()); ++i) {
    if (names[i] == "x")
      x_col = i;
    else if (names[i] == "y")
      y_col = i;
    else if (names[i].rfind("z", 0) == 0)
      z_cols.push_back(i);
  }
  if (z_cols.empty() || x_col < 0 || y_col < 0)
    throw std::invalid_argument(path + ": need columns z_*, x and y");

  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<double> row;
    while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
    if (row.size() != names.size())
      throw std::invalid_argument(path + ": ragged row with " + std::to_string(row.size()) +
                                  " fields");
    rows.push_back(std::move(row));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n < 4) throw std::invalid_argument(path + ": needs at least 4 data rows");

  Eigen::MatrixXd Z(n, static_cast<Eigen::Index>(z_cols.size()));
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (size_t c = 0; c < z_cols.size(); ++c)
      Z(i, static_cast<Eigen::Index>(c)) = rows[static_cast<size_t>(i)][z_cols[c]];
    X(i, 0) = rows[static_cast<size_t>(i)][x_col];
    Y(i) = rows[static_cast<size_t>(i)][y_col];
  }

  // Even split: first half trains the first stage, second half the estimator.
  const Eigen::Index n1 = n / 2;
  LoadedData data;
  data.stage1.z = Z.topRows(n1);
  data.stage1.x = X.topRows(n1);
  data.stage1.y = Y.head(n1);
  data.stage2.z = Z.bottomRows(n - n1);
  data.stage2.x = X.bottomRows(n - n1);
  data.stage2.y = Y.tail(n - n1);
  return data;
}

int run_simulate(const std::string& config_path, const std::string& out_dir) {
  ScenarioConfig sc = load_json(config_path).get<ScenarioConfig>();
  apply_seed_override(sc.seed);
  if (sc.design == DesignKind::Demand) {
    export_dataset(generate_demand(sc), out_dir);
  } else {
    export_dataset(generate_main(sc), out_dir);
  }
  std::cout << "wrote dataset to " << out_dir << " (design " << to_string(sc.design) << ", seed "
            << sc.seed << ")\n";
  return 0;
}

int run_fit(const std::string& data_path, const std::string& config_path,
            const std::string& out_csv) {
  ExperimentConfig config = load_json(config_path).get<ExperimentConfig>();
  apply_seed_override(config.master_seed);
  const LoadedData data = read_dataset_csv(data_path);

  const KernelSpec second =
      resolve_second_stage(config, data.stage2.x, std::nullopt, 1.0,
                           derive_seed(config.master_seed, "second-stage"));
  KIVConfig kcfg = config.kiv;
  kcfg.second_stage = second;
  kcfg.seed = derive_seed(config.master_seed, "kiv");

  QuasiPosterior post;
  if (config.first_stage == "rbf") {
    const KernelSpec kz{KernelFamily::RBF,
                        median_heuristic(data.stage2.z,
                                         derive_seed(config.master_seed, "median-z")),
                        1.0};
    post = fit_quasi_posterior_gram(data.stage2, kz, kcfg);
  } else {
    const LearnedFeatureMap map = build_learned_feature_map(
        data.stage1, second, config.m, config.oracle, derive_seed(config.master_seed, "map"), {},
        &data.stage2);
    post = fit_quasi_posterior(data.stage2, map, kcfg);
  }

  // Prediction grid spanning the training treatments.
  const int grid_n = 200;
  const double x_lo = data.stage2.x.col(0).minCoeff();
  const double x_hi = data.stage2.x.col(0).maxCoeff();
  Eigen::MatrixXd grid(grid_n, 1);
  for (int i = 0; i < grid_n; ++i)
    grid(i, 0) = x_lo + (x_hi - x_lo) * static_cast<double>(i) / (grid_n - 1);

  const Eigen::VectorXd mean = posterior_mean(post, grid);
  const Eigen::VectorXd sd = posterior_cov(post, grid).diagonal().cwiseMax(0.0).cwiseSqrt();
  const CredibleSummaries cs =
      credible_summaries(post, grid, config.levels.front(), config.posterior_samples,
                         derive_seed(config.master_seed, "metrics"));

  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("cannot open " + out_csv + " for writing");
  out << "x,mean,sd,ci_lo,ci_hi\n";
  for (int i = 0; i < grid_n; ++i)
    out << fmt_cell(grid(i, 0)) << ',' << fmt_cell(mean(i)) << ',' << fmt_cell(sd(i)) << ','
        << fmt_cell(cs.ci_lower(i)) << ',' << fmt_cell(cs.ci_upper(i)) << "\n";
  std::cout << "log_ml " << fmt_cell(log_marginal_quasi_likelihood(post)) << "\n"
            << "lambda " << fmt_cell(post.lambda) << " nu " << fmt_cell(post.nu) << "\n"
            << "wrote " << out_csv << "\n";
  return 0;
}

int run_experiment_cmd(const std::string& config_path, int replicates_override,
                       int threads_override) {
  ExperimentConfig config = load_json(config_path).get<ExperimentConfig>();
  if (replicates_override > 0) config.replicates = replicates_override;
  if (threads_override > 0) config.threads = threads_override;
  apply_seed_override(config.master_seed);
  config.validate();

  const auto records = run_experiment(config);
  const json summary = aggregate_metrics(records);
  std::cout << "metrics: " << (fs::path(config.output_dir) / "metrics.csv").string() << "\n"
            << "summary: " << (fs::path(config.output_dir) / "summary.json").string() << "\n"
            << summary.dump(2) << "\n";
  const auto failed = summary.at("errors").get<size_t>();
  if (failed == records.size())
    throw std::runtime_error("every replicate failed; see errors.log");
  return 0;
}

int run_bma(const std::string& config_path) {
  ExperimentConfig config = load_json(config_path).get<ExperimentConfig>();
  apply_seed_override(config.master_seed);
  if (!config.bma_grid) throw std::invalid_argument("bma requires a bma_grid in the config");
  if (config.scenario.design == DesignKind::Demand)
    throw std::invalid_argument("bma applies to the main designs, not the demand design");

  ScenarioConfig sc = config.scenario;
  sc.seed = derive_seed(config.master_seed, "bma-data");
  const IVDataset data = generate_main(sc);
  const KernelSpec second =
      resolve_second_stage(config, data, derive_seed(config.master_seed, "second-stage"));
  const LearnedFeatureMap map = build_learned_feature_map(
      data.stage1, second, config.m, config.oracle, derive_seed(config.master_seed, "map"), {},
      &data.stage2);

  KIVConfig kcfg = config.kiv;
  kcfg.second_stage = second;
  kcfg.seed = derive_seed(config.master_seed, "kiv");
  std::vector<BMACandidate> candidates;
  for (double sigma : config.bma_grid->sigmas)
    for (double mult : config.bma_grid->bandwidth_multipliers) {
      KIVConfig c2 = kcfg;
      c2.second_stage.bandwidth = second.bandwidth * mult;
      c2.second_stage.variance = sigma * sigma;
      BMACandidate cand;
      cand.posterior = std::make_shared<QuasiPosterior>(fit_quasi_posterior(data.stage2, map, c2));
      cand.log_prior = bma_candidate_log_prior(sigma, c2.second_stage.bandwidth);
      cand.label = {{"sigma", sigma}, {"h", c2.second_stage.bandwidth}};
      candidates.push_back(std::move(cand));
    }
  const BMAResult mix = bma_combine(std::move(candidates));

  fs::create_directories(config.output_dir);
  json weights = json::array();
  for (size_t c = 0; c < mix.candidates.size(); ++c) {
    json rec = mix.candidates[c].label;
    rec["log_ml"] = mix.log_ml(static_cast<Eigen::Index>(c));
    rec["weight"] = mix.weights(static_cast<Eigen::Index>(c));
    weights.push_back(std::move(rec));
  }
  const std::string weights_path = (fs::path(config.output_dir) / "bma_weights.json").string();
  std::ofstream wout(weights_path);
  wout << weights.dump(2) << "\n";

  const MetricsRecord rec = evaluate_metrics(mix, data, config.levels, config.posterior_samples,
                                             derive_seed(config.master_seed, "metrics"));
  std::cout << weights.dump(2) << "\n"
            << "mixture test_mse " << fmt_cell(rec.test_mse) << " ci_coverage "
            << fmt_cell(rec.ci_coverage_avg) << "\n"
            << "wrote " << weights_path << "\n";
  return 0;
}

int run_validate(const std::string& config_path) {
  const json j = load_json(config_path);
  ExperimentConfig config = j.get<ExperimentConfig>();
  apply_seed_override(config.master_seed);

  std::vector<FirstStageArm> arms;
  if (j.contains("sweep")) {
    for (const auto& a : j.at("sweep")) {
      FirstStageArm arm;
      arm.label = a.value("label", "arm-" + std::to_string(arms.size()));
      arm.oracle = config.oracle;
      if (a.contains("oracle")) a.at("oracle").get_to(arm.oracle);
      arm.m = a.value("m", config.m);
      arms.push_back(std::move(arm));
    }
  } else {
    auto mk = [&](const char* label, OracleKind kind, int m) {
      FirstStageArm arm;
      arm.label = label;
      arm.oracle = config.oracle;
      arm.oracle.kind = kind;
      arm.m = m;
      return arm;
    };
    arms = {mk("krr-8", OracleKind::KRR, 8),        mk("krr-16", OracleKind::KRR, 16),
            mk("krr-32", OracleKind::KRR, 32),      mk("krr-64", OracleKind::KRR, 64),
            mk("rf-16", OracleKind::RFRidge, 16),   mk("rf-32", OracleKind::RFRidge, 32),
            mk("rf-64", OracleKind::RFRidge, 64),   mk("mlp-32", OracleKind::MLP, 32)};
  }
  const int m_v = j.value("validation_tasks", 8);

  if (config.scenario.design == DesignKind::Demand)
    throw std::invalid_argument("validate applies to the main designs, not the demand design");
  const IVDataset data = generate_main(config.scenario);
  const auto rows = first_stage_sweep(data, config, arms, m_v, config.master_seed);

  fs::create_directories(config.output_dir);
  const std::string csv_path = (fs::path(config.output_dir) / "validation.csv").string();
  std::ofstream out(csv_path);
  out << "label,statistic,counterfactual_mse,log_ml,error\n";
  std::vector<double> stats, mses;
  size_t ok = 0;
  for (const auto& row : rows) {
    out << row.label << ',' << fmt_cell(row.statistic) << ',' << fmt_cell(row.counterfactual_mse)
        << ',' << fmt_cell(row.log_ml) << ',' << row.error << "\n";
    std::cout << row.label << ": statistic " << fmt_cell(row.statistic) << " mse "
              << fmt_cell(row.counterfactual_mse) << (row.error.empty() ? "" : " ERROR ")
              << row.error << "\n";
    if (row.error.empty()) {
      ++ok;
      stats.push_back(row.statistic);
      mses.push_back(row.counterfactual_mse);
    }
  }
  if (ok == 0) throw std::runtime_error("every sweep arm failed; see " + csv_path);
  if (stats.size() >= 2)
    std::cout << "spearman(statistic, mse) = " << fmt_cell(spearman_rho(stats, mses)) << "\n";
  std::cout << "wrote " << csv_path << "\n";
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonparametric IV regression with a learned instrument kernel"};
  app.require_subcommand(1);

  std::string sim_config, sim_out;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset and export CSVs");
  sim->add_option("--config", sim_config, "ScenarioConfig JSON")->required();
  sim->add_option("--out", sim_out, "output directory")->required();

  std::string fit_data, fit_config, fit_out = "predictions.csv";
  auto* fit = app.add_subcommand("fit", "Fit one posterior on a CSV dataset");
  fit->add_option("--data", fit_data, "dataset CSV (columns z_*, x, y)")->required();
  fit->add_option("--config", fit_config, "ExperimentConfig JSON")->required();
  fit->add_option("--out", fit_out, "predictions CSV path");

  std::string exp_config;
  int exp_replicates = -1, exp_threads = -1;
  auto* exp = app.add_subcommand("experiment", "Run replicated experiments and write metrics");
  exp->add_option("--config", exp_config, "ExperimentConfig JSON")->required();
  exp->add_option("--replicates", exp_replicates, "override replicate count");
  exp->add_option("--threads", exp_threads, "override worker thread count");

  std::string bma_config;
  auto* bma = app.add_subcommand("bma", "Model-average a second-stage grid on one dataset");
  bma->add_option("--config", bma_config, "ExperimentConfig JSON with bma_grid")->required();

  std::string val_config;
  auto* val = app.add_subcommand("validate", "First-stage sweep with the validation statistic");
  val->add_option("--config", val_config, "ExperimentConfig JSON (optional sweep array)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (sim->parsed()) return guarded([&] { return run_simulate(sim_config, sim_out); });
  if (fit->parsed()) return guarded([&] { return run_fit(fit_data, fit_config, fit_out); });
  if (exp->parsed())
    return guarded([&] { return run_experiment_cmd(exp_config, exp_replicates, exp_threads); });
  if (bma->parsed()) return guarded([&] { return run_bma(bma_config); });
  if (val->parsed()) return guarded([&] { return run_validate(val_config); });
  return 2;
}
