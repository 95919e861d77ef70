#include "learned_iv/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "learned_iv/exo.hpp"
#include "learned_iv/learned_kernel.hpp"
#include "learned_iv/util.hpp"

namespace learned_iv {

namespace {

std::string fmt_num(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

Eigen::VectorXd truth_on_grid(const IVDataset& data) {
  if (!data.f0_std) throw std::invalid_argument("dataset carries no ground truth");
  Eigen::VectorXd f0(data.test_x.rows());
  for (Eigen::Index i = 0; i < f0.size(); ++i) f0(i) = data.f0_std(data.test_x(i, 0));
  return f0;
}

MetricsRecord finish_metrics(const Eigen::VectorXd& mean, const Eigen::VectorXd& f0, double radius,
                             const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, double log_ml) {
  MetricsRecord r;
  const double n = static_cast<double>(f0.size());
  r.test_mse = (mean - f0).squaredNorm() / n;
  r.cb_radius = radius;
  r.cb_covered = std::sqrt(r.test_mse) <= radius ? 1.0 : 0.0;
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < f0.size(); ++i)
    if (f0(i) >= lo(i) && f0(i) <= hi(i)) ++inside;
  r.ci_coverage_avg = static_cast<double>(inside) / n;
  r.log_ml = log_ml;
  return r;
}

double logsumexp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

void copy_metrics(MetricsRecord& dst, const MetricsRecord& src) {
  dst.test_mse = src.test_mse;
  dst.cb_radius = src.cb_radius;
  dst.cb_covered = src.cb_covered;
  dst.ci_coverage_avg = src.ci_coverage_avg;
  dst.log_ml = src.log_ml;
}

}  // namespace

void to_json(nlohmann::json& j, const BMAGridConfig& g) {
  j = {{"sigmas", g.sigmas}, {"bandwidth_multipliers", g.bandwidth_multipliers}};
}

void from_json(const nlohmann::json& j, BMAGridConfig& g) {
  g = BMAGridConfig{};
  if (j.contains("sigmas")) j.at("sigmas").get_to(g.sigmas);
  if (j.contains("bandwidth_multipliers"))
    j.at("bandwidth_multipliers").get_to(g.bandwidth_multipliers);
}

ExperimentConfig::ExperimentConfig() {
  theta.kind = OracleKind::MLP;
  theta.hidden_layers = {128, 64, 32};
  theta.activation = Activation::Swish;
  theta.dropout = 0.0;
}

void ExperimentConfig::validate() const {
  scenario.validate();
  oracle.validate();
  kiv.validate();
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  if (replicates < 1) throw std::invalid_argument("replicates must be >= 1");
  if (levels.empty()) throw std::invalid_argument("levels must not be empty");
  for (double l : levels)
    if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("levels must lie in (0, 1)");
  if (posterior_samples < 2) throw std::invalid_argument("posterior_samples must be >= 2");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  if (first_stage != "learned" && first_stage != "rbf")
    throw std::invalid_argument("first_stage must be 'learned' or 'rbf'");
  if (second_stage_policy != "median" && second_stage_policy != "scenario" &&
      second_stage_policy != "config")
    throw std::invalid_argument("second_stage_policy must be 'median', 'scenario' or 'config'");
  if (bma_grid) {
    if (bma_grid->sigmas.empty() || bma_grid->bandwidth_multipliers.empty())
      throw std::invalid_argument("bma_grid lists must not be empty");
    for (double s : bma_grid->sigmas)
      if (!(s > 0.0)) throw std::invalid_argument("bma_grid sigmas must be positive");
    for (double b : bma_grid->bandwidth_multipliers)
      if (!(b > 0.0)) throw std::invalid_argument("bma_grid multipliers must be positive");
  }
  if (scenario.design == DesignKind::Demand) {
    theta.validate();
    if (theta.kind != OracleKind::MLP)
      throw std::invalid_argument("theta must be an MLP configuration for the demand design");
  }
  if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"scenario", c.scenario},
       {"oracle", c.oracle},
       {"kiv", c.kiv},
       {"m", c.m},
       {"replicates", c.replicates},
       {"levels", c.levels},
       {"output_dir", c.output_dir},
       {"master_seed", c.master_seed},
       {"first_stage", c.first_stage},
       {"second_stage_policy", c.second_stage_policy},
       {"theta", c.theta},
       {"posterior_samples", c.posterior_samples},
       {"threads", c.threads}};
  if (c.bma_grid)
    j["bma_grid"] = *c.bma_grid;
  else
    j["bma_grid"] = nullptr;
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("scenario")) j.at("scenario").get_to(c.scenario);
  if (j.contains("oracle")) j.at("oracle").get_to(c.oracle);
  if (j.contains("kiv")) j.at("kiv").get_to(c.kiv);
  if (j.contains("m")) j.at("m").get_to(c.m);
  if (j.contains("replicates")) j.at("replicates").get_to(c.replicates);
  if (j.contains("levels")) j.at("levels").get_to(c.levels);
  if (j.contains("bma_grid") && !j.at("bma_grid").is_null()) {
    BMAGridConfig g = j.at("bma_grid").get<BMAGridConfig>();
    c.bma_grid = std::move(g);
  }
  if (j.contains("output_dir")) j.at("output_dir").get_to(c.output_dir);
  if (j.contains("master_seed")) j.at("master_seed").get_to(c.master_seed);
  if (j.contains("first_stage")) j.at("first_stage").get_to(c.first_stage);
  if (j.contains("second_stage_policy")) j.at("second_stage_policy").get_to(c.second_stage_policy);
  if (j.contains("theta")) j.at("theta").get_to(c.theta);
  if (j.contains("posterior_samples")) j.at("posterior_samples").get_to(c.posterior_samples);
  if (j.contains("threads")) j.at("threads").get_to(c.threads);
  c.validate();
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string s = std::to_string(r.replicate);
  s += ',';
  s += fmt_num(r.test_mse);
  s += ',';
  s += fmt_num(r.cb_radius);
  s += ',';
  s += std::isfinite(r.cb_covered) ? (r.cb_covered > 0.5 ? "1" : "0") : "nan";
  s += ',';
  s += fmt_num(r.ci_coverage_avg);
  s += ',';
  s += fmt_num(r.log_ml);
  s += ',';
  s += fmt_num(r.runtime_s);
  s += ',';
  s += std::to_string(r.seed);
  return s;
}

KernelSpec resolve_second_stage(const ExperimentConfig& config,
                                const Eigen::Ref<const Eigen::MatrixXd>& x_train,
                                const std::optional<KernelSpec>& scenario_kernel, double sigma,
                                uint64_t seed) {
  if (config.second_stage_policy == "config") {
    KernelSpec s = config.kiv.second_stage;
    s.validate();
    return s;
  }
  if (config.second_stage_policy == "scenario") {
    if (!scenario_kernel)
      throw std::invalid_argument(
          "second_stage_policy 'scenario' needs a generator-provided kernel (gp truth only)");
    if (!(sigma > 0.0)) throw std::invalid_argument("scenario sigma must be positive");
    KernelSpec s = *scenario_kernel;
    s.variance /= sigma * sigma;
    s.validate();
    return s;
  }
  KernelSpec s{KernelFamily::RBF, median_heuristic(x_train, seed), 1.0};
  s.validate();
  return s;
}

KernelSpec resolve_second_stage(const ExperimentConfig& config, const IVDataset& data,
                                uint64_t seed) {
  return resolve_second_stage(config, data.stage2.x, data.scenario_kernel, data.sigma, seed);
}

double bma_candidate_log_prior(double sigma, double bandwidth) {
  if (!(sigma > 0.0) || !(bandwidth > 0.0))
    throw std::invalid_argument("bma_candidate_log_prior: sigma and bandwidth must be positive");
  // InvGamma(shape 2, scale 2) on sigma; Gamma(shape 2, rate 1) on bandwidth.
  const double lp_sigma = 2.0 * std::log(2.0) - 3.0 * std::log(sigma) - 2.0 / sigma;
  const double lp_bw = std::log(bandwidth) - bandwidth;
  return lp_sigma + lp_bw;
}

MetricsRecord evaluate_metrics(const QuasiPosterior& post, const IVDataset& data,
                               const std::vector<double>& levels, int n_samples, uint64_t seed) {
  const double level = levels.empty() ? 0.9 : levels.front();
  const Eigen::VectorXd f0 = truth_on_grid(data);
  const Eigen::VectorXd mean = posterior_mean(post, data.test_x);
  const CredibleSummaries cs = credible_summaries(post, data.test_x, level, n_samples, seed);
  return finish_metrics(mean, f0, cs.ball_radius, cs.ci_lower, cs.ci_upper,
                        log_marginal_quasi_likelihood(post));
}

MetricsRecord evaluate_metrics(const BMAResult& mixture, const IVDataset& data,
                               const std::vector<double>& levels, int n_samples, uint64_t seed) {
  if (mixture.candidates.empty()) throw std::invalid_argument("empty mixture");
  const double level = levels.empty() ? 0.9 : levels.front();
  const Eigen::VectorXd f0 = truth_on_grid(data);
  const Eigen::VectorXd mean = mixture.mixture_mean(data.test_x);
  const std::vector<double> qs = {(1.0 - level) / 2.0, (1.0 + level) / 2.0};
  const Eigen::MatrixXd Q =
      mixture.mixture_quantiles(data.test_x, qs, n_samples, derive_seed(seed, "ci"));

  // Ball radius of the mixture: pooled deviations from the mixture mean, with
  // per-candidate draw counts proportional to the posterior weights.
  const double n = static_cast<double>(f0.size());
  std::vector<double> deviations;
  for (size_t c = 0; c < mixture.candidates.size(); ++c) {
    const int n_c = static_cast<int>(std::llround(mixture.weights(static_cast<Eigen::Index>(c)) *
                                                  static_cast<double>(n_samples)));
    if (n_c <= 0) continue;
    const Eigen::MatrixXd S = sample_posterior(*mixture.candidates[c].posterior, data.test_x, n_c,
                                               derive_seed(seed, "ball", c));
    for (Eigen::Index i = 0; i < S.rows(); ++i)
      deviations.push_back(std::sqrt((S.row(i).transpose() - mean).squaredNorm() / n));
  }
  const double radius = deviations.empty() ? 0.0 : quantile(deviations, level);

  Eigen::VectorXd log_prior(mixture.candidates.size());
  for (size_t c = 0; c < mixture.candidates.size(); ++c)
    log_prior(static_cast<Eigen::Index>(c)) = mixture.candidates[c].log_prior;
  const double log_ml = logsumexp(mixture.log_ml + log_prior) - logsumexp(log_prior);
  return finish_metrics(mean, f0, radius, Q.row(0).transpose(), Q.row(1).transpose(), log_ml);
}

MetricsRecord run_replicate(const ExperimentConfig& config, int replicate_index) {
  MetricsRecord rec;
  rec.replicate = replicate_index;
  const uint64_t rep_seed =
      derive_seed(config.master_seed, "replicate", static_cast<uint64_t>(replicate_index));
  rec.seed = rep_seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    ScenarioConfig sc = config.scenario;
    sc.seed = rep_seed;
    if (sc.design == DesignKind::Demand) {
      const ExoDataset data = generate_demand(sc);
      const Eigen::MatrixXd x_train = data.stage2.x_o;
      const KernelSpec k_xo = resolve_second_stage(config, x_train, std::nullopt, 1.0,
                                                   derive_seed(rep_seed, "second-stage"));
      const ExoEstimator est = fit_exo(data, k_xo, config.m, config.oracle, config.theta,
                                       derive_seed(rep_seed, "exo"));
      const Eigen::VectorXd pred = predict_exo(est, data.test_p, data.test_w);
      Eigen::VectorXd f0(data.test_p.size());
      for (Eigen::Index i = 0; i < f0.size(); ++i)
        f0(i) = data.f0(data.test_p(i), data.test_w(i, 0), data.test_w(i, 1));
      rec.test_mse = (pred - f0).squaredNorm() / static_cast<double>(f0.size());
    } else {
      const IVDataset data = generate_main(sc);
      const KernelSpec second =
          resolve_second_stage(config, data, derive_seed(rep_seed, "second-stage"));
      KIVConfig kcfg = config.kiv;
      kcfg.second_stage = second;
      kcfg.seed = derive_seed(rep_seed, "kiv");
      const uint64_t metrics_seed = derive_seed(rep_seed, "metrics");
      if (config.first_stage == "rbf") {
        const KernelSpec kz{KernelFamily::RBF,
                            median_heuristic(data.stage2.z, derive_seed(rep_seed, "median-z")),
                            1.0};
        const QuasiPosterior post = fit_quasi_posterior_gram(data.stage2, kz, kcfg);
        copy_metrics(rec, evaluate_metrics(post, data, config.levels, config.posterior_samples,
                                           metrics_seed));
      } else {
        const LearnedFeatureMap map =
            build_learned_feature_map(data.stage1, second, config.m, config.oracle,
                                      derive_seed(rep_seed, "map"), {}, &data.stage2);
        if (config.bma_grid) {
          std::vector<BMACandidate> candidates;
          for (double sigma : config.bma_grid->sigmas)
            for (double mult : config.bma_grid->bandwidth_multipliers) {
              KIVConfig c2 = kcfg;
              c2.second_stage.bandwidth = second.bandwidth * mult;
              c2.second_stage.variance = sigma * sigma;
              BMACandidate cand;
              cand.posterior =
                  std::make_shared<QuasiPosterior>(fit_quasi_posterior(data.stage2, map, c2));
              cand.log_prior = bma_candidate_log_prior(sigma, c2.second_stage.bandwidth);
              cand.label = {{"sigma", sigma}, {"h", c2.second_stage.bandwidth}};
              candidates.push_back(std::move(cand));
            }
          const BMAResult mix = bma_combine(std::move(candidates));
          copy_metrics(rec, evaluate_metrics(mix, data, config.levels, config.posterior_samples,
                                             metrics_seed));
        } else {
          const QuasiPosterior post = fit_quasi_posterior(data.stage2, map, kcfg);
          copy_metrics(rec, evaluate_metrics(post, data, config.levels, config.posterior_samples,
                                             metrics_seed));
        }
      }
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  rec.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<MetricsRecord> run_experiment(const ExperimentConfig& config) {
  config.validate();
  namespace fs = std::filesystem;
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  if (!csv) throw std::runtime_error("cannot open " + (dir / "metrics.csv").string());
  csv << kMetricsHeader << "\n" << std::flush;
  std::ofstream errlog;

  std::vector<MetricsRecord> records(static_cast<size_t>(config.replicates));
  auto emit = [&](const MetricsRecord& r) {
    csv << metrics_csv_row(r) << "\n" << std::flush;
    if (!r.error.empty()) {
      if (!errlog.is_open()) errlog.open(dir / "errors.log");
      errlog << "replicate " << r.replicate << ": " << r.error << "\n" << std::flush;
    }
  };

  if (config.threads <= 1) {
    for (int i = 0; i < config.replicates; ++i) {
      records[static_cast<size_t>(i)] = run_replicate(config, i);
      emit(records[static_cast<size_t>(i)]);
    }
  } else {
    std::mutex mu;
    std::atomic<int> next{0};
    std::map<int, MetricsRecord> finished;
    int write_next = 0;
    auto worker = [&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= config.replicates) return;
        MetricsRecord r = run_replicate(config, i);
        const std::lock_guard<std::mutex> lock(mu);
        records[static_cast<size_t>(i)] = r;
        finished.emplace(i, std::move(r));
        while (!finished.empty() && finished.begin()->first == write_next) {
          emit(finished.begin()->second);
          finished.erase(finished.begin());
          ++write_next;
        }
      }
    };
    std::vector<std::thread> pool;
    const int t = std::min(config.threads, config.replicates);
    pool.reserve(static_cast<size_t>(t));
    for (int k = 0; k < t; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::ofstream summary(dir / "summary.json");
  summary << aggregate_metrics(records).dump(2) << "\n";
  write_metric_plots(config.output_dir, records);
  return records;
}

nlohmann::json aggregate_metrics(const std::vector<MetricsRecord>& records) {
  auto collect = [&](double MetricsRecord::*field) {
    std::vector<double> v;
    for (const auto& r : records)
      if (r.error.empty() && std::isfinite(r.*field)) v.push_back(r.*field);
    return v;
  };
  auto stats = [](const std::vector<double>& v) {
    nlohmann::json j{{"n", v.size()}};
    if (!v.empty()) {
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double sd = 0.0;
      if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
      j["mean"] = mean;
      j["sd"] = sd;
    }
    return j;
  };

  nlohmann::json out;
  out["replicates"] = records.size();
  out["errors"] =
      std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.error.empty(); });
  out["test_mse"] = stats(collect(&MetricsRecord::test_mse));
  out["cb_radius"] = stats(collect(&MetricsRecord::cb_radius));
  out["ci_coverage_avg"] = stats(collect(&MetricsRecord::ci_coverage_avg));
  out["log_ml"] = stats(collect(&MetricsRecord::log_ml));
  out["runtime_s"] = stats(collect(&MetricsRecord::runtime_s));

  int successes = 0, trials = 0;
  for (const auto& r : records)
    if (r.error.empty() && std::isfinite(r.cb_covered)) {
      ++trials;
      if (r.cb_covered > 0.5) ++successes;
    }
  nlohmann::json cov{{"successes", successes}, {"trials", trials}};
  if (trials > 0) {
    const auto [lo, hi] = wilson_interval(successes, trials);
    cov["rate"] = static_cast<double>(successes) / static_cast<double>(trials);
    cov["wilson_lo"] = lo;
    cov["wilson_hi"] = hi;
  }
  out["cb_coverage"] = cov;
  return out;
}

// --- Static SVG plots ---------------------------------------------------------

namespace {

std::string fmt_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::vector<std::pair<double, double>>& pts) {
  const double W = 640.0, H = 360.0, L = 64.0, R = 16.0, T = 32.0, B = 40.0;
  double x_lo = pts.front().first, x_hi = pts.front().first;
  double y_lo = pts.front().second, y_hi = pts.front().second;
  double mean = 0.0;
  for (const auto& [x, y] : pts) {
    x_lo = std::min(x_lo, x);
    x_hi = std::max(x_hi, x);
    y_lo = std::min(y_lo, y);
    y_hi = std::max(y_hi, y);
    mean += y;
  }
  mean /= static_cast<double>(pts.size());
  double sd = 0.0;
  if (pts.size() > 1) {
    for (const auto& [x, y] : pts) sd += (y - mean) * (y - mean);
    sd = std::sqrt(sd / static_cast<double>(pts.size() - 1));
  }
  if (x_hi - x_lo < 1e-12) {
    x_lo -= 0.5;
    x_hi += 0.5;
  }
  y_lo = std::min(y_lo, mean - sd);
  y_hi = std::max(y_hi, mean + sd);
  const double pad = std::max(0.05 * (y_hi - y_lo), 1e-9 + 0.05 * std::abs(y_hi));
  y_lo -= pad;
  y_hi += pad;
  auto sx = [&](double x) { return L + (x - x_lo) / (x_hi - x_lo) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y_lo) / (y_hi - y_lo) * (H - T - B); };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << L << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title
      << " (mean " << fmt_label(mean) << " +- sd " << fmt_label(sd) << ")</text>\n";
  // mean +- sd band and mean line
  out << "<rect x=\"" << sx(x_lo) << "\" y=\"" << sy(mean + sd) << "\" width=\""
      << sx(x_hi) - sx(x_lo) << "\" height=\"" << std::max(1.0, sy(mean - sd) - sy(mean + sd))
      << "\" fill=\"#cfe3f5\" opacity=\"0.7\"/>\n"
      << "<line x1=\"" << sx(x_lo) << "\" y1=\"" << sy(mean) << "\" x2=\"" << sx(x_hi)
      << "\" y2=\"" << sy(mean) << "\" stroke=\"#1f6fb2\" stroke-dasharray=\"6 4\"/>\n";
  // axes
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"4\" y=\"" << sy(y_hi) + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt_label(y_hi) << "</text>\n"
      << "<text x=\"4\" y=\"" << sy(y_lo) << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt_label(y_lo) << "</text>\n"
      << "<text x=\"" << L << "\" y=\"" << H - 8
      << "\" font-family=\"sans-serif\" font-size=\"11\">replicate " << fmt_label(x_lo)
      << "</text>\n"
      << "<text x=\"" << W - R - 80 << "\" y=\"" << H - 8
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_label(x_hi) << "</text>\n";
  // series
  out << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
  for (const auto& [x, y] : pts) out << sx(x) << "," << sy(y) << " ";
  out << "\"/>\n";
  for (const auto& [x, y] : pts)
    out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3\" fill=\"#1f6fb2\"/>\n";
  out << "</svg>\n";
}

}  // namespace

void write_metric_plots(const std::string& dir, const std::vector<MetricsRecord>& records) {
  struct Metric {
    const char* name;
    double MetricsRecord::*field;
  };
  const Metric metrics[] = {
      {"test_mse", &MetricsRecord::test_mse},
      {"cb_radius", &MetricsRecord::cb_radius},
      {"cb_covered", &MetricsRecord::cb_covered},
      {"ci_coverage_avg", &MetricsRecord::ci_coverage_avg},
      {"log_ml", &MetricsRecord::log_ml},
      {"runtime_s", &MetricsRecord::runtime_s},
  };
  namespace fs = std::filesystem;
  for (const auto& metric : metrics) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : records)
      if (r.error.empty() && std::isfinite(r.*metric.field))
        pts.emplace_back(static_cast<double>(r.replicate), r.*metric.field);
    if (pts.empty()) continue;
    write_svg_plot((fs::path(dir) / ("plot_" + std::string(metric.name) + ".svg")).string(),
                   metric.name, pts);
  }
}

std::vector<FirstStageSweepRow> first_stage_sweep(const IVDataset& data,
                                                  const ExperimentConfig& config,
                                                  const std::vector<FirstStageArm>& arms, int m_v,
                                                  uint64_t seed) {
  if (arms.empty()) throw std::invalid_argument("first_stage_sweep: no arms");
  const KernelSpec second = resolve_second_stage(config, data, derive_seed(seed, "second-stage"));
  KIVConfig kcfg = config.kiv;
  kcfg.second_stage = second;
  kcfg.seed = derive_seed(seed, "kiv");
  const Eigen::VectorXd f0 = truth_on_grid(data);

  std::vector<FirstStageSweepRow> rows;
  rows.reserve(arms.size());
  for (size_t i = 0; i < arms.size(); ++i) {
    FirstStageSweepRow row;
    row.label = arms[i].label;
    try {
      const LearnedFeatureMap map =
          build_learned_feature_map(data.stage1, second, arms[i].m, arms[i].oracle,
                                    derive_seed(seed, "arm", i), {}, &data.stage2);
      // one shared task seed keeps the statistic comparable across arms
      row.statistic =
          first_stage_validation(map, data.stage2, second, m_v, derive_seed(seed, "validation"))
              .total;
      const QuasiPosterior post = fit_quasi_posterior(data.stage2, map, kcfg);
      row.counterfactual_mse = (posterior_mean(post, data.test_x) - f0).squaredNorm() /
                               static_cast<double>(f0.size());
      row.log_ml = log_marginal_quasi_likelihood(post);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace learned_iv
