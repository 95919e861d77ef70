#include <doctest.h>

#include <cmath>

#include "learned_iv/validation.hpp"
#include "support.hpp"

using namespace learned_iv;
using test_support::fn_regressor;
using test_support::random_mat;
using test_support::random_vec;

namespace {

LearnedFeatureMap zero_map(int m) {
  return make_feature_map_from_models(
      fn_regressor([](const Eigen::RowVectorXd&, int) { return 0.0; }, 1, m), nullptr);
}

LearnedFeatureMap smooth_map() {
  auto denoiser = fn_regressor(
      [](const Eigen::RowVectorXd& z, int j) { return std::sin((j + 1) * z(0)); }, 1, 3);
  auto h = fn_regressor([](const Eigen::RowVectorXd& z, int) { return 0.5 * z(0); }, 1, 1);
  return make_feature_map_from_models(denoiser, h);
}

Stage2Data identity_design(int n, uint64_t seed) {
  Stage2Data d;
  d.z = random_mat(n, 1, seed);
  d.x = d.z;
  Eigen::VectorXd noise = random_vec(n, seed + 1, -0.2, 0.2);
  d.y = (d.x.col(0).array().abs() + noise.array()).matrix();
  return d;
}

const KernelSpec kRBF{KernelFamily::RBF, 1.0, 1.0};

}  // namespace

TEST_SUITE("validation") {

TEST_CASE("report arithmetic, determinism, and seed sensitivity") {
  auto map = smooth_map();
  Stage2Data s2 = identity_design(80, 201);

  ValidationReport a = first_stage_validation(map, s2, kRBF, 10, 42);
  ValidationReport b = first_stage_validation(map, s2, kRBF, 10, 42);
  CHECK(a.task_generalization_mse == b.task_generalization_mse);
  CHECK(a.reduced_form_mse == b.reduced_form_mse);
  CHECK(a.total == b.total);

  CHECK(a.task_generalization_mse >= 0.0);
  CHECK(a.reduced_form_mse >= 0.0);
  CHECK(a.total == a.task_generalization_mse + a.reduced_form_mse);
  CHECK(a.total >= a.task_generalization_mse);
  CHECK(a.total >= a.reduced_form_mse);
  CHECK(a.m_v == 10);
  CHECK(a.seed == 42);

  ValidationReport c = first_stage_validation(map, s2, kRBF, 10, 43);
  CHECK(c.total != a.total);

  nlohmann::json j = a;
  CHECK(j.at("total").get<double>() == a.total);
  CHECK(j.at("m_v").get<int>() == 10);
}

TEST_CASE("zero feature map scores near the held-out variance") {
  // All features vanish, so the centered ridge predicts the training mean of
  // each target; the reduced-form term lands near var(y), not near E[y^2].
  Stage2Data s2;
  s2.z = random_mat(200, 1, 211);
  s2.x = random_mat(200, 1, 212);
  s2.y = random_vec(200, 213, 2.0, 4.0);  // mean 3, variance 1/3

  ValidationReport rep = first_stage_validation(zero_map(2), s2, kRBF, 10, 7);
  CHECK(rep.reduced_form_mse > 0.15);
  CHECK(rep.reduced_form_mse < 0.6);  // predicting zero would score near 9.33
  CHECK(rep.task_generalization_mse > 0.2);
  CHECK(rep.task_generalization_mse < 3.0);  // unit-variance GP tasks
}

TEST_CASE("constant regressors zero out the task term") {
  // Every fresh GP task is constant across rows, so the intercept nails it.
  Stage2Data s2;
  s2.z = random_mat(60, 1, 221);
  s2.x = Eigen::MatrixXd::Constant(60, 1, 0.7);
  s2.y = random_vec(60, 222, -1.0, 1.0);

  ValidationReport rep = first_stage_validation(smooth_map(), s2, kRBF, 5, 9);
  CHECK(rep.task_generalization_mse <= 1e-9);
  CHECK(rep.reduced_form_mse > 0.01);
  CHECK(rep.total == rep.task_generalization_mse + rep.reduced_form_mse);
}

TEST_CASE("informative features shrink the reduced-form term") {
  Stage2Data s2;
  s2.z = random_mat(200, 1, 231);
  s2.x = s2.z;
  s2.y = (s2.z.col(0).array().square()).matrix();  // noiseless quadratic

  // Features that span y (scaled to stay inside the clamp) versus none.
  auto good = make_feature_map_from_models(
      fn_regressor(
          [](const Eigen::RowVectorXd& z, int j) {
            return j == 0 ? z(0) * z(0) / 3.0 : z(0);
          },
          1, 2),
      nullptr);
  ValidationReport rep_good = first_stage_validation(good, s2, kRBF, 5, 3);
  ValidationReport rep_zero = first_stage_validation(zero_map(2), s2, kRBF, 5, 3);
  CHECK(rep_good.reduced_form_mse <= 0.02 * rep_zero.reduced_form_mse);
}

TEST_CASE("input validation") {
  auto map = smooth_map();
  Stage2Data s2 = identity_design(20, 241);
  CHECK_THROWS_AS(first_stage_validation(map, s2, kRBF, 0, 1), std::invalid_argument);

  Stage2Data tiny = identity_design(7, 242);
  CHECK_THROWS_AS(first_stage_validation(map, tiny, kRBF, 5, 1), std::invalid_argument);

  Stage2Data bad = s2;
  bad.x = random_mat(19, 1, 243);
  CHECK_THROWS_AS(first_stage_validation(map, bad, kRBF, 5, 1), std::invalid_argument);
}

TEST_CASE("second-stage selection by marginal likelihood") {
  auto map = smooth_map();
  Stage2Data s2 = identity_design(50, 251);
  KIVConfig cfg;
  cfg.lambda = 0.5;
  cfg.nu = 1.0;
  cfg.seed = 5;

  auto log_ml_of = [&](const KernelSpec& spec) {
    KIVConfig c = cfg;
    c.second_stage = spec;
    return log_marginal_quasi_likelihood(fit_quasi_posterior(s2, map, c));
  };

  SUBCASE("argmax matches a manual sweep and the table is aligned") {
    std::vector<KernelSpec> cands = {{KernelFamily::RBF, 0.5, 1.0},
                                     {KernelFamily::RBF, 1.0, 1.0},
                                     {KernelFamily::RBF, 2.0, 1.0}};
    auto sel = select_second_stage(cands, s2, map, cfg);
    REQUIRE(sel.table.size() == 3);
    double best_ml = -std::numeric_limits<double>::infinity();
    KernelSpec best{};
    for (size_t i = 0; i < cands.size(); ++i) {
      const double ml = log_ml_of(cands[i]);
      CHECK(sel.table[i].log_ml == doctest::Approx(ml).epsilon(1e-12));
      CHECK(sel.table[i].error.empty());
      if (ml > best_ml) {
        best_ml = ml;
        best = cands[i];
      }
    }
    CHECK(sel.best.bandwidth == best.bandwidth);

    std::vector<KernelSpec> reversed(cands.rbegin(), cands.rend());
    auto sel_rev = select_second_stage(reversed, s2, map, cfg);
    CHECK(sel_rev.best.bandwidth == sel.best.bandwidth);
  }

  SUBCASE("single and duplicate candidates") {
    std::vector<KernelSpec> one = {{KernelFamily::RBF, 1.5, 1.0}};
    CHECK(select_second_stage(one, s2, map, cfg).best.bandwidth == 1.5);

    std::vector<KernelSpec> dup = {{KernelFamily::RBF, 1.0, 1.0},
                                   {KernelFamily::RBF, 1.0, 1.0}};
    auto sel = select_second_stage(dup, s2, map, cfg);
    CHECK(sel.best.bandwidth == 1.0);
    CHECK(sel.table[0].log_ml == sel.table[1].log_ml);
  }

  SUBCASE("exact score ties break toward the smaller bandwidth") {
    // A linear kernel ignores its bandwidth, forcing an exact tie.
    std::vector<KernelSpec> cands = {{KernelFamily::Linear, 2.0, 1.0},
                                     {KernelFamily::Linear, 0.5, 1.0}};
    auto sel = select_second_stage(cands, s2, map, cfg);
    CHECK(sel.table[0].log_ml == sel.table[1].log_ml);
    CHECK(sel.best.bandwidth == 0.5);

    std::vector<KernelSpec> flipped = {cands[1], cands[0]};
    CHECK(select_second_stage(flipped, s2, map, cfg).best.bandwidth == 0.5);
  }

  SUBCASE("failing candidates are recorded; survivors win") {
    std::vector<KernelSpec> cands = {{KernelFamily::RBF, -1.0, 1.0},
                                     {KernelFamily::RBF, 1.0, 1.0}};
    auto sel = select_second_stage(cands, s2, map, cfg);
    CHECK_FALSE(sel.table[0].error.empty());
    CHECK(std::isnan(sel.table[0].log_ml));
    CHECK(sel.table[1].error.empty());
    CHECK(sel.best.bandwidth == 1.0);
  }

  SUBCASE("all candidates failing raises with the failure list") {
    std::vector<KernelSpec> cands = {{KernelFamily::RBF, -1.0, 1.0},
                                     {KernelFamily::RBF, 0.0, 1.0}};
    try {
      select_second_stage(cands, s2, map, cfg);
      FAIL("expected select_second_stage to throw");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("every candidate fit failed") != std::string::npos);
      CHECK(msg.find("bandwidth") != std::string::npos);
    }
  }

  SUBCASE("empty candidate list rejected") {
    CHECK_THROWS_AS(select_second_stage({}, s2, map, cfg), std::invalid_argument);
  }
}

}  // TEST_SUITE
