#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "apc/sim_study.hpp"
#include "helpers.hpp"

using apc::aggregate_truth;
using apc::detrended_curve;
using apc::errc;
using apc::generate_replicate;
using apc::SimConfig;
using apc::SmoothSpec;
using apc::TruthSpec;
using apc_test::code_of;

namespace {

// Small grid so the full study fits in a unit test: 30 single-year ages
// aggregated to six 5-year bands, ten periods, two held out.
SimConfig small_config() {
  SimConfig cfg;
  cfg.age_min = 10;
  cfg.age_max = 39;
  cfg.period_min = 2000;
  cfg.period_max = 2009;
  cfg.train_through = 2007;
  cfg.seed = 3;
  cfg.replicates = 2;
  return cfg;
}

}  // namespace

TEST_CASE("detrended curves carry no level and no trend") {
  for (auto kind : {SmoothSpec::Kind::bump, SmoothSpec::Kind::sigmoid,
                    SmoothSpec::Kind::sine, SmoothSpec::Kind::ramp,
                    SmoothSpec::Kind::kink}) {
    SmoothSpec s;
    s.kind = kind;
    s.amplitude = 0.65;
    s.p1 = 0.4;
    s.p2 = 0.2;
    for (int m : {5, 21, 75}) {
      const Eigen::VectorXd g = detrended_curve(s, m);
      REQUIRE(g.size() == m);
      double sum = 0.0, trend = 0.0;
      for (int i = 0; i < m; ++i) {
        sum += g[i];
        trend += g[i] * i;
      }
      REQUIRE(std::fabs(sum) < 1e-10);
      REQUIRE(std::fabs(trend) < 1e-8);
      REQUIRE(g.cwiseAbs().maxCoeff() == Catch::Approx(0.65).margin(1e-12));
    }
  }
  SmoothSpec zero;
  zero.amplitude = 0.4;
  REQUIRE(detrended_curve(zero, 11).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(code_of([] { return detrended_curve(SmoothSpec{}, 2); }) ==
          errc::too_few_levels);
}

TEST_CASE("truth surface separates intercept, slopes and curvature") {
  SimConfig cfg = small_config();
  TruthSpec flat;
  flat.age_curve.amplitude = 0.0;
  flat.period_curve.amplitude = 0.0;
  flat.period_kink.amplitude = 0.0;
  flat.period_break.amplitude = 0.0;
  flat.cohort_curve.amplitude = 0.0;

  const Eigen::MatrixXd eta = apc::truth_eta_single(flat, cfg);
  REQUIRE(eta.rows() == 30);
  REQUIRE(eta.cols() == 10);
  // Pure slopes: exact first differences along each axis.
  for (int a = 0; a + 1 < 30; ++a)
    REQUIRE(eta(a + 1, 3) - eta(a, 3) == Catch::Approx(flat.age_slope).margin(1e-12));
  for (int p = 0; p + 1 < 10; ++p)
    REQUIRE(eta(4, p + 1) - eta(4, p) ==
            Catch::Approx(flat.period_slope).margin(1e-12));
  // Centre of the grid sits at the intercept.
  double mean = eta.mean();
  REQUIRE(mean == Catch::Approx(flat.intercept).margin(1e-9));

  // With curvature on, removing the flat part leaves a bounded residual that
  // is exactly additive in the three scales; the period scale itself sums
  // its bend, kink and post-break components.
  TruthSpec full;
  const Eigen::MatrixXd eta_full = apc::truth_eta_single(full, cfg);
  const Eigen::VectorXd fa = detrended_curve(full.age_curve, 30);
  const Eigen::VectorXd fp = detrended_curve(full.period_curve, 10) +
                             detrended_curve(full.period_kink, 10) +
                             detrended_curve(full.period_break, 10);
  const Eigen::VectorXd fc = detrended_curve(full.cohort_curve, 39);
  for (int a = 0; a < 30; ++a)
    for (int p = 0; p < 10; ++p)
      REQUIRE(eta_full(a, p) - eta(a, p) ==
              Catch::Approx(fa[a] + fp[p] + fc[29 - a + p]).margin(1e-12));
}

TEST_CASE("aggregated truth is the log of the exposure-weighted mean rate") {
  Eigen::MatrixXd eta(2, 1), expo(2, 1);
  eta << 0.0, std::log(3.0);
  expo << 1.0, 1.0;
  REQUIRE(aggregate_truth(eta, expo, 2)(0, 0) == Catch::Approx(std::log(2.0)).margin(1e-14));
  // Unequal exposures weight the rates.
  expo << 3.0, 1.0;
  REQUIRE(aggregate_truth(eta, expo, 2)(0, 0) ==
          Catch::Approx(std::log((3.0 * 1.0 + 1.0 * 3.0) / 4.0)).margin(1e-14));
  // Width one is the identity.
  REQUIRE((aggregate_truth(eta, expo, 1) - eta).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(code_of([&] { return aggregate_truth(eta, expo, 3); }) ==
          errc::indivisible_span);
  REQUIRE(code_of([&] {
            return aggregate_truth(eta, Eigen::MatrixXd::Ones(3, 1), 2);
          }) == errc::shape_mismatch);
}

TEST_CASE("replicates are deterministic in the seed and distinct across indices") {
  const SimConfig cfg = small_config();
  const TruthSpec truth;
  const apc::Replicate r1 = generate_replicate(truth, cfg, 0);
  const apc::Replicate r2 = generate_replicate(truth, cfg, 0);
  const apc::Replicate r3 = generate_replicate(truth, cfg, 1);

  REQUIRE((r1.data.counts - r2.data.counts).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((r1.data.counts - r3.data.counts).cwiseAbs().maxCoeff() > 0.0);

  REQUIRE(r1.data.n_ages() == 6);
  REQUIRE(r1.data.n_periods() == 10);
  REQUIRE(r1.data.ages.front().label == "10-14");
  REQUIRE(r1.data.ages.back().label == "35-39");
  REQUIRE(r1.data.exposures.minCoeff() == 5.0 * cfg.exposure);
  REQUIRE(r1.eta_true.rows() == 6);
  REQUIRE(r1.eta_true.cols() == 10);

  // Counts look like the truth: empirical log rates sit near eta_true.
  double worst = 0.0;
  for (int a = 0; a < 6; ++a)
    for (int p = 0; p < 10; ++p) {
      REQUIRE(r1.data.counts(a, p) >= 0.0);
      REQUIRE(r1.data.counts(a, p) == std::floor(r1.data.counts(a, p)));
      const double emp = std::log((r1.data.counts(a, p) + 0.5) /
                                  r1.data.exposures(a, p));
      worst = std::max(worst, std::fabs(emp - r1.eta_true(a, p)));
    }
  // Aggregated means are tens of counts, so log rates scatter by ~1/sqrt(30).
  REQUIRE(worst < 1.0);
  const double mean_count = r1.data.counts.mean();
  REQUIRE(mean_count > 10.0);
  REQUIRE(mean_count < 500.0);
}

TEST_CASE("default engine list covers three bases and three prior scales") {
  const auto engines = apc::default_engines();
  REQUIRE(engines.size() == 6u);
  REQUIRE(engines[0].name == "spline-crs");
  REQUIRE(engines[1].name == "spline-bs");
  REQUIRE(engines[2].name == "spline-tprs");
  REQUIRE(engines[3].name == "rw2-u1");
  REQUIRE(engines[4].name == "rw2-u3");
  REQUIRE(engines[5].name == "rw2-u6");
  for (int i = 0; i < 3; ++i) {
    REQUIRE(engines[static_cast<std::size_t>(i)].mode == apc::SmoothingMode::spline);
    REQUIRE(engines[static_cast<std::size_t>(i)].basis.knots ==
            std::array<int, 3>{10, 10, 12});
  }
  REQUIRE(engines[3].prior.U == 1.0);
  REQUIRE(engines[4].prior.U == 3.0);
  REQUIRE(engines[5].prior.U == 6.0);
  for (int i = 3; i < 6; ++i)
    REQUIRE(engines[static_cast<std::size_t>(i)].prior.alpha == 0.01);
}

TEST_CASE("study runs are schedule-independent and summarised per engine") {
  const SimConfig cfg = small_config();
  const TruthSpec truth;
  std::vector<apc::EngineConfig> engines;
  {
    apc::EngineConfig e;
    e.name = "spline-crs";
    e.mode = apc::SmoothingMode::spline;
    e.basis.family = apc::SplineFamily::crs;
    e.basis.knots = {5, 5, 8};
    engines.push_back(e);
    apc::EngineConfig b;
    b.name = "rw2-u3";
    b.mode = apc::SmoothingMode::gmrf;
    b.prior = apc::PCPrior{3.0, 0.01};
    engines.push_back(b);
  }

  const apc::StudyResult serial = apc::run_study(truth, cfg, engines, 1);
  const apc::StudyResult pooled = apc::run_study(truth, cfg, engines, 2);
  REQUIRE(serial.rows.size() == 4u);
  REQUIRE(pooled.rows.size() == 4u);
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    const auto& a = serial.rows[i];
    const auto& b = pooled.rows[i];
    REQUIRE(a.engine == b.engine);
    REQUIRE(a.replicate == b.replicate);
    REQUIRE_FALSE(a.failed);
    REQUIRE_FALSE(b.failed);
    REQUIRE(a.scores.estimation.has_value());
    REQUIRE(a.scores.prediction.has_value());
    REQUIRE(a.scores.estimation->mae == b.scores.estimation->mae);
    REQUIRE(a.scores.prediction->interval_score == b.scores.prediction->interval_score);
  }

  const auto summary = serial.summarize(engines);
  REQUIRE(summary.size() == 2u);
  for (const auto& s : summary) {
    REQUIRE(s.n_ok == 2);
    REQUIRE(s.n_failed == 0);
    REQUIRE(s.estimation.mae > 0.0);
    REQUIRE(s.prediction.mean_width > 0.0);
    REQUIRE(s.prediction.coverage >= 0.0);
    REQUIRE(s.prediction.coverage <= 1.0);
  }
  // The summary means match a direct average of the member rows.
  double mae0 = 0.0;
  for (const auto& r : serial.rows)
    if (r.engine == "spline-crs") mae0 += r.scores.estimation->mae / 2.0;
  REQUIRE(summary[0].estimation.mae == Catch::Approx(mae0).margin(1e-15));
}

TEST_CASE("engine failures are recorded, not thrown") {
  const SimConfig cfg = small_config();
  const TruthSpec truth;
  const apc::Replicate rep = generate_replicate(truth, cfg, 0);
  apc::EngineConfig bad;
  bad.name = "spline-overknotted";
  bad.mode = apc::SmoothingMode::spline;
  bad.basis.knots = {40, 40, 40};  // more knots than age levels
  const apc::StudyRow row = apc::run_study_cell(rep, bad, cfg, 0);
  REQUIRE(row.failed);
  REQUIRE_FALSE(row.error.empty());
  const apc::StudyResult res{{row}};
  const auto summary = res.summarize({bad});
  REQUIRE(summary[0].n_ok == 0);
  REQUIRE(summary[0].n_failed == 1);
}
