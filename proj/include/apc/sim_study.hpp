#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "apc/assessment.hpp"
#include "apc/bayes_fitter.hpp"
#include "apc/dataset.hpp"
#include "apc/freq_fitter.hpp"
#include "apc/rng.hpp"

namespace apc {

// A smooth shape on [0,1], detrended and rescaled before use so it carries
// curvature only: no level, no linear trend.
struct SmoothSpec {
  enum class Kind { bump, sigmoid, sine, ramp, kink, zero };
  Kind kind = Kind::zero;
  double amplitude = 0.0;  // max absolute value after detrending
  double p1 = 0.5;         // bump/sigmoid centre, sine frequency, ramp onset
  double p2 = 0.15;        // bump/sigmoid width, sine phase, ramp scale

  double raw(double u) const {
    switch (kind) {
      case Kind::bump: {
        const double z = (u - p1) / p2;
        return std::exp(-0.5 * z * z);
      }
      case Kind::sigmoid:
        return 1.0 / (1.0 + std::exp(-(u - p1) / p2));
      case Kind::sine:
        return std::sin(2.0 * 3.14159265358979323846 * p1 * u + p2);
      case Kind::ramp: {
        // Quadratic departure switching on at p1: zero (and C1) before the
        // onset, growing like ((u - p1) / p2)^2 after it.
        const double z = (u - p1) / p2;
        return z > 0.0 ? z * z : 0.0;
      }
      case Kind::kink:
        // Piecewise-linear tent: a slope change concentrated at p1.
        return std::abs(u - p1);
      case Kind::zero:
        return 0.0;
    }
    return 0.0;
  }
};

// Evaluates the shape on m equally spaced positions, removes the
// least-squares affine component, and rescales to the requested amplitude.
// Exactly orthogonal to {1, t} on the evaluation grid by construction.
inline Eigen::VectorXd detrended_curve(const SmoothSpec& spec, int m) {
  require(m >= 3, errc::too_few_levels, "detrended curve needs at least 3 points");
  Eigen::VectorXd g(m);
  for (int i = 0; i < m; ++i)
    g[i] = spec.raw(static_cast<double>(i) / static_cast<double>(m - 1));
  Eigen::MatrixXd T(m, 2);
  T.col(0).setOnes();
  for (int i = 0; i < m; ++i) T.col(1)[i] = static_cast<double>(i);
  g -= T * (T.colPivHouseholderQr().solve(g));
  const double mx = g.cwiseAbs().maxCoeff();
  if (spec.amplitude == 0.0 || mx < 1e-12) return Eigen::VectorXd::Zero(m);
  return g * (spec.amplitude / mx);
}

// True log-rate surface: intercept, one slope per age and period step, and a
// detrended curvature component on each of the three scales. The period
// component stacks a gentle sigmoid bend late in the window with a quadratic
// departure that switches on only after training ends: the shape real series
// take when a policy shift bends a trend inside the window and an external
// event breaks it after the window closes. An optional slope kink is
// available for configs that want a rougher in-sample period path.
struct TruthSpec {
  double intercept = -11.3;
  double age_slope = 0.04;      // per single-year age
  double period_slope = -0.015; // per period
  SmoothSpec age_curve{SmoothSpec::Kind::bump, 0.65, 0.35, 0.14};
  SmoothSpec period_curve{SmoothSpec::Kind::sigmoid, 0.22, 0.80, 0.18};
  SmoothSpec period_kink{SmoothSpec::Kind::zero, 0.0, 0.45, 0.15};
  SmoothSpec period_break{SmoothSpec::Kind::ramp, 0.145, 0.90, 0.10};
  SmoothSpec cohort_curve{SmoothSpec::Kind::sine, 0.65, 1.25, 0.70};
};

struct SimConfig {
  int age_min = 10, age_max = 84;  // single-year ages, inclusive
  long long period_min = 2000, period_max = 2020;
  double exposure = 750000.0;  // per single-year cell
  int agg_width = 5;
  long long train_through = 2017;
  std::uint64_t seed = 1u;
  int replicates = 20;

  int n_ages() const { return age_max - age_min + 1; }
  int n_periods() const { return static_cast<int>(period_max - period_min + 1); }
  int n_cohorts() const { return n_ages() + n_periods() - 1; }  // single-year, R = 1
};

// True eta on the single-year grid.
inline Eigen::MatrixXd truth_eta_single(const TruthSpec& t, const SimConfig& cfg) {
  const int I = cfg.n_ages(), J = cfg.n_periods(), K = cfg.n_cohorts();
  require(I >= 3 && J >= 3, errc::too_few_levels, "simulation grid too small");
  const Eigen::VectorXd fa = detrended_curve(t.age_curve, I);
  const Eigen::VectorXd fp = detrended_curve(t.period_curve, J) +
                             detrended_curve(t.period_kink, J) +
                             detrended_curve(t.period_break, J);
  const Eigen::VectorXd fc = detrended_curve(t.cohort_curve, K);
  Eigen::MatrixXd eta(I, J);
  for (int a = 0; a < I; ++a)
    for (int p = 0; p < J; ++p) {
      const int c = (I - 1 - a) + p;  // 0-based cohort index, R = 1
      eta(a, p) = t.intercept + t.age_slope * (a - 0.5 * (I - 1)) +
                  t.period_slope * (p - 0.5 * (J - 1)) + fa[a] + fp[p] + fc[c];
    }
  return eta;
}

// Exposure-weighted aggregation of a true log-rate surface to wider age bins:
// log of the mean rate, matching how counts aggregate in expectation.
inline Eigen::MatrixXd aggregate_truth(const Eigen::MatrixXd& eta_single,
                                       const Eigen::MatrixXd& exposure_single,
                                       int width) {
  const int I = static_cast<int>(eta_single.rows());
  const int J = static_cast<int>(eta_single.cols());
  require(exposure_single.rows() == I && exposure_single.cols() == J,
          errc::shape_mismatch, "exposure grid does not match eta grid");
  require(width >= 1 && I % width == 0, errc::indivisible_span,
          "aggregation width does not divide the age span");
  Eigen::MatrixXd out(I / width, J);
  for (int g = 0; g < I / width; ++g)
    for (int p = 0; p < J; ++p) {
      double num = 0.0, den = 0.0;
      for (int k = 0; k < width; ++k) {
        num += exposure_single(g * width + k, p) * std::exp(eta_single(g * width + k, p));
        den += exposure_single(g * width + k, p);
      }
      out(g, p) = std::log(num / den);
    }
  return out;
}

struct Replicate {
  ApcDataset data;             // aggregated to agg_width age bins
  Eigen::MatrixXd eta_true;    // aggregated truth, same grid as data
};

// Draws one replicate: Poisson counts on the single-year grid, one
// independent RNG stream per cell keyed by (seed, replicate, cell), then
// aggregation to the analysis bins.
inline Replicate generate_replicate(const TruthSpec& t, const SimConfig& cfg, int rep) {
  const int I = cfg.n_ages(), J = cfg.n_periods();
  const Eigen::MatrixXd eta = truth_eta_single(t, cfg);
  Eigen::MatrixXd counts(I, J);
  Eigen::MatrixXd expo = Eigen::MatrixXd::Constant(I, J, cfg.exposure);
  for (int a = 0; a < I; ++a)
    for (int p = 0; p < J; ++p) {
      CounterRng rng(cfg.seed, static_cast<std::uint64_t>(rep),
                     static_cast<std::uint64_t>(a) * 4096u + static_cast<std::uint64_t>(p));
      counts(a, p) = static_cast<double>(rng.poisson(cfg.exposure * std::exp(eta(a, p))));
    }
  std::vector<AgeGroup> ages(static_cast<std::size_t>(I));
  for (int a = 0; a < I; ++a) {
    ages[static_cast<std::size_t>(a)].lower = cfg.age_min + a;
    ages[static_cast<std::size_t>(a)].upper = cfg.age_min + a;
    ages[static_cast<std::size_t>(a)].label = std::to_string(cfg.age_min + a);
  }
  std::vector<long long> periods(static_cast<std::size_t>(J));
  for (int p = 0; p < J; ++p) periods[static_cast<std::size_t>(p)] = cfg.period_min + p;
  const ApcDataset single = ApcDataset::from_parts(std::move(ages), std::move(periods),
                                                   std::move(counts), std::move(expo));
  Replicate r{single.aggregate_ages(cfg.agg_width),
              aggregate_truth(eta, Eigen::MatrixXd::Constant(I, J, cfg.exposure),
                              cfg.agg_width)};
  return r;
}

// One smoother configuration entered in the study.
struct EngineConfig {
  std::string name;
  SmoothingMode mode = SmoothingMode::spline;
  BasisSpec basis;      // spline engines
  PCPrior prior;        // rw2 engines
};

// The six standard contenders: three spline bases and three PC-prior scales.
inline std::vector<EngineConfig> default_engines() {
  std::vector<EngineConfig> v;
  for (SplineFamily f : {SplineFamily::crs, SplineFamily::bs, SplineFamily::tprs}) {
    EngineConfig e;
    e.name = std::string("spline-") + family_name(f);
    e.mode = SmoothingMode::spline;
    e.basis.family = f;
    e.basis.knots = {10, 10, 12};
    v.push_back(e);
  }
  for (double U : {1.0, 3.0, 6.0}) {
    EngineConfig e;
    e.name = "rw2-u" + std::to_string(static_cast<int>(U));
    e.mode = SmoothingMode::gmrf;
    e.prior = PCPrior{U, 0.01};
    v.push_back(e);
  }
  return v;
}

struct StudyRow {
  int replicate = 0;
  std::string engine;
  bool failed = false;
  std::string error;
  FitScores scores;
};

struct EngineSummary {
  std::string engine;
  int n_ok = 0, n_failed = 0;
  ScoreReport estimation;  // element-wise means over successful replicates
  ScoreReport prediction;
};

struct StudyResult {
  std::vector<StudyRow> rows;  // ordered by (replicate, engine)

  std::vector<EngineSummary> summarize(const std::vector<EngineConfig>& engines) const {
    std::vector<EngineSummary> out;
    for (const auto& e : engines) {
      EngineSummary s;
      s.engine = e.name;
      s.estimation.window = "estimation";
      s.prediction.window = "prediction";
      for (const auto& r : rows) {
        if (r.engine != e.name) continue;
        if (r.failed || !r.scores.estimation || !r.scores.prediction) {
          ++s.n_failed;
          continue;
        }
        ++s.n_ok;
        for (int w = 0; w < 2; ++w) {
          const ScoreReport& src = w ? *r.scores.prediction : *r.scores.estimation;
          ScoreReport& dst = w ? s.prediction : s.estimation;
          dst.n_cells += src.n_cells;
          dst.mae += src.mae;
          dst.mse += src.mse;
          dst.interval_score += src.interval_score;
          dst.mean_width += src.mean_width;
          dst.coverage += src.coverage;
        }
      }
      if (s.n_ok > 0) {
        for (ScoreReport* r : {&s.estimation, &s.prediction}) {
          r->mae /= s.n_ok;
          r->mse /= s.n_ok;
          r->interval_score /= s.n_ok;
          r->mean_width /= s.n_ok;
          r->coverage /= s.n_ok;
        }
      }
      out.push_back(s);
    }
    return out;
  }
};

inline StudyRow run_study_cell(const Replicate& rep, const EngineConfig& engine,
                               const SimConfig& cfg, int rep_index) {
  StudyRow row;
  row.replicate = rep_index;
  row.engine = engine.name;
  try {
    const TruthSurface truth = TruthSurface::from_matrix(rep.data, rep.eta_true);
    std::vector<FitCell> cells;
    if (engine.mode == SmoothingMode::spline) {
      cells = fit_spline_model(rep.data, cfg.train_through, engine.basis).cells;
    } else {
      cells = fit_rw2_model(rep.data, cfg.train_through, engine.prior).cells;
    }
    row.scores = score_fit(cells, truth);
  } catch (const Error& err) {
    row.failed = true;
    row.error = err.what();
  }
  return row;
}

// Runs replicates x engines. Replicates are independent work units; with the
// counter RNG the data, and therefore every score, is identical no matter how
// many workers run them.
inline StudyResult run_study(const TruthSpec& truth, const SimConfig& cfg,
                             const std::vector<EngineConfig>& engines,
                             int n_threads = 0) {
  const int n_engines = static_cast<int>(engines.size());
  StudyResult res;
  res.rows.resize(static_cast<std::size_t>(cfg.replicates) * n_engines);
  if (n_threads <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    n_threads = hw ? static_cast<int>(hw) : 1;
  }
  n_threads = std::min(n_threads, cfg.replicates);

  auto worker = [&](int first, int stride) {
    for (int r = first; r < cfg.replicates; r += stride) {
      const Replicate rep = generate_replicate(truth, cfg, r);
      for (int e = 0; e < n_engines; ++e)
        res.rows[static_cast<std::size_t>(r) * n_engines + e] =
            run_study_cell(rep, engines[static_cast<std::size_t>(e)], cfg, r);
    }
  };
  if (n_threads <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t, n_threads);
    for (auto& t : pool) t.join();
  }
  return res;
}

}  // namespace apc
