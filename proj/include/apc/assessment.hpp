#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "apc/common.hpp"
#include "apc/csv.hpp"
#include "apc/dataset.hpp"
#include "apc/fit_result.hpp"

namespace apc {

inline std::pair<double, double> mae_mse(const Eigen::VectorXd& estimate,
                                         const Eigen::VectorXd& truth) {
  require(estimate.size() == truth.size() && estimate.size() > 0, errc::shape_mismatch,
          "estimate and truth must have the same positive length");
  const Eigen::ArrayXd err = (estimate - truth).array();
  return {err.abs().mean(), err.square().mean()};
}

// The 95% interval score (alpha = 0.05) per cell:
//   (u - l) + (2/alpha) (l - t) [t < l] + (2/alpha) (t - u) [t > u].
// Values on the boundary are not penalised.
inline Eigen::VectorXd interval_score(const Eigen::VectorXd& lower,
                                      const Eigen::VectorXd& upper,
                                      const Eigen::VectorXd& truth,
                                      double alpha = 0.05) {
  require(alpha > 0.0 && alpha < 1.0, errc::bad_input, "alpha must be in (0,1)");
  require(lower.size() == upper.size() && lower.size() == truth.size() &&
              lower.size() > 0,
          errc::shape_mismatch, "interval and truth lengths disagree");
  Eigen::VectorXd s(lower.size());
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    require(lower[i] <= upper[i], errc::inverted_interval,
            "lower bound above upper bound at cell " + std::to_string(i));
    double v = upper[i] - lower[i];
    if (truth[i] < lower[i]) v += 2.0 / alpha * (lower[i] - truth[i]);
    if (truth[i] > upper[i]) v += 2.0 / alpha * (truth[i] - upper[i]);
    s[i] = v;
  }
  return s;
}

// Mean empirical coverage (boundary counts as covered) and mean width.
inline std::pair<double, double> coverage_width(const Eigen::VectorXd& lower,
                                                const Eigen::VectorXd& upper,
                                                const Eigen::VectorXd& truth) {
  require(lower.size() == upper.size() && lower.size() == truth.size() &&
              lower.size() > 0,
          errc::shape_mismatch, "interval and truth lengths disagree");
  double cov = 0.0, wid = 0.0;
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    require(lower[i] <= upper[i], errc::inverted_interval,
            "lower bound above upper bound at cell " + std::to_string(i));
    cov += (truth[i] >= lower[i] && truth[i] <= upper[i]) ? 1.0 : 0.0;
    wid += upper[i] - lower[i];
  }
  const double n = static_cast<double>(lower.size());
  return {cov / n, wid / n};
}

struct ScoreReport {
  std::string window;
  int n_cells = 0;
  double mae = 0.0, mse = 0.0;
  double interval_score = 0.0, mean_width = 0.0, coverage = 0.0;
};

inline ScoreReport score_window(const std::string& window, const Eigen::VectorXd& eta,
                                const Eigen::VectorXd& lower,
                                const Eigen::VectorXd& upper,
                                const Eigen::VectorXd& truth, double alpha = 0.05) {
  ScoreReport r;
  r.window = window;
  r.n_cells = static_cast<int>(eta.size());
  std::tie(r.mae, r.mse) = mae_mse(eta, truth);
  r.interval_score = interval_score(lower, upper, truth, alpha).mean();
  std::tie(r.coverage, r.mean_width) = coverage_width(lower, upper, truth);
  return r;
}

// Reference surface for scoring, keyed by (age label, period). Built either
// from a dataset's observed log rates or from a table of known log rates.
struct TruthSurface {
  std::map<std::pair<std::string, long long>, double> eta;

  static TruthSurface from_dataset(const ApcDataset& data, double half = 0.5) {
    TruthSurface t;
    const Eigen::MatrixXd lr = data.log_rates(half);
    for (int a = 0; a < data.n_ages(); ++a)
      for (int p = 0; p < data.n_periods(); ++p)
        t.eta[{data.ages[static_cast<std::size_t>(a)].label,
               data.periods[static_cast<std::size_t>(p)]}] = lr(a, p);
    return t;
  }

  static TruthSurface from_matrix(const ApcDataset& grid, const Eigen::MatrixXd& eta_true) {
    require(eta_true.rows() == grid.n_ages() && eta_true.cols() == grid.n_periods(),
            errc::shape_mismatch, "truth matrix does not match the grid");
    TruthSurface t;
    for (int a = 0; a < grid.n_ages(); ++a)
      for (int p = 0; p < grid.n_periods(); ++p)
        t.eta[{grid.ages[static_cast<std::size_t>(a)].label,
               grid.periods[static_cast<std::size_t>(p)]}] = eta_true(a, p);
    return t;
  }

  // Columns age, period, eta_true.
  static TruthSurface from_csv(const std::string& path) {
    const CsvTable tab = read_csv(path);
    const int ca = tab.require_column("age", path);
    const int cp = tab.require_column("period", path);
    const int ce = tab.require_column("eta_true", path);
    TruthSurface t;
    for (const auto& r : tab.rows) {
      const AgeGroup g = parse_age_group(r[static_cast<std::size_t>(ca)]);
      const long long period = parse_int(r[static_cast<std::size_t>(cp)], path + ": period");
      t.eta[{g.label, period}] = parse_double(r[static_cast<std::size_t>(ce)], path + ": eta_true");
    }
    return t;
  }

  double at(const std::string& age_label, long long period) const {
    const auto it = eta.find({age_label, period});
    require(it != eta.end(), errc::grid_mismatch,
            "no truth value for cell (" + age_label + ", " + std::to_string(period) + ")");
    return it->second;
  }
};

struct FitScores {
  std::optional<ScoreReport> estimation;
  std::optional<ScoreReport> prediction;
};

// Scores the two windows of a fitted surface against a truth surface on the
// log-rate scale. Missing truth cells are an error; an absent window yields
// no report for it.
inline FitScores score_fit(const std::vector<FitCell>& cells, const TruthSurface& truth,
                           double alpha = 0.05) {
  FitScores out;
  for (int pass = 0; pass < 2; ++pass) {
    const bool pred = pass == 1;
    std::vector<double> e, l, u, t;
    for (const auto& c : cells) {
      if (c.prediction != pred) continue;
      e.push_back(c.eta);
      l.push_back(c.lower);
      u.push_back(c.upper);
      t.push_back(truth.at(c.age_label, c.period));
    }
    if (e.empty()) continue;
    const auto n = static_cast<Eigen::Index>(e.size());
    const ScoreReport r = score_window(
        pred ? "prediction" : "estimation",
        Eigen::Map<const Eigen::VectorXd>(e.data(), n),
        Eigen::Map<const Eigen::VectorXd>(l.data(), n),
        Eigen::Map<const Eigen::VectorXd>(u.data(), n),
        Eigen::Map<const Eigen::VectorXd>(t.data(), n), alpha);
    (pred ? out.prediction : out.estimation) = r;
  }
  return out;
}

}  // namespace apc
