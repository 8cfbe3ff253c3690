#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "apc/dataset.hpp"
#include "apc/design.hpp"
#include "apc/fit_result.hpp"
#include "apc/optim.hpp"

namespace apc {

struct PirlsOptions {
  int max_iter = 200;
  double dev_tol = 1e-9;   // relative deviance change
  double grad_tol = 1e-6;  // max-norm of the penalised score
  int max_halvings = 30;
};

// Penalised Poisson fit at fixed smoothing parameters. The penalty enters the
// objective as lambda_b * beta' S_b beta (no half), so the Newton Hessian is
// X'WX + 2P and Vb is its inverse.
struct PenalizedFit {
  Eigen::VectorXd beta;
  std::array<double, 3> lambda = {1.0, 1.0, 1.0};
  Eigen::MatrixXd Vb;
  double edf = 0.0;
  double deviance = 0.0;
  double gcv = 0.0;
  double penalized_loglik = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline Eigen::MatrixXd penalty_matrix(const ApcDesign& d,
                                      const std::array<double, 3>& lambda) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d.n_cols(), d.n_cols());
  for (int b = 0; b < 3; ++b) {
    const auto& blk = d.blocks[static_cast<std::size_t>(b)];
    require(lambda[static_cast<std::size_t>(b)] >= 0.0, errc::bad_input,
            "smoothing parameters must be non-negative");
    P.block(d.block_offset[static_cast<std::size_t>(b)],
            d.block_offset[static_cast<std::size_t>(b)], blk.n_cols(), blk.n_cols()) =
        lambda[static_cast<std::size_t>(b)] * blk.Sc;
  }
  return P;
}

inline double poisson_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    double t = y[i] > 0.0 ? y[i] * std::log(y[i] / mu[i]) : 0.0;
    dev += 2.0 * (t - (y[i] - mu[i]));
  }
  return dev;
}

}  // namespace detail

// Penalised iteratively reweighted least squares for the Poisson model with a
// log link and offset log(exposure). Newton steps with step halving; declared
// converged when the relative deviance change is below dev_tol and the
// penalised score has max-norm below grad_tol.
inline PenalizedFit pirls(const ApcDesign& design, const ApcDataset& train,
                          const std::array<double, 3>& lambda,
                          const PirlsOptions& opt = {},
                          const Eigen::VectorXd* warm_start = nullptr) {
  require(design.mode == SmoothingMode::spline, errc::bad_input,
          "pirls needs a spline design");
  const int n = design.n_rows();
  const int p = design.n_cols();
  require(train.n_ages() == design.I && train.n_periods() == design.J,
          errc::shape_mismatch, "dataset does not match the design grid");

  const Eigen::MatrixXd& X = design.model_matrix;
  Eigen::VectorXd y(n), offset(n);
  for (int i = 0; i < n; ++i) {
    const auto& c = design.cells[static_cast<std::size_t>(i)];
    y[i] = train.counts(c.a, c.p);
    offset[i] = std::log(train.exposures(c.a, c.p));
  }

  const Eigen::MatrixXd P = detail::penalty_matrix(design, lambda);

  PenalizedFit fit;
  fit.lambda = lambda;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  beta[0] = std::log(std::max(y.sum(), 0.5)) -
            std::log(train.exposures.sum());
  if (warm_start && warm_start->size() == p) beta = *warm_start;

  auto pen_loglik = [&](const Eigen::VectorXd& b, Eigen::VectorXd& eta,
                        Eigen::VectorXd& mu) {
    eta = offset + X * b;
    mu = eta.array().exp();
    if (!mu.allFinite()) return -std::numeric_limits<double>::infinity();
    const double ll = (y.array() * eta.array() - mu.array()).sum();
    return ll - b.dot(P * b);
  };

  Eigen::VectorXd eta, mu;
  double pll = pen_loglik(beta, eta, mu);
  if (!std::isfinite(pll)) {
    beta.setZero();
    beta[0] = std::log(std::max(y.sum(), 0.5)) - std::log(train.exposures.sum());
    pll = pen_loglik(beta, eta, mu);
    require(std::isfinite(pll), errc::diverged, "initial point not feasible");
  }
  double dev = detail::poisson_deviance(y, mu);

  Eigen::LDLT<Eigen::MatrixXd> H_ldlt;
  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    fit.iterations = iter;
    const Eigen::VectorXd grad = X.transpose() * (y - mu) - 2.0 * (P * beta);
    Eigen::MatrixXd H = X.transpose() * mu.asDiagonal() * X + 2.0 * P;
    H_ldlt.compute(H);
    require(H_ldlt.info() == Eigen::Success, errc::singular_system,
            "penalised Hessian factorisation failed");
    const Eigen::VectorXd step = H_ldlt.solve(grad);
    require(step.allFinite(), errc::singular_system,
            "penalised Newton step is not finite");

    double s = 1.0;
    bool accepted = false;
    Eigen::VectorXd beta_new, eta_new, mu_new;
    double pll_new = 0.0;
    for (int h = 0; h <= opt.max_halvings; ++h, s *= 0.5) {
      beta_new = beta + s * step;
      pll_new = pen_loglik(beta_new, eta_new, mu_new);
      if (std::isfinite(pll_new) && pll_new >= pll - 1e-12 * (std::fabs(pll) + 1.0)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No uphill step: treat as converged only if the score already vanishes.
      fit.converged = grad.cwiseAbs().maxCoeff() < opt.grad_tol;
      break;
    }
    const double dev_new = detail::poisson_deviance(y, mu_new);
    const double rel_change = std::fabs(dev - dev_new) / (std::fabs(dev_new) + 0.1);
    beta = beta_new;
    eta = eta_new;
    mu = mu_new;
    pll = pll_new;
    dev = dev_new;
    const Eigen::VectorXd grad_now = X.transpose() * (y - mu) - 2.0 * (P * beta);
    if (rel_change < opt.dev_tol && grad_now.cwiseAbs().maxCoeff() < opt.grad_tol) {
      fit.converged = true;
      break;
    }
  }
  require(mu.allFinite(), errc::diverged, "fitted means are not finite");

  const Eigen::MatrixXd XtWX = X.transpose() * mu.asDiagonal() * X;
  Eigen::MatrixXd H = XtWX + 2.0 * P;
  H_ldlt.compute(H);
  require(H_ldlt.info() == Eigen::Success, errc::singular_system,
          "penalised Hessian factorisation failed at the optimum");
  fit.Vb = H_ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  fit.edf = (fit.Vb * XtWX).trace();
  fit.beta = beta;
  fit.deviance = dev;
  fit.penalized_loglik = pll;
  const double denom = static_cast<double>(n) - fit.edf;
  fit.gcv = denom > 1e-8 ? static_cast<double>(n) * dev / (denom * denom)
                         : std::numeric_limits<double>::infinity();
  return fit;
}

// Generalised cross-validation profile over the three log smoothing
// parameters, minimised by Nelder-Mead from each start (all three blocks
// share a start value). Returns the refit at the best point found.
inline PenalizedFit select_lambda(const ApcDesign& design, const ApcDataset& train,
                                  const PirlsOptions& popt = {},
                                  const std::vector<double>& log_lambda_starts = {-2.0, 0.0, 2.0},
                                  int max_evals_per_start = 150) {
  Eigen::VectorXd warm;
  auto gcv_at = [&](const Eigen::VectorXd& loglam) {
    std::array<double, 3> lam;
    for (int b = 0; b < 3; ++b) {
      if (loglam[b] > 30.0 || loglam[b] < -30.0)
        return std::numeric_limits<double>::infinity();
      lam[static_cast<std::size_t>(b)] = std::exp(loglam[b]);
    }
    try {
      PirlsOptions inner = popt;
      const PenalizedFit f =
          pirls(design, train, lam, inner, warm.size() ? &warm : nullptr);
      warm = f.beta;
      return f.gcv;
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  bool found = false;
  Eigen::VectorXd best_x;
  double best_f = std::numeric_limits<double>::infinity();
  for (double s : log_lambda_starts) {
    NelderMeadOptions nopt;
    nopt.step = 1.0;
    nopt.max_evals = max_evals_per_start;
    nopt.ftol = 1e-7;
    nopt.xtol = 1e-4;
    const NelderMeadResult r = nelder_mead(gcv_at, Eigen::Vector3d::Constant(s), nopt);
    if (std::isfinite(r.f) && r.f < best_f) {
      best_f = r.f;
      best_x = r.x;
      found = true;
    }
  }
  require(found, errc::optim_failed, "no smoothing parameter start produced a finite GCV");

  std::array<double, 3> lam;
  for (int b = 0; b < 3; ++b) lam[static_cast<std::size_t>(b)] = std::exp(best_x[b]);
  return pirls(design, train, lam, popt, warm.size() ? &warm : nullptr);
}

// Point estimate and pointwise 95% band on the log-rate scale for arbitrary
// design rows: eta +- 1.96 * sqrt(diag(X Vb X')).
struct EtaIntervals {
  Eigen::VectorXd eta, se, lower, upper;
};

inline EtaIntervals spline_intervals(const PenalizedFit& fit, const Eigen::MatrixXd& X) {
  require(X.cols() == fit.Vb.rows(), errc::shape_mismatch,
          "design rows do not match the fitted coefficients");
  EtaIntervals out;
  out.eta = X * fit.beta;
  out.se.resize(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double v = X.row(i) * fit.Vb * X.row(i).transpose();
    out.se[i] = std::sqrt(std::max(v, 0.0));
  }
  out.lower = out.eta - 1.96 * out.se;
  out.upper = out.eta + 1.96 * out.se;
  return out;
}

struct SplineFitModel {
  ApcDesign design;
  PenalizedFit fit;
  std::vector<FitCell> cells;  // training window then prediction window
  long long train_through = 0;
};

namespace detail {

inline std::vector<ApcDesign::CellKey> future_cell_keys(const ApcDesign& design,
                                                        const ApcDataset& full,
                                                        long long train_through,
                                                        int horizon) {
  std::vector<long long> future;
  for (long long p : full.periods)
    if (p > train_through) future.push_back(p);
  require(horizon <= static_cast<int>(future.size()), errc::missing_exposure,
          "forecast horizon " + std::to_string(horizon) + " exceeds the " +
              std::to_string(future.size()) + " periods with exposures beyond " +
              std::to_string(train_through));
  std::vector<ApcDesign::CellKey> keys;
  keys.reserve(static_cast<std::size_t>(design.I) * static_cast<std::size_t>(horizon));
  for (int a = 0; a < design.I; ++a)
    for (int h = 0; h < horizon; ++h) {
      ApcDesign::CellKey c;
      c.a = a;
      c.p = design.J + h;
      c.age_mid = design.age_mids[static_cast<std::size_t>(a)];
      c.period = static_cast<double>(future[static_cast<std::size_t>(h)]);
      c.cohort = static_cast<double>(design.R * (design.I - 1 - a) + design.J + h + 1);
      keys.push_back(c);
    }
  return keys;
}

}  // namespace detail

// Fits the spline engine on periods up to train_through and evaluates the
// fitted surface, with intervals, on every cell of the full dataset. Cells
// past the training window extend the period and cohort bases beyond their
// training range, which is exactly linear (crs, tprs) or the continued
// boundary cubic (bs).
inline SplineFitModel fit_spline_model(const ApcDataset& full, long long train_through,
                                       const BasisSpec& spec,
                                       SlopeDrop drop = SlopeDrop::cohort,
                                       const PirlsOptions& popt = {}) {
  require(train_through >= full.periods.front(), errc::bad_input,
          "train_through precedes the first period");
  SplineFitModel m;
  m.train_through = std::min<long long>(train_through, full.periods.back());
  const ApcDataset train = full.subset_periods(full.periods.front(), m.train_through);

  m.design = build_design(train, SmoothingMode::spline, spec, drop);
  m.fit = select_lambda(m.design, train, popt);

  const EtaIntervals est = spline_intervals(m.fit, m.design.model_matrix);
  for (int i = 0; i < m.design.n_rows(); ++i) {
    const auto& c = m.design.cells[static_cast<std::size_t>(i)];
    FitCell cell;
    cell.age_label = full.ages[static_cast<std::size_t>(c.a)].label;
    cell.age_mid = c.age_mid;
    cell.period = static_cast<long long>(c.period);
    cell.eta = est.eta[i];
    cell.lower = est.lower[i];
    cell.upper = est.upper[i];
    cell.prediction = false;
    m.cells.push_back(cell);
  }

  int horizon = 0;
  for (long long p : full.periods)
    if (p > m.train_through) ++horizon;
  if (horizon > 0) {
    const auto keys =
        detail::future_cell_keys(m.design, full, m.train_through, horizon);
    const Eigen::MatrixXd Xf = m.design.rows_for(keys);
    const EtaIntervals pred = spline_intervals(m.fit, Xf);
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const auto& c = keys[i];
      FitCell cell;
      cell.age_label = full.ages[static_cast<std::size_t>(c.a)].label;
      cell.age_mid = c.age_mid;
      cell.period = static_cast<long long>(c.period);
      cell.eta = pred.eta[static_cast<Eigen::Index>(i)];
      cell.lower = pred.lower[static_cast<Eigen::Index>(i)];
      cell.upper = pred.upper[static_cast<Eigen::Index>(i)];
      cell.prediction = true;
      m.cells.push_back(cell);
    }
  }
  return m;
}

// Forecast rows for `horizon` periods past the training window. The future
// cells must exist in the dataset (they carry the exposures).
inline std::vector<FitCell> forecast_spline(const SplineFitModel& m,
                                            const ApcDataset& full, int horizon) {
  require(horizon >= 1, errc::bad_input, "forecast horizon must be >= 1");
  const auto keys = detail::future_cell_keys(m.design, full, m.train_through, horizon);
  const Eigen::MatrixXd Xf = m.design.rows_for(keys);
  const EtaIntervals pred = spline_intervals(m.fit, Xf);
  std::vector<FitCell> out;
  out.reserve(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    FitCell cell;
    cell.age_label = full.ages[static_cast<std::size_t>(keys[i].a)].label;
    cell.age_mid = keys[i].age_mid;
    cell.period = static_cast<long long>(keys[i].period);
    cell.eta = pred.eta[static_cast<Eigen::Index>(i)];
    cell.lower = pred.lower[static_cast<Eigen::Index>(i)];
    cell.upper = pred.upper[static_cast<Eigen::Index>(i)];
    cell.prediction = true;
    out.push_back(cell);
  }
  return out;
}

}  // namespace apc
