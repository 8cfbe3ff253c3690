#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "apc/dataset.hpp"
#include "apc/design.hpp"
#include "apc/fit_result.hpp"
#include "apc/gmrf.hpp"
#include "apc/linalg.hpp"
#include "apc/optim.hpp"

namespace apc {

// One cell of the latent-model grid. Forecast cells carry no data and no
// likelihood contribution; they are tied to the observed ones through the
// random-walk priors alone.
struct LatentCell {
  int a = 0, p = 0;       // 0-based grid position; p can exceed the training span
  double age_mid = 0.0;
  long long period = 0;
  int cohort = 1;         // 1-based diagonal index
  bool observed = true;
  double y = 0.0, N = 0.0;
};

// Latent Gaussian formulation of the model: x = [beta | f_A | f_P | f_C] with
// a vague Gaussian prior on the three fixed coefficients, an RW2 prior with
// PC-prior precision on each field, and sum-to-zero plus trend-to-zero
// constraints on every field. The constraints are realised through the
// orthonormal null-space basis Z (block diagonal per field), which also keeps
// the constrained prior log-determinant available in closed form.
class LatentModel {
 public:
  int I = 0, J_train = 0, R = 1;
  int mA = 0, mP = 0, mC = 0;
  std::array<PCPrior, 3> priors;
  double beta_prior_sd = 1000.0;
  SlopeCoding coding;
  std::vector<LatentCell> cells;  // row-major, age outer
  std::array<Eigen::SparseMatrix<double>, 3> Rstr;
  Eigen::MatrixXd A;   // n_cells x dim observation rows
  Eigen::MatrixXd C;   // 6 x dim hard constraints
  Eigen::MatrixXd Z;   // dim x (dim - 6), orthonormal, C Z = 0
  std::array<double, 3> logdet_ZRZ = {0.0, 0.0, 0.0};  // ln|Z_b' R_b Z_b|
  std::vector<std::string> age_labels;
  std::vector<double> age_mids;
  long long period0 = 0, period_step = 1;

  int dim() const { return 3 + mA + mP + mC; }
  int n_cells() const { return static_cast<int>(cells.size()); }
  int field_offset(int b) const {
    if (b == 0) return 3;
    if (b == 1) return 3 + mA;
    return 3 + mA + mP;
  }
  int field_size(int b) const { return b == 0 ? mA : (b == 1 ? mP : mC); }

  // Joint prior precision at the given field precisions: block diagonal in
  // the fixed block and the three scaled structure matrices. Rank deficient
  // by construction (2 per field), hence only ever used through Z.
  Eigen::MatrixXd prior_precision(const std::array<double, 3>& tau) const {
    for (double t : tau)
      require(t > 0.0 && std::isfinite(t), errc::nonpositive_precision,
              "field precision must be positive and finite");
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(dim(), dim());
    const double bprec = 1.0 / (beta_prior_sd * beta_prior_sd);
    Q.topLeftCorner(3, 3) = bprec * Eigen::Matrix3d::Identity();
    for (int b = 0; b < 3; ++b)
      Q.block(field_offset(b), field_offset(b), field_size(b), field_size(b)) =
          tau[static_cast<std::size_t>(b)] *
          Eigen::MatrixXd(Rstr[static_cast<std::size_t>(b)]);
    return Q;
  }

  // tau-dependent part plus constants of ln|Z' Q_prior(tau) Z|.
  double logdet_prior_reduced(const std::array<double, 3>& tau) const {
    double s = 3.0 * std::log(1.0 / (beta_prior_sd * beta_prior_sd));
    for (int b = 0; b < 3; ++b)
      s += (field_size(b) - 2) * std::log(tau[static_cast<std::size_t>(b)]) +
           logdet_ZRZ[static_cast<std::size_t>(b)];
    return s;
  }

  void rebuild_rows_and_constraints() {
    const int n = dim();
    A.resize(n_cells(), n);
    A.setZero();
    for (int i = 0; i < n_cells(); ++i) {
      const LatentCell& c = cells[static_cast<std::size_t>(i)];
      A(i, 0) = 1.0;
      for (int k = 0; k < 2; ++k) {
        const TimeScale s = coding.scales[static_cast<std::size_t>(k)];
        double v = 0.0;
        if (s == TimeScale::age) v = c.age_mid;
        if (s == TimeScale::period) v = static_cast<double>(c.period);
        if (s == TimeScale::cohort) v = static_cast<double>(c.cohort);
        A(i, k + 1) = (v - coding.center[static_cast<std::size_t>(k)]) /
                      coding.step[static_cast<std::size_t>(k)];
      }
      A(i, field_offset(0) + c.a) = 1.0;
      A(i, field_offset(1) + c.p) = 1.0;
      A(i, field_offset(2) + c.cohort - 1) = 1.0;
    }
    C = Eigen::MatrixXd::Zero(6, n);
    Z = Eigen::MatrixXd::Zero(n, n - 6);
    Z.topLeftCorner(3, 3).setIdentity();
    int zcol = 3;
    for (int b = 0; b < 3; ++b) {
      const int m = field_size(b), off = field_offset(b);
      Eigen::MatrixXd Cb(2, m);
      Cb.row(0).setOnes();
      for (int i = 0; i < m; ++i) Cb(1, i) = static_cast<double>(i + 1);
      C.block(2 * b, off, 2, m) = Cb;
      const Eigen::MatrixXd Zb = constraint_null_space(Cb);
      Z.block(off, zcol, m, m - 2) = Zb;
      Eigen::MatrixXd ZRZ =
          Zb.transpose() * Eigen::MatrixXd(Rstr[static_cast<std::size_t>(b)]) * Zb;
      logdet_ZRZ[static_cast<std::size_t>(b)] =
          logdet_spd(Eigen::LDLT<Eigen::MatrixXd>(ZRZ));
      zcol += m - 2;
    }
  }
};

inline LatentModel build_latent_model(const ApcDataset& train, const PCPrior& prior,
                                      SlopeDrop drop = SlopeDrop::cohort,
                                      double beta_prior_sd = 1000.0) {
  // Reuse the design-layer validation and coding, then recast as latent fields.
  const ApcDesign d = build_design(train, SmoothingMode::gmrf, BasisSpec{}, drop);
  LatentModel m;
  m.I = d.I;
  m.J_train = d.J;
  m.R = d.R;
  m.mA = d.I;
  m.mP = d.J;
  m.mC = d.K;
  m.priors = {prior, prior, prior};
  m.beta_prior_sd = beta_prior_sd;
  m.coding = d.coding;
  m.period0 = train.periods.front();
  m.period_step = train.period_step();
  m.age_mids = d.age_mids;
  for (const auto& g : train.ages) m.age_labels.push_back(g.label);
  for (int b = 0; b < 3; ++b)
    m.Rstr[static_cast<std::size_t>(b)] = d.blocks[static_cast<std::size_t>(b)].R;
  m.cells.reserve(static_cast<std::size_t>(d.I) * d.J);
  for (int a = 0; a < d.I; ++a)
    for (int p = 0; p < d.J; ++p) {
      LatentCell c;
      c.a = a;
      c.p = p;
      c.age_mid = d.age_mids[static_cast<std::size_t>(a)];
      c.period = train.periods[static_cast<std::size_t>(p)];
      c.cohort = d.cohort_index(a, p);
      c.observed = true;
      c.y = train.counts(a, p);
      c.N = train.exposures(a, p);
      m.cells.push_back(c);
    }
  m.rebuild_rows_and_constraints();
  return m;
}

// Grows the period axis by `horizon` steps (and the cohort axis with it).
// New cells are unobserved: the random-walk priors alone propagate the fields
// forward, and the sum/trend constraints are recomputed over the extended
// level sets. horizon = 0 returns the model unchanged.
inline LatentModel forecast_extend(const LatentModel& model, int horizon) {
  require(horizon >= 0, errc::bad_input, "forecast horizon must be >= 0");
  if (horizon == 0) return model;
  LatentModel m = model;
  const int oldP = m.mP;
  m.mP += horizon;
  m.mC += horizon;
  m.Rstr[1] = structure_matrix(2, m.mP);
  m.Rstr[2] = structure_matrix(2, m.mC);
  for (int a = 0; a < m.I; ++a)
    for (int h = 0; h < horizon; ++h) {
      LatentCell c;
      c.a = a;
      c.p = oldP + h;
      c.age_mid = m.age_mids[static_cast<std::size_t>(a)];
      c.period = m.period0 + static_cast<long long>(oldP + h) * m.period_step;
      c.cohort = m.R * (m.I - 1 - a) + (oldP + h) + 1;
      c.observed = false;
      m.cells.push_back(c);
    }
  m.rebuild_rows_and_constraints();
  return m;
}

// Poisson observations with offset log(N): contributes y*eta - N*exp(eta)
// per observed cell (eta on the log-rate scale).
struct PoissonObs {
  const std::vector<LatentCell>* cells;

  double value(int i, double eta) const {
    const LatentCell& c = (*cells)[static_cast<std::size_t>(i)];
    return c.y * eta - c.N * std::exp(eta);
  }
  void derivs(int i, double eta, double& d1, double& d2) const {
    const LatentCell& c = (*cells)[static_cast<std::size_t>(i)];
    const double mu = c.N * std::exp(eta);
    d1 = c.y - mu;
    d2 = -mu;
  }
};

// Gaussian observations with fixed precision, z_i ~ N(eta_i, 1/prec). With
// this likelihood the Newton step is exact, which the conditioning tests use.
struct GaussianObs {
  Eigen::VectorXd z;
  double prec = 1.0;

  double value(int i, double eta) const {
    const double r = z[i] - eta;
    return -0.5 * prec * r * r;
  }
  void derivs(int i, double eta, double& d1, double& d2) const {
    d1 = prec * (z[i] - eta);
    d2 = -prec;
  }
};

// Mode and curvature of the latent field given data and fixed precisions,
// found by Newton-Raphson on the constrained subspace x = Z v. Each solve
// conditions the Gaussianised problem on the constraints, which coincides
// with conditioning by kriging whenever the joint precision is proper.
struct GaussianApprox {
  Eigen::VectorXd x;    // constrained mode, full coordinates
  Eigen::MatrixXd Z;    // the null-space basis used
  Eigen::LDLT<Eigen::MatrixXd> Qv_ldlt;  // factor of Z' (Q_prior + A'WA) Z
  double loglik = 0.0;      // observation log-likelihood at the mode
  double quad_prior = 0.0;  // x' Q_prior x at the mode
  double logdet_Qv = 0.0;   // ln|Z' Q* Z|
  bool converged = false;
  int iterations = 0;

  // Pointwise standard deviation of rows * x under the approximation.
  Eigen::VectorXd row_sd(const Eigen::MatrixXd& rows) const {
    const Eigen::MatrixXd RZ = rows * Z;
    const Eigen::MatrixXd sol = Qv_ldlt.solve(RZ.transpose());
    Eigen::VectorXd out(rows.rows());
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
      out[i] = std::sqrt(std::max(RZ.row(i).dot(sol.col(i)), 0.0));
    return out;
  }

  Eigen::MatrixXd covariance() const {
    return Z * Qv_ldlt.solve(Z.transpose());
  }
};

// Generic constrained Newton mode finder. `observed` lists the rows of A
// that carry likelihood terms; Z spans the feasible subspace (identity when
// the prior is already proper and unconstrained). Observation rows are
// handled through their nonzero pattern, which for the latent model is six
// entries per row.
template <class Lik>
GaussianApprox gaussian_approx_general(const Eigen::MatrixXd& Q_prior,
                                       const Eigen::MatrixXd& A,
                                       const std::vector<int>& observed,
                                       const Eigen::MatrixXd& Z, const Lik& lik,
                                       int max_iter = 50, double grad_tol = 1e-8,
                                       const Eigen::VectorXd* x0 = nullptr) {
  const int n = static_cast<int>(Q_prior.rows());
  require(A.cols() == n && Z.rows() == n, errc::shape_mismatch,
          "latent dimensions disagree");
  GaussianApprox ga;
  ga.Z = Z;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  if (x0 && x0->size() == n && x0->allFinite()) x = *x0;

  std::vector<std::vector<std::pair<int, double>>> nz(observed.size());
  for (std::size_t k = 0; k < observed.size(); ++k)
    for (int j = 0; j < n; ++j)
      if (A(observed[k], j) != 0.0) nz[k].emplace_back(j, A(observed[k], j));

  auto eta_at = [&](std::size_t k, const Eigen::VectorXd& xx) {
    double e = 0.0;
    for (const auto& [j, v] : nz[k]) e += v * xx[j];
    return e;
  };
  auto objective = [&](const Eigen::VectorXd& xx, double& ll) {
    ll = 0.0;
    for (std::size_t k = 0; k < observed.size(); ++k)
      ll += lik.value(observed[k], eta_at(k, xx));
    return ll - 0.5 * xx.dot(Q_prior * xx);
  };

  double ll = 0.0;
  double obj = objective(x, ll);
  Eigen::MatrixXd Qstar(n, n);
  for (int iter = 0; iter <= max_iter; ++iter) {
    ga.iterations = iter;
    // Gradient and curvature of the penalised likelihood at x.
    Eigen::VectorXd g = -(Q_prior * x);
    Qstar = Q_prior;
    for (std::size_t k = 0; k < observed.size(); ++k) {
      double d1 = 0.0, d2 = 0.0;
      lik.derivs(observed[k], eta_at(k, x), d1, d2);
      for (const auto& [j, v] : nz[k]) {
        g[j] += d1 * v;
        for (const auto& [j2, v2] : nz[k]) Qstar(j, j2) += (-d2) * v * v2;
      }
    }
    const Eigen::VectorXd gv = Z.transpose() * g;
    ga.Qv_ldlt.compute(Z.transpose() * Qstar * Z);
    require(ga.Qv_ldlt.info() == Eigen::Success, errc::singular_system,
            "reduced precision factorisation failed");
    if (gv.cwiseAbs().maxCoeff() < grad_tol) {
      ga.converged = true;
      break;
    }
    if (iter == max_iter) break;
    const Eigen::VectorXd dv = ga.Qv_ldlt.solve(gv);
    require(dv.allFinite(), errc::singular_system, "Newton step is not finite");
    const Eigen::VectorXd dx = Z * dv;
    double s = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 30; ++h, s *= 0.5) {
      double ll_new = 0.0;
      const Eigen::VectorXd x_new = x + s * dx;
      const double obj_new = objective(x_new, ll_new);
      if (std::isfinite(obj_new) && obj_new >= obj - 1e-12 * (std::fabs(obj) + 1.0)) {
        x = x_new;
        obj = obj_new;
        ll = ll_new;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  ga.x = x;
  ga.loglik = ll;
  ga.quad_prior = x.dot(Q_prior * x);
  ga.logdet_Qv = logdet_spd(ga.Qv_ldlt);
  return ga;
}

template <class Lik>
GaussianApprox gaussian_approx(const LatentModel& m, const Lik& lik,
                               const std::array<double, 3>& tau, int max_iter = 50,
                               double grad_tol = 1e-8,
                               const Eigen::VectorXd* x0 = nullptr) {
  std::vector<int> observed;
  for (int i = 0; i < m.n_cells(); ++i)
    if (m.cells[static_cast<std::size_t>(i)].observed) observed.push_back(i);
  return gaussian_approx_general(m.prior_precision(tau), m.A, observed, m.Z, lik,
                                 max_iter, grad_tol, x0);
}

// One evaluated point of the hyperparameter posterior: its weight and the
// per-cell Gaussian of the latent linear predictor given these precisions.
struct HyperPoint {
  Eigen::Vector3d log_tau;
  double log_post = -std::numeric_limits<double>::infinity();
  double weight = 0.0;
  Eigen::VectorXd mu;  // per cell
  Eigen::VectorXd sd;  // per cell
};

struct HyperPosterior {
  Eigen::Vector3d mode_log_tau;
  std::vector<HyperPoint> points;
  bool mode_converged = false;
  int mode_evals = 0;
};

struct HyperOptions {
  Eigen::Vector3d start = Eigen::Vector3d::Constant(2.0);
  double nm_step = 1.0;
  int nm_max_evals = 120;
  double grid_spacing = 0.375;  // two steps each way per axis
  int grid_steps = 2;
};

// Laplace-approximated log posterior of log(tau), up to a constant:
// PC priors (with the log-scale Jacobian), the constrained prior
// normalisation, the joint density at the latent mode, and the Gaussian
// approximation's own normalisation.
template <class Lik>
double hyper_log_posterior(const LatentModel& m, const Lik& lik,
                           const Eigen::Vector3d& log_tau,
                           GaussianApprox* approx_out = nullptr,
                           const Eigen::VectorXd* warm_start = nullptr) {
  std::array<double, 3> tau;
  for (int b = 0; b < 3; ++b) {
    if (log_tau[b] > 60.0 || log_tau[b] < -60.0)
      return -std::numeric_limits<double>::infinity();
    tau[static_cast<std::size_t>(b)] = std::exp(log_tau[b]);
  }
  GaussianApprox ga = gaussian_approx(m, lik, tau, 50, 1e-8, warm_start);
  if (!ga.converged) return -std::numeric_limits<double>::infinity();
  double lp = 0.0;
  for (int b = 0; b < 3; ++b)
    lp += pc_log_prior(tau[static_cast<std::size_t>(b)],
                       m.priors[static_cast<std::size_t>(b)]) +
          log_tau[b];
  lp += 0.5 * m.logdet_prior_reduced(tau);
  lp += ga.loglik - 0.5 * ga.quad_prior;
  lp -= 0.5 * ga.logdet_Qv;
  if (approx_out) *approx_out = std::move(ga);
  return lp;
}

// Empirical-Bayes style exploration of the precision posterior: Nelder-Mead
// to the mode of log pi(log tau | y), then a fixed axis-aligned grid of
// 5 points per dimension (center shared, 13 points total) re-weighted by the
// posterior. Every point keeps its conditional per-cell mean and sd so the
// posterior of eta is a 13-component Gaussian mixture.
template <class Lik>
HyperPosterior hyper_posterior(const LatentModel& m, const Lik& lik,
                               const HyperOptions& opt = {}) {
  Eigen::VectorXd warm;
  auto neg = [&](const Eigen::VectorXd& lt) {
    GaussianApprox ga;
    const double lp = hyper_log_posterior(m, lik, Eigen::Vector3d(lt), &ga,
                                          warm.size() ? &warm : nullptr);
    if (std::isfinite(lp)) warm = ga.x;
    return -lp;
  };
  NelderMeadOptions nopt;
  nopt.step = opt.nm_step;
  nopt.max_evals = opt.nm_max_evals;
  nopt.ftol = 1e-7;
  nopt.xtol = 2e-3;
  const NelderMeadResult r = nelder_mead(neg, opt.start, nopt);
  require(std::isfinite(r.f), errc::optim_failed,
          "no finite hyperparameter posterior value found");

  HyperPosterior hp;
  hp.mode_log_tau = r.x;
  hp.mode_converged = r.converged;
  hp.mode_evals = r.evals;

  std::vector<Eigen::Vector3d> pts;
  pts.push_back(hp.mode_log_tau);
  for (int b = 0; b < 3; ++b)
    for (int s = -opt.grid_steps; s <= opt.grid_steps; ++s) {
      if (s == 0) continue;
      Eigen::Vector3d p = hp.mode_log_tau;
      p[b] += opt.grid_spacing * s;
      pts.push_back(p);
    }

  double max_lp = -std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    HyperPoint hpnt;
    hpnt.log_tau = p;
    GaussianApprox ga;
    hpnt.log_post =
        hyper_log_posterior(m, lik, p, &ga, warm.size() ? &warm : nullptr);
    if (std::isfinite(hpnt.log_post)) {
      warm = ga.x;
      hpnt.mu = m.A * ga.x;
      hpnt.sd = ga.row_sd(m.A);
      max_lp = std::max(max_lp, hpnt.log_post);
    }
    hp.points.push_back(std::move(hpnt));
  }
  require(std::isfinite(max_lp), errc::optim_failed,
          "hyperparameter grid produced no finite posterior value");
  double total = 0.0;
  for (auto& p : hp.points) {
    p.weight = std::isfinite(p.log_post) ? std::exp(p.log_post - max_lp) : 0.0;
    total += p.weight;
  }
  for (auto& p : hp.points) p.weight /= total;
  return hp;
}

// CDF of the per-cell posterior mixture at q.
inline double mixture_cdf(const std::vector<HyperPoint>& points, int cell, double q) {
  double s = 0.0;
  for (const auto& p : points) {
    if (p.weight <= 0.0) continue;
    const double z = (q - p.mu[cell]) / p.sd[cell];
    s += p.weight * 0.5 * std::erfc(-z * 0.70710678118654752440);
  }
  return s;
}

// Quantile of the mixture by bisection to 1e-8 in probability.
inline double mixture_quantile(const std::vector<HyperPoint>& points, int cell,
                               double prob) {
  require(prob > 0.0 && prob < 1.0, errc::bad_input, "quantile level in (0,1)");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& p : points) {
    if (p.weight <= 0.0) continue;
    lo = std::min(lo, p.mu[cell] - 10.0 * p.sd[cell] - 1.0);
    hi = std::max(hi, p.mu[cell] + 10.0 * p.sd[cell] + 1.0);
  }
  require(std::isfinite(lo) && std::isfinite(hi), errc::optim_failed,
          "mixture has no positive-weight component");
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double F = mixture_cdf(points, cell, mid);
    if (std::fabs(F - prob) <= 1e-8) return mid;
    (F < prob ? lo : hi) = mid;
    if (hi - lo < 1e-15 * (std::fabs(hi) + 1.0)) return 0.5 * (lo + hi);
  }
  return 0.5 * (lo + hi);
}

struct PosteriorSurface {
  Eigen::VectorXd median, lower, upper;  // per cell, 2.5% and 97.5%
};

inline PosteriorSurface posterior_eta(const HyperPosterior& hp, int n_cells) {
  PosteriorSurface s;
  s.median.resize(n_cells);
  s.lower.resize(n_cells);
  s.upper.resize(n_cells);
  for (int i = 0; i < n_cells; ++i) {
    s.median[i] = mixture_quantile(hp.points, i, 0.5);
    s.lower[i] = mixture_quantile(hp.points, i, 0.025);
    s.upper[i] = mixture_quantile(hp.points, i, 0.975);
  }
  return s;
}

struct Rw2FitModel {
  LatentModel model;  // extended over the prediction window
  HyperPosterior hyper;
  PosteriorSurface surface;
  std::vector<FitCell> cells;
  long long train_through = 0;
};

// Fits the RW2 engine on periods up to train_through; periods of the dataset
// beyond it become unobserved latent cells whose posterior quantiles form the
// forecast.
inline Rw2FitModel fit_rw2_model(const ApcDataset& full, long long train_through,
                                 const PCPrior& prior,
                                 SlopeDrop drop = SlopeDrop::cohort,
                                 const HyperOptions& hopt = {}) {
  require(train_through >= full.periods.front(), errc::bad_input,
          "train_through precedes the first period");
  Rw2FitModel out;
  out.train_through = std::min<long long>(train_through, full.periods.back());
  const ApcDataset train = full.subset_periods(full.periods.front(), out.train_through);
  int horizon = 0;
  for (long long p : full.periods)
    if (p > out.train_through) ++horizon;

  out.model = forecast_extend(build_latent_model(train, prior, drop), horizon);
  const PoissonObs lik{&out.model.cells};
  out.hyper = hyper_posterior(out.model, lik, hopt);
  out.surface = posterior_eta(out.hyper, out.model.n_cells());

  out.cells.reserve(out.model.cells.size());
  for (int i = 0; i < out.model.n_cells(); ++i) {
    const LatentCell& c = out.model.cells[static_cast<std::size_t>(i)];
    FitCell f;
    f.age_label = out.model.age_labels[static_cast<std::size_t>(c.a)];
    f.age_mid = c.age_mid;
    f.period = c.period;
    f.eta = out.surface.median[i];
    f.lower = out.surface.lower[i];
    f.upper = out.surface.upper[i];
    f.prediction = !c.observed;
    out.cells.push_back(f);
  }
  return out;
}

}  // namespace apc
