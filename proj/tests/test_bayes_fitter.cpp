#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cmath>
#include <vector>

#include "apc/bayes_fitter.hpp"
#include "apc/rng.hpp"
#include "helpers.hpp"

using apc::ApcDataset;
using apc::build_latent_model;
using apc::errc;
using apc::GaussianApprox;
using apc::gaussian_approx;
using apc::GaussianObs;
using apc::HyperOptions;
using apc::hyper_log_posterior;
using apc::hyper_posterior;
using apc::LatentModel;
using apc::PCPrior;
using apc::PoissonObs;
using apc_test::code_of;

namespace {

ApcDataset band_data(int I, int J, long long year0 = 2001) {
  std::vector<apc::AgeGroup> ages;
  for (int a = 0; a < I; ++a) {
    const int lo = 20 + 5 * a;
    ages.push_back(apc::parse_age_group(std::to_string(lo) + "-" + std::to_string(lo + 4)));
  }
  std::vector<long long> periods;
  for (int p = 0; p < J; ++p) periods.push_back(year0 + p);
  Eigen::MatrixXd counts(I, J), expos(I, J);
  for (int a = 0; a < I; ++a)
    for (int p = 0; p < J; ++p) {
      const double age = 22.5 + 5.0 * a;
      const double eta = -7.2 + 0.015 * (age - 40.0) - 0.02 * p +
                         0.2 * std::sin(0.3 * age + 0.5 * p);
      expos(a, p) = 4.0e4 + 120.0 * (a + p);
      counts(a, p) = std::floor(expos(a, p) * std::exp(eta) + 0.5);
    }
  return ApcDataset::from_parts(std::move(ages), std::move(periods), counts, expos);
}

}  // namespace

TEST_CASE("latent model layout and constraint basis") {
  const ApcDataset data = band_data(6, 8);
  const LatentModel m = build_latent_model(data, PCPrior{});
  const int K = 5 * 5 + 8;
  REQUIRE(m.dim() == 3 + 6 + 8 + K);
  REQUIRE(m.n_cells() == 48);
  REQUIRE(m.A.rows() == 48);
  REQUIRE(m.A.cols() == m.dim());
  REQUIRE(m.C.rows() == 6);
  REQUIRE(m.Z.cols() == m.dim() - 6);

  // Z is an orthonormal basis of the null space of the six constraints.
  REQUIRE((m.C * m.Z).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((m.Z.transpose() * m.Z -
           Eigen::MatrixXd::Identity(m.Z.cols(), m.Z.cols()))
              .cwiseAbs()
              .maxCoeff() < 1e-12);

  // Each observation row: intercept, two slopes, three field indicators.
  for (int i = 0; i < m.n_cells(); ++i) {
    const auto& c = m.cells[static_cast<std::size_t>(i)];
    REQUIRE(m.A(i, 0) == 1.0);
    REQUIRE(m.A(i, m.field_offset(0) + c.a) == 1.0);
    REQUIRE(m.A(i, m.field_offset(1) + c.p) == 1.0);
    REQUIRE(m.A(i, m.field_offset(2) + c.cohort - 1) == 1.0);
    int nonzeros = 0;
    for (int j = 0; j < m.dim(); ++j) nonzeros += m.A(i, j) != 0.0;
    REQUIRE(nonzeros <= 6);
  }

  // The reduced prior log determinant matches a direct factorisation.
  const std::array<double, 3> tau = {0.8, 3.0, 12.0};
  const Eigen::MatrixXd Qr = m.Z.transpose() * m.prior_precision(tau) * m.Z;
  const double direct = apc::logdet_spd(Eigen::LDLT<Eigen::MatrixXd>(Qr));
  REQUIRE(m.logdet_prior_reduced(tau) == Catch::Approx(direct).margin(1e-6));
}

TEST_CASE("gaussian likelihood conditioning matches the closed form") {
  // 12 x 16 grid: 192 cells, 102 latent nodes. With a Gaussian likelihood the
  // Laplace approximation is exact, so mode and covariance must equal the
  // directly assembled constrained conditional.
  const ApcDataset data = band_data(12, 16);
  const LatentModel m = build_latent_model(data, PCPrior{});
  REQUIRE(m.dim() == 3 + 12 + 16 + (5 * 11 + 16));

  GaussianObs lik;
  lik.prec = 2.0;
  lik.z.resize(m.n_cells());
  for (int i = 0; i < m.n_cells(); ++i) {
    const auto& c = m.cells[static_cast<std::size_t>(i)];
    lik.z[i] = -7.0 + 0.01 * c.age_mid - 0.015 * c.p + 0.3 * std::sin(0.4 * c.a + 0.7 * c.p);
  }

  const std::array<double, 3> tau = {2.0, 5.0, 9.0};
  const GaussianApprox ga = gaussian_approx(m, lik, tau);
  REQUIRE(ga.converged);

  const Eigen::MatrixXd Qp = m.prior_precision(tau);
  const Eigen::MatrixXd M =
      m.Z.transpose() * (Qp + lik.prec * m.A.transpose() * m.A) * m.Z;
  const Eigen::LDLT<Eigen::MatrixXd> M_ldlt(M);
  const Eigen::VectorXd v =
      M_ldlt.solve(m.Z.transpose() * m.A.transpose() * (lik.prec * lik.z));
  const Eigen::VectorXd x_closed = m.Z * v;

  REQUIRE((ga.x - x_closed).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((m.C * ga.x).cwiseAbs().maxCoeff() < 1e-10);

  const Eigen::MatrixXd cov_closed =
      m.Z * M_ldlt.solve(Eigen::MatrixXd::Identity(M.rows(), M.cols())) *
      m.Z.transpose();
  REQUIRE((ga.covariance() - cov_closed).cwiseAbs().maxCoeff() < 1e-10);

  const Eigen::VectorXd sd = ga.row_sd(m.A);
  for (int i = 0; i < m.n_cells(); ++i) {
    const double var = m.A.row(i) * cov_closed * m.A.row(i).transpose();
    REQUIRE(sd[i] == Catch::Approx(std::sqrt(var)).margin(1e-10));
  }
}

TEST_CASE("null-space conditioning coincides with kriging when the precision is proper") {
  // Proper Gaussian prior, hard constraints: the subspace solution and the
  // kriging correction are two routes to the same conditional mean.
  const int n = 30;
  apc::CounterRng rng(11, 0, 0);
  Eigen::MatrixXd B(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) B(i, j) = rng.normal();
  const Eigen::MatrixXd Q = B * B.transpose() + n * Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd mu(n);
  for (int i = 0; i < n; ++i) mu[i] = rng.normal();
  Eigen::MatrixXd C(2, n);
  C.row(0).setOnes();
  for (int i = 0; i < n; ++i) C(1, i) = static_cast<double>(i + 1);
  const Eigen::Vector2d e(0.4, -1.1);

  const Eigen::VectorXd x_krig =
      apc::condition_by_kriging(Eigen::LDLT<Eigen::MatrixXd>(Q), C, mu, e);

  const Eigen::MatrixXd Z = apc::constraint_null_space(C);
  const Eigen::VectorXd x_part =
      C.transpose() * (C * C.transpose()).ldlt().solve(e);
  const Eigen::VectorXd v =
      (Z.transpose() * Q * Z).ldlt().solve(Z.transpose() * Q * (mu - x_part));
  const Eigen::VectorXd x_sub = x_part + Z * v;

  REQUIRE((x_krig - x_sub).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((C * x_krig - e).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("with no observations the hyper posterior reduces to the priors") {
  const ApcDataset data = band_data(5, 6);
  LatentModel m = build_latent_model(data, PCPrior{});
  for (auto& c : m.cells) c.observed = false;
  const PoissonObs lik{&m.cells};

  const Eigen::Vector3d lt1(0.5, 1.0, -0.5), lt2(2.0, -1.0, 1.5);
  const double lp1 = hyper_log_posterior(m, lik, lt1);
  const double lp2 = hyper_log_posterior(m, lik, lt2);

  auto prior_only = [&](const Eigen::Vector3d& lt) {
    double s = 0.0;
    for (int b = 0; b < 3; ++b)
      s += apc::pc_log_prior(std::exp(lt[b]), m.priors[static_cast<std::size_t>(b)]) + lt[b];
    return s;
  };
  REQUIRE(lp1 - lp2 ==
          Catch::Approx(prior_only(lt1) - prior_only(lt2)).margin(1e-8));
}

TEST_CASE("hyper posterior explores a 13-point grid around the mode") {
  const ApcDataset data = band_data(5, 6);
  const LatentModel m = build_latent_model(data, PCPrior{});
  const PoissonObs lik{&m.cells};
  const apc::HyperPosterior hp = hyper_posterior(m, lik);

  REQUIRE(hp.points.size() == 13u);
  REQUIRE((hp.points[0].log_tau - hp.mode_log_tau).cwiseAbs().maxCoeff() == 0.0);
  double total = 0.0;
  int finite = 0;
  for (const auto& p : hp.points) {
    REQUIRE(p.weight >= 0.0);
    total += p.weight;
    if (std::isfinite(p.log_post)) {
      ++finite;
      REQUIRE(p.mu.size() == m.n_cells());
      REQUIRE(p.sd.size() == m.n_cells());
      REQUIRE(p.sd.minCoeff() > 0.0);
    }
  }
  REQUIRE(finite >= 7);
  REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
  // The centre point carries the largest posterior value on the grid.
  const double lp0 = hp.points[0].log_post;
  for (const auto& p : hp.points) REQUIRE(p.log_post <= lp0 + 0.6);
}

TEST_CASE("mixture quantiles: single component and monte carlo cross-check") {
  using apc::HyperPoint;
  std::vector<HyperPoint> one(1);
  one[0].weight = 1.0;
  one[0].mu = Eigen::VectorXd::Constant(1, 3.25);
  one[0].sd = Eigen::VectorXd::Constant(1, 0.8);
  REQUIRE(apc::mixture_quantile(one, 0, 0.5) == Catch::Approx(3.25).margin(1e-6));
  REQUIRE(apc::mixture_quantile(one, 0, 0.975) ==
          Catch::Approx(3.25 + 1.959964 * 0.8).margin(1e-5));
  REQUIRE(apc::mixture_quantile(one, 0, 0.025) ==
          Catch::Approx(3.25 - 1.959964 * 0.8).margin(1e-5));

  std::vector<HyperPoint> mix(2);
  mix[0].weight = 0.3;
  mix[0].mu = Eigen::VectorXd::Constant(1, 0.0);
  mix[0].sd = Eigen::VectorXd::Constant(1, 1.0);
  mix[1].weight = 0.7;
  mix[1].mu = Eigen::VectorXd::Constant(1, 2.0);
  mix[1].sd = Eigen::VectorXd::Constant(1, 0.5);

  apc::CounterRng rng(23, 0, 0);
  const int n = 1000000;
  std::vector<double> draws(static_cast<std::size_t>(n));
  for (auto& d : draws) {
    const bool first = rng.uniform() < 0.3;
    d = first ? rng.normal() : 2.0 + 0.5 * rng.normal();
  }
  std::sort(draws.begin(), draws.end());
  auto mc_quantile = [&](double p) {
    return draws[static_cast<std::size_t>(p * (n - 1))];
  };
  for (double p : {0.025, 0.25, 0.5, 0.75, 0.975}) {
    INFO("level " << p);
    REQUIRE(apc::mixture_quantile(mix, 0, p) ==
            Catch::Approx(mc_quantile(p)).margin(0.02));
  }
  // CDF and quantile are mutual inverses.
  for (double p : {0.1, 0.5, 0.9}) {
    const double q = apc::mixture_quantile(mix, 0, p);
    REQUIRE(apc::mixture_cdf(mix, 0, q) == Catch::Approx(p).margin(1e-7));
  }
}

TEST_CASE("forecast extension adds unobserved cells and grows the fields") {
  const ApcDataset data = band_data(5, 8);
  const LatentModel m = build_latent_model(data, PCPrior{});
  const LatentModel m0 = apc::forecast_extend(m, 0);
  REQUIRE(m0.dim() == m.dim());
  REQUIRE(m0.n_cells() == m.n_cells());
  REQUIRE((m0.A - m.A).cwiseAbs().maxCoeff() == 0.0);

  const LatentModel m2 = apc::forecast_extend(m, 2);
  REQUIRE(m2.mP == m.mP + 2);
  REQUIRE(m2.mC == m.mC + 2);
  REQUIRE(m2.dim() == m.dim() + 4);
  REQUIRE(m2.n_cells() == m.n_cells() + 2 * 5);
  int unobserved = 0;
  for (const auto& c : m2.cells)
    if (!c.observed) {
      ++unobserved;
      REQUIRE(c.p >= 8);
      REQUIRE(c.period >= 2009);
      REQUIRE(c.cohort == 5 * (5 - 1 - c.a) + c.p + 1);
    }
  REQUIRE(unobserved == 10);
  REQUIRE((m2.C * m2.Z).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rw2 fit produces bracketed intervals that widen into the forecast") {
  const ApcDataset data = band_data(5, 8);
  const auto fit = apc::fit_rw2_model(data, 2006, PCPrior{});
  REQUIRE(fit.train_through == 2006);
  REQUIRE(fit.cells.size() == 5u * 8u);

  std::array<double, 2> pred_width{};
  double est_width_last = 0.0;
  for (const auto& c : fit.cells) {
    REQUIRE(std::isfinite(c.eta));
    REQUIRE(c.lower <= c.eta);
    REQUIRE(c.eta <= c.upper);
    REQUIRE(c.prediction == (c.period > 2006));
    if (c.prediction)
      pred_width[static_cast<std::size_t>(c.period - 2007)] += (c.upper - c.lower) / 5.0;
    else if (c.period == 2006)
      est_width_last += (c.upper - c.lower) / 5.0;
  }
  REQUIRE(pred_width[0] > est_width_last);
  REQUIRE(pred_width[1] > pred_width[0]);
}

TEST_CASE("rw2 fit with no holdout flags every cell as estimation") {
  const ApcDataset data = band_data(5, 6);
  const auto fit = apc::fit_rw2_model(data, 2006, PCPrior{});
  REQUIRE(fit.cells.size() == 30u);
  for (const auto& c : fit.cells) REQUIRE_FALSE(c.prediction);
}
