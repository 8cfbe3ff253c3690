#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>

#include "apc/common.hpp"
#include "apc/linalg.hpp"

namespace apc {

// (m - order) x m forward difference operator: row i applies the order-th
// difference starting at position i. Entries are signed binomial
// coefficients, so D * f stacks the order-th differences of f.
inline Eigen::SparseMatrix<double> difference_operator(int order, int m) {
  require(order >= 1, errc::bad_input, "difference order must be >= 1");
  require(m >= order + 1, errc::too_small,
          "need at least " + std::to_string(order + 1) + " levels for an order-" +
              std::to_string(order) + " difference");
  std::vector<double> coef(static_cast<std::size_t>(order) + 1);
  double c = 1.0;
  for (int k = 0; k <= order; ++k) {
    coef[static_cast<std::size_t>(k)] = ((order - k) % 2 == 0 ? c : -c);
    c = c * (order - k) / (k + 1.0);
  }
  Eigen::SparseMatrix<double> D(m - order, m);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(m - order) * (order + 1));
  for (int i = 0; i < m - order; ++i)
    for (int k = 0; k <= order; ++k)
      trips.emplace_back(i, i + k, coef[static_cast<std::size_t>(k)]);
  D.setFromTriplets(trips.begin(), trips.end());
  return D;
}

// Structure matrix R = D'D of a random walk of the given order. For order 2
// the interior stencil is (1, -4, 6, -4, 1) and rank is m - 2, with null
// space spanned by constant and linear vectors. Entries are exact small
// integers.
inline Eigen::SparseMatrix<double> structure_matrix(int order, int m) {
  Eigen::SparseMatrix<double> D = difference_operator(order, m);
  Eigen::SparseMatrix<double> R = Eigen::SparseMatrix<double>(D.transpose()) * D;
  // D'D entries are sums of small integer products; snap away any float dust
  // so downstream exact-integer comparisons hold.
  for (int k = 0; k < R.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(R, k); it; ++it)
      it.valueRef() = std::round(it.value());
  R.prune(0.0);
  return R;
}

// log density of a second-order random walk with precision tau, up to the
// additive constant that depends on neither f nor tau:
//   (m-2)/2 * log(tau) - tau/2 * sum of squared second differences.
inline double rw2_logdensity(const Eigen::VectorXd& f, double tau) {
  const int m = static_cast<int>(f.size());
  require(m >= 3, errc::too_small, "rw2 needs at least 3 levels");
  require(tau > 0.0, errc::nonpositive_precision, "rw2 precision must be positive");
  double quad = 0.0;
  for (int i = 0; i + 2 < m; ++i) {
    const double d2 = f[i] - 2.0 * f[i + 1] + f[i + 2];
    quad += d2 * d2;
  }
  return 0.5 * (m - 2) * std::log(tau) - 0.5 * tau * quad;
}

// Penalised-complexity prior for a precision tau, parameterised by a scale U
// and tail probability alpha: Prob(1/sqrt(tau) > U) = alpha. Equivalent to an
// exponential with rate kappa on the standard deviation sigma = tau^{-1/2}.
struct PCPrior {
  double U = 1.0;
  double alpha = 0.01;

  double kappa() const {
    require(U > 0.0 && alpha > 0.0 && alpha < 1.0, errc::bad_input,
            "PC prior needs U > 0 and alpha in (0, 1)");
    return -std::log(alpha) / U;
  }
};

// log pi(tau) = log(kappa/2) - (3/2) log(tau) - kappa * tau^{-1/2},
// the push-forward of the exponential prior on sigma through tau = sigma^-2.
inline double pc_log_prior(double tau, const PCPrior& prior) {
  require(tau > 0.0, errc::nonpositive_precision, "PC prior evaluated at tau <= 0");
  const double kappa = prior.kappa();
  return std::log(kappa / 2.0) - 1.5 * std::log(tau) - kappa / std::sqrt(tau);
}

// Draw tau from the PC prior: sigma ~ Exp(kappa), tau = sigma^-2.
template <class Rng>
double pc_prior_sample(Rng& rng, const PCPrior& prior) {
  const double sigma = rng.exponential(prior.kappa());
  return 1.0 / (sigma * sigma);
}

// Condition a proper Gaussian with precision Q (given by its LDLT) and mean
// mu on the hard constraints C x = e:
//   x* = mu - Q^{-1} C' (C Q^{-1} C')^{-1} (C mu - e).
// This is conditioning by kriging; it requires Q to be invertible.
inline Eigen::VectorXd condition_by_kriging(const Eigen::LDLT<Eigen::MatrixXd>& Q_ldlt,
                                            const Eigen::MatrixXd& C,
                                            const Eigen::VectorXd& mu,
                                            const Eigen::VectorXd& e) {
  require(C.cols() == mu.size() && C.rows() == e.size(), errc::shape_mismatch,
          "constraint dimensions do not match the field");
  const Eigen::MatrixXd V = Q_ldlt.solve(C.transpose());       // Q^{-1} C'
  const Eigen::MatrixXd S = C * V;                             // C Q^{-1} C'
  Eigen::LDLT<Eigen::MatrixXd> S_ldlt(S);
  require(S_ldlt.info() == Eigen::Success, errc::rank_loss,
          "constraint matrix loses rank under kriging");
  return mu - V * S_ldlt.solve(C * mu - e);
}

}  // namespace apc
