#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "apc/common.hpp"

namespace apc {

// Orthonormal basis of the null space of C (rows = constraints). Columns Z
// satisfy C Z = 0 and Z'Z = I, so substituting x = Z v enforces C x = 0
// exactly while keeping quadratic forms well conditioned.
inline Eigen::MatrixXd constraint_null_space(const Eigen::MatrixXd& C) {
  const int n = static_cast<int>(C.cols());
  const int k = static_cast<int>(C.rows());
  require(n > k, errc::rank_loss, "more constraints than free coordinates");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> rank_check(C.transpose());
  require(rank_check.rank() == k, errc::rank_loss, "constraint matrix is rank deficient");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(C.transpose());
  Eigen::MatrixXd Qfull = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  return Qfull.rightCols(n - k);
}

// log determinant of a symmetric positive definite matrix via LDLT.
inline double logdet_spd(const Eigen::LDLT<Eigen::MatrixXd>& ldlt) {
  require(ldlt.info() == Eigen::Success, errc::singular_system,
          "factorisation failed in log-determinant");
  double s = 0.0;
  const auto& d = ldlt.vectorD();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    require(d[i] > 0.0, errc::singular_system,
            "matrix not positive definite in log-determinant");
    s += std::log(d[i]);
  }
  return s;
}

}  // namespace apc
