#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "apc/common.hpp"
#include "apc/gmrf.hpp"
#include "apc/linalg.hpp"

namespace apc {

enum class SplineFamily { crs, bs, tprs };

inline const char* family_name(SplineFamily f) {
  switch (f) {
    case SplineFamily::crs: return "crs";
    case SplineFamily::bs: return "bs";
    case SplineFamily::tprs: return "tprs";
  }
  return "?";
}

// How rows outside the training range are produced: a straight line from the
// boundary (crs, tprs) or the cubic boundary polynomial continued (bs).
enum class ExtrapolationMode { linear, cubic };

struct BasisEval {
  Eigen::MatrixXd X;                  // one row per requested value
  std::vector<bool> extrapolated;     // true where the value was out of range
  ExtrapolationMode mode;
};

// Univariate smoothing basis with a quadratic curvature penalty. Three
// families share the interface:
//   crs  - natural cubic regression spline in value parameterisation, exact
//          integrated-squared-second-derivative penalty S = D' B^{-1} D;
//   bs   - cubic B-splines on equally spaced knots, order-2 difference
//          penalty S = D2' D2;
//   tprs - thin plate regression spline: eigenbasis of the cubic kernel
//          |x_i - x_j|^3 / 12 truncated to n_knots, plus untouched constant
//          and linear columns.
// Every family penalises nothing on affine functions, so S has exactly two
// zero eigenvalues, and evaluation beyond the data continues smoothly.
class SplineBasis {
 public:
  SplineFamily family = SplineFamily::tprs;
  Eigen::VectorXd values;  // training values (strictly increasing)
  Eigen::MatrixXd X;       // basis at the training values, n x T
  Eigen::MatrixXd S;       // penalty, T x T, PSD with two zero eigenvalues

  int size() const { return static_cast<int>(S.rows()); }

  BasisEval evaluate(const Eigen::VectorXd& at) const {
    BasisEval out;
    out.mode = family == SplineFamily::bs ? ExtrapolationMode::cubic
                                          : ExtrapolationMode::linear;
    out.X.resize(at.size(), size());
    out.extrapolated.assign(static_cast<std::size_t>(at.size()), false);
    for (Eigen::Index i = 0; i < at.size(); ++i) {
      const double x = at[i];
      out.extrapolated[static_cast<std::size_t>(i)] = x < lo_ || x > hi_;
      switch (family) {
        case SplineFamily::crs: out.X.row(i) = crs_row(x); break;
        case SplineFamily::bs: out.X.row(i) = bs_row(x, 0); break;
        case SplineFamily::tprs: out.X.row(i) = tprs_row(x); break;
      }
    }
    return out;
  }

  // Derivative of the basis row, available for all families; used by tests to
  // confirm that extrapolation is linear (second derivative zero) for crs and
  // tprs and smooth for bs.
  Eigen::RowVectorXd derivative_row(double x, int order) const {
    require(order >= 1 && order <= 3, errc::bad_input, "derivative order in 1..3");
    switch (family) {
      case SplineFamily::crs: return crs_row_derivative(x, order);
      case SplineFamily::bs: return bs_row(x, order);
      case SplineFamily::tprs: return tprs_row_derivative(x, order);
    }
    fail(errc::bad_input, "unknown family");
  }

 private:
  friend SplineBasis make_basis(SplineFamily, const Eigen::VectorXd&, int);

  double lo_ = 0.0, hi_ = 0.0;  // training range

  // crs state: knot locations and the map F from knot values to second
  // derivatives at the knots (rows 1..T-2 of B^{-1} D padded with zeros).
  Eigen::VectorXd crs_knots_;
  Eigen::MatrixXd crs_F_;

  // bs state: full knot vector of length T + 4, equally spaced.
  Eigen::VectorXd bs_knots_;

  // tprs state: kernel centres (the training values) and the map from kernel
  // columns to the T-2 wiggle columns, M = U_k Z_c.
  Eigen::MatrixXd tprs_map_;

  // ---- crs ----------------------------------------------------------------

  Eigen::RowVectorXd crs_point_row(double x) const {
    const Eigen::VectorXd& k = crs_knots_;
    const int T = static_cast<int>(k.size());
    int j = static_cast<int>(std::upper_bound(k.data(), k.data() + T, x) - k.data()) - 1;
    j = std::clamp(j, 0, T - 2);
    const double h = k[j + 1] - k[j];
    const double dm = k[j + 1] - x, dp = x - k[j];
    const double am = dm / h, ap = dp / h;
    const double cm = (dm * dm * dm / h - h * dm) / 6.0;
    const double cp = (dp * dp * dp / h - h * dp) / 6.0;
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(T);
    r[j] += am;
    r[j + 1] += ap;
    r += cm * crs_F_.row(j) + cp * crs_F_.row(j + 1);
    return r;
  }

  Eigen::RowVectorXd crs_point_derivative(double x, int order) const {
    const Eigen::VectorXd& k = crs_knots_;
    const int T = static_cast<int>(k.size());
    int j = static_cast<int>(std::upper_bound(k.data(), k.data() + T, x) - k.data()) - 1;
    j = std::clamp(j, 0, T - 2);
    const double h = k[j + 1] - k[j];
    const double dm = k[j + 1] - x, dp = x - k[j];
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(T);
    if (order == 1) {
      r[j] -= 1.0 / h;
      r[j + 1] += 1.0 / h;
      r += ((-3.0 * dm * dm / h + h) / 6.0) * crs_F_.row(j) +
           ((3.0 * dp * dp / h - h) / 6.0) * crs_F_.row(j + 1);
    } else if (order == 2) {
      r = (dm / h) * crs_F_.row(j) + (dp / h) * crs_F_.row(j + 1);
    } else {
      r = (crs_F_.row(j + 1) - crs_F_.row(j)) / h;
    }
    return r;
  }

  Eigen::RowVectorXd crs_row(double x) const {
    if (x < lo_) return crs_point_row(lo_) + (x - lo_) * crs_point_derivative(lo_, 1);
    if (x > hi_) return crs_point_row(hi_) + (x - hi_) * crs_point_derivative(hi_, 1);
    return crs_point_row(x);
  }

  Eigen::RowVectorXd crs_row_derivative(double x, int order) const {
    if (x < lo_ || x > hi_) {
      const double b = x < lo_ ? lo_ : hi_;
      if (order == 1) return crs_point_derivative(b, 1);
      return Eigen::RowVectorXd::Zero(size());
    }
    return crs_point_derivative(x, order);
  }

  // ---- bs -----------------------------------------------------------------

  // All T cubic B-splines (or a derivative of them) at x. Outside the knot
  // range the boundary cubic is continued via its Taylor expansion, which for
  // a polynomial is exact.
  Eigen::RowVectorXd bs_row(double x, int nderiv) const {
    if (x < lo_ || x > hi_) {
      const double b = x < lo_ ? lo_ : hi_;
      const double d = x - b;
      Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(size());
      double fact = 1.0;
      for (int q = nderiv; q <= 3; ++q) {
        if (q > nderiv) fact *= static_cast<double>(q - nderiv);
        r += bs_inside_row(b, q) * std::pow(d, q - nderiv) / fact;
      }
      return r;
    }
    return bs_inside_row(x, nderiv);
  }

  Eigen::RowVectorXd bs_inside_row(double x, int nderiv) const {
    const Eigen::VectorXd& t = bs_knots_;
    const int T = size();
    const double h = t[1] - t[0];
    // Interval index j with t[j] <= x < t[j+1], clamped so x == hi_ uses the
    // last data interval. Using 0-based knots: data intervals are 3..T-1.
    int j = static_cast<int>(std::floor((x - t[0]) / h));
    j = std::clamp(j, 3, T - 1);
    // Orders 1..4 over the local support; Bk[i] holds B_{i,k}(x) for the
    // global index range [j-3, j] at order 4.
    std::vector<double> B1(T + 3, 0.0), B2(T + 2, 0.0), B3(T + 1, 0.0), B4(T, 0.0);
    B1[static_cast<std::size_t>(j)] = 1.0;
    auto recur = [&](const std::vector<double>& lower, std::vector<double>& upper, int ord) {
      const int span = ord - 1;
      for (int i = std::max(0, j - span); i <= j && i < static_cast<int>(upper.size()); ++i) {
        const double left = (x - t[i]) / (t[i + span] - t[i]);
        const double right = (t[i + ord] - x) / (t[i + ord] - t[i + 1]);
        upper[static_cast<std::size_t>(i)] =
            left * lower[static_cast<std::size_t>(i)] +
            right * lower[static_cast<std::size_t>(i + 1)];
      }
    };
    recur(B1, B2, 2);
    recur(B2, B3, 3);
    recur(B3, B4, 4);
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(T);
    for (int i = std::max(0, j - 3); i <= std::min(j, T - 1); ++i) {
      double v = 0.0;
      switch (nderiv) {
        case 0: v = B4[static_cast<std::size_t>(i)]; break;
        case 1:
          v = (B3[static_cast<std::size_t>(i)] - B3[static_cast<std::size_t>(i + 1)]) / h;
          break;
        case 2:
          v = (B2[static_cast<std::size_t>(i)] - 2.0 * B2[static_cast<std::size_t>(i + 1)] +
               B2[static_cast<std::size_t>(i + 2)]) /
              (h * h);
          break;
        case 3:
          v = (B1[static_cast<std::size_t>(i)] - 3.0 * B1[static_cast<std::size_t>(i + 1)] +
               3.0 * B1[static_cast<std::size_t>(i + 2)] -
               B1[static_cast<std::size_t>(i + 3)]) /
              (h * h * h);
          break;
      }
      r[i] = v;
    }
    return r;
  }

  // ---- tprs ---------------------------------------------------------------

  static double tp_kernel(double r) { return r * r * r / 12.0; }

  Eigen::RowVectorXd tprs_row(double x) const {
    const int n = static_cast<int>(values.size());
    Eigen::RowVectorXd e(n);
    for (int i = 0; i < n; ++i) e[i] = tp_kernel(std::fabs(x - values[i]));
    Eigen::RowVectorXd r(size());
    r.head(size() - 2) = e * tprs_map_;
    r[size() - 2] = 1.0;
    r[size() - 1] = x;
    return r;
  }

  Eigen::RowVectorXd tprs_row_derivative(double x, int order) const {
    const int n = static_cast<int>(values.size());
    Eigen::RowVectorXd e(n);
    for (int i = 0; i < n; ++i) {
      const double d = x - values[i];
      const double s = d < 0 ? -1.0 : 1.0;
      const double a = std::fabs(d);
      switch (order) {
        case 1: e[i] = s * a * a / 4.0; break;
        case 2: e[i] = a / 2.0; break;
        default: e[i] = s / 2.0; break;
      }
    }
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(size());
    r.head(size() - 2) = e * tprs_map_;
    if (order == 1) r[size() - 1] = 1.0;
    return r;
  }
};

namespace detail {

// Interpolated quantiles of the (already distinct, sorted) values: k knots
// spread over the value range including both endpoints.
inline Eigen::VectorXd quantile_knots(const Eigen::VectorXd& x, int k) {
  const int n = static_cast<int>(x.size());
  Eigen::VectorXd knots(k);
  for (int j = 0; j < k; ++j) {
    const double pos = static_cast<double>(j) * (n - 1) / (k - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, n - 1);
    const double w = pos - lo;
    knots[j] = (1.0 - w) * x[lo] + w * x[hi];
  }
  return knots;
}

}  // namespace detail

// Builds a basis of dimension n_knots on strictly increasing values.
inline SplineBasis make_basis(SplineFamily family, const Eigen::VectorXd& values,
                              int n_knots) {
  const int n = static_cast<int>(values.size());
  require(n >= 2, errc::too_few_levels, "need at least two values to smooth");
  for (int i = 1; i < n; ++i)
    require(values[i] > values[i - 1], errc::duplicate_values,
            "basis values must be strictly increasing");
  const int min_k = family == SplineFamily::tprs ? 3 : 4;
  require(n_knots >= min_k, errc::too_few_knots,
          std::string(family_name(family)) + " basis needs at least " +
              std::to_string(min_k) + " knots");
  require(n_knots <= n, errc::too_few_knots,
          "basis dimension " + std::to_string(n_knots) + " exceeds the " +
              std::to_string(n) + " distinct values");

  SplineBasis b;
  b.family = family;
  b.values = values;
  b.lo_ = values[0];
  b.hi_ = values[n - 1];
  const int T = n_knots;

  if (family == SplineFamily::crs) {
    b.crs_knots_ = detail::quantile_knots(values, T);
    // Banded D ((T-2) x T) and tridiagonal B ((T-2) x (T-2)) from the natural
    // cubic spline construction; F maps knot values to knot second
    // derivatives and S = D' B^{-1} D is the exact curvature penalty.
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(T - 2, T);
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(T - 2, T - 2);
    for (int i = 0; i < T - 2; ++i) {
      const double h0 = b.crs_knots_[i + 1] - b.crs_knots_[i];
      const double h1 = b.crs_knots_[i + 2] - b.crs_knots_[i + 1];
      D(i, i) = 1.0 / h0;
      D(i, i + 1) = -1.0 / h0 - 1.0 / h1;
      D(i, i + 2) = 1.0 / h1;
      B(i, i) = (h0 + h1) / 3.0;
      if (i + 1 < T - 2) {
        B(i, i + 1) = h1 / 6.0;
        B(i + 1, i) = h1 / 6.0;
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> B_ldlt(B);
    require(B_ldlt.info() == Eigen::Success, errc::singular_system,
            "crs band matrix factorisation failed");
    const Eigen::MatrixXd Finner = B_ldlt.solve(D);  // (T-2) x T
    b.crs_F_ = Eigen::MatrixXd::Zero(T, T);
    b.crs_F_.middleRows(1, T - 2) = Finner;
    Eigen::MatrixXd S = D.transpose() * Finner;
    b.S = 0.5 * (S + S.transpose());
  } else if (family == SplineFamily::bs) {
    // Equally spaced knots covering [lo, hi] with three extra knots on each
    // side; T basis functions need T + 4 knots in total.
    const double h = (b.hi_ - b.lo_) / static_cast<double>(T - 3);
    b.bs_knots_.resize(T + 4);
    for (int i = 0; i < T + 4; ++i) b.bs_knots_[i] = b.lo_ + (i - 3) * h;
    const Eigen::MatrixXd D2 = Eigen::MatrixXd(difference_operator(2, T));
    b.S = D2.transpose() * D2;
  } else {
    // Kernel matrix over the training values, truncated eigenbasis, and the
    // affine-moment constraints T' delta = 0 absorbed into the columns.
    Eigen::MatrixXd E(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        E(i, j) = SplineBasis::tp_kernel(std::fabs(values[i] - values[j]));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(E);
    require(eig.info() == Eigen::Success, errc::singular_system,
            "kernel eigendecomposition failed");
    // Keep the n_knots - 2 constrained combinations of the n_knots leading
    // eigenvectors by absolute eigenvalue.
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int c) {
      return std::fabs(eig.eigenvalues()[a]) > std::fabs(eig.eigenvalues()[c]);
    });
    Eigen::MatrixXd Uk(n, T);
    Eigen::VectorXd dk(T);
    for (int j = 0; j < T; ++j) {
      Uk.col(j) = eig.eigenvectors().col(idx[static_cast<std::size_t>(j)]);
      dk[j] = eig.eigenvalues()[idx[static_cast<std::size_t>(j)]];
    }
    Eigen::MatrixXd Tmat(n, 2);
    Tmat.col(0).setOnes();
    Tmat.col(1) = values;
    const Eigen::MatrixXd Zc = constraint_null_space(Tmat.transpose() * Uk);  // k x (k-2)
    b.tprs_map_ = Uk * Zc;  // n x (k-2)
    Eigen::MatrixXd Sw = Zc.transpose() * dk.asDiagonal() * Zc;
    const Eigen::MatrixXd Swt = Sw.transpose();
    b.S = Eigen::MatrixXd::Zero(T, T);
    b.S.topLeftCorner(T - 2, T - 2) = 0.5 * (Sw + Swt);
  }

  b.X = b.evaluate(values).X;
  return b;
}

}  // namespace apc
