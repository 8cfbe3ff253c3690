#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "apc/common.hpp"

namespace apc {

struct NelderMeadOptions {
  double step = 0.5;      // initial simplex edge length
  int max_evals = 400;
  double ftol = 1e-9;     // relative spread of simplex values
  double xtol = 1e-5;     // simplex diameter
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
};

// Derivative-free simplex minimiser (Nelder-Mead with the standard
// reflection/expansion/contraction/shrink coefficients). Non-finite objective
// values are treated as +infinity, so the simplex simply backs away from bad
// regions.
template <class F>
NelderMeadResult nelder_mead(F&& func, const Eigen::VectorXd& x0,
                             const NelderMeadOptions& opt = {}) {
  const int n = static_cast<int>(x0.size());
  require(n >= 1, errc::bad_input, "nelder_mead needs at least one coordinate");
  NelderMeadResult res;

  auto safe = [&](const Eigen::VectorXd& x) {
    ++res.evals;
    const double v = func(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n) + 1, x0);
  std::vector<double> fs(static_cast<std::size_t>(n) + 1);
  fs[0] = safe(xs[0]);
  for (int i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i) + 1][i] += opt.step;
    fs[static_cast<std::size_t>(i) + 1] = safe(xs[static_cast<std::size_t>(i) + 1]);
  }

  auto order = [&]() {
    for (std::size_t i = 1; i < xs.size(); ++i) {
      const Eigen::VectorXd x = xs[i];
      const double f = fs[i];
      std::size_t j = i;
      while (j > 0 && fs[j - 1] > f) {
        xs[j] = xs[j - 1];
        fs[j] = fs[j - 1];
        --j;
      }
      xs[j] = x;
      fs[j] = f;
    }
  };
  order();

  const std::size_t last = static_cast<std::size_t>(n);
  while (res.evals < opt.max_evals) {
    double diam = 0.0;
    for (std::size_t i = 1; i <= last; ++i)
      diam = std::max(diam, (xs[i] - xs[0]).cwiseAbs().maxCoeff());
    const double spread = fs[last] - fs[0];
    if (std::isfinite(fs[last]) &&
        (spread <= opt.ftol * (std::fabs(fs[0]) + opt.ftol) || diam <= opt.xtol)) {
      res.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < last; ++i) centroid += xs[i];
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd xr = centroid + (centroid - xs[last]);
    const double fr = safe(xr);
    if (fr < fs[0]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[last]);
      const double fe = safe(xe);
      if (fe < fr) {
        xs[last] = xe;
        fs[last] = fe;
      } else {
        xs[last] = xr;
        fs[last] = fr;
      }
    } else if (fr < fs[last - 1]) {
      xs[last] = xr;
      fs[last] = fr;
    } else {
      const bool outside = fr < fs[last];
      const Eigen::VectorXd xc =
          centroid + 0.5 * ((outside ? xr : xs[last]) - centroid);
      const double fc = safe(xc);
      if (fc < (outside ? fr : fs[last])) {
        xs[last] = xc;
        fs[last] = fc;
      } else {
        for (std::size_t i = 1; i <= last; ++i) {
          xs[i] = xs[0] + 0.5 * (xs[i] - xs[0]);
          fs[i] = safe(xs[i]);
        }
      }
    }
    order();
  }

  res.x = xs[0];
  res.f = fs[0];
  return res;
}

}  // namespace apc
