#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <limits>

#include "apc/optim.hpp"
#include "helpers.hpp"

using apc::nelder_mead;
using apc::NelderMeadOptions;

TEST_CASE("nelder-mead minimises a shifted quadratic") {
  auto f = [](const Eigen::VectorXd& x) {
    return 2.0 * (x[0] - 1.5) * (x[0] - 1.5) + (x[1] + 0.5) * (x[1] + 0.5) +
           0.3 * (x[0] - 1.5) * (x[1] + 0.5) + 7.0;
  };
  NelderMeadOptions opt;
  opt.max_evals = 2000;
  opt.ftol = 1e-13;
  opt.xtol = 1e-8;
  const auto res = nelder_mead(f, Eigen::Vector2d(0.0, 0.0), opt);
  REQUIRE(res.converged);
  REQUIRE(res.x[0] == Catch::Approx(1.5).margin(1e-5));
  REQUIRE(res.x[1] == Catch::Approx(-0.5).margin(1e-5));
  REQUIRE(res.f == Catch::Approx(7.0).margin(1e-8));
}

TEST_CASE("nelder-mead handles a banana valley in 2d") {
  auto rosenbrock = [](const Eigen::VectorXd& x) {
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    return a * a + 100.0 * b * b;
  };
  NelderMeadOptions opt;
  opt.max_evals = 5000;
  opt.step = 0.8;
  opt.ftol = 1e-12;
  opt.xtol = 1e-9;
  const auto res = nelder_mead(rosenbrock, Eigen::Vector2d(-1.2, 1.0), opt);
  REQUIRE(res.f < 1e-8);
  REQUIRE(res.x[0] == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("nelder-mead retreats from non-finite regions") {
  // The objective is NaN left of the origin; the minimiser sits at 2.
  auto f = [](const Eigen::VectorXd& x) {
    if (x[0] < 0.0) return std::numeric_limits<double>::quiet_NaN();
    return (x[0] - 2.0) * (x[0] - 2.0);
  };
  NelderMeadOptions opt;
  opt.max_evals = 500;
  const auto res = nelder_mead(f, Eigen::VectorXd::Constant(1, 0.3), opt);
  REQUIRE(res.x[0] == Catch::Approx(2.0).margin(1e-3));
}

TEST_CASE("nelder-mead works in one dimension and reports eval counts") {
  auto f = [](const Eigen::VectorXd& x) { return std::cosh(x[0] - 0.75); };
  const auto res = nelder_mead(f, Eigen::VectorXd::Zero(1));
  REQUIRE(res.converged);
  REQUIRE(res.x[0] == Catch::Approx(0.75).margin(1e-4));
  REQUIRE(res.evals > 2);
  REQUIRE(res.evals <= 400);
}

TEST_CASE("nelder-mead rejects empty starts") {
  auto f = [](const Eigen::VectorXd&) { return 0.0; };
  REQUIRE(apc_test::code_of([&] { return nelder_mead(f, Eigen::VectorXd()); }) ==
          apc::errc::bad_input);
}
