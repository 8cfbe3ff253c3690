#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "apc/rng.hpp"

using apc::CounterRng;

TEST_CASE("identical keys reproduce the same stream") {
  CounterRng a(42, 7, 3), b(42, 7, 3);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("streams and substreams are distinct") {
  CounterRng a(42, 7, 3), b(42, 8, 3), c(42, 7, 4);
  int equal_ab = 0, equal_ac = 0;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    if (va == b.next_u64()) ++equal_ab;
    if (va == c.next_u64()) ++equal_ac;
  }
  REQUIRE(equal_ab == 0);
  REQUIRE(equal_ac == 0);
}

TEST_CASE("uniform lands in [0,1) with the right mean") {
  CounterRng r(1, 0);
  const int n = 200000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  // SE of the mean is 1/sqrt(12 n) ~ 6.5e-4; allow 4 SE.
  REQUIRE(std::fabs(sum / n - 0.5) < 2.6e-3);
}

TEST_CASE("normal moments") {
  CounterRng r(2, 0);
  const int n = 200000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s1 += z;
    s2 += z * z;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  REQUIRE(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
  REQUIRE(std::fabs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("exponential mean matches its rate") {
  CounterRng r(3, 0);
  const int n = 200000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += r.exponential(2.0);
  REQUIRE(std::fabs(sum / n - 0.5) < 4.0 * 0.5 / std::sqrt(static_cast<double>(n)));
}

static void check_poisson_moments(double mean_target, std::uint64_t seed) {
  CounterRng r(seed, 0);
  const int n = 200000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double k = static_cast<double>(r.poisson(mean_target));
    s1 += k;
    s2 += k * k;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  const double se_mean = std::sqrt(mean_target / n);
  REQUIRE(std::fabs(mean - mean_target) < 4.0 * se_mean);
  // Var(sample variance) for Poisson ~ (mean + 2 mean^2)/n.
  const double se_var = std::sqrt((mean_target + 2.0 * mean_target * mean_target) / n);
  REQUIRE(std::fabs(var - mean_target) < 4.0 * se_var);
}

TEST_CASE("poisson moments, inversion regime") { check_poisson_moments(3.7, 11); }

TEST_CASE("poisson moments, rejection regime") { check_poisson_moments(375.0, 12); }

TEST_CASE("poisson edge cases") {
  CounterRng r(4, 0);
  REQUIRE(r.poisson(0.0) == 0);
  REQUIRE(r.poisson(-1.0) == 0);
  // Tiny mean: almost always zero, never negative-like wrap.
  for (int i = 0; i < 1000; ++i) REQUIRE(r.poisson(1e-12) <= 1);
}
