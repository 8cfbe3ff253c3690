#pragma once

#include <cmath>
#include <cstdint>

namespace apc {

// Finalizer of the splitmix64 generator. Bijective on 64-bit words, passes
// the usual avalanche tests, so hashing a (key, counter) pair gives an
// independent stream per key with no shared state between streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based generator. The draw sequence for a given (seed, stream,
// substream) triple is a pure function of that triple, so simulation
// replicates and cells can be assigned disjoint streams and produce the same
// numbers no matter how work is scheduled.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0)
      : key_(splitmix64(splitmix64(seed ^ 0x243f6a8885a308d3ull) + stream * 0x9e3779b97f4a7c15ull) ^
             splitmix64(substream + 0x13198a2e03707344ull)) {}

  std::uint64_t next_u64() { return splitmix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    // Clamp away from 0 so the log stays finite.
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Exponential with the given rate.
  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  // Poisson draw: sequential inversion for small means, the PTRS transformed
  // rejection sampler (Hormann 1993) for large ones.
  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean < 30.0) return poisson_inversion(mean);
    return poisson_ptrs(mean);
  }

 private:
  std::uint64_t poisson_inversion(double mean) {
    const double target = uniform();
    double p = std::exp(-mean);
    double cdf = p;
    std::uint64_t k = 0;
    while (cdf < target && k < 2000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }

  std::uint64_t poisson_ptrs(double mean) {
    const double slam = std::sqrt(mean);
    const double llam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      const double u = uniform() - 0.5;
      const double v = uniform();
      const double us = 0.5 - std::fabs(u);
      const double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
      if (us >= 0.07 && v <= v_r) return static_cast<std::uint64_t>(kf);
      if (kf < 0.0 || (us < 0.013 && v > us)) continue;
      const double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
      const double rhs = kf * llam - mean - std::lgamma(kf + 1.0);
      if (lhs <= rhs) return static_cast<std::uint64_t>(kf);
    }
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace apc
