#pragma once

#include <cmath>
#include <cstdint>

namespace lomt {

/// splitmix64 generator. Self-contained so streams do not depend on
/// libstdc++ distribution internals.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits.
  double uniform01() { return (double)(next() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  int below(int n) { return (int)(next() % (uint64_t)n); }

  /// Standard normal via Box-Muller. Stateless across calls: each call
  /// consumes exactly two uniforms.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

/// Combines a seed with a stream tag so sub-streams are independent.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace lomt
