#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace spx {

// Deterministic sampling helpers on top of mt19937. The std <random>
// distributions are not pinned across standard libraries, so every draw the
// project depends on for reproducibility goes through these.
inline double urand(std::mt19937& rng) {
  // 32 fresh bits -> [0,1)
  return static_cast<double>(rng()) * (1.0 / 4294967296.0);
}

inline double urand(std::mt19937& rng, double lo, double hi) {
  return lo + (hi - lo) * urand(rng);
}

// Uniform integer in [lo, hi] inclusive.
inline int rand_int(std::mt19937& rng, int lo, int hi) {
  return lo + static_cast<int>(urand(rng) * static_cast<double>(hi - lo + 1));
}

// Box-Muller; consumes two draws per pair, caller gets one value at a time.
inline double nrand(std::mt19937& rng) {
  double u1 = 0.0;
  do {
    u1 = urand(rng);
  } while (u1 <= 1e-12);
  const double u2 = urand(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Normal truncated to +-2 sigma, the usual transformer init.
inline double trunc_nrand(std::mt19937& rng, double stddev) {
  double z = nrand(rng);
  while (std::fabs(z) > 2.0) z = nrand(rng);
  return z * stddev;
}

}  // namespace spx
