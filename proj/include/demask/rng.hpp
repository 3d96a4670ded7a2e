#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace demask {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent streams from a root seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed) { return mix_seed(seed); }

template <typename... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t first, Rest... rest) {
  return derive_seed(mix_seed(seed ^ mix_seed(first + 0x632be59bd9b4e019ULL)),
                     static_cast<std::uint64_t>(rest)...);
}

/// Uniform double in [0, 1) with 53 random bits. Independent of the
/// standard library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

/// Draws an index from an (unnormalized) nonnegative weight vector.
inline int sample_categorical(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] <= 0.0) continue;
    last_positive = static_cast<int>(k);
    acc += weights[k];
    if (u < acc) return last_positive;
  }
  return last_positive;
}

/// Gamma(shape, 1) via Marsaglia-Tsang, built on uniform01 so model
/// generation is reproducible bit-for-bit across standard libraries.
inline double sample_gamma(double shape, Rng& rng) {
  if (shape < 1.0) {
    const double u = uniform01(rng);
    return sample_gamma(shape + 1.0, rng) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x;
    double v;
    do {
      // Box-Muller normal.
      double u1 = uniform01(rng);
      const double u2 = uniform01(rng);
      if (u1 <= 0.0) u1 = 0x1.0p-53;
      x = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform01(rng);
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u > 0.0 ? u : 0x1.0p-53) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

inline double sample_normal(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace demask
