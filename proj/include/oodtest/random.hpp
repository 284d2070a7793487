#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oodtest {

// All randomness goes through std::mt19937_64 seeded with a 64-bit value.
// Streams are reproducible for a given standard library build.
using Rng = std::mt19937_64;

inline constexpr std::uint64_t kDefaultSeed = 42;

// splitmix64 finalizer, used to derive decorrelated child seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child seed for stream `index`. Index 0 maps to the parent seed itself so a
// one-element series reproduces the single-call result.
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return index == 0 ? seed : mix64(seed ^ mix64(index));
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  // Fisher-Yates with our own index draw so the permutation does not depend on
  // std::shuffle's unspecified algorithm.
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; the second variate is discarded.
inline double standard_normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace oodtest
