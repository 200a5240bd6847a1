#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace rsmfc {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derive an independent seed stream for a named sub-purpose.
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(splitmix64(seed) ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ (b * 0xc2b2ae3d27d4eb4fULL));
  return h;
}

// Uniform in (0, 1]; never returns 0 so log() is safe.
inline double uniform_open(std::uint64_t h) {
  return (static_cast<double>(h >> 11) + 1.0) * 0x1.0p-53;
}

// Stateless counter-based normal pair: the value depends only on
// (seed, path, step), never on how work is partitioned across threads or on
// how many paths exist. Box-Muller on two hashed uniforms.
inline std::array<double, 2> normal_pair(std::uint64_t seed, std::uint64_t path,
                                         std::uint64_t step) {
  const double u1 = uniform_open(counter_hash(seed, path, 2 * step));
  const double u2 = uniform_open(counter_hash(seed, path, 2 * step + 1));
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 6.283185307179586476925286766559 * u2;
  return {r * std::cos(a), r * std::sin(a)};
}

// Single uniform in [0, 1) for resampling offsets and probe draws.
inline double uniform01(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return static_cast<double>(counter_hash(seed, a, b) >> 11) * 0x1.0p-53;
}

}  // namespace rsmfc
