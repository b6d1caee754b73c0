#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fieldcycle {

// Counter-based draws: the value depends only on (seed, index), so parallel
// sweeps get reproducible streams without sharing generator state.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Uniform on the open interval (0, 1).
inline double uniform_open(std::uint64_t seed, std::uint64_t index, std::uint64_t lane = 0) noexcept {
  const std::uint64_t bits = splitmix64(splitmix64(seed ^ splitmix64(index)) + lane);
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal draw via Box-Muller.
inline double standard_normal(std::uint64_t seed, std::uint64_t index) noexcept {
  const double u1 = uniform_open(seed, index, 1);
  const double u2 = uniform_open(seed, index, 2);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace fieldcycle
