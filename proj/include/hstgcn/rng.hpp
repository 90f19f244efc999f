#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hstgcn {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a stable sub-seed for a named stage (and optional counter) from a
/// root seed. Independent of platform and call order.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t counter = 0);

using Rng = std::mt19937_64;

/// Small counter-style generator for the many short-lived streams of the
/// simulator (seeding an mt19937_64 per vehicle is too slow).
struct SplitMix64 {
  using result_type = std::uint64_t;
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() {
    const std::uint64_t z = mix64(state);
    state += 0x9e3779b97f4a7c15ULL;
    return z;
  }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
};

}  // namespace hstgcn
