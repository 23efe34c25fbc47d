#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace appt {

/// SplitMix64 finalizer (Steele, Lea & Flood). Bijective on 64-bit words.
constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over bytes; used to derive stream ids from names.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Counter-based generator: the i-th draw of stream `stream` under `seed` is
///
///   word(i) = splitmix64(splitmix64(seed ^ splitmix64(stream)) + i * 0x9E3779B97F4A7C15)
///
/// so any draw can be computed independently of every other draw and there
/// is no mutable generator state to share. Uniform reals use the top 53 bits.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(splitmix64(seed ^ splitmix64(stream))) {}

  constexpr CounterRng(std::uint64_t seed, std::string_view stream) noexcept
      : CounterRng(seed, fnv1a(stream)) {}

  constexpr std::uint64_t word(std::uint64_t counter) const noexcept {
    return splitmix64(key_ + counter * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(word(counter) >> 11) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const noexcept {
    return lo + (hi - lo) * uniform(counter);
  }

  /// Standard normal via Box-Muller on draws 2c and 2c+1.
  double normal(std::uint64_t counter) const noexcept {
    const double u1 = 1.0 - uniform(2 * counter);  // (0, 1]
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by multiply-shift; n must be > 0.
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(word(counter)) * n) >> 64);
  }

  /// Child generator for an independent sub-stream.
  constexpr CounterRng child(std::uint64_t stream) const noexcept {
    return CounterRng(key_, stream);
  }

 private:
  std::uint64_t key_;
};

}  // namespace appt
