#pragma once

#include <cmath>
#include <cstdint>

namespace omnimol {

/// SplitMix64 generator (Steele, Lea & Flood 2014). The output stream is a
/// pure function of the 64-bit seed, so results are bit-identical on every
/// platform. `split()` derives an independent child stream, which is how
/// per-sample and per-module generators are obtained.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  /// Standard normal via Box-Muller (no cached second value, so the stream
  /// position is easy to reason about).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  Rng split() noexcept { return Rng(next() ^ 0xD1B54A32D192ED03ULL); }

  std::uint64_t seed_state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace omnimol
