#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace mcpo {

/// Counter-based deterministic RNG (splitmix64 core). Streams are derived by
/// hashing a seed with a path of tags, so any (seed, step, prompt, ...) tuple
/// names an independent stream regardless of scheduling order.
class Rng {
 public:
  explicit Rng(std::uint64_t state) : state_(state) {}

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // boost-style hash combine on top of a splitmix64 scramble
    std::uint64_t x = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
    return scramble(x ^ b);
  }

  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = scramble(seed);
    for (std::uint64_t tag : path) s = mix(s, tag);
    return Rng(s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return scramble(state_);
  }

  /// Uniform in [0, 1) with 53 bits of entropy.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) {
    // multiply-shift; bias is negligible for the small n used here
    return std::uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

  /// Draw an index from an (unnormalized is fine) probability vector by
  /// inverse-CDF walk. Returns the last index if rounding leaves residue.
  std::size_t categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    double u = next_double() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return probs.size() - 1;
  }

 private:
  static std::uint64_t scramble(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace mcpo
