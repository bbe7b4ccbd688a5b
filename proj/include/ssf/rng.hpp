#pragma once

#include <cstdint>

namespace ssf {

// SplitMix64 (Steele, Lea, Flood 2014): output n is mix(seed + n * gamma), so
// the stream is a pure function of (seed, counter) and identical on every
// platform and language that implements the same 64-bit arithmetic.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0. Multiply-shift keeps it branch-free.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Independent stream for a sub-task, derived from this generator's seed.
  SplitMix64 fork(std::uint64_t stream) const {
    SplitMix64 g(state_ ^ (0xD1B54A32D192ED03ull * (stream + 1)));
    g.next();
    return g;
  }

 private:
  std::uint64_t state_;
};

}  // namespace ssf
