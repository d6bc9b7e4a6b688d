#pragma once

// Platform-stable random streams. The engine output of std::mt19937_64 is
// fixed by the standard, the std distributions are not, so the transforms
// to uniform/normal variates live here.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace cordseg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for an independent stream identified by (base, stream, counter).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t counter = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ (stream * 0xd1b54a32d192ed03ULL)) ^ counter);
}

enum class Stream : std::uint64_t {
  init = 1,
  sample = 2,
  augment = 3,
  dropout = 4,
  phantom = 5,
  rater = 6,
  test = 7,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t base, Stream stream, std::uint64_t counter = 0)
      : engine_(derive_seed(base, static_cast<std::uint64_t>(stream), counter)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cordseg
