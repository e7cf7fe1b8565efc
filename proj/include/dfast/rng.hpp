#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace dfast {

// Seedable xoshiro256++ generator. All randomness in the library flows
// through instances of this class, threaded explicitly by the caller, so
// that runs are reproducible bit-for-bit on a given platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    uint64_t z = seed;
    for (auto& w : state_) w = splitmix64(z);
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // rejection sampling to avoid modulo bias
    const uint64_t limit = n * ((~uint64_t{0}) / n);
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; second draw cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1], u2 in [0,1)
    const double u1 = (double((next_u64() >> 11)) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal truncated at +/- 2 standard deviations, then scaled.
  double trunc_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * stddev;
  }

  bool coin() { return (next_u64() >> 63) != 0; }

  // Deterministically combine identifiers into one stream seed.
  static uint64_t mix(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x9e3779b97f4a7c15ull;
    for (uint64_t p : parts) {
      uint64_t z = p;
      h ^= splitmix64(z) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return h;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::array<uint64_t, 4> state_;
  double spare_;
  bool has_spare_;
};

}  // namespace dfast
