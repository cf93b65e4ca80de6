#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace bilayer {

// Counter-based PRNG (splitmix64 core). State is two u64 words, so streams
// can be split per component and serialized exactly for checkpoint resume.
class Rng {
 public:
  Rng() : Rng(0x5eed) {}
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : state_(mix(seed + 0x9e3779b97f4a7c15ULL * (stream + 1))) {}

  static Rng from_state(std::uint64_t raw_state) {
    Rng r;
    r.state_ = raw_state;
    return r;
  }

  std::uint64_t state() const { return state_; }

  // Derive an independent child stream without advancing determinism
  // guarantees of the parent beyond one draw.
  Rng split(std::uint64_t stream) { return Rng(next_u64(), stream); }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  std::uint64_t next_below(std::uint64_t n) {
    // Modulo bias is negligible for n << 2^64.
    return n == 0 ? 0 : next_u64() % n;
  }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller; one value per call keeps the draw count predictable.
  double gaussian(double mean = 0.0, double stddev = 1.0) {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    return mean + stddev * z;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace bilayer
