#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace fedsplit {

// Self-contained counter-free PRNG (xoshiro256** seeded via splitmix64).
// The standard <random> distributions are implementation-defined, so every
// draw here is hand-rolled to keep checkpoints and logs reproducible across
// toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
    cached_normal_valid_ = false;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
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
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t uniform_int(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller (cached pair).
  double normal() {
    if (cached_normal_valid_) {
      cached_normal_valid_ = false;
      return cached_normal_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    cached_normal_ = r * std::sin(2.0 * M_PI * u2);
    cached_normal_valid_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by resampling.
  double truncated_normal(double sigma) {
    for (;;) {
      double v = normal() * sigma;
      if (std::fabs(v) <= 2.0 * sigma) return v;
    }
  }

  // Gamma(alpha, 1) via Marsaglia-Tsang; alpha > 0.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Derives an independent stream from a base seed and a component path,
  // e.g. derive_seed(seed, {kClientStream, client_id, round}).
  static uint64_t derive(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
    for (uint64_t p : path) {
      h ^= mix64(p) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h = mix64(h);
    }
    return h;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t mix64(uint64_t x) { return splitmix64(x); }
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t state_[4];
  double cached_normal_ = 0.0;
  bool cached_normal_valid_ = false;
};

// Stream tags for Rng::derive.
enum StreamTag : uint64_t {
  kStreamInit = 1,
  kStreamClient = 2,
  kStreamServer = 3,
  kStreamSample = 4,
  kStreamData = 5,
  kStreamMask = 6,
  kStreamShuffle = 7,
};

}  // namespace fedsplit
