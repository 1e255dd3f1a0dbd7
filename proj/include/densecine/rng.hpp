#pragma once

// Deterministic random number generation.  All stochastic pieces of the
// pipeline (texture synthesis, image noise, weight init, batch shuffling)
// draw from an Rng seeded explicitly, so a run is reproducible bit-for-bit
// for a fixed seed on a fixed build.  Distribution transforms are written
// out by hand because libstdc++'s std::normal_distribution is not pinned
// across versions.

#include <cstdint>
#include <cmath>
#include <random>

namespace densecine {

class Rng {
 public:
  explicit Rng(uint64_t seed) : g_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return (g_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform() * (hi - lo + 1.0));
  }

  // Standard normal via Box-Muller (no cached spare: two draws per call,
  // which keeps the stream position independent of call history).
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t raw() { return g_(); }

 private:
  std::mt19937_64 g_;
};

// Stable stream derivation: mixes a base seed with a short tag so that e.g.
// the cine noise stream and the DENSE noise stream of one case differ but
// are each a pure function of (seed, tag).
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace densecine
