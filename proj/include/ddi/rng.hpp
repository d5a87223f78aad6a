#ifndef DDI_RNG_HPP
#define DDI_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace ddi {

// All randomness flows from one root seed through named sub-streams
// (init, shuffle, augment, ...), so components can be re-seeded
// independently of each other.
//
// The distributions are implemented explicitly (not via <random>'s
// distribution classes, which are implementation-defined) so a given seed
// produces identical values on every platform and standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Seed for the named sub-stream: FNV-1a over the name, mixed with the root.
  static uint64_t derive(uint64_t root_seed, const std::string& name) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return root_seed * 0x9e3779b97f4a7c15ULL ^ h;
  }

  static Rng substream(uint64_t root_seed, const std::string& name) {
    return Rng(derive(root_seed, name));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  float normal(float mean, float stddev) {
    // Box-Muller; the second variate of the pair is discarded so every call
    // consumes a fixed amount of engine state.
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
    return mean + stddev * static_cast<float>(z);
  }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(uniform01()) * (hi - lo);
  }

  // Inclusive bounds, bias-free via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(engine_());  // full range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return lo + static_cast<int64_t>(v % span);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ddi

#endif  // DDI_RNG_HPP
