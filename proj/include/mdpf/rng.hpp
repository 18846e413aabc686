#pragma once

#include <cmath>
#include <cstdint>

namespace mdpf {

// Counter-based random stream: the i-th output is mix(key + GAMMA*i), so draws
// are a pure function of (key, counter) and streams can be split by salting the
// key.  mix is the splitmix64 finalizer.
struct RngStream {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  static RngStream seeded(std::uint64_t seed) { return RngStream{mix(seed ^ 0x5851F42D4C957F2Dull), 0}; }

  // Child stream independent of this one and of other salts.
  RngStream split(std::uint64_t salt) const {
    return RngStream{mix(key ^ mix(salt + 0x632BE59BD9B4E019ull)), 0};
  }

  std::uint64_t next_u64() { return mix(key + kGamma * counter++); }

  // Uniform on [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double gaussian() {
    const double u1 = 1.0 - uniform01();  // (0, 1]: keeps log finite
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(uniform01() * static_cast<double>(n)) % n;
  }
};

}  // namespace mdpf
