#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dynflow {

// Seeded generator with named substreams. Every random source in the
// project (data, init, gumbel, r-sampling) derives its own stream from the
// top-level seed, so pinning one source never perturbs another.
//
// Uniform draws are computed from raw engine bits rather than through
// <random> distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  // Stream keyed by (seed, name, indices...).
  static Rng stream(std::uint64_t seed, std::string_view name,
                    std::initializer_list<std::uint64_t> keys = {}) {
    std::uint64_t h = mix(seed ^ 0x9E3779B97F4A7C15ULL);
    h = mix(h ^ fnv1a(name));
    for (std::uint64_t k : keys) h = mix(h ^ mix(k + 0x632BE59BD9B4E019ULL));
    return Rng(h);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in the open interval (0, 1); safe for log().
  double uniform_open() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard Gumbel(0, 1) sample.
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  static constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  // splitmix64 finalizer
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dynflow
