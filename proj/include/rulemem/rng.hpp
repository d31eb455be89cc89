#pragma once

// Deterministic random streams. Every draw in the project flows through
// this generator so that runs are reproducible bit-for-bit from a seed,
// independent of platform library implementations.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace rulemem {

class Rng {
 public:
  explicit Rng(std::uint64_t state) : state_(state) {}

  // Derives an independent stream from (seed, tag, index). Tags keep the
  // init / shuffle / reset streams decoupled: consuming more draws from one
  // never shifts another.
  static Rng substream(std::uint64_t seed, std::string_view tag,
                       std::uint64_t index = 0) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the tag
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    std::uint64_t s = seed;
    s = mix64(s ^ h);
    s = mix64(s ^ (0x9e3779b97f4a7c15ull * (index + 1)));
    return Rng(s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1].
  double uniform_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, one deviate per pair of uniforms.
    double u1 = uniform_pos();
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    return mean + stddev * z;
  }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) { return next_u64() % bound; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace rulemem
