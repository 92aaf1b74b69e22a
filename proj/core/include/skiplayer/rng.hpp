#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace skiplayer {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_tag(uint64_t seed, std::string_view tag) {
  uint64_t h = splitmix64(seed ^ 0x5bf03635aca2fd4cULL);
  for (char c : tag) h = splitmix64(h ^ static_cast<uint8_t>(c));
  return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// Deterministic random stream. Streams are derived from (seed, tag[, index])
// so every consumer (per-tensor init, per-step noise, data sampling) is
// independent of allocation order and of what other components draw.
// Distributions are hand-rolled on top of mt19937_64 so sequences do not
// depend on the standard library implementation.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : eng_(seed) {}
  RngStream(uint64_t seed, std::string_view tag) : eng_(hash_tag(seed, tag)) {}
  RngStream(uint64_t seed, std::string_view tag, uint64_t index)
      : eng_(hash_combine(hash_tag(seed, tag), index)) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform in the open interval (0, 1); safe under log()
  double uniform_open() {
    return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // standard Gumbel(0,1): -log(-log(U)), U ~ uniform(0,1)
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  bool bernoulli(double p) { return uniform() < p; }

  // integer in [0, n)
  int64_t below(int64_t n) {
    return static_cast<int64_t>(
        (static_cast<__uint128_t>(eng_()) * static_cast<__uint128_t>(n)) >> 64);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace skiplayer
