#pragma once

#include <cmath>
#include <cstdint>

namespace nhmm {

// SplitMix64 finalizer. All randomness in the library is derived from it so
// that a draw depends only on (seed, key) and never on evaluation order.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                             std::uint64_t c, std::uint64_t d) {
  std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc909ULL);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  h = mix64(h ^ d);
  return h;
}

// Uniform on the open interval (0, 1); never returns an endpoint.
inline double bits_to_u01(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

inline double keyed_u01(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                        std::uint64_t c, std::uint64_t d) {
  return bits_to_u01(mix_key(seed, a, b, c, d));
}

// Small sequential stream for places where a counter key is overkill
// (random restarts, test instance generation).
class SeqRng {
 public:
  explicit SeqRng(std::uint64_t seed) : state_(mix64(seed ^ 0x1f83d9abfb41bd6bULL)) {}

  double u01() {
    state_ = mix64(state_ + 0x9e3779b97f4a7c15ULL);
    return bits_to_u01(state_);
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }
  double normal() {
    const double u = u01(), v = u01();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586477 * v);
  }
  std::uint64_t raw() {
    state_ = mix64(state_ + 0x9e3779b97f4a7c15ULL);
    return state_;
  }

 private:
  std::uint64_t state_;
};

}  // namespace nhmm
