#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "fgn/common.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

inline constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

inline constexpr uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

// Counter-based SplitMix64 stream.  State is just (key, counter), so a stream
// is trivially serializable and restorable bit-for-bit.  Derived streams
// depend only on the parent key, never on how much the parent has consumed.
class RngStream {
 public:
  RngStream() : key_(0) {}
  explicit RngStream(uint64_t key) : key_(key) {}

  static RngStream root(uint64_t master_seed, std::string_view name) {
    return RngStream(mix64(mix64(master_seed + kGolden) ^ fnv1a64(name)));
  }

  RngStream derive(uint64_t index) const { return RngStream(mix64(key_ ^ mix64(index + kGolden))); }
  RngStream derive(std::string_view name) const { return derive(fnv1a64(name)); }

  uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

  // Uniform in (0, 1]: 53 mantissa bits, never exactly zero, so logs are safe.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Box-Muller, two uniforms per draw, no cached second value (a cached value
  // would leak hidden state past a save/restore cycle).
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

inline Tensor randn(std::vector<int64_t> shape, RngStream& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) x = scale * rng.next_normal();
  return t;
}

}  // namespace fgn
