#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fgn {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy.  Callers that surface these to a shell map them to exit
// codes: usage/config 2, numerical failure 3, data corruption 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition on an operation's arguments was violated by calling code.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A configuration value is invalid or two configurations are incompatible.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A computation produced non-finite values or failed to converge.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

// A file being read is malformed, truncated, or fails its checksum.
class DataCorruption : public Error {
 public:
  using Error::Error;
};

// FNV-1a, 64-bit.  Used for stream derivation, artifact checksums, and
// run-manifest hashes; not cryptographic.
inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x00000100000001b3ull;

class Fnv1a64 {
 public:
  void update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= kFnvPrime;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = kFnvOffset;
};

inline uint64_t fnv1a64(const void* data, size_t n) {
  Fnv1a64 h;
  h.update(data, n);
  return h.digest();
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t fnv1a64(std::span<const double> xs) {
  Fnv1a64 h;
  for (double x : xs) {
    uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    h.update(b, 8);
  }
  return h.digest();
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Per-site normalization moments of a training split plus the standard
// deviation of one-step residuals; fixed at dataset construction and carried
// by every model trained against that dataset.
struct NormStats {
  double mean = 0.0;
  double std = 1.0;
  double residual_std = 1.0;

  uint64_t hash() const {
    const double xs[3] = {mean, std, residual_std};
    return fnv1a64(std::span<const double>(xs, 3));
  }
};

}  // namespace fgn
