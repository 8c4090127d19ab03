#pragma once

// Fixed-point value discipline for the quantized evaluation path. A value at
// precision p (even, 16..62) is an integer multiple of 2^(-p/2) with
// magnitude at most 2^(p/2), so its scaled numerator fits in int64.

#include <cmath>
#include <cstdint>
#include <string>

#include "mpca/errors.hpp"
#include "mpca/rational.hpp"

namespace mpca {

inline void validate_precision(int p) {
  if (p < 16 || p > 62 || p % 2 != 0) {
    throw ConfigError("precision p must be even and within [16, 62], got " +
                      std::to_string(p));
  }
}

// Grid step 2^(-p/2).
inline Rat quantum(int p) {
  validate_precision(p);
  return Rat::power_of_two(-p / 2);
}

// Magnitude bound 2^(p/2).
inline Rat value_bound(int p) {
  validate_precision(p);
  return Rat::power_of_two(p / 2);
}

namespace detail {
// round(a / b) with b > 0, nearest integer, ties to even.
inline BigInt round_div_half_even(const BigInt& a, const BigInt& b) {
  BigInt q = a / b;
  BigInt r = a - q * b;
  if (r < 0) {
    --q;
    r += b;
  }
  const BigInt twice = r * 2;
  if (twice > b || (twice == b && (q % 2) != 0)) ++q;
  return q;
}
}  // namespace detail

// Round to the nearest multiple of 2^(-p/2), ties to even; reject results
// outside [-2^(p/2), 2^(p/2)].
inline Rat quantize(const Rat& x, int p) {
  validate_precision(p);
  const int h = p / 2;
  const BigInt scaled_num = x.numerator() << h;
  const BigInt n = detail::round_div_half_even(scaled_num, x.denominator());
  Rat result = Rat(n) * Rat::power_of_two(-h);
  if (result.abs() > value_bound(p)) {
    throw PrecisionOverflow("quantize: |" + x.to_string() + "| exceeds 2^" +
                            std::to_string(h) + " after rounding");
  }
  return result;
}

inline bool on_grid(const Rat& x, int p) {
  validate_precision(p);
  return (x * Rat::power_of_two(p / 2)).is_integer();
}

// Default working precision for an input length N: p = max(32, 8*ceil(log2(N+1))),
// capped at 62 by the int64 scaled-numerator representation.
inline int default_precision(int64_t n) {
  if (n < 1) throw ConfigError("default_precision: N must be >= 1");
  int bits = 0;
  while ((int64_t(1) << bits) < n + 1) ++bits;
  int p = 8 * bits;
  if (p < 32) p = 32;
  if (p > 62) p = 62;
  return p;
}

// Inverse temperature that makes quantized softmax reproduce hardmax exactly:
// any c >= (ln N + (p+4) ln 2) / margin suffices when every non-selected score
// trails the row maximum by at least `margin`; returned as an integer with one
// unit of slack.
inline Rat softmax_temperature(int64_t n_rows, int p, const Rat& margin) {
  validate_precision(p);
  if (n_rows < 1) throw ConfigError("softmax_temperature: N must be >= 1");
  if (margin.sign() <= 0) throw ConfigError("softmax_temperature: margin must be positive");
  const long double need =
      (std::log(static_cast<long double>(n_rows)) +
       (static_cast<long double>(p) + 4.0L) * std::log(2.0L)) /
      margin.to_long_double();
  return Rat(static_cast<int64_t>(std::ceil(need)) + 1);
}

}  // namespace mpca
