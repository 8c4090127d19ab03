#pragma once

// Exact rational arithmetic. Values stay on an int64 num/den fast path and
// spill transparently to boost::multiprecision::cpp_rational when a reduced
// result no longer fits. All intermediates on the fast path use __int128, so
// no operation on in-range operands can silently wrap.

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace mpca {

using BigInt = boost::multiprecision::cpp_int;
using BigRat = boost::multiprecision::cpp_rational;

namespace detail {

using i128 = __int128;
using u128 = unsigned __int128;

inline i128 abs128(i128 x) { return x < 0 ? -x : x; }

inline i128 gcd128(i128 a, i128 b) {
  a = abs128(a);
  b = abs128(b);
  while (b != 0) {
    i128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

inline bool fits_i64(i128 v) {
  return v >= i128(std::numeric_limits<int64_t>::min()) &&
         v <= i128(std::numeric_limits<int64_t>::max());
}

inline BigInt big_from_i128(i128 v) {
  const bool neg = v < 0;
  // Two's-complement cast of the most negative value still yields |v| here.
  u128 u = neg ? u128(0) - u128(v) : u128(v);
  BigInt r = static_cast<uint64_t>(u >> 64);
  r <<= 64;
  r += static_cast<uint64_t>(u);
  return neg ? BigInt(-r) : r;
}

inline bool big_fits_i64(const BigInt& v) {
  static const BigInt lo = std::numeric_limits<int64_t>::min();
  static const BigInt hi = std::numeric_limits<int64_t>::max();
  return v >= lo && v <= hi;
}

}  // namespace detail

class Rat {
 public:
  Rat() = default;
  Rat(int64_t n) : num_(n) {}  // NOLINT: implicit by design, mirrors integer literals
  Rat(int64_t n, int64_t d) { *this = make128(n, d); }
  explicit Rat(const BigRat& b) { assign_big(b); }
  explicit Rat(const BigInt& n) { assign_big(BigRat(n)); }

  Rat(const Rat& o) : num_(o.num_), den_(o.den_) {
    if (o.big_) big_ = std::make_unique<BigRat>(*o.big_);
  }
  Rat(Rat&& o) noexcept = default;
  Rat& operator=(const Rat& o) {
    if (this != &o) {
      num_ = o.num_;
      den_ = o.den_;
      big_ = o.big_ ? std::make_unique<BigRat>(*o.big_) : nullptr;
    }
    return *this;
  }
  Rat& operator=(Rat&& o) noexcept = default;

  // True while the value is held in the int64 fast-path representation.
  bool small() const { return big_ == nullptr; }

  bool is_zero() const { return big_ ? big_->is_zero() : num_ == 0; }
  bool is_integer() const {
    return big_ ? boost::multiprecision::denominator(*big_) == 1 : den_ == 1;
  }
  int sign() const {
    if (big_) return big_->sign();
    return num_ > 0 ? 1 : (num_ < 0 ? -1 : 0);
  }

  BigInt numerator() const {
    return big_ ? BigInt(boost::multiprecision::numerator(*big_)) : BigInt(num_);
  }
  BigInt denominator() const {
    return big_ ? BigInt(boost::multiprecision::denominator(*big_)) : BigInt(den_);
  }

  BigRat to_big() const { return big_ ? *big_ : BigRat(BigInt(num_), BigInt(den_)); }

  friend Rat operator+(const Rat& a, const Rat& b) {
    if (a.small() && b.small()) {
      const detail::i128 n = detail::i128(a.num_) * b.den_ + detail::i128(b.num_) * a.den_;
      const detail::i128 d = detail::i128(a.den_) * b.den_;
      return make128(n, d);
    }
    return Rat(BigRat(a.to_big() + b.to_big()));
  }
  friend Rat operator-(const Rat& a, const Rat& b) {
    if (a.small() && b.small()) {
      const detail::i128 n = detail::i128(a.num_) * b.den_ - detail::i128(b.num_) * a.den_;
      const detail::i128 d = detail::i128(a.den_) * b.den_;
      return make128(n, d);
    }
    return Rat(BigRat(a.to_big() - b.to_big()));
  }
  friend Rat operator*(const Rat& a, const Rat& b) {
    if (a.small() && b.small()) {
      const detail::i128 n = detail::i128(a.num_) * b.num_;
      const detail::i128 d = detail::i128(a.den_) * b.den_;
      return make128(n, d);
    }
    return Rat(BigRat(a.to_big() * b.to_big()));
  }
  friend Rat operator/(const Rat& a, const Rat& b) {
    if (b.is_zero()) throw std::domain_error("Rat: division by zero");
    if (a.small() && b.small()) {
      const detail::i128 n = detail::i128(a.num_) * b.den_;
      const detail::i128 d = detail::i128(a.den_) * b.num_;
      return make128(n, d);
    }
    return Rat(BigRat(a.to_big() / b.to_big()));
  }
  Rat operator-() const {
    if (small()) return make128(-detail::i128(num_), den_);
    return Rat(BigRat(-*big_));
  }

  Rat& operator+=(const Rat& o) { return *this = *this + o; }
  Rat& operator-=(const Rat& o) { return *this = *this - o; }
  Rat& operator*=(const Rat& o) { return *this = *this * o; }
  Rat& operator/=(const Rat& o) { return *this = *this / o; }

  friend bool operator==(const Rat& a, const Rat& b) {
    if (a.small() && b.small()) return a.num_ == b.num_ && a.den_ == b.den_;
    return a.to_big() == b.to_big();
  }
  friend bool operator!=(const Rat& a, const Rat& b) { return !(a == b); }
  friend bool operator<(const Rat& a, const Rat& b) {
    if (a.small() && b.small()) {
      return detail::i128(a.num_) * b.den_ < detail::i128(b.num_) * a.den_;
    }
    return a.to_big() < b.to_big();
  }
  friend bool operator>(const Rat& a, const Rat& b) { return b < a; }
  friend bool operator<=(const Rat& a, const Rat& b) { return !(b < a); }
  friend bool operator>=(const Rat& a, const Rat& b) { return !(a < b); }

  Rat abs() const { return sign() < 0 ? -*this : *this; }

  // Largest integer <= value.
  BigInt floor() const {
    BigInt n = numerator(), d = denominator();
    BigInt q = n / d;
    if (n < 0 && q * d != n) --q;
    return q;
  }
  int64_t floor_i64() const {
    BigInt f = floor();
    if (!detail::big_fits_i64(f)) throw std::overflow_error("Rat::floor_i64: out of range");
    return f.convert_to<int64_t>();
  }

  long double to_long_double() const {
    if (small()) return static_cast<long double>(num_) / static_cast<long double>(den_);
    return numerator().convert_to<long double>() / denominator().convert_to<long double>();
  }
  double to_double() const { return static_cast<double>(to_long_double()); }

  // Canonical "num/den" form, den > 0, gcd(num, den) = 1 (e.g. "3/1", "-1/2").
  std::string to_string() const {
    return numerator().str() + "/" + denominator().str();
  }

  // Accepts "num", "num/den", optional leading '-' on either part.
  static Rat from_string(std::string_view s) {
    const auto slash = s.find('/');
    const auto parse_int = [](std::string_view t) -> BigInt {
      if (t.empty()) throw std::invalid_argument("Rat::from_string: empty integer");
      const bool neg = t[0] == '-';
      if (t[0] == '-' || t[0] == '+') t.remove_prefix(1);
      if (t.empty()) throw std::invalid_argument("Rat::from_string: sign only");
      for (const char c : t) {
        if (c < '0' || c > '9') {
          throw std::invalid_argument("Rat::from_string: bad character");
        }
      }
      BigInt v{std::string(t)};
      return neg ? BigInt(-v) : v;
    };
    if (slash == std::string_view::npos) return Rat(BigRat(parse_int(s)));
    BigInt n = parse_int(s.substr(0, slash));
    BigInt d = parse_int(s.substr(slash + 1));
    if (d == 0) throw std::domain_error("Rat::from_string: zero denominator");
    return Rat(BigRat(n, d));
  }

  // 2^k for any integer k (negative k gives 1/2^|k|).
  static Rat power_of_two(int k) {
    BigInt p = BigInt(1) << static_cast<unsigned>(k < 0 ? -k : k);
    return k >= 0 ? Rat(BigRat(p)) : Rat(BigRat(BigInt(1), p));
  }

  static Rat pow(const Rat& base, uint64_t e) {
    Rat acc(1);
    Rat b = base;
    while (e > 0) {
      if (e & 1) acc *= b;
      b *= b;
      e >>= 1;
    }
    return acc;
  }

  // Nearest multiple of 2^-bits, ties to even. Relies on the default
  // round-to-nearest FP environment for rintl.
  static Rat dyadic_round(long double x, int bits) {
    const long double scaled = std::ldexp(x, bits);
    if (!(std::fabs(scaled) < 9.0e18L)) {
      throw std::overflow_error("Rat::dyadic_round: value too large for grid");
    }
    const auto n = static_cast<int64_t>(std::rintl(scaled));
    return make128(n, detail::i128(1) << bits);
  }

 private:
  static Rat make128(detail::i128 n, detail::i128 d) {
    if (d == 0) throw std::domain_error("Rat: zero denominator");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    if (n == 0) return Rat();
    const detail::i128 g = detail::gcd128(n, d);
    n /= g;
    d /= g;
    Rat r;
    if (detail::fits_i64(n) && detail::fits_i64(d)) {
      r.num_ = static_cast<int64_t>(n);
      r.den_ = static_cast<int64_t>(d);
    } else {
      r.big_ = std::make_unique<BigRat>(detail::big_from_i128(n), detail::big_from_i128(d));
    }
    return r;
  }

  void assign_big(const BigRat& b) {
    const BigInt& n = boost::multiprecision::numerator(b);
    const BigInt& d = boost::multiprecision::denominator(b);
    if (detail::big_fits_i64(n) && detail::big_fits_i64(d)) {
      num_ = n.convert_to<int64_t>();
      den_ = d.convert_to<int64_t>();
      big_ = nullptr;
    } else {
      num_ = 0;
      den_ = 1;
      big_ = std::make_unique<BigRat>(b);
    }
  }

  int64_t num_ = 0;
  int64_t den_ = 1;
  std::unique_ptr<BigRat> big_;
};

inline std::ostream& operator<<(std::ostream& os, const Rat& r) {
  return os << r.to_string();
}

}  // namespace mpca
