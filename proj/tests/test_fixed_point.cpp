#include <catch2/catch_amalgamated.hpp>

#include "mpca/fixed_point.hpp"

using mpca::Rat;

TEST_CASE("precision validation") {
  CHECK_THROWS_AS(mpca::validate_precision(15), mpca::ConfigError);
  CHECK_THROWS_AS(mpca::validate_precision(14), mpca::ConfigError);
  CHECK_THROWS_AS(mpca::validate_precision(64), mpca::ConfigError);
  CHECK_THROWS_AS(mpca::validate_precision(33), mpca::ConfigError);
  CHECK_NOTHROW(mpca::validate_precision(16));
  CHECK_NOTHROW(mpca::validate_precision(62));
}

TEST_CASE("quantize frozen values") {
  // 1/3 at p=32: 1/3 * 2^16 = 21845.33 -> 21845/65536.
  CHECK(mpca::quantize(Rat(1, 3), 32) == Rat(21845, 65536));
  CHECK(mpca::quantize(Rat(-1, 3), 32) == Rat(-21845, 65536));
  // 2/3 at p=32: 43690.67 -> 43691/65536.
  CHECK(mpca::quantize(Rat(2, 3), 32) == Rat(43691, 65536));
  // Exact grid points pass through untouched.
  CHECK(mpca::quantize(Rat(5, 4), 16) == Rat(5, 4));
  CHECK(mpca::quantize(Rat(0), 32) == Rat(0));
}

TEST_CASE("quantize ties go to even") {
  // p=4: grid step 1/4. Halfway cases land on the even multiple.
  CHECK_THROWS_AS(mpca::quantize(Rat(1, 8), 4), mpca::ConfigError);  // p out of range
  CHECK(mpca::quantize(Rat(1, 131072), 32) == Rat(0));               // 0.5 quanta -> 0
  CHECK(mpca::quantize(Rat(3, 131072), 32) == Rat(1, 32768));        // 1.5 quanta -> 2
  CHECK(mpca::quantize(Rat(5, 131072), 32) == Rat(1, 32768));        // 2.5 quanta -> 2
  CHECK(mpca::quantize(Rat(-1, 131072), 32) == Rat(0));
  CHECK(mpca::quantize(Rat(-3, 131072), 32) == Rat(-1, 32768));
}

TEST_CASE("quantize range check") {
  const Rat bound = mpca::value_bound(16);  // 2^8 = 256
  CHECK(mpca::quantize(bound, 16) == Rat(256));
  CHECK_THROWS_AS(mpca::quantize(bound + Rat(1), 16), mpca::PrecisionOverflow);
  // A value just above the bound that rounds back inside is accepted.
  CHECK(mpca::quantize(Rat(256) + Rat(1, 1024), 16) == Rat(256));
}

TEST_CASE("grid membership") {
  CHECK(mpca::on_grid(Rat(21845, 65536), 32));
  CHECK_FALSE(mpca::on_grid(Rat(1, 3), 32));
  CHECK(mpca::on_grid(Rat(7), 16));
}

TEST_CASE("default precision table") {
  CHECK(mpca::default_precision(1) == 32);
  CHECK(mpca::default_precision(12) == 32);
  CHECK(mpca::default_precision(15) == 32);
  CHECK(mpca::default_precision(16) == 40);   // ceil(log2 17) = 5
  CHECK(mpca::default_precision(100) == 56);  // ceil(log2 101) = 7
  CHECK(mpca::default_precision(127) == 56);
  CHECK(mpca::default_precision(128) == 62);  // 8*8 = 64 capped at 62
  CHECK(mpca::default_precision(100000) == 62);
  CHECK_THROWS_AS(mpca::default_precision(0), mpca::ConfigError);
}

TEST_CASE("softmax temperature dominates the exactness threshold") {
  // c must be at least (ln N + (p+4) ln 2) / margin.
  const Rat margin(1, 4);
  const Rat c = mpca::softmax_temperature(100, 32, margin);
  const long double lower = (std::log(100.0L) + 36.0L * std::log(2.0L)) / 0.25L;
  CHECK(c.to_long_double() >= lower);
  CHECK(c.is_integer());
  CHECK_THROWS_AS(mpca::softmax_temperature(0, 32, margin), mpca::ConfigError);
  CHECK_THROWS_AS(mpca::softmax_temperature(4, 32, Rat(0)), mpca::ConfigError);
}
