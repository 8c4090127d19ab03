#include <catch2/catch_amalgamated.hpp>

#include <limits>
#include <random>

#include "mpca/rational.hpp"

using mpca::BigInt;
using mpca::BigRat;
using mpca::Rat;

TEST_CASE("rational canonical form") {
  CHECK(Rat(2, 4) == Rat(1, 2));
  CHECK(Rat(-1, -2) == Rat(1, 2));
  CHECK(Rat(1, -2).to_string() == "-1/2");
  CHECK(Rat(0, 7).to_string() == "0/1");
  CHECK(Rat(6, 3).to_string() == "2/1");
  CHECK(Rat(6, 3).is_integer());
  CHECK_FALSE(Rat(7, 3).is_integer());
  CHECK_THROWS_AS(Rat(1, 0), std::domain_error);
}

TEST_CASE("rational arithmetic frozen cases") {
  CHECK(Rat(1, 3) + Rat(1, 6) == Rat(1, 2));
  CHECK(Rat(1, 3) - Rat(1, 2) == Rat(-1, 6));
  CHECK(Rat(3, 4) * Rat(2, 9) == Rat(1, 6));
  CHECK(Rat(3, 4) / Rat(9, 2) == Rat(1, 6));
  CHECK(-Rat(5, 8) == Rat(-5, 8));
  CHECK(Rat(5, 8).abs() == Rat(5, 8));
  CHECK(Rat(-5, 8).abs() == Rat(5, 8));
  CHECK_THROWS_AS(Rat(1) / Rat(0), std::domain_error);
}

TEST_CASE("rational ordering") {
  CHECK(Rat(1, 3) < Rat(1, 2));
  CHECK(Rat(-1, 2) < Rat(-1, 3));
  CHECK(Rat(2, 6) <= Rat(1, 3));
  CHECK(Rat(2, 6) >= Rat(1, 3));
  CHECK(Rat(7, 2) > Rat(3));
  CHECK(Rat(0).sign() == 0);
  CHECK(Rat(-3, 7).sign() == -1);
  CHECK(Rat(3, 7).sign() == 1);
}

TEST_CASE("rational floor") {
  CHECK(Rat(7, 2).floor() == 3);
  CHECK(Rat(-7, 2).floor() == -4);
  CHECK(Rat(-6, 3).floor() == -2);
  CHECK(Rat(0).floor() == 0);
  CHECK(Rat(7, 2).floor_i64() == 3);
}

TEST_CASE("rational overflow spills to big representation and shrinks back") {
  const int64_t big = std::numeric_limits<int64_t>::max();
  Rat a(big, 1);
  CHECK(a.small());
  Rat sq = a * a;
  CHECK_FALSE(sq.small());
  CHECK(sq.to_big() == BigRat(BigInt(big) * BigInt(big)));

  // Shrinks back once the reduced value fits again.
  Rat one = sq / sq;
  CHECK(one.small());
  CHECK(one == Rat(1));
  CHECK((sq * Rat(0)).small());

  // Forced denominator overflow on addition.
  Rat x(1, big);
  Rat y(1, big - 1);
  Rat s = x + y;
  CHECK_FALSE(s.small());
  CHECK(s.to_big() == BigRat(BigInt(1), BigInt(big)) + BigRat(BigInt(1), BigInt(big - 1)));
}

TEST_CASE("rational int64 boundary values") {
  const int64_t mn = std::numeric_limits<int64_t>::min();
  Rat m(mn, 1);
  CHECK(m.small());
  Rat neg = -m;  // 2^63 does not fit int64: must spill, not wrap
  CHECK_FALSE(neg.small());
  CHECK(neg.to_big() == -BigRat(BigInt(mn)));
  CHECK(Rat(mn, mn) == Rat(1));
  CHECK(Rat(mn, 2) == Rat(mn / 2));
}

TEST_CASE("rational string round trip") {
  CHECK(Rat::from_string("3") == Rat(3));
  CHECK(Rat::from_string("-3/9") == Rat(-1, 3));
  CHECK(Rat::from_string("+4/6").to_string() == "2/3");
  const std::string huge = "170141183460469231731687303715884105727/3";
  CHECK(Rat::from_string(huge).to_string() == huge);
  CHECK(Rat::from_string(Rat(22, 7).to_string()) == Rat(22, 7));
  CHECK_THROWS_AS(Rat::from_string(""), std::invalid_argument);
  CHECK_THROWS_AS(Rat::from_string("1/"), std::invalid_argument);
  CHECK_THROWS_AS(Rat::from_string("a/2"), std::invalid_argument);
  CHECK_THROWS_AS(Rat::from_string("1/0"), std::domain_error);
  CHECK_THROWS_AS(Rat::from_string("1.5"), std::invalid_argument);
}

TEST_CASE("rational powers") {
  CHECK(Rat::pow(Rat(3, 2), 5) == Rat(243, 32));
  CHECK(Rat::pow(Rat(-2), 3) == Rat(-8));
  CHECK(Rat::pow(Rat(7, 3), 0) == Rat(1));
  CHECK(Rat::power_of_two(-3) == Rat(1, 8));
  CHECK(Rat::power_of_two(10) == Rat(1024));
  CHECK(Rat::power_of_two(70) == Rat(BigRat(BigInt(1) << 70)));
}

TEST_CASE("rational dyadic rounding is nearest with ties to even") {
  CHECK(Rat::dyadic_round(0.5L, 0) == Rat(0));    // tie: 0 is even
  CHECK(Rat::dyadic_round(1.5L, 0) == Rat(2));    // tie: 2 is even
  CHECK(Rat::dyadic_round(2.5L, 0) == Rat(2));
  CHECK(Rat::dyadic_round(-0.5L, 0) == Rat(0));
  CHECK(Rat::dyadic_round(0.3125L, 2) == Rat(1, 4));  // 1.25 quanta -> 1
  CHECK(Rat::dyadic_round(0.4375L, 2) == Rat(1, 2));  // 1.75 quanta -> 2
  CHECK(Rat::dyadic_round(0.375L, 2) == Rat(1, 2));   // 1.5 quanta tie -> 2
  CHECK(Rat::dyadic_round(0.625L, 2) == Rat(1, 2));   // 2.5 quanta tie -> 2
}

TEST_CASE("rational randomized agreement with the multiprecision oracle") {
  std::mt19937_64 rng(0xC0FFEE);
  std::uniform_int_distribution<int64_t> num(-4000, 4000);
  std::uniform_int_distribution<int64_t> den(1, 4000);
  for (int iter = 0; iter < 4000; ++iter) {
    const int64_t an = num(rng), ad = den(rng), bn = num(rng), bd = den(rng);
    Rat a(an, ad), b(bn, bd);
    BigRat oa{BigInt(an), BigInt(ad)}, ob{BigInt(bn), BigInt(bd)};
    CHECK((a + b).to_big() == oa + ob);
    CHECK((a - b).to_big() == oa - ob);
    CHECK((a * b).to_big() == oa * ob);
    if (bn != 0) CHECK((a / b).to_big() == oa / ob);
    const bool lt = a < b, olt = oa < ob, eq = a == b, oeq = oa == ob;
    CHECK(lt == olt);
    CHECK(eq == oeq);
  }
}
