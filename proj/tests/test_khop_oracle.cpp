#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "mpca/khop_oracle.hpp"

namespace kh = mpca::khop;

namespace {
// b a e b c a b e b d e a  with a=1 b=2 c=3 d=4 e=5
const std::vector<int32_t> kWorked = {2, 1, 5, 2, 3, 1, 2, 5, 2, 4, 5, 1};
}  // namespace

TEST_CASE("hop oracle worked example") {
  CHECK(kh::find_step(kWorked, 12) == 7);
  CHECK(kh::token_at(kWorked, 7) == 2);  // b
  CHECK(kh::find_pow(kWorked, 12, 2) == 5);
  CHECK(kh::token_at(kWorked, 5) == 3);  // c
  // X_5 = c has no earlier occurrence: the chain hits the absorber.
  CHECK(kh::find_pow(kWorked, 12, 3) == 0);
  CHECK(kh::token_at(kWorked, 0) == 0);
  CHECK(kh::find_pow(kWorked, 12, 0) == 12);

  kh::Instance inst{2, 5, kWorked, {}};
  CHECK(kh::hop(inst) == 3);
  inst.k = 1;
  CHECK(kh::hop(inst) == 2);
  inst.k = 0;
  CHECK(kh::hop(inst) == 1);  // a, the final token itself
  inst.k = 3;
  CHECK(kh::hop(inst) == 0);
}

TEST_CASE("hop oracle edge behavior") {
  const std::vector<int32_t> rep = {1, 1};
  // Step from position 2 lands one past position 1, i.e. on itself: fixed point.
  CHECK(kh::find_step(rep, 2) == 2);
  CHECK(kh::find_pow(rep, 2, 100) == 2);
  CHECK(kh::find_step(rep, 1) == 0);
  CHECK(kh::find_step(rep, 0) == 0);
  CHECK(kh::find_step(rep, 3) == 0);  // out of range
}

TEST_CASE("find_table matches find_step") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = kh::random_instance(60, 5, 1, rng);
    const auto table = kh::find_table(inst.tokens);
    for (int64_t i = 1; i <= 60; ++i) {
      CHECK(table[static_cast<size_t>(i - 1)] == kh::find_step(inst.tokens, i));
    }
  }
}

TEST_CASE("random instances are deterministic per seed") {
  std::mt19937_64 a(42), b(42), c(43);
  const auto ia = kh::random_instance(50, 6, 3, a);
  const auto ib = kh::random_instance(50, 6, 3, b);
  const auto ic = kh::random_instance(50, 6, 3, c);
  CHECK(ia.tokens == ib.tokens);
  CHECK(ia.tokens != ic.tokens);
  CHECK(*std::min_element(ia.tokens.begin(), ia.tokens.end()) >= 1);
  CHECK(*std::max_element(ia.tokens.begin(), ia.tokens.end()) <= 6);
  CHECK_THROWS_AS(kh::random_instance(0, 5, 1, a), mpca::ConfigError);
}

TEST_CASE("edge gadget hop traces") {
  // Three-gadget string over edges (1,2), (3,4), (2,3); specials 5/6/7.
  std::vector<int32_t> base;
  const auto push_be = [&](int32_t u, int32_t v) {
    for (const int32_t s : {5, u, 6, v, u, 6, v, 5, 7}) base.push_back(s);
  };
  push_be(1, 2);
  push_be(3, 4);
  push_be(2, 3);

  auto x2 = base;
  x2.push_back(2);
  CHECK(kh::find_pow(x2, 28, 2) == 22);
  CHECK(kh::token_at(x2, 22) == 3);
  CHECK(kh::find_pow(x2, 28, 4) == 13);
  CHECK(kh::token_at(x2, 13) == 4);

  auto x3 = base;
  x3.push_back(3);
  CHECK(kh::find_pow(x3, 28, 4) == 2);
  CHECK(kh::token_at(x3, 2) == 1);
}

TEST_CASE("cycle instances separate the two families") {
  std::mt19937_64 rng(5);
  for (const int32_t k : {4, 6, 8, 10, 12}) {
    const auto n_expected = static_cast<size_t>(9) * k * (k / 2) + 1;

    const auto single = kh::cycle_instance(kh::single_cycle(k));
    CHECK(single.tokens.size() == n_expected);
    CHECK(single.k == k);
    CHECK(kh::hop(single) == k / 2 + 1);

    const auto two = kh::cycle_instance(kh::two_cycles(k));
    CHECK(two.tokens.size() == n_expected);
    CHECK(kh::hop(two) == 1);

    // The separation is invariant to edge order and orientation.
    for (int trial = 0; trial < 5; ++trial) {
      auto e1 = kh::single_cycle(k);
      auto e2 = kh::two_cycles(k);
      for (auto* edges : {&e1, &e2}) {
        std::shuffle(edges->begin(), edges->end(), rng);
        for (auto& [u, v] : *edges) {
          if (rng() & 1) std::swap(u, v);
        }
      }
      CHECK(kh::hop(kh::cycle_instance(e1)) != 1);
      CHECK(kh::hop(kh::cycle_instance(e2)) == 1);
    }
  }
}

TEST_CASE("cycle instance validation") {
  CHECK_THROWS_AS(kh::cycle_instance(kh::EdgeList{{1, 2}, {2, 1}}), mpca::ConfigError);  // k < 4
  CHECK_THROWS_AS(kh::single_cycle(5), mpca::ConfigError);
  CHECK_THROWS_AS(kh::two_cycles(3), mpca::ConfigError);
  // Degree violation: a 4-edge list that is not 2-regular.
  kh::EdgeList bad = {{1, 2}, {2, 3}, {3, 4}, {1, 2}};
  CHECK_THROWS_AS(kh::cycle_instance(bad), mpca::ConfigError);
  kh::EdgeList oob = {{1, 2}, {2, 3}, {3, 4}, {4, 5}};
  CHECK_THROWS_AS(kh::cycle_instance(oob), mpca::ConfigError);
}

TEST_CASE("graph blow-up shape") {
  kh::Graph p3{3, {{1, 2}, {2, 3}}};
  const auto big = kh::blow_up_graph(p3, 3);
  CHECK(big.n_vertices == 9);
  REQUIRE(big.edges.size() == 9);  // 3*2 copies + 3 hub edges
  const kh::Graph expect{9,
                         {{1, 2}, {2, 3}, {4, 5}, {5, 6}, {7, 8}, {8, 9}, {1, 1}, {4, 1}, {7, 1}}};
  CHECK(big.edges == expect.edges);

  // k = 1 keeps the graph plus one self-loop.
  const auto same = kh::blow_up_graph(p3, 1);
  CHECK(same.n_vertices == 3);
  CHECK(same.edges.size() == 3);
  CHECK(same.edges.back() == std::pair<int32_t, int32_t>{1, 1});

  CHECK_THROWS_AS(kh::blow_up_graph(p3, 0), mpca::ConfigError);
  CHECK_THROWS_AS(kh::blow_up_graph(kh::Graph{2, {{1, 3}}}, 2), mpca::ConfigError);
}
