#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "mpca/protocols.hpp"

namespace mp = mpca::mpc;
namespace pr = mpca::protocols;
using mpca::khop::Graph;
using mp::Word;

namespace {
std::vector<Word> words(std::initializer_list<int64_t> xs) {
  std::vector<Word> out;
  for (const auto x : xs) out.push_back(x);
  return out;
}
}  // namespace

TEST_CASE("initial delivery fills windows with source = input position") {
  auto p = pr::echo(7, 3);
  CHECK(p.q == 3);
  const auto res = mp::run_mpc(p, words({10, 11, 12, 13, 14, 15, 16}), {.capture_history = true});
  REQUIRE(res.history.size() == 2);  // init + one round
  const auto& init = res.history[0];
  REQUIRE(init[0].size() == 3);
  CHECK(init[0][0] == mp::Entry{10, 1});
  CHECK(init[0][2] == mp::Entry{12, 3});
  REQUIRE(init[2].size() == 1);
  CHECK(init[2][0] == mp::Entry{16, 7});
  CHECK(res.outputs == words({10, 11, 12, 13, 14, 15, 16}));
}

TEST_CASE("rotate shifts by one window") {
  const auto res = mp::run_mpc(pr::rotate(6, 2), words({1, 2, 3, 4, 5, 6}));
  CHECK(res.outputs == words({3, 4, 5, 6, 1, 2}));
  CHECK_THROWS_AS(pr::rotate(7, 2), mpca::ConfigError);
}

TEST_CASE("tree sum reduces in log rounds") {
  auto p = pr::tree_sum(8);
  CHECK(p.rounds == 3);
  CHECK(p.q == 4);
  CHECK(p.s == 2);
  const auto res = mp::run_mpc(p, words({1, 2, 3, 4, 5, 6, 7, 8}));
  REQUIRE(res.outputs.size() == 1);
  CHECK(res.outputs[0] == 36);

  const auto res2 = mp::run_mpc(pr::tree_sum(2), words({41, 1}));
  CHECK(res2.outputs[0] == 42);
  CHECK_THROWS_AS(pr::tree_sum(6), mpca::ConfigError);
}

TEST_CASE("broadcast max funnels through the aggregator") {
  const auto res = mp::run_mpc(pr::broadcast_max(9, 3), words({4, 9, 1, 7, 3, 2, 8, 6, 5}));
  REQUIRE(res.outputs.size() == 1);
  CHECK(res.outputs[0] == 9);
  CHECK_THROWS_AS(pr::broadcast_max(10, 3), mpca::ConfigError);  // 4 windows > s = 3
}

TEST_CASE("words reduce modulo 2^word_bits") {
  auto p = pr::echo(2, 2);
  p.word_bits = 8;
  const auto res = mp::run_mpc(p, {Word(300), Word(-1)});
  CHECK(res.outputs[0] == 44);
  CHECK(res.outputs[1] == 255);

  auto sum = pr::tree_sum(2);
  sum.word_bits = 4;
  CHECK(mp::run_mpc(sum, words({9, 9})).outputs[0] == 2);  // 18 mod 16
}

TEST_CASE("delivery orders entries by source then emission order") {
  mp::ProtocolSpec p;
  p.name = "order-probe";
  p.n_in = 3;
  p.n_out = 3;
  p.q = 3;
  p.s = 3;
  p.rounds = 1;
  p.local = [](int64_t, int64_t machine, const mp::Inbox&) -> std::vector<mp::Message> {
    if (machine == 3) return {{1, {Word(70), Word(71)}}};
    if (machine == 1) return {{1, {Word(50)}}};
    return {};
  };
  const auto res = mp::run_mpc(p, words({0, 0, 0}));
  CHECK(res.outputs == words({50, 70, 71}));
}

TEST_CASE("budget violations are rejected") {
  mp::ProtocolSpec p;
  p.name = "overspend";
  p.n_in = 1;
  p.n_out = 1;
  p.q = 2;
  p.s = 2;
  p.rounds = 1;
  p.local = [](int64_t, int64_t machine, const mp::Inbox&) -> std::vector<mp::Message> {
    if (machine == 1) return {{1, {Word(1), Word(2), Word(3)}}};
    return {};
  };
  CHECK_THROWS_AS(mp::run_mpc(p, {Word(0)}), mpca::BudgetViolation);

  // Receive overflow: two senders, two words each, one recipient with s = 3.
  p.name = "overhear";
  p.q = 2;
  p.s = 3;
  p.local = [](int64_t, int64_t, const mp::Inbox&) -> std::vector<mp::Message> {
    return {{2, {Word(1), Word(2)}}};
  };
  p.n_out = 4;
  CHECK_THROWS_AS(mp::run_mpc(p, {Word(0)}), mpca::BudgetViolation);

  p.name = "bad-dst";
  p.local = [](int64_t, int64_t, const mp::Inbox&) -> std::vector<mp::Message> {
    return {{9, {Word(1)}}};
  };
  CHECK_THROWS_AS(mp::run_mpc(p, {Word(0)}), mpca::ConfigError);
}

TEST_CASE("output collection enforces exact positional coverage") {
  mp::ProtocolSpec p;
  p.name = "undersupply";
  p.n_in = 2;
  p.n_out = 2;
  p.q = 1;
  p.s = 2;
  p.rounds = 1;
  p.local = [](int64_t, int64_t, const mp::Inbox&) -> std::vector<mp::Message> {
    return {{1, {Word(5)}}};
  };
  CHECK_THROWS_AS(mp::run_mpc(p, words({1, 2})), mpca::OutputMissing);

  p.name = "oversupply";
  p.n_out = 1;
  p.local = [](int64_t, int64_t, const mp::Inbox&) -> std::vector<mp::Message> {
    return {{1, {Word(5), Word(6)}}};
  };
  CHECK_THROWS_AS(mp::run_mpc(p, words({1, 2})), mpca::DuplicateOutputIndex);
}

TEST_CASE("protocol validation") {
  mp::ProtocolSpec p;
  p.name = "bad";
  p.n_in = 9;
  p.n_out = 1;
  p.q = 2;
  p.s = 2;
  p.rounds = 1;
  p.local = [](int64_t, int64_t, const mp::Inbox&) { return std::vector<mp::Message>{}; };
  CHECK_THROWS_AS(mp::validate_protocol(p), mpca::ConfigError);  // input exceeds q*s
  p.n_in = 4;
  p.word_bits = 300;
  CHECK_THROWS_AS(mp::validate_protocol(p), mpca::ConfigError);
  p.word_bits = 256;
  CHECK_NOTHROW(mp::validate_protocol(p));
}

TEST_CASE("min label matches the reference on paths and cycles") {
  std::mt19937_64 rng(21);
  std::vector<Graph> graphs;
  graphs.push_back({3, {{1, 2}, {2, 3}}});                          // path
  graphs.push_back({5, {{5, 4}, {4, 3}}});                          // path + isolated 1,2
  graphs.push_back({4, {{1, 2}, {2, 3}, {3, 4}, {4, 1}}});          // cycle
  graphs.push_back({4, {}});                                        // all isolated
  graphs.push_back({1, {{1, 1}}});                                  // self-loop
  graphs.push_back({2, {{1, 2}, {1, 2}}});                          // parallel edges
  graphs.push_back({7, {{6, 7}, {2, 4}, {4, 6}}});                  // path 2-4-6-7
  graphs.push_back({6, {{1, 2}, {2, 3}, {4, 5}, {5, 6}, {6, 4}}});  // path + cycle

  for (auto& g : graphs) {
    // The protocol must not care about edge order or orientation.
    std::shuffle(g.edges.begin(), g.edges.end(), rng);
    for (auto& [u, v] : g.edges) {
      if (rng() & 1) std::swap(u, v);
    }
    const auto expect = pr::min_label_oracle(g);
    const auto proto = pr::min_label(g.n_vertices, static_cast<int64_t>(g.edges.size()));
    const auto res = mp::run_mpc(proto, pr::graph_words(g));
    REQUIRE(res.outputs.size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(res.outputs[i] == expect[i]);
    }
  }
}

TEST_CASE("min label rejects degree three through its budget") {
  const Graph star{4, {{1, 2}, {1, 3}, {1, 4}}};
  const auto proto = pr::min_label(4, 3);
  CHECK_THROWS_AS(mp::run_mpc(proto, pr::graph_words(star)), mpca::BudgetViolation);
}
