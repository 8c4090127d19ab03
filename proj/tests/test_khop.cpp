#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <vector>

#include "mpca/compile_rev.hpp"
#include "mpca/khop.hpp"

namespace kh = mpca::khop;
using mpca::AttnMode;
using mpca::Elementwise;
using mpca::EvalOptions;
using mpca::LayerSpec;
using mpca::MaskKind;
using mpca::Mat;
using mpca::Rat;
using mpca::TransformerSpec;

namespace {

using Span = std::span<const Rat>;
using Out = std::span<Rat>;

// b a e b c a b e b d e a — the sequence used by the worked example.
const std::vector<int32_t> kWorked = {2, 1, 5, 2, 3, 1, 2, 5, 2, 4, 5, 1};

Mat token_mat(const std::vector<int32_t>& x) {
  Mat raw(x.size(), 1);
  for (size_t i = 0; i < x.size(); ++i) raw.at(i, 0) = Rat(x[i]);
  return raw;
}

// Two-channel host for a single generic head: ch0 = token, ch1 = fetched.
TransformerSpec lookup_host(int64_t n, kh::TargetFn target_of) {
  TransformerSpec s;
  s.n_task = n;
  s.m = 2;
  s.d_in = 1;
  s.d_out = 1;
  s.precision_p = 48;
  s.input_embed = mpca::make_custom(2, [](size_t idx, Span in, Out out) {
    if (idx > 0) out[0] = in[0];
  });
  LayerSpec layer;
  layer.mask = MaskKind::Causal;
  layer.heads.push_back(kh::build_lookup_head(
      n, std::move(target_of),
      mpca::make_custom(2, [](size_t, Span in, Out out) { out[1] = in[0]; })));
  s.layers.push_back(layer);
  s.output_map = mpca::make_custom(1, [](size_t, Span in, Out out) { out[0] = in[1]; });
  return s;
}

std::vector<int64_t> run_int_outputs(const TransformerSpec& spec,
                                     const std::vector<int32_t>& x) {
  const auto res = evaluate(spec, token_mat(x), EvalOptions{});
  std::vector<int64_t> out;
  for (size_t i = 1; i <= x.size(); ++i) out.push_back(res.output.at(i, 0).floor_i64());
  return out;
}

}  // namespace

TEST_CASE("hop oracle labels and validated finds", "[khop]") {
  // k = 0 is the identity labeling.
  CHECK(kh::hop_oracle(kWorked, 0) == kWorked);

  // Worked sequence: position 12 reaches token 2 after one hop, 3 after two.
  const auto one = kh::hop_oracle(kWorked, 1);
  const auto two = kh::hop_oracle(kWorked, 2);
  CHECK(one[11] == 2);
  CHECK(two[11] == 3);

  // Exhaustive cross-check against the step oracle on every short sequence.
  for (int32_t a = 1; a <= 2; ++a) {
    for (int32_t b = 1; b <= 2; ++b) {
      for (int32_t c = 1; c <= 2; ++c) {
        for (int32_t d = 1; d <= 2; ++d) {
          const std::vector<int32_t> x = {a, b, c, d};
          for (int64_t k = 0; k <= 5; ++k) {
            const auto labels = kh::hop_oracle(x, k);
            for (int64_t i = 1; i <= 4; ++i) {
              CHECK(labels[static_cast<size_t>(i - 1)] ==
                    kh::token_at(x, kh::find_pow(x, i, k)));
            }
          }
        }
      }
    }
  }

  // A hop count past the horizon kills every label.
  const auto dead = kh::hop_oracle(kWorked, 1000);
  for (const auto l : dead) CHECK(l == 0);

  CHECK(kh::find_oracle(kWorked, 2, 12) == 5);
  CHECK_THROWS_AS(kh::find_oracle(kWorked, 0, 3), mpca::ConfigError);
  CHECK_THROWS_AS(kh::find_oracle(kWorked, 1, 0), mpca::IndexOutOfRange);
  CHECK_THROWS_AS(kh::find_oracle(kWorked, 1, 13), mpca::IndexOutOfRange);
  CHECK_THROWS_AS(kh::hop_oracle(kWorked, -1), mpca::ConfigError);
}

TEST_CASE("hop composition law on seeded instances", "[khop]") {
  // find^(a+b)(i) = find^b(find^a(i)) with 0 absorbing, hence relabeling
  // after a hops with b more hops equals one (a+b)-hop labeling.
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = kh::random_instance(24, 4, 1, rng);
    for (int64_t a = 0; a <= 4; ++a) {
      for (int64_t b = 0; b <= 4; ++b) {
        for (int64_t i = 1; i <= 24; ++i) {
          const int64_t direct = kh::find_pow(inst.tokens, i, a + b);
          const int64_t mid = kh::find_pow(inst.tokens, i, a);
          const int64_t chained = mid == 0 ? 0 : kh::find_pow(inst.tokens, mid, b);
          CHECK(direct == chained);
        }
      }
    }
  }
}

TEST_CASE("no-repeat sampler is deterministic and lawful", "[khop]") {
  const auto a = kh::sample_instance(50, 4, 3, 99);
  const auto b = kh::sample_instance(50, 4, 3, 99);
  CHECK(a.tokens == b.tokens);
  CHECK(a.labels == b.labels);
  CHECK(a.labels == kh::hop_oracle(a.tokens, 3));

  const auto c = kh::sample_instance(50, 4, 3, 100);
  CHECK(a.tokens != c.tokens);  // astronomically unlikely to collide

  // The adjacent-repeat rate is exactly zero across a large draw.
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const auto inst = kh::sample_instance(50, 3, 1, seed);
    for (size_t i = 1; i < inst.tokens.size(); ++i) {
      REQUIRE(inst.tokens[i] != inst.tokens[i - 1]);
      REQUIRE(inst.tokens[i] >= 1);
      REQUIRE(inst.tokens[i] <= 3);
    }
  }

  CHECK_THROWS_AS(kh::sample_instance(10, 1, 1, 0), mpca::ConfigError);
  CHECK_THROWS_AS(kh::sample_instance(0, 4, 1, 0), mpca::ConfigError);
}

TEST_CASE("token error metric counts only defined labels", "[khop]") {
  CHECK(kh::token_error({1, 2, 3}, {1, 2, 3}) == Rat(0));
  CHECK(kh::token_error({1, 2, 3}, {3, 2, 1}) == Rat(2, 3));
  // Undefined labels are excluded from both numerator and denominator.
  CHECK(kh::token_error({1, 2, 9}, {0, 2, 3}) == Rat(1, 2));
  CHECK_THROWS_AS(kh::token_error({1, 2}, {0, 0}), mpca::AllBottom);
  CHECK_THROWS_AS(kh::token_error({1}, {1, 2}), mpca::ConfigError);

  const auto report = kh::token_error_report({{1, 2}, {5, 5}, {7, 8}},
                                             {{1, 2}, {0, 0}, {7, 9}});
  CHECK(report.samples_counted == 2);
  CHECK(report.samples_skipped == 1);
  CHECK(report.mean_error == Rat(1, 4));  // (0 + 1/2) / 2
}

TEST_CASE("multi-hop samples carry the hop count as a prefix token", "[khop]") {
  // Reserved ids: 0, then 1..sigma, then three specials, then hop counts.
  CHECK(kh::hop_count_token(4, 0) == 8);
  CHECK(kh::hop_count_token(4, 3) == 11);

  const auto sample = kh::make_multi_hop_sample(kWorked, 5, 2, 4);
  REQUIRE(sample.input.size() == kWorked.size() + 1);
  CHECK(sample.input[0] == kh::hop_count_token(5, 2));
  CHECK(std::vector<int32_t>(sample.input.begin() + 1, sample.input.end()) == kWorked);
  REQUIRE(sample.target.size() == kWorked.size() + 1);
  CHECK(sample.target[0] == 0);
  CHECK(std::vector<int32_t>(sample.target.begin() + 1, sample.target.end()) ==
        kh::hop_oracle(kWorked, 2));
  CHECK_THROWS_AS(kh::make_multi_hop_sample(kWorked, 5, 5, 4), mpca::ConfigError);
  CHECK_THROWS_AS(kh::make_multi_hop_sample(kWorked, 5, -1, 4), mpca::ConfigError);
}

TEST_CASE("graph serialization and budgeted blow-up", "[khop]") {
  const kh::Graph path{3, {{1, 2}, {2, 3}}};
  CHECK(kh::serialize_graph(path) == std::vector<int32_t>{1, 2, 2, 3});
  CHECK_THROWS_AS(kh::serialize_graph(kh::Graph{2, {{1, 3}}}), mpca::InvalidGraph);

  // Hub choice moves the tie edges; copy 1's hub edge is always a self-loop.
  const auto hub2 = kh::blow_up_graph(path, 2, 2, 100);
  REQUIRE(hub2.edges.size() == 6);
  CHECK(hub2.n_vertices == 6);
  CHECK(hub2.edges[4] == std::pair<int32_t, int32_t>{2, 2});
  CHECK(hub2.edges[5] == std::pair<int32_t, int32_t>{5, 2});

  // The two-argument form is the unlimited hub-1 case.
  const auto wide = kh::blow_up_graph(path, 3);
  const auto budgeted = kh::blow_up_graph(path, 1, 3, 9);
  CHECK(wide.edges == budgeted.edges);
  CHECK(wide.n_vertices == budgeted.n_vertices);

  // 3 copies of (2 edges + 1 hub edge) = 9 > 8.
  CHECK_THROWS_AS(kh::blow_up_graph(path, 1, 3, 8), mpca::BudgetExceeded);
  CHECK_THROWS_AS(kh::blow_up_graph(path, 4, 2, 100), mpca::ConfigError);
}

TEST_CASE("instance text lines round-trip", "[khop]") {
  auto inst = kh::sample_instance(20, 4, 2, 7);
  const auto line = kh::instance_to_line(inst);
  const auto back = kh::instance_from_line(line);
  CHECK(back.k == inst.k);
  CHECK(back.tokens == inst.tokens);
  CHECK(back.labels == inst.labels);
  CHECK(back.sigma == *std::max_element(inst.tokens.begin(), inst.tokens.end()));

  // Labels are materialized on the way out even if absent on the instance.
  kh::Instance bare{2, 5, kWorked, {}};
  const auto bare_line = kh::instance_to_line(bare);
  CHECK(kh::instance_from_line(bare_line).labels == kh::hop_oracle(kWorked, 2));

  CHECK_THROWS_AS(kh::instance_from_line("3 | 1 2 3"), mpca::ConfigError);
  CHECK_THROWS_AS(kh::instance_from_line("3 | 1 2 | 0"), mpca::ConfigError);
  CHECK_THROWS_AS(kh::instance_from_line("x | 1 | 0"), mpca::ConfigError);
  CHECK_THROWS_AS(kh::instance_from_line("3 | 1 q | 0 0"), mpca::ConfigError);
}

TEST_CASE("lookup heads fetch arbitrary causal targets", "[khop]") {
  const std::vector<int32_t> x = {3, 1, 4, 1, 5, 2, 2, 5};
  const int64_t n = static_cast<int64_t>(x.size());

  // Predecessor fetch: row i reads the token at i-1; row 1 reads the start 0.
  const auto prev = lookup_host(n, [](size_t idx, Span) {
    return idx == 0 ? 0 : static_cast<int64_t>(idx) - 1;
  });
  CHECK(run_int_outputs(prev, x) == std::vector<int64_t>{0, 3, 1, 4, 1, 5, 2, 2});

  // Self fetch reproduces the sequence.
  const auto self = lookup_host(n, [](size_t idx, Span) { return static_cast<int64_t>(idx); });
  CHECK(run_int_outputs(self, x) == std::vector<int64_t>{3, 1, 4, 1, 5, 2, 2, 5});

  // Broadcast of position 1 (legal everywhere since 1 <= i for task rows).
  const auto bcast = lookup_host(n, [](size_t idx, Span) -> int64_t {
    return idx == 0 ? 0 : 1;
  });
  CHECK(run_int_outputs(bcast, x) == std::vector<int64_t>(8, 3));

  // Seeded targets from the residual-independent table, checked directly.
  std::mt19937_64 rng(5);
  std::vector<int64_t> table(static_cast<size_t>(n) + 1, 0);
  for (size_t i = 1; i < table.size(); ++i) {
    table[i] = static_cast<int64_t>(rng() % (i + 1));
  }
  const auto seeded = lookup_host(n, [table](size_t idx, Span) { return table[idx]; });
  const auto got = run_int_outputs(seeded, x);
  for (int64_t i = 1; i <= n; ++i) {
    CHECK(got[static_cast<size_t>(i - 1)] == kh::token_at(x, table[static_cast<size_t>(i)]));
  }

  // A forward target trips the causality guard before attention runs.
  const auto forward = lookup_host(n, [](size_t idx, Span) -> int64_t {
    return idx == 1 ? 2 : 0;
  });
  CHECK_THROWS_AS(evaluate(forward, token_mat(x), EvalOptions{}), mpca::NonCausalTarget);

  // An out-of-range target is a configuration error, not a causality one.
  const auto wild = lookup_host(n, [n](size_t idx, Span) -> int64_t {
    return idx == 0 ? 0 : n + 3;
  });
  CHECK_THROWS_AS(evaluate(wild, token_mat(x), EvalOptions{}), mpca::ConfigError);

  // The certificate the builder enforces: winner margin at least 1/n^2.
  for (const int64_t size : {1, 2, 7, 40, 101}) {
    CHECK(kh::head_detail::certify_lookup_margin(size) >= Rat(1, size) * Rat(1, size));
  }
}

TEST_CASE("most-recent-match heads resolve one find step", "[khop]") {
  // Host: ch0 = token, ch1 = predecessor token, ch2 = matched position.
  const auto host = [](int64_t n, int64_t symbols) {
    TransformerSpec s;
    s.n_task = n;
    s.m = 3;
    s.d_in = 1;
    s.d_out = 1;
    s.precision_p = 48;
    s.input_embed = mpca::make_custom(3, [](size_t idx, Span in, Out out) {
      if (idx > 0) out[0] = in[0];
    });
    LayerSpec shift;
    shift.mask = MaskKind::Causal;
    shift.heads.push_back(kh::build_lookup_head(
        n, [](size_t idx, Span) { return idx == 0 ? 0 : static_cast<int64_t>(idx) - 1; },
        mpca::make_custom(3, [](size_t, Span in, Out out) { out[1] = in[0]; })));
    s.layers.push_back(shift);
    LayerSpec match;
    match.mask = MaskKind::Causal;
    match.heads.push_back(kh::build_last_occurrence_head(
        n, symbols, [](size_t, Span row) { return row[1].floor_i64(); },
        [](size_t, Span row) { return row[0].floor_i64(); },
        mpca::make_custom(3, [](size_t idx, Span, Out out) {
          out[2] = Rat(static_cast<int64_t>(idx));
        })));
    s.layers.push_back(match);
    s.output_map = mpca::make_custom(1, [](size_t, Span in, Out out) { out[0] = in[2]; });
    return s;
  };

  // Matching the own token against predecessor tokens lands exactly one find
  // step; misses fall back to the start row whose value is position 0.
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 12; ++trial) {
    const auto inst = kh::random_instance(18, 3, 1, rng);  // repeats allowed
    const auto spec = host(18, 4);
    const auto got = run_int_outputs(spec, inst.tokens);
    for (int64_t i = 1; i <= 18; ++i) {
      CHECK(got[static_cast<size_t>(i - 1)] == kh::find_step(inst.tokens, i));
    }
  }

  // Inclusive semantics: with mu1 = mu2 = own token every row matches itself,
  // so the head returns i, not the latest strictly-earlier occurrence.
  {
    const std::vector<int32_t> aba = {1, 2, 1};
    TransformerSpec s;
    s.n_task = 3;
    s.m = 2;
    s.d_in = 1;
    s.d_out = 1;
    s.precision_p = 48;
    s.input_embed = mpca::make_custom(2, [](size_t idx, Span in, Out out) {
      if (idx > 0) out[0] = in[0];
    });
    LayerSpec match;
    match.mask = MaskKind::Causal;
    const auto own = [](size_t, Span row) { return row[0].floor_i64(); };
    match.heads.push_back(kh::build_last_occurrence_head(
        3, 3, own, own, mpca::make_custom(2, [](size_t idx, Span, Out out) {
          out[1] = Rat(static_cast<int64_t>(idx));
        })));
    s.layers.push_back(match);
    s.output_map = mpca::make_custom(1, [](size_t, Span in, Out out) { out[0] = in[1]; });
    CHECK(run_int_outputs(s, aba) == std::vector<int64_t>{1, 2, 3});
  }

  // Worked sequence through the two-layer machine: position 12 finds 7.
  const auto spec12 = host(12, 6);
  const auto steps = run_int_outputs(spec12, kWorked);
  CHECK(steps[11] == 7);
  for (int64_t i = 1; i <= 12; ++i) {
    CHECK(steps[static_cast<size_t>(i - 1)] == kh::find_step(kWorked, i));
  }

  // Certificate scale: margin at least 1/(n^2 symbols^2).
  for (const int64_t size : {2, 12, 40}) {
    for (const int64_t sym : {1, 2, 5}) {
      const auto g = kh::head_detail::match_geometry(size, sym);
      CHECK(g.margin >= Rat(1, size) * Rat(1, size) * Rat(1, sym) * Rat(1, sym));
    }
  }
}

TEST_CASE("hop plan: depths, bit schedule, digit packing", "[khop]") {
  // Depth: 2 for one hop, otherwise ceil(log2 k) + 2; dyadic hop counts skip
  // the bootstrap layer because the odd half is never needed.
  const auto ceil_log2 = [](int64_t k) {
    int64_t t = 0;
    while ((int64_t{1} << t) < k) ++t;
    return t;
  };
  for (int64_t k = 1; k <= 64; ++k) {
    const auto plan = kh::plan_khop(k, 4, 100);
    const int64_t expect = k == 1 ? 2 : ceil_log2(k) + 2;
    CHECK(plan.depth == expect);
    CHECK(plan.dyadic == ((k & (k - 1)) == 0));
    CHECK(plan.powers.back().first == k);
    CHECK(plan.powers.size() == static_cast<size_t>(plan.depth - 1));
    if (!plan.dyadic) {
      // Bits below the leading one, most significant first.
      int64_t acc = 1;
      for (const int bit : plan.bits) acc = 2 * acc + bit;
      CHECK(acc == k);
      CHECK(plan.bits.size() == static_cast<size_t>(plan.depth - 3));
    } else {
      CHECK(plan.bits.empty());
      for (size_t i = 0; i < plan.powers.size(); ++i) {
        CHECK(plan.powers[i].first == (int64_t{1} << i));
        CHECK(plan.powers[i].second == -1);
      }
    }
  }

  // k = 6 schedule: (1,-) boot (1,2), bit 1 -> (3,4), bit 0 -> (6,7).
  const auto plan6 = kh::plan_khop(6, 4, 50);
  CHECK(plan6.bits == std::vector<int>{1, 0});
  CHECK(plan6.powers ==
        std::vector<std::pair<int64_t, int64_t>>{{1, -1}, {1, 2}, {3, 4}, {6, 7}});

  // Packing round-trips over the mixed radix.
  const auto plan = kh::plan_khop(5, 4, 30);
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    kh::khop_detail::PairEntry e;
    e.e_pos = static_cast<int64_t>(rng() % 31);
    e.e_tok = static_cast<int64_t>(rng() % 5);
    e.o_pos = static_cast<int64_t>(rng() % 31);
    e.o_tok = static_cast<int64_t>(rng() % 5);
    const int64_t packed = kh::khop_detail::pack_entry(plan, e);
    REQUIRE(packed >= 0);
    REQUIRE(packed < plan.block);
    const auto back = kh::khop_detail::unpack_entry(plan, packed);
    CHECK(back.e_pos == e.e_pos);
    CHECK(back.e_tok == e.e_tok);
    CHECK(back.o_pos == e.o_pos);
    CHECK(back.o_tok == e.o_tok);
  }

  CHECK_THROWS_AS(kh::plan_khop(0, 4, 10), mpca::ConfigError);
  CHECK_THROWS_AS(kh::plan_khop(1, 0, 10), mpca::ConfigError);
  CHECK_THROWS_AS(kh::plan_khop(1, 11, 10), mpca::ConfigError);
}

TEST_CASE("hop transformer matches the oracle on seeded batteries", "[khop]") {
  // Worked sequence at several hop counts.
  for (int64_t k = 1; k <= 4; ++k) {
    const auto spec = kh::build_khop_transformer(k, 5, 12);
    CHECK(kh::transformer_labels(spec, kWorked) == kh::hop_oracle(kWorked, k));
  }

  // Seeded sweeps, both samplers; the uniform one includes adjacent repeats,
  // which exercise the self-match path of the matching layer.
  std::mt19937_64 rng(3);
  for (int64_t k = 1; k <= 8; ++k) {
    for (const int64_t n : {12, 33}) {
      for (const int32_t sigma : {2, 4}) {
        const auto spec = kh::build_khop_transformer(k, sigma, n);
        CHECK(spec.m == 3);
        for (const auto& layer : spec.layers) REQUIRE(layer.heads.size() == 1);
        for (uint64_t seed = 0; seed < 3; ++seed) {
          const auto clean = kh::sample_instance(n, sigma, k, seed * 131 + 7);
          CHECK(kh::transformer_labels(spec, clean.tokens) == clean.labels);
          const auto noisy = kh::random_instance(n, sigma, k, rng);
          CHECK(kh::transformer_labels(spec, noisy.tokens) ==
                kh::hop_oracle(noisy.tokens, k));
        }
      }
    }
  }

  // Constant sequences: every step is the adjacent self-match.
  for (int64_t k = 1; k <= 6; ++k) {
    const std::vector<int32_t> flat(10, 1);
    const auto spec = kh::build_khop_transformer(k, 1, 10);
    CHECK(kh::transformer_labels(spec, flat) == kh::hop_oracle(flat, k));
  }

  // Full-scale spot checks.
  for (const int64_t k : {5, 16}) {
    const auto spec = kh::build_khop_transformer(k, 4, 100);
    for (uint64_t seed = 0; seed < 4; ++seed) {
      const auto inst = kh::sample_instance(100, 4, k, seed);
      CHECK(kh::transformer_labels(spec, inst.tokens) == inst.labels);
    }
  }

  // Hop count beyond the horizon: every label is the undefined marker.
  const auto dead = kh::build_khop_transformer(40, 4, 12);
  const auto inst = kh::sample_instance(12, 4, 40, 2);
  CHECK(kh::transformer_labels(dead, inst.tokens) == std::vector<int32_t>(12, 0));
}

TEST_CASE("hop transformer depth follows the doubling law", "[khop]") {
  // One fetch per layer at most doubles the deepest reachable find power, so
  // k hops need ceil(log2 k) fetches after the two fixed layers. For powers
  // of two this coincides with floor(log2 k) + 2; in between it is one more.
  for (int64_t k = 1; k <= 64; ++k) {
    const auto spec = kh::build_khop_transformer(k, 4, 64);
    const int64_t expect = k == 1 ? 2 : kh::plan_khop(k, 4, 64).depth;
    CHECK(static_cast<int64_t>(spec.depth()) == expect);
    int64_t t = 0;
    while ((int64_t{1} << (t + 1)) <= k) ++t;
    if ((k & (k - 1)) == 0) {
      CHECK(static_cast<int64_t>(spec.depth()) == (k == 1 ? 2 : t + 2));
    } else {
      CHECK(static_cast<int64_t>(spec.depth()) == t + 3);
    }
  }
}

TEST_CASE("chain layers fetch doubling powers along the trace", "[khop]") {
  // For a dyadic hop count every chain layer doubles: layer l (0-based)
  // puts its whole weight on column find^(2^(l-2))(i).
  const auto spec = kh::build_khop_transformer(16, 4, 40);
  const auto inst = kh::sample_instance(40, 4, 16, 11);
  EvalOptions opt;
  opt.capture_trace = true;
  const auto res = evaluate(spec, token_mat(inst.tokens), opt);
  REQUIRE(res.trace.layers.size() == 6);
  for (size_t l = 2; l <= 5; ++l) {
    const int64_t power = int64_t{1} << (l - 2);
    const auto& w = res.trace.layers[l][0].weights;
    for (size_t i = 1; i <= inst.tokens.size(); ++i) {
      const auto target =
          static_cast<size_t>(kh::find_pow(inst.tokens, static_cast<int64_t>(i), power));
      for (size_t j = 0; j < w.cols(); ++j) {
        CHECK(w.at(i, j) == (j == target ? Rat(1) : Rat(0)));
      }
    }
  }
}

TEST_CASE("hop maps rebuild from the registry", "[khop]") {
  const auto spec = kh::build_khop_transformer(6, 4, 20);

  // Every map the builder emits is registry-backed, hence serializable.
  const auto check_map = [](const Elementwise& e) {
    REQUIRE(e.serializable());
    CHECK(e.kind == "khop-map");
  };
  check_map(spec.input_embed);
  check_map(spec.output_map);
  for (const auto& layer : spec.layers) {
    for (const auto& head : layer.heads) {
      check_map(head.query);
      check_map(head.key);
      check_map(head.value);
    }
  }

  // Rebuilding each map from its (kind, params) record preserves behavior.
  TransformerSpec rebuilt = spec;
  const auto remake = [](Elementwise& e) {
    e = mpca::ElementwiseRegistry::make(e.kind, e.params);
  };
  remake(rebuilt.input_embed);
  remake(rebuilt.output_map);
  for (auto& layer : rebuilt.layers) {
    for (auto& head : layer.heads) {
      remake(head.query);
      remake(head.key);
      remake(head.value);
    }
  }
  const auto inst = kh::sample_instance(20, 4, 6, 5);
  CHECK(kh::transformer_labels(rebuilt, inst.tokens) ==
        kh::transformer_labels(spec, inst.tokens));
  CHECK(kh::transformer_labels(rebuilt, inst.tokens) == inst.labels);
}

TEST_CASE("hop construction survives the protocol compiler", "[khop]") {
  // Two hops over twelve rows: residual width 3, one head, 13 machine rows.
  const auto spec = kh::build_khop_transformer(2, 5, 12);
  const auto plan = mpca::simulate::plan_simulation(3, 1, 13, 48);
  CHECK(plan.b == 4);
  CHECK(plan.D == 2);
  const auto proto = mpca::simulate::compile_to_protocol(spec, 48);
  CHECK(proto.rounds == 22);
  CHECK(proto.q == 234);

  std::vector<Mat> inputs;
  inputs.push_back(token_mat(kWorked));
  for (uint64_t seed = 0; seed < 3; ++seed) {
    inputs.push_back(token_mat(kh::sample_instance(12, 5, 2, seed).tokens));
  }
  const auto report = mpca::simulate::check_simulation(spec, proto, inputs, Rat(0));
  CHECK(report.exact_expected);
  CHECK(report.max_deviation == Rat(0));
  CHECK(report.ok());
}
