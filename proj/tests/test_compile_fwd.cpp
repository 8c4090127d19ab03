#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <string>
#include <vector>

#include "mpca/compile_fwd.hpp"
#include "mpca/protocols.hpp"

namespace cf = mpca::compile;
namespace mp = mpca::mpc;
namespace pr = mpca::protocols;
using mpca::Mat;
using mpca::Rat;
using mp::Word;

namespace {

std::vector<Word> words(std::initializer_list<int64_t> xs) {
  std::vector<Word> out;
  for (const auto x : xs) out.push_back(x);
  return out;
}

std::vector<Word> seeded_words(uint64_t seed, int64_t n) {
  std::mt19937_64 rng(seed);
  std::vector<Word> out;
  for (int64_t i = 0; i < n; ++i) out.push_back(Word(rng() % (uint64_t{1} << 20)));
  return out;
}

Mat word_col(int64_t n_task, const std::vector<Word>& ws) {
  Mat raw(static_cast<size_t>(n_task), 1);
  for (size_t i = 0; i < ws.size(); ++i) raw.at(i, 0) = Rat(ws[i]);
  return raw;
}

// Rows 1..q of a memory-layer input: one vectorized inbox per machine.
Mat mem_rows(int64_t n_task, int64_t s, const std::vector<mp::Inbox>& inboxes) {
  Mat raw(static_cast<size_t>(n_task), static_cast<size_t>(2 * s));
  for (size_t w = 0; w < inboxes.size(); ++w) {
    const auto row = cf::vectorize_inbox(inboxes[w], s);
    for (size_t c = 0; c < row.size(); ++c) raw.at(w, c) = row[c];
  }
  return raw;
}

std::vector<Rat> rowv(const Mat& m, size_t r) {
  const auto span = m.row(r);
  return {span.begin(), span.end()};
}

bool row_is_zero(const Mat& m, size_t r) {
  for (const auto& v : m.row(r)) {
    if (!v.is_zero()) return false;
  }
  return true;
}

// Every machine forwards its whole inbox one machine to the right, in one
// message, so payload lengths hit the top of the multiscale schedule.
mp::ProtocolSpec pass_around(int64_t n, int64_t s, int64_t rounds) {
  mp::ProtocolSpec p;
  p.name = "pass-around";
  p.n_in = p.n_out = n;
  p.s = s;
  p.q = n / s;
  p.rounds = rounds;
  const int64_t q = p.q;
  p.local = [q](int64_t, int64_t machine, const mp::Inbox& in) {
    mp::Message m;
    m.dst = machine % q + 1;
    for (const auto& e : in) m.payload.push_back(e.payload);
    return std::vector<mp::Message>{m};
  };
  return p;
}

mp::ProtocolSpec self_resend(int64_t n, int64_t s, int64_t rounds) {
  mp::ProtocolSpec p;
  p.name = "self-resend";
  p.n_in = p.n_out = n;
  p.s = s;
  p.q = (n + s - 1) / s;
  p.rounds = rounds;
  p.local = [](int64_t, int64_t machine, const mp::Inbox& in) {
    mp::Message m;
    m.dst = machine;
    for (const auto& e : in) m.payload.push_back(e.payload);
    return std::vector<mp::Message>{m};
  };
  return p;
}

// Machine 1 sends two words into a one-word budget in round 1.
mp::ProtocolSpec budget_violator() {
  mp::ProtocolSpec p;
  p.name = "budget-violator";
  p.n_in = 2;
  p.n_out = 1;
  p.s = 1;
  p.q = 2;
  p.rounds = 2;
  p.local = [](int64_t round, int64_t machine, const mp::Inbox& in) {
    std::vector<mp::Message> out;
    if (round == 1 && machine == 1 && !in.empty()) {
      out.push_back({2, {in[0].payload, in[0].payload}});
    }
    return out;
  };
  return p;
}

}  // namespace

TEST_CASE("input distribution layer reproduces the initial window delivery") {
  const auto spec = cf::build_init_layer(4, 2, 2);
  const auto res = evaluate(spec, word_col(4, words({7, 9, 4, 6})));
  const auto hist =
      mp::run_mpc(pr::echo(4, 2), words({7, 9, 4, 6}), {.capture_history = true}).history[0];
  CHECK(rowv(res.output, 1) == std::vector<Rat>{Rat(1), Rat(7), Rat(2), Rat(9)});
  CHECK(rowv(res.output, 1) == cf::vectorize_inbox(hist[0], 2));
  CHECK(rowv(res.output, 2) == cf::vectorize_inbox(hist[1], 2));
  CHECK(row_is_zero(res.output, 0));
  CHECK(row_is_zero(res.output, 3));
  CHECK(row_is_zero(res.output, 4));

  const auto tiny = cf::build_init_layer(1, 1, 1);
  const auto tiny_res = evaluate(tiny, word_col(1, words({5})));
  CHECK(rowv(tiny_res.output, 1) == std::vector<Rat>{Rat(1), Rat(5)});

  // More machines than populated windows: the extra machines stay empty.
  const auto wide = cf::build_init_layer(6, 2, 5);
  const auto wide_res = evaluate(wide, word_col(6, words({1, 2, 3, 4, 5, 6})));
  const auto wide_hist =
      mp::run_mpc(pr::echo(6, 2), words({1, 2, 3, 4, 5, 6}), {.capture_history = true}).history[0];
  for (size_t w = 1; w <= 3; ++w) {
    CHECK(rowv(wide_res.output, w) == cf::vectorize_inbox(wide_hist[w - 1], 2));
  }
  CHECK(row_is_zero(wide_res.output, 4));
  CHECK(row_is_zero(wide_res.output, 5));
  CHECK(row_is_zero(wide_res.output, 6));

  CHECK_THROWS_AS(cf::build_init_layer(7, 2, 3), mpca::CapacityExceeded);

  const auto cert = cf::certify_init_margin(8, 4, 2, 8);
  CHECK(cert.margin.sign() > 0);
  CHECK(cert.bonus > cert.max_cross);
  CHECK(cert.bonus < cert.min_self);
}

TEST_CASE("round layer advances one communication round exactly") {
  SECTION("tree sum, single-word frames") {
    const auto proto = pr::tree_sum(4);
    const auto run = mp::run_mpc(proto, words({3, 1, 4, 1}), {.capture_history = true});
    const auto spec = cf::build_round_layer(proto, 1);
    const auto res = evaluate(spec, mem_rows(proto.q, proto.s, run.history[0]));
    CHECK(rowv(res.output, 1) == std::vector<Rat>{Rat(1), Rat(4), Rat(2), Rat(5)});
    for (size_t w = 1; w <= 2; ++w) {
      CHECK(rowv(res.output, w) == cf::vectorize_inbox(run.history[1][w - 1], proto.s));
    }
  }

  SECTION("pass-around, full-budget frames in the top length class") {
    const auto proto = pass_around(6, 2, 2);
    const auto input = words({10, 20, 30, 40, 50, 60});
    const auto run = mp::run_mpc(proto, input, {.capture_history = true});
    const auto spec = cf::build_round_layer(proto, 1);
    const auto res = evaluate(spec, mem_rows(proto.q, proto.s, run.history[0]));
    for (size_t w = 1; w <= 3; ++w) {
      CHECK(rowv(res.output, w) == cf::vectorize_inbox(run.history[1][w - 1], proto.s));
    }
  }

  SECTION("self-resend restamps global sources with machine ids") {
    const auto proto = self_resend(4, 2, 2);
    const auto run = mp::run_mpc(proto, words({7, 8, 9, 11}), {.capture_history = true});
    const auto spec = cf::build_round_layer(proto, 1);
    const auto res = evaluate(spec, mem_rows(proto.q, proto.s, run.history[0]));
    for (size_t w = 1; w <= 2; ++w) {
      CHECK(rowv(res.output, w) == cf::vectorize_inbox(run.history[1][w - 1], proto.s));
    }
  }

  SECTION("round index bounds") {
    CHECK_THROWS_AS(cf::build_round_layer(pr::tree_sum(8), 0), mpca::ConfigError);
    CHECK_THROWS_AS(cf::build_round_layer(pr::tree_sum(8), 3), mpca::ConfigError);
  }
}

TEST_CASE("final layer runs the last round and spreads outputs positionally") {
  SECTION("tree sum root lands on row one") {
    const auto proto = pr::tree_sum(8);
    const auto run =
        mp::run_mpc(proto, words({1, 2, 3, 4, 5, 6, 7, 8}), {.capture_history = true});
    const auto spec = cf::build_final_layer(proto);
    const auto res = evaluate(spec, mem_rows(spec.n_task, proto.s, run.history[2]));
    CHECK(res.output.at(1, 0) == Rat(36));
    for (size_t r : {size_t{0}, size_t{2}, size_t{3}, size_t{4}}) {
      CHECK(res.output.at(r, 0) == Rat(0));
    }
  }

  SECTION("echo spread puts word i on row i") {
    const auto proto = pr::echo(3, 2);
    const auto run = mp::run_mpc(proto, words({10, 11, 12}), {.capture_history = true});
    const auto spec = cf::build_final_layer(proto);
    const auto res = evaluate(spec, mem_rows(spec.n_task, proto.s, run.history[0]));
    CHECK(res.output.at(1, 0) == Rat(10));
    CHECK(res.output.at(2, 0) == Rat(11));
    CHECK(res.output.at(3, 0) == Rat(12));
  }

  SECTION("dropped and duplicated output words surface as collection errors") {
    auto drop = pr::echo(3, 2);
    drop.name = "drop-first";
    drop.local = [](int64_t, int64_t machine, const mp::Inbox& in) {
      std::vector<mp::Message> out;
      if (in.empty()) return out;
      if (machine == 1) {
        out.push_back({1, {in[0].payload}});
      } else {
        for (const auto& e : in) out.push_back({machine, {e.payload}});
      }
      return out;
    };
    const auto run = mp::run_mpc(pr::echo(3, 2), words({10, 11, 12}), {.capture_history = true});
    const auto spec = cf::build_final_layer(drop);
    CHECK_THROWS_AS(evaluate(spec, mem_rows(spec.n_task, drop.s, run.history[0])),
                    mpca::OutputMissing);

    auto dup = pr::echo(3, 2);
    dup.name = "dup-last";
    dup.local = [](int64_t, int64_t machine, const mp::Inbox& in) {
      std::vector<mp::Message> out;
      for (const auto& e : in) out.push_back({machine, {e.payload}});
      if (machine == 2 && !in.empty()) out.push_back({2, {in[0].payload}});
      return out;
    };
    const auto dup_spec = cf::build_final_layer(dup);
    CHECK_THROWS_AS(evaluate(dup_spec, mem_rows(dup_spec.n_task, dup.s, run.history[0])),
                    mpca::DuplicateOutputIndex);
  }
}

TEST_CASE("compiled stacks match the protocol runtime word for word") {
  struct Case {
    mp::ProtocolSpec proto;
    uint64_t seed;
  };
  const std::vector<Case> cases = {
      {pr::echo(7, 3), 101},          {pr::echo(4, 2), 202},  {pr::rotate(6, 2), 303},
      {pr::tree_sum(8), 404},         {pr::broadcast_max(9, 3), 505},
  };
  for (const auto& c : cases) {
    INFO("protocol " << c.proto.name << " n=" << c.proto.n_in << " s=" << c.proto.s);
    const auto compiled = cf::compile_protocol(c.proto);

    // Depth law: one input-distribution layer plus one layer per round.
    CHECK(static_cast<int64_t>(compiled.spec.layers.size()) == c.proto.rounds + 1);
    std::vector<std::string> roles{"Init"};
    for (int64_t r = 1; r < c.proto.rounds; ++r) roles.push_back("Round(" + std::to_string(r) + ")");
    roles.push_back("Final");
    CHECK(compiled.layer_roles == roles);

    // Head law: routing layers carry one head per length class plus the
    // self-cancel head, which is exactly the schedule length.
    const auto schedule_len =
        static_cast<int64_t>(mpca::routing::multiscale_schedule(c.proto.s).size());
    for (size_t l = 1; l < compiled.width_report.heads_per_layer.size(); ++l) {
      CHECK(compiled.width_report.heads_per_layer[l] == schedule_len);
      CHECK(compiled.width_report.heads_per_layer[l] <= cf::round_head_bound(compiled.q));
    }
    CHECK(compiled.width_report.heads_per_layer[0] == 1);

    std::vector<std::vector<Word>> inputs;
    for (int t = 0; t < 100; ++t) inputs.push_back(seeded_words(c.seed + t, c.proto.n_in));
    const auto report = cf::check_equivalence(c.proto, compiled, inputs);
    CHECK(report.inputs_checked == 100);
    CHECK(report.ok());
    if (!report.ok()) INFO(cf::format_report(report));
  }

  const auto compiled_sum = cf::compile_protocol(pr::tree_sum(8));
  CHECK(cf::run_compiled(compiled_sum, words({1, 2, 3, 4, 5, 6, 7, 8})) == words({36}));
  const auto compiled_rot = cf::compile_protocol(pr::rotate(6, 2));
  CHECK(cf::run_compiled(compiled_rot, words({1, 2, 3, 4, 5, 6})) == words({3, 4, 5, 6, 1, 2}));
}

TEST_CASE("masking is applied on delivery in compiled form too") {
  auto proto = pr::echo(4, 2);
  proto.word_bits = 8;
  const auto compiled = cf::compile_protocol(proto);
  const std::vector<Word> input = {Word(300), Word(-1), Word(256), Word(255)};
  CHECK(cf::run_compiled(compiled, input) == words({44, 255, 0, 255}));
  CHECK(cf::run_compiled(compiled, input) == mp::run_mpc(proto, input).outputs);
}

TEST_CASE("residual memories decode to the runtime inboxes round for round") {
  const auto check_composability = [](const mp::ProtocolSpec& proto,
                                      const std::vector<Word>& input) {
    const auto run = mp::run_mpc(proto, input, {.capture_history = true});
    const auto compiled = cf::compile_protocol(proto);
    for (size_t k = 1; k <= static_cast<size_t>(proto.rounds); ++k) {
      auto prefix = compiled.spec;
      prefix.layers.resize(k);
      prefix.d_out = 1;
      prefix.output_map =
          mpca::make_custom(1, [](size_t, std::span<const Rat>, std::span<Rat>) {});
      const auto res =
          evaluate(prefix, word_col(prefix.n_task, input), {.capture_trace = true});
      for (int64_t w = 1; w <= proto.q; ++w) {
        const auto decoded = cf::decode_memories(
            compiled.layout, res.trace.final_residual.row(static_cast<size_t>(w)), w);
        CHECK(decoded == run.history[k - 1][static_cast<size_t>(w - 1)]);
      }
    }
  };
  check_composability(pr::tree_sum(8), words({1, 2, 3, 4, 5, 6, 7, 8}));
  check_composability(pass_around(6, 2, 3), words({9, 8, 7, 6, 5, 4}));
}

TEST_CASE("equivalence checker reports mismatches instead of throwing") {
  std::vector<std::vector<Word>> inputs;
  for (int t = 0; t < 10; ++t) inputs.push_back(seeded_words(7000 + t, 8));

  const auto proto = pr::tree_sum(8);
  auto compiled = cf::compile_protocol(proto);
  const auto clean = cf::check_equivalence(proto, compiled, inputs);
  CHECK(clean.ok());
  CHECK(clean.inputs_checked == 10);
  CHECK(clean.m == compiled.spec.m);
  CHECK(clean.heads_per_layer == compiled.width_report.heads_per_layer);
  CHECK(clean.head_bound >= 3);
  CHECK(cf::format_report(clean).find("mismatches: 0") != std::string::npos);

  // Removing the single-word routing head silences all round-one traffic; the
  // checker must report that as mismatches, not propagate the failure.
  compiled.spec.layers[1].heads.erase(compiled.spec.layers[1].heads.begin());
  const auto broken = cf::check_equivalence(proto, compiled, inputs);
  CHECK_FALSE(broken.ok());
  CHECK(broken.inputs_checked == 10);
  CHECK(!broken.mismatches.empty());

  CHECK_THROWS_AS(cf::check_equivalence(pr::echo(4, 2), compiled, inputs), mpca::ConfigError);
}

TEST_CASE("budget overruns surface at compile time via the probe") {
  const auto bad = budget_violator();
  CHECK_THROWS_AS(cf::build_round_layer(bad, 1), mpca::BudgetViolationAtCompileTime);
  CHECK_THROWS_AS(cf::compile_protocol(bad), mpca::BudgetViolationAtCompileTime);

  const auto unprobed = cf::compile_protocol(bad, {.probe = false});
  CHECK_THROWS_AS(cf::run_compiled(unprobed, words({1, 2})), mpca::BudgetViolation);
}

TEST_CASE("registered wrapper kind rebuilds compiled maps by protocol id") {
  const auto proto = pr::tree_sum(8);
  cf::register_protocol(proto);
  const auto compiled = cf::compile_protocol(proto);

  const auto& embed = compiled.spec.input_embed;
  CHECK(embed.kind == "local-mpc-wrapper");
  CHECK(embed.serializable());
  const auto rebuilt = mpca::ElementwiseRegistry::make("local-mpc-wrapper", embed.params);
  CHECK(rebuilt.kind == embed.kind);
  CHECK(rebuilt.out_dim == embed.out_dim);
  const std::vector<Rat> raw_row{Rat(7)};
  std::vector<Rat> got(rebuilt.out_dim);
  std::vector<Rat> want(embed.out_dim);
  rebuilt.apply(3, raw_row, got);
  embed.apply(3, raw_row, want);
  CHECK(got == want);

  // A fused round head rebuilt from its tag computes the same packets on a
  // genuine post-distribution residual row.
  auto prefix = compiled.spec;
  prefix.layers.resize(1);
  prefix.d_out = 1;
  prefix.output_map = mpca::make_custom(1, [](size_t, std::span<const Rat>, std::span<Rat>) {});
  const auto res = evaluate(prefix, word_col(prefix.n_task, words({1, 2, 3, 4, 5, 6, 7, 8})),
                            {.capture_trace = true});
  const auto& value = compiled.spec.layers[1].heads[0].value;
  const auto value2 = mpca::ElementwiseRegistry::make("local-mpc-wrapper", value.params);
  CHECK(value2.out_dim == value.out_dim);
  std::vector<Rat> v1(value.out_dim);
  std::vector<Rat> v2(value2.out_dim);
  value.apply(2, res.trace.final_residual.row(2), v1);
  value2.apply(2, res.trace.final_residual.row(2), v2);
  CHECK(v1 == v2);

  mpca::Json missing = embed.params;
  missing["protocol"] = "no-such-protocol";
  CHECK_THROWS_AS(mpca::ElementwiseRegistry::make("local-mpc-wrapper", missing),
                  mpca::ConfigError);
}

TEST_CASE("compile preconditions") {
  auto p = pr::echo(1, 1);
  p.n_out = 2;  // would need more output rows than input rows
  p.q = 2;
  CHECK_THROWS_AS(cf::compile_protocol(p), mpca::ConfigError);

  const auto compiled = cf::compile_protocol(pr::echo(4, 2));
  CHECK_THROWS_AS(cf::run_compiled(compiled, words({1, 2, 3})), mpca::ConfigError);

  const auto box = mp::Inbox{{Word(5), 2}, {Word(6), 3}};
  CHECK(cf::devectorize_inbox(cf::vectorize_inbox(box, 4), 4) == box);
}

TEST_CASE("compiled min-label agrees with the runtime and the oracle") {
  const mpca::khop::Graph c3{3, {{1, 2}, {2, 3}, {3, 1}}};
  const auto input = pr::graph_words(c3);
  const auto proto = pr::min_label(3, 3);
  const auto direct = mp::run_mpc(proto, input).outputs;
  const auto labels = pr::min_label_oracle(c3);
  REQUIRE(direct.size() == labels.size());
  for (size_t i = 0; i < labels.size(); ++i) CHECK(direct[i] == Word(labels[i]));

  const auto compiled = cf::compile_protocol(proto);
  CHECK(static_cast<int64_t>(compiled.spec.layers.size()) == proto.rounds + 1);
  CHECK(cf::run_compiled(compiled, input) == direct);
}
