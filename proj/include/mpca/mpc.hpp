#pragma once

// Synchronous message-passing runtime: q machines with an s-word budget per
// round in both directions. A machine's entire state between rounds is the
// list of entries it received (state persists only through self-messages).
// Words live in Z_{2^word_bits}. Entry order within an inbox is (source,
// emission order at the source); the initial delivery presents input word i
// to its window machine with source field i.
//
// Output collection is positional: after the final round, the inbox payloads
// of machine w, concatenated in entry order, are the output words at
// positions (w-1)s+1 .. min(n_out, ws).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpca/errors.hpp"
#include "mpca/rational.hpp"

namespace mpca::mpc {

using Word = BigInt;

struct Entry {
  Word payload;
  int64_t src = 0;

  bool operator==(const Entry& o) const { return payload == o.payload && src == o.src; }
};

struct Message {
  int64_t dst = 0;
  std::vector<Word> payload;
};

using Inbox = std::vector<Entry>;
using LocalFn = std::function<std::vector<Message>(int64_t round, int64_t machine, const Inbox&)>;

struct ProtocolSpec {
  std::string name;
  int64_t n_in = 0;
  int64_t n_out = 0;
  int64_t q = 0;       // machines
  int64_t s = 0;       // word budget per machine per round (send and receive)
  int64_t rounds = 0;  // R
  int word_bits = 64;  // words live in Z_{2^word_bits}
  LocalFn local;
};

inline void validate_protocol(const ProtocolSpec& p) {
  if (p.q < 1 || p.s < 1) throw ConfigError("protocol: q and s must be >= 1");
  if (p.rounds < 1) throw ConfigError("protocol: rounds must be >= 1");
  if (p.n_in < 1 || p.n_in > p.q * p.s) {
    throw ConfigError("protocol: need 1 <= n_in <= q*s so the input fits its windows");
  }
  if (p.n_out < 1 || p.n_out > p.q * p.s) {
    throw ConfigError("protocol: need 1 <= n_out <= q*s");
  }
  if (p.word_bits < 1 || p.word_bits > 256) {
    throw ConfigError("protocol: word_bits must be within [1, 256]");
  }
  if (!p.local) throw ConfigError("protocol: missing local function");
}

inline Word mask_word(const Word& w, int bits) {
  const Word mod = Word(1) << static_cast<unsigned>(bits);
  Word r = w % mod;
  if (r < 0) r += mod;
  return r;
}

// Input window of machine i (1-based): positions (i-1)s+1 .. min(n, is).
inline std::pair<int64_t, int64_t> window(int64_t i, int64_t s, int64_t n) {
  const int64_t lo = (i - 1) * s + 1;
  const int64_t hi = std::min(n, i * s);
  return {lo, hi};
}

struct RoundStats {
  int64_t max_sent = 0;      // largest per-machine payload word count
  int64_t max_received = 0;
};

struct RunOptions {
  bool capture_history = false;
};

struct RunResult {
  std::vector<Word> outputs;                  // n_out words
  std::vector<RoundStats> stats;              // per round 1..R
  std::vector<std::vector<Inbox>> history;    // [round 0..R][machine-1], if captured
};

inline RunResult run_mpc(const ProtocolSpec& p, const std::vector<Word>& input,
                         RunOptions opt = {}) {
  validate_protocol(p);
  if (static_cast<int64_t>(input.size()) != p.n_in) {
    throw ConfigError("run_mpc: input must have exactly n_in words");
  }

  std::vector<Inbox> inboxes(static_cast<size_t>(p.q));
  for (int64_t i = 0; i < p.n_in; ++i) {
    const int64_t machine = i / p.s + 1;
    inboxes[static_cast<size_t>(machine - 1)].push_back(
        {mask_word(input[static_cast<size_t>(i)], p.word_bits), i + 1});
  }

  RunResult result;
  if (opt.capture_history) result.history.push_back(inboxes);

  for (int64_t round = 1; round <= p.rounds; ++round) {
    // Collect per-recipient entries in (source, emission-order) order by
    // scanning sources ascending.
    std::vector<Inbox> next(static_cast<size_t>(p.q));
    RoundStats stats;
    for (int64_t machine = 1; machine <= p.q; ++machine) {
      const auto messages = p.local(round, machine, inboxes[static_cast<size_t>(machine - 1)]);
      int64_t sent = 0;
      for (const auto& msg : messages) {
        if (msg.dst < 1 || msg.dst > p.q) {
          throw ConfigError("run_mpc: machine " + std::to_string(machine) +
                            " addressed machine " + std::to_string(msg.dst));
        }
        sent += static_cast<int64_t>(msg.payload.size());
        auto& box = next[static_cast<size_t>(msg.dst - 1)];
        for (const auto& w : msg.payload) box.push_back({mask_word(w, p.word_bits), machine});
      }
      if (sent > p.s) {
        throw BudgetViolation("round " + std::to_string(round) + ": machine " +
                              std::to_string(machine) + " sent " + std::to_string(sent) +
                              " words with budget " + std::to_string(p.s));
      }
      stats.max_sent = std::max(stats.max_sent, sent);
    }
    for (int64_t machine = 1; machine <= p.q; ++machine) {
      const auto received = static_cast<int64_t>(next[static_cast<size_t>(machine - 1)].size());
      if (received > p.s) {
        throw BudgetViolation("round " + std::to_string(round) + ": machine " +
                              std::to_string(machine) + " received " + std::to_string(received) +
                              " words with budget " + std::to_string(p.s));
      }
      stats.max_received = std::max(stats.max_received, received);
    }
    inboxes = std::move(next);
    result.stats.push_back(stats);
    if (opt.capture_history) result.history.push_back(inboxes);
  }

  // Positional output collection.
  result.outputs.reserve(static_cast<size_t>(p.n_out));
  const int64_t out_machines = (p.n_out + p.s - 1) / p.s;
  for (int64_t w = 1; w <= out_machines; ++w) {
    const auto [lo, hi] = window(w, p.s, p.n_out);
    const int64_t want = hi - lo + 1;
    const auto& box = inboxes[static_cast<size_t>(w - 1)];
    const auto got = static_cast<int64_t>(box.size());
    if (got < want) {
      throw OutputMissing("collect_output: machine " + std::to_string(w) + " holds " +
                          std::to_string(got) + " words for a window of " + std::to_string(want));
    }
    if (got > want) {
      throw DuplicateOutputIndex("collect_output: machine " + std::to_string(w) + " holds " +
                                 std::to_string(got) + " words for a window of " +
                                 std::to_string(want));
    }
    for (const auto& e : box) result.outputs.push_back(e.payload);
  }
  return result;
}

}  // namespace mpca::mpc
