#pragma once

// Shared-board protocols with per-write space budgets.
//
// k players hold consecutive windows of an input sequence (player k leftmost,
// player 1 holding the tail). A protocol runs in rounds; within a round every
// player writes one message to a public board, in descending player order, so
// a player sees all earlier rounds plus the current round's higher-numbered
// writers. Messages are vectors of exact rationals accounted at a fixed
// number of bits per word; a write above the declared budget aborts the run.
// The protocol's output is player 1's final-round message.
//
// On top of the runner this header provides:
//   * the standard window partition of a sequence,
//   * pointer-chasing instances over layered graphs and a token encoding
//     whose k-fold hop label at the last position is the chase's class,
//   * exact bounded-communication simulations of four sequence models over
//     partitioned inputs: layered recurrences (one boundary state per round),
//     kernelized attention (factored window summaries), window+stride masked
//     attention (boundary and stride rows), and greedy suffix decoding
//     (per-window argmax partials). Each simulation declares its budget up
//     front and reproduces the direct evaluation exactly.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elementwise.hpp"
#include "errors.hpp"
#include "khop.hpp"
#include "linalg.hpp"
#include "rational.hpp"
#include "transformer.hpp"

namespace mpca::blackboard {

// ---------------------------------------------------------------------------
// Board runner.

using Message = std::vector<Rat>;

struct BlackboardConfig {
  int64_t players = 1;     // k
  int64_t rounds = 1;      // R
  int64_t space_bits = 0;  // per-write budget, in bits
  int64_t word_bits = 48;  // accounting width of one board word
};

inline void validate_config(const BlackboardConfig& c) {
  if (c.players < 1) throw ConfigError("blackboard: players must be >= 1");
  if (c.rounds < 1) throw ConfigError("blackboard: rounds must be >= 1");
  if (c.space_bits < 0) throw ConfigError("blackboard: space budget must be >= 0");
  if (c.word_bits < 1) throw ConfigError("blackboard: word width must be >= 1");
}

struct WriteRecord {
  int64_t round = 0;
  int64_t player = 0;
  int64_t words = 0;
  int64_t bits = 0;
  uint64_t digest = 0;
};

struct Transcript {
  BlackboardConfig config;
  std::vector<WriteRecord> writes;  // in write order: round-major, player k..1
  Message output;                   // player 1's final-round message
  int64_t max_write_bits = 0;
  std::string note;  // declared-budget formula of the protocol that ran
};

inline uint64_t fnv1a64(const Message& msg) {
  uint64_t h = 1469598103934665603ull;
  const auto mix = [&h](const std::string& s) {
    for (const unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
  };
  for (const auto& v : msg) {
    mix(v.numerator().str());
    mix("/");
    mix(v.denominator().str());
    mix(";");
  }
  return h;
}

class Board;
using PlayerFn = std::function<Message(const Message& input, int64_t round, const Board& board)>;

inline Transcript run_blackboard(const BlackboardConfig& config,
                                 const std::vector<PlayerFn>& players,
                                 const std::vector<Message>& inputs);

// Public message slots, one per (round, player). read() refuses slots that
// have not been written yet, which mechanically enforces the write order.
class Board {
 public:
  explicit Board(int64_t players) : players_(players) {}

  int64_t players() const { return players_; }

  bool has(int64_t round, int64_t player) const {
    if (round < 1 || player < 1 || player > players_) return false;
    const size_t r = static_cast<size_t>(round - 1);
    return r < slots_.size() && written_[r][static_cast<size_t>(player - 1)];
  }

  const Message& read(int64_t round, int64_t player) const {
    if (!has(round, player)) {
      throw ConfigError("board: read of unwritten slot (round " + std::to_string(round) +
                        ", player " + std::to_string(player) + ")");
    }
    return slots_[static_cast<size_t>(round - 1)][static_cast<size_t>(player - 1)];
  }

 private:
  friend Transcript run_blackboard(const BlackboardConfig&, const std::vector<PlayerFn>&,
                                   const std::vector<Message>&);
  int64_t players_ = 0;
  std::vector<std::vector<Message>> slots_;
  std::vector<std::vector<char>> written_;
};

inline Transcript run_blackboard(const BlackboardConfig& config,
                                 const std::vector<PlayerFn>& players,
                                 const std::vector<Message>& inputs) {
  validate_config(config);
  if (static_cast<int64_t>(players.size()) != config.players) {
    throw ConfigError("blackboard: need exactly one function per player");
  }
  if (inputs.size() != players.size()) {
    throw ConfigError("blackboard: need exactly one input per player");
  }
  Board board(config.players);
  Transcript t;
  t.config = config;
  for (int64_t round = 1; round <= config.rounds; ++round) {
    board.slots_.emplace_back(static_cast<size_t>(config.players));
    board.written_.emplace_back(static_cast<size_t>(config.players), 0);
    for (int64_t player = config.players; player >= 1; --player) {
      const auto& fn = players[static_cast<size_t>(player - 1)];
      if (!fn) throw ConfigError("blackboard: missing function for player " + std::to_string(player));
      Message msg = fn(inputs[static_cast<size_t>(player - 1)], round, board);
      const int64_t words = static_cast<int64_t>(msg.size());
      const int64_t bits = words * config.word_bits;
      if (bits > config.space_bits) throw SpaceBudgetExceeded(player, round, bits, config.space_bits);
      t.writes.push_back({round, player, words, bits, fnv1a64(msg)});
      t.max_write_bits = std::max(t.max_write_bits, bits);
      board.slots_.back()[static_cast<size_t>(player - 1)] = std::move(msg);
      board.written_.back()[static_cast<size_t>(player - 1)] = 1;
    }
  }
  t.output = board.read(config.rounds, 1);
  return t;
}

inline std::string transcript_to_text(const Transcript& t) {
  std::string out = "players=" + std::to_string(t.config.players) +
                    " rounds=" + std::to_string(t.config.rounds) +
                    " space_bits=" + std::to_string(t.config.space_bits) +
                    " word_bits=" + std::to_string(t.config.word_bits) + "\n";
  char hex[24];
  for (const auto& w : t.writes) {
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(w.digest));
    out += "round " + std::to_string(w.round) + " player " + std::to_string(w.player) + ": " +
           std::to_string(w.words) + " words, " + std::to_string(w.bits) + " bits, digest " +
           hex + "\n";
  }
  out += "max_write_bits=" + std::to_string(t.max_write_bits) +
         " output_words=" + std::to_string(t.output.size()) + "\n";
  if (!t.note.empty()) out += "note: " + t.note + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Window partition: player k leftmost, player 1 extends to the end.

struct Window {
  int64_t player = 0;
  int64_t begin = 0;  // 1-based, inclusive
  int64_t end = 0;
};

inline std::vector<Window> partition_windows(int64_t n, int64_t k) {
  if (k < 1) throw ConfigError("partition: players must be >= 1");
  if (n < 2 * k) {
    throw TooFewTokens("partition: " + std::to_string(k) + " players need at least " +
                       std::to_string(2 * k) + " positions, got " + std::to_string(n));
  }
  const int64_t q = n / (2 * k);
  std::vector<Window> wins(static_cast<size_t>(k));
  for (int64_t j = 1; j <= k; ++j) {
    Window w;
    w.player = j;
    w.begin = 2 * (k - j) * q + 1;
    w.end = j == 1 ? n : 2 * (k - j + 1) * q;
    wins[static_cast<size_t>(j - 1)] = w;
  }
  return wins;
}

inline std::vector<std::vector<int32_t>> partition_khop_input(const std::vector<int32_t>& x,
                                                              int64_t k) {
  const auto wins = partition_windows(static_cast<int64_t>(x.size()), k);
  std::vector<std::vector<int32_t>> out(wins.size());
  for (const auto& w : wins) {
    out[static_cast<size_t>(w.player - 1)] =
        std::vector<int32_t>(x.begin() + (w.begin - 1), x.begin() + w.end);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layered pointer chasing and its token encoding.

// k+1 layers of q vertices; consecutive layers are joined by a perfect
// matching, the chase starts at a layer-1 vertex, and the final layer is
// split into two classes. The answer is the class reached after k steps.
struct LayeredGraph {
  int64_t q = 0;                                // vertices per layer
  int64_t k = 0;                                // number of matchings
  std::vector<std::vector<int64_t>> matchings;  // matchings[j-1][v-1] in 1..q
  int64_t start = 1;                            // chase start vertex in layer 1
  std::vector<int8_t> sides;                    // final-layer class labels, 1 or 2
};

inline void validate_layered(const LayeredGraph& g) {
  if (g.q < 1) throw ConfigError("layered: q must be >= 1");
  if (g.k < 1) throw ConfigError("layered: need at least one matching");
  if (static_cast<int64_t>(g.matchings.size()) != g.k) {
    throw InvalidMatching("layered: expected " + std::to_string(g.k) + " matchings, got " +
                          std::to_string(g.matchings.size()));
  }
  for (size_t j = 0; j < g.matchings.size(); ++j) {
    const auto& m = g.matchings[j];
    const std::string where = "layered: matching " + std::to_string(j + 1);
    if (static_cast<int64_t>(m.size()) != g.q) throw InvalidMatching(where + " has wrong size");
    std::vector<char> seen(static_cast<size_t>(g.q), 0);
    for (const int64_t v : m) {
      if (v < 1 || v > g.q) throw InvalidMatching(where + ": target " + std::to_string(v) + " out of range");
      if (seen[static_cast<size_t>(v - 1)]) {
        throw InvalidMatching(where + ": target " + std::to_string(v) + " repeated");
      }
      seen[static_cast<size_t>(v - 1)] = 1;
    }
  }
  if (g.start < 1 || g.start > g.q) throw ConfigError("layered: start vertex out of range");
  if (static_cast<int64_t>(g.sides.size()) != g.q) {
    throw ConfigError("layered: need a class label per final-layer vertex");
  }
  for (const int8_t c : g.sides) {
    if (c != 1 && c != 2) throw ConfigError("layered: class labels must be 1 or 2");
  }
}

inline int chase_class(const LayeredGraph& g) {
  validate_layered(g);
  int64_t v = g.start;
  for (int64_t j = 0; j < g.k; ++j) v = g.matchings[static_cast<size_t>(j)][static_cast<size_t>(v - 1)];
  return g.sides[static_cast<size_t>(v - 1)];
}

inline LayeredGraph random_layered(int64_t q, int64_t k, std::mt19937_64& rng) {
  LayeredGraph g;
  g.q = q;
  g.k = k;
  g.matchings.assign(static_cast<size_t>(k), {});
  for (auto& m : g.matchings) {
    m.resize(static_cast<size_t>(q));
    std::iota(m.begin(), m.end(), int64_t{1});
    std::shuffle(m.begin(), m.end(), rng);
  }
  g.start = std::uniform_int_distribution<int64_t>(1, q)(rng);
  g.sides.resize(static_cast<size_t>(q));
  for (auto& s : g.sides) s = static_cast<int8_t>(std::uniform_int_distribution<int>(1, 2)(rng));
  validate_layered(g);
  return g;
}

// Token encoding of a chase. Window j (the j-th player's share) spells
// matching j as q (vertex, partner) pairs: odd layers label vertices 1..q,
// even layers q+1..2q, so consecutive layers never share tokens. The last
// matching writes terminal tokens 2q+1 / 2q+2 in place of final-layer labels,
// and the sequence ends with the start vertex's token. Perfect matchings make
// every backward most-recent-match step land on the unique earlier mention of
// the current vertex, so the k-fold hop label at the last position is the
// terminal token of the chase. Alphabet size: 2q+2.
inline khop::Instance encode_pointer_chasing(const LayeredGraph& g) {
  validate_layered(g);
  const int64_t n = 2 * g.k * g.q + 1;
  const auto label = [&g](int64_t v, int64_t layer) {
    return static_cast<int32_t>(layer % 2 == 1 ? v : g.q + v);
  };
  std::vector<int32_t> tokens(static_cast<size_t>(n), 0);
  for (int64_t j = g.k; j >= 1; --j) {
    const int64_t base = 2 * (g.k - j) * g.q;  // 0-based window offset
    for (int64_t a = 1; a <= g.q; ++a) {
      tokens[static_cast<size_t>(base + 2 * a - 2)] = label(a, j);
      const int64_t partner = g.matchings[static_cast<size_t>(j - 1)][static_cast<size_t>(a - 1)];
      tokens[static_cast<size_t>(base + 2 * a - 1)] =
          j == g.k ? static_cast<int32_t>(g.sides[static_cast<size_t>(partner - 1)] == 1
                                              ? 2 * g.q + 1
                                              : 2 * g.q + 2)
                   : label(partner, j + 1);
    }
  }
  tokens[static_cast<size_t>(n - 1)] = label(g.start, 1);
  khop::Instance inst;
  inst.k = g.k;
  inst.sigma = static_cast<int32_t>(2 * g.q + 2);
  inst.tokens = std::move(tokens);
  return inst;
}

// Terminal token that the chase's class maps to under the encoding above.
inline int32_t terminal_token(const LayeredGraph& g) {
  return static_cast<int32_t>(chase_class(g) == 1 ? 2 * g.q + 1 : 2 * g.q + 2);
}

// ---------------------------------------------------------------------------
// Shared helpers for the simulations.

namespace bb_detail {

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

inline Message flatten_rows(const Mat& m, int64_t first_pos, int64_t last_pos) {
  Message out;
  out.reserve(static_cast<size_t>(last_pos - first_pos + 1) * m.cols());
  for (int64_t i = first_pos; i <= last_pos; ++i) {
    const auto row = m.row(static_cast<size_t>(i - 1));
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

inline Mat rows_from_message(const Message& msg, size_t rows, size_t cols, const char* what) {
  if (msg.size() != rows * cols) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(rows * cols) +
                      " words, got " + std::to_string(msg.size()));
  }
  Mat m(rows, cols);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) m.at(r, c) = msg[r * cols + c];
  }
  return m;
}

inline const Message& sized(const Message& msg, size_t want, const char* what) {
  if (msg.size() != want) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(want) +
                      " words, got " + std::to_string(msg.size()));
  }
  return msg;
}

// Running argmax partial of one hardmax head: best score, multiplicity, and
// the exact sum of the value rows that attain the best score. Combining
// partials reproduces full-sequence hardmax with tie averaging exactly.
struct ArgmaxPartial {
  bool seen = false;
  Rat best;
  Rat count;
  std::vector<Rat> sum;

  explicit ArgmaxPartial(size_t m) : sum(m) {}

  void add(const Rat& score, std::span<const Rat> value) {
    if (!seen || score > best) {
      seen = true;
      best = score;
      count = Rat(1);
      sum.assign(sum.size(), Rat(0));
      for (size_t c = 0; c < sum.size(); ++c) sum[c] = value[c];
      return;
    }
    if (score == best) {
      count += Rat(1);
      for (size_t c = 0; c < sum.size(); ++c) {
        if (!value[c].is_zero()) sum[c] += value[c];
      }
    }
  }

  void merge(const ArgmaxPartial& other) {
    if (!other.seen) return;
    if (!seen || other.best > best) {
      seen = true;
      best = other.best;
      count = other.count;
      sum = other.sum;
      return;
    }
    if (other.best == best) {
      count += other.count;
      for (size_t c = 0; c < sum.size(); ++c) {
        if (!other.sum[c].is_zero()) sum[c] += other.sum[c];
      }
    }
  }

  // Tie-averaged head output, matching exact hardmax attention.
  std::vector<Rat> finish() const {
    if (!seen) throw ConfigError("argmax partial: empty candidate set");
    std::vector<Rat> out = sum;
    if (count != Rat(1)) {
      const Rat inv = Rat(1) / count;
      for (auto& v : out) {
        if (!v.is_zero()) v *= inv;
      }
    }
    return out;
  }

  void append_to(Message& msg) const {
    if (!seen) throw ConfigError("argmax partial: empty candidate set");
    msg.push_back(best);
    msg.push_back(count);
    msg.insert(msg.end(), sum.begin(), sum.end());
  }

  static ArgmaxPartial parse(std::span<const Rat> words, size_t m) {
    if (words.size() != m + 2) throw ConfigError("argmax partial: bad word count");
    ArgmaxPartial p(m);
    p.seen = true;
    p.best = words[0];
    p.count = words[1];
    p.sum.assign(words.begin() + 2, words.end());
    return p;
  }
};

}  // namespace bb_detail

struct SimResult {
  Message output;
  Transcript transcript;
};

// ---------------------------------------------------------------------------
// Layered recurrences.

// Layer l scans the row stream left to right, threading a width-wide running
// state from zero: (z'_i, h_i) = step_l(z_i, h_{i-1}).
using RnnStep = std::function<void(std::span<const Rat> z_in, std::span<const Rat> h_in,
                                   std::span<Rat> z_out, std::span<Rat> h_out)>;

struct RnnSpec {
  int64_t depth = 0;
  int64_t width = 0;
  int precision_p = 48;  // accounting width of one state word
  std::vector<RnnStep> steps;
};

inline void validate_rnn(const RnnSpec& spec) {
  if (spec.depth < 1) throw ConfigError("recurrence: depth must be >= 1");
  if (spec.width < 1) throw ConfigError("recurrence: width must be >= 1");
  if (spec.precision_p < 1) throw ConfigError("recurrence: precision must be >= 1");
  if (static_cast<int64_t>(spec.steps.size()) != spec.depth) {
    throw ConfigError("recurrence: need exactly one transition per layer");
  }
  for (const auto& s : spec.steps) {
    if (!s) throw ConfigError("recurrence: missing transition function");
  }
}

namespace bb_detail {

// Scans one layer over rows [0, len) of z in place, starting from state h
// (overwritten with the final state).
inline void scan_rnn_layer(const RnnStep& step, Mat& z, std::vector<Rat>& h) {
  const size_t width = z.cols();
  std::vector<Rat> z_next(width), h_next(width);
  for (size_t i = 0; i < z.rows(); ++i) {
    std::fill(z_next.begin(), z_next.end(), Rat(0));
    std::fill(h_next.begin(), h_next.end(), Rat(0));
    step(z.row(i), h, z_next, h_next);
    for (size_t c = 0; c < width; ++c) z.at(i, c) = z_next[c];
    h = h_next;
  }
}

}  // namespace bb_detail

// Full evaluation: returns the final layer's row stream.
inline Mat eval_rnn(const RnnSpec& spec, const Mat& x) {
  validate_rnn(spec);
  if (x.cols() != static_cast<size_t>(spec.width)) {
    throw ConfigError("recurrence: rows must have the spec's width");
  }
  Mat z = x;
  std::vector<Rat> h(static_cast<size_t>(spec.width));
  for (int64_t l = 0; l < spec.depth; ++l) {
    std::fill(h.begin(), h.end(), Rat(0));
    bb_detail::scan_rnn_layer(spec.steps[static_cast<size_t>(l)], z, h);
  }
  return z;
}

// Streaming simulation: in round l player j rebuilds layers 1..l over its
// window from the boundary states already on the board and publishes its
// right-edge layer-l state; player 1's last write is the final row at the end
// of the sequence. Budget: width words of precision_p bits per write.
inline SimResult sim_rnn(const RnnSpec& spec, const Mat& x, int64_t k) {
  validate_rnn(spec);
  const int64_t n = static_cast<int64_t>(x.rows());
  if (x.cols() != static_cast<size_t>(spec.width)) {
    throw ConfigError("recurrence sim: rows must have the spec's width");
  }
  const auto wins = partition_windows(n, k);
  const size_t width = static_cast<size_t>(spec.width);

  BlackboardConfig config;
  config.players = k;
  config.rounds = spec.depth;
  config.word_bits = spec.precision_p;
  config.space_bits = spec.width * spec.precision_p;

  std::vector<Message> inputs(static_cast<size_t>(k));
  std::vector<PlayerFn> players(static_cast<size_t>(k));
  for (const auto& win : wins) {
    inputs[static_cast<size_t>(win.player - 1)] = bb_detail::flatten_rows(x, win.begin, win.end);
    players[static_cast<size_t>(win.player - 1)] =
        [&spec, win, k, width](const Message& input, int64_t round, const Board& board) -> Message {
      const size_t len = static_cast<size_t>(win.end - win.begin + 1);
      Mat z = bb_detail::rows_from_message(input, len, width, "recurrence sim input");
      std::vector<Rat> h(width);
      for (int64_t l = 1; l <= round; ++l) {
        if (win.player == k) {
          std::fill(h.begin(), h.end(), Rat(0));
        } else {
          const auto& msg =
              bb_detail::sized(board.read(l, win.player + 1), width, "recurrence boundary");
          h.assign(msg.begin(), msg.end());
        }
        bb_detail::scan_rnn_layer(spec.steps[static_cast<size_t>(l - 1)], z, h);
      }
      if (round == spec.depth && win.player == 1) {
        const auto last = z.row(len - 1);
        return Message(last.begin(), last.end());
      }
      return Message(h.begin(), h.end());
    };
  }

  SimResult res;
  res.transcript = run_blackboard(config, players, inputs);
  res.transcript.note = "budget: width * precision bits per write (one boundary state)";
  res.output = res.transcript.output;
  return res;
}

// ---------------------------------------------------------------------------
// Kernelized attention.

// Streaming simulation of a spec whose heads are all kernelized: round l
// publishes each window's layer-l summary sum_j key_j value_j^T per head
// (d_qk x m words), masked prefixes combine earlier windows' summaries with
// an in-window scan, and player 1's last write is the output row at the final
// position. Exactness follows from summing the same rational terms in a
// different grouping. Budget: max over layers of sum_h d_qk(h) * m words,
// or d_out for the final write.
inline SimResult sim_kernel(const TransformerSpec& spec, const Mat& raw, int64_t k) {
  validate_spec(spec);
  if (spec.layers.empty()) throw ConfigError("kernel sim: need at least one layer");
  for (const auto& layer : spec.layers) {
    for (const auto& h : layer.heads) {
      if (h.mode != AttnMode::Kernel) throw ConfigError("kernel sim: every head must be kernelized");
    }
  }
  if (spec.n_pad != 0) throw ConfigError("kernel sim: padding rows are not supported");
  if (static_cast<int64_t>(raw.rows()) != spec.n_task || raw.cols() != spec.d_in) {
    throw ConfigError("kernel sim: raw input must be n_task x d_in");
  }
  const int64_t n = spec.n_task;
  const auto wins = partition_windows(n, k);
  const size_t m = spec.m;
  const int64_t depth = static_cast<int64_t>(spec.depth());

  int64_t partial_words = 0;
  for (const auto& layer : spec.layers) {
    int64_t words = 0;
    for (const auto& h : layer.heads) words += static_cast<int64_t>(h.query.out_dim * m);
    partial_words = std::max(partial_words, words);
  }

  BlackboardConfig config;
  config.players = k;
  config.rounds = depth;
  config.word_bits = spec.precision_p;
  config.space_bits = std::max(partial_words, static_cast<int64_t>(spec.d_out)) * spec.precision_p;

  // Embeds the player's rows: engine row indices `rows`, with row 0 synthesized
  // from the start token exactly as the direct evaluation does.
  const auto embed_rows = [&spec](const std::vector<int64_t>& rows, const Mat& win_raw,
                                  int64_t first_pos) {
    Mat x(rows.size(), spec.m);
    std::vector<Rat> synth(spec.d_in);
    for (size_t r = 0; r < rows.size(); ++r) {
      const int64_t idx = rows[r];
      if (idx == 0) {
        if (spec.d_in > 0) synth[0] = spec.start_token;
        spec.input_embed.apply(0, synth, x.row(r));
        if (spec.d_in > 0) synth[0] = Rat(0);
      } else {
        spec.input_embed.apply(static_cast<size_t>(idx),
                               win_raw.row(static_cast<size_t>(idx - first_pos)), x.row(r));
      }
    }
    return x;
  };

  std::vector<Message> inputs(static_cast<size_t>(k));
  std::vector<PlayerFn> players(static_cast<size_t>(k));
  for (const auto& win : wins) {
    inputs[static_cast<size_t>(win.player - 1)] = bb_detail::flatten_rows(raw, win.begin, win.end);
    players[static_cast<size_t>(win.player - 1)] = [&spec, win, k, m, n, depth,
                                                    embed_rows](const Message& input, int64_t round,
                                                                const Board& board) -> Message {
      const size_t len = static_cast<size_t>(win.end - win.begin + 1);
      const Mat win_raw = bb_detail::rows_from_message(input, len, spec.d_in, "kernel sim input");

      std::vector<int64_t> rows;  // engine row indices owned by this player
      if (win.player == k) rows.push_back(0);
      for (int64_t i = win.begin; i <= win.end; ++i) rows.push_back(i);
      Mat x = embed_rows(rows, win_raw, win.begin);

      // Layer-l summaries of another player, parsed from its round-l write.
      const auto partial_of = [&spec, &board, m](int64_t l, int64_t player, size_t head,
                                                 size_t dqk) {
        const auto& layer = spec.layers[static_cast<size_t>(l - 1)];
        size_t offset = 0;
        for (size_t hh = 0; hh < head; ++hh) offset += layer.heads[hh].query.out_dim * m;
        size_t total = 0;
        for (const auto& hh : layer.heads) total += hh.query.out_dim * m;
        const auto& msg = bb_detail::sized(board.read(l, player), total, "kernel summary");
        Mat s(dqk, m);
        for (size_t a = 0; a < dqk; ++a) {
          for (size_t b = 0; b < m; ++b) s.at(a, b) = msg[offset + a * m + b];
        }
        return s;
      };

      const auto head_qkv = [&](const Head& head, Mat& q, Mat& kk, Mat& v) {
        for (size_t r = 0; r < rows.size(); ++r) {
          const size_t idx = static_cast<size_t>(rows[r]);
          head.query.apply(idx, x.row(r), q.row(r));
          head.key.apply(idx, x.row(r), kk.row(r));
          head.value.apply(idx, x.row(r), v.row(r));
        }
      };
      const auto add_outer = [&](const Mat& kk, const Mat& v, size_t r, Mat& s) {
        for (size_t a = 0; a < s.rows(); ++a) {
          const Rat& ka = kk.at(r, a);
          if (ka.is_zero()) continue;
          for (size_t b = 0; b < m; ++b) {
            const Rat& vb = v.at(r, b);
            if (!vb.is_zero()) s.at(a, b) += ka * vb;
          }
        }
      };

      // Own-window layer-l summaries at the current residual. Needs no board
      // context, so it is valid as this round's write under any mask.
      const auto summaries_message = [&](int64_t l) -> Message {
        const auto& layer = spec.layers[static_cast<size_t>(l - 1)];
        Message msg;
        for (const auto& head : layer.heads) {
          const size_t dqk = head.query.out_dim;
          Mat q(rows.size(), dqk), kk(rows.size(), dqk), v(rows.size(), m);
          head_qkv(head, q, kk, v);
          Mat own(dqk, m);
          for (size_t r = 0; r < rows.size(); ++r) add_outer(kk, v, r, own);
          for (size_t a = 0; a < dqk; ++a) {
            for (size_t b = 0; b < m; ++b) msg.push_back(own.at(a, b));
          }
        }
        return msg;
      };

      // x += attention of layer l, drawing foreign summaries from round-l
      // writes (complete rounds, or the current round's earlier writers when
      // player 1 finishes the last layer).
      const auto advance_layer = [&](int64_t l) {
        const auto& layer = spec.layers[static_cast<size_t>(l - 1)];
        Mat delta(rows.size(), m);
        for (size_t hi = 0; hi < layer.heads.size(); ++hi) {
          const auto& head = layer.heads[hi];
          const size_t dqk = head.query.out_dim;
          Mat q(rows.size(), dqk), kk(rows.size(), dqk), v(rows.size(), m);
          head_qkv(head, q, kk, v);

          Mat s(dqk, m);
          if (layer.mask == MaskKind::Causal) {
            for (int64_t other = win.player + 1; other <= k; ++other) {
              const Mat part = partial_of(l, other, hi, dqk);
              for (size_t a = 0; a < dqk; ++a) {
                for (size_t b = 0; b < m; ++b) {
                  if (!part.at(a, b).is_zero()) s.at(a, b) += part.at(a, b);
                }
              }
            }
            // Prefix scan: foreign context covers all earlier windows; add
            // own rows one by one, each row entering before its own output.
            for (size_t r = 0; r < rows.size(); ++r) {
              add_outer(kk, v, r, s);
              for (size_t b = 0; b < m; ++b) {
                Rat acc;
                for (size_t a = 0; a < dqk; ++a) {
                  const Rat& qa = q.at(r, a);
                  if (!qa.is_zero() && !s.at(a, b).is_zero()) acc += qa * s.at(a, b);
                }
                delta.at(r, b) += acc;
              }
            }
          } else {
            for (int64_t other = 1; other <= k; ++other) {
              if (other == win.player) continue;
              const Mat part = partial_of(l, other, hi, dqk);
              for (size_t a = 0; a < dqk; ++a) {
                for (size_t b = 0; b < m; ++b) {
                  if (!part.at(a, b).is_zero()) s.at(a, b) += part.at(a, b);
                }
              }
            }
            for (size_t r = 0; r < rows.size(); ++r) add_outer(kk, v, r, s);
            for (size_t r = 0; r < rows.size(); ++r) {
              for (size_t b = 0; b < m; ++b) {
                Rat acc;
                for (size_t a = 0; a < dqk; ++a) {
                  const Rat& qa = q.at(r, a);
                  if (!qa.is_zero() && !s.at(a, b).is_zero()) acc += qa * s.at(a, b);
                }
                delta.at(r, b) += acc;
              }
            }
          }
        }
        for (size_t r = 0; r < rows.size(); ++r) {
          for (size_t b = 0; b < m; ++b) x.at(r, b) += delta.at(r, b);
        }
      };

      // Rebuild residuals through layer round-1 (all context complete).
      for (int64_t l = 1; l < round; ++l) advance_layer(l);

      if (round == depth && win.player == 1) {
        // Finish the last layer with this round's summaries and emit psi at
        // the final position.
        advance_layer(depth);
        Message out(spec.d_out);
        spec.output_map.apply(static_cast<size_t>(n), x.row(rows.size() - 1), out);
        return out;
      }
      return summaries_message(round);
    };
  }

  SimResult res;
  res.transcript = run_blackboard(config, players, inputs);
  res.transcript.note =
      "budget: max(max over layers of sum_h d_qk(h)*m, d_out) words of precision_p bits";
  res.output = res.transcript.output;
  return res;
}

// ---------------------------------------------------------------------------
// Window+stride masked attention.

// Hardmax attention under the mask "position i attends to j iff |i-j| <= w or
// j is a multiple of g" (1-based positions, no start row). Heads must be
// hardmax; layer masks inside `layers` are ignored in favor of the
// window+stride rule.
struct LongformerSpec {
  int64_t n = 0;
  size_t m = 0;
  size_t d_in = 0;
  size_t d_out = 0;
  int precision_p = 48;
  int64_t w = 0;  // symmetric half-window
  int64_t g = 1;  // stride of the always-visible positions
  Elementwise input_embed;
  std::vector<LayerSpec> layers;
  Elementwise output_map;
};

inline void validate_longformer(const LongformerSpec& spec) {
  if (spec.n < 1) throw ConfigError("strided attention: n must be >= 1");
  if (spec.m == 0) throw ConfigError("strided attention: m must be > 0");
  if (spec.precision_p < 1) throw ConfigError("strided attention: precision must be >= 1");
  if (spec.w < 0) throw ConfigError("strided attention: window must be >= 0");
  if (spec.g < 1) throw ConfigError("strided attention: stride must be >= 1");
  if (spec.layers.empty()) throw ConfigError("strided attention: need at least one layer");
  if (spec.input_embed.out_dim != spec.m) {
    throw ConfigError("strided attention: embedding must produce m coordinates");
  }
  if (spec.output_map.out_dim != spec.d_out) {
    throw ConfigError("strided attention: output map width disagrees with d_out");
  }
  for (const auto& layer : spec.layers) {
    if (layer.heads.empty()) throw ConfigError("strided attention: layer without heads");
    for (const auto& h : layer.heads) {
      if (h.mode != AttnMode::Hardmax) {
        throw ConfigError("strided attention: heads must be hardmax");
      }
      if (h.query.out_dim == 0 || h.query.out_dim != h.key.out_dim) {
        throw ConfigError("strided attention: query/key widths must match and be > 0");
      }
      if (h.value.out_dim != spec.m) throw ConfigError("strided attention: value width must equal m");
    }
  }
}

inline bool longformer_allowed(const LongformerSpec& spec, int64_t i, int64_t j) {
  return (i > j ? i - j : j - i) <= spec.w || j % spec.g == 0;
}

inline Mat eval_longformer(const LongformerSpec& spec, const Mat& raw) {
  validate_longformer(spec);
  const size_t n = static_cast<size_t>(spec.n);
  if (raw.rows() != n || raw.cols() != spec.d_in) {
    throw ConfigError("strided attention: raw input must be n x d_in");
  }
  Mat x(n, spec.m);
  for (size_t i = 0; i < n; ++i) spec.input_embed.apply(i + 1, raw.row(i), x.row(i));

  for (const auto& layer : spec.layers) {
    Mat delta(n, spec.m);
    for (const auto& head : layer.heads) {
      const size_t dqk = head.query.out_dim;
      Mat q(n, dqk), kk(n, dqk), v(n, spec.m);
      for (size_t i = 0; i < n; ++i) {
        head.query.apply(i + 1, x.row(i), q.row(i));
        head.key.apply(i + 1, x.row(i), kk.row(i));
        head.value.apply(i + 1, x.row(i), v.row(i));
      }
      for (size_t i = 0; i < n; ++i) {
        bb_detail::ArgmaxPartial acc(spec.m);
        for (size_t j = 0; j < n; ++j) {
          if (!longformer_allowed(spec, static_cast<int64_t>(i + 1), static_cast<int64_t>(j + 1))) {
            continue;
          }
          acc.add(dot(q.row(i), kk.row(j)), v.row(j));
        }
        const auto f = acc.finish();
        for (size_t b = 0; b < spec.m; ++b) {
          if (!f[b].is_zero()) delta.at(i, b) += f[b];
        }
      }
    }
    for (size_t i = 0; i < n; ++i) {
      for (size_t b = 0; b < spec.m; ++b) x.at(i, b) += delta.at(i, b);
    }
  }

  Mat out(n, spec.d_out);
  for (size_t i = 0; i < n; ++i) spec.output_map.apply(i + 1, x.row(i), out.row(i));
  return out;
}

// Positions of a window that the owner publishes each round: the first w
// rows, the last w rows, and every stride-marked position inside the window.
inline std::vector<int64_t> share_positions(const Window& win, int64_t w, int64_t g) {
  std::vector<int64_t> pos;
  for (int64_t i = win.begin; i <= std::min(win.end, win.begin + w - 1); ++i) pos.push_back(i);
  for (int64_t i = std::max(win.begin, win.end - w + 1); i <= win.end; ++i) pos.push_back(i);
  for (int64_t i = win.begin; i <= win.end; ++i) {
    if (i % g == 0) pos.push_back(i);
  }
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  return pos;
}

// Streaming simulation: round l publishes each window's layer-(l-1) residual
// rows at its share positions; any row another window's attention can reach
// is covered (a position within w of a foreign row lies within w of its own
// window's edge, and stride-marked rows are shared outright). Player 1
// finishes the last layer at the final position in the last round. Budget:
// 4*(w + ceil(n/(g*k)) + ceil(2k/g) + 2) * m words (the constant 4 absorbs
// both window edges and the floor-division tail of the partition), or d_out
// for the final write.
inline SimResult sim_longformer(const LongformerSpec& spec, const Mat& raw, int64_t k) {
  validate_longformer(spec);
  const size_t n = static_cast<size_t>(spec.n);
  if (raw.rows() != n || raw.cols() != spec.d_in) {
    throw ConfigError("strided sim: raw input must be n x d_in");
  }
  const auto wins = partition_windows(spec.n, k);
  const int64_t depth = static_cast<int64_t>(spec.layers.size());
  const size_t m = spec.m;

  const int64_t share_words =
      4 * (spec.w + bb_detail::ceil_div(spec.n, spec.g * k) + bb_detail::ceil_div(2 * k, spec.g) + 2) *
      static_cast<int64_t>(m);

  BlackboardConfig config;
  config.players = k;
  config.rounds = depth;
  config.word_bits = spec.precision_p;
  config.space_bits = std::max(share_words, static_cast<int64_t>(spec.d_out)) * spec.precision_p;

  std::vector<Message> inputs(static_cast<size_t>(k));
  std::vector<PlayerFn> players(static_cast<size_t>(k));
  for (const auto& win : wins) {
    inputs[static_cast<size_t>(win.player - 1)] = bb_detail::flatten_rows(raw, win.begin, win.end);
    players[static_cast<size_t>(win.player - 1)] =
        [&spec, &wins, win, k, m, depth](const Message& input, int64_t round,
                                         const Board& board) -> Message {
      const size_t len = static_cast<size_t>(win.end - win.begin + 1);
      const Mat win_raw = bb_detail::rows_from_message(input, len, spec.d_in, "strided sim input");

      // Own residuals, layer 0.
      Mat x(len, m);
      for (size_t r = 0; r < len; ++r) {
        spec.input_embed.apply(static_cast<size_t>(win.begin) + r, win_raw.row(r), x.row(r));
      }

      // Pulls the layer-(l-1) context rows this window's attention may touch:
      // own rows plus every other player's round-l shares.
      const auto context = [&](int64_t l, const Mat& own) {
        Mat ctx(static_cast<size_t>(spec.n), m);
        std::vector<char> have(static_cast<size_t>(spec.n), 0);
        for (size_t r = 0; r < len; ++r) {
          const size_t pos = static_cast<size_t>(win.begin) + r;
          for (size_t b = 0; b < m; ++b) ctx.at(pos - 1, b) = own.at(r, b);
          have[pos - 1] = 1;
        }
        for (int64_t other = 1; other <= k; ++other) {
          if (other == win.player) continue;
          const auto shares = share_positions(wins[static_cast<size_t>(other - 1)], spec.w, spec.g);
          const auto& msg = bb_detail::sized(board.read(l, other), shares.size() * m,
                                             "strided share");
          for (size_t s = 0; s < shares.size(); ++s) {
            const size_t pos = static_cast<size_t>(shares[s]);
            for (size_t b = 0; b < m; ++b) ctx.at(pos - 1, b) = msg[s * m + b];
            have[pos - 1] = 1;
          }
        }
        return std::make_pair(std::move(ctx), std::move(have));
      };

      // One attention step at 1-based position i against the context.
      const auto attend = [&](const LayerSpec& layer, const Mat& ctx, const std::vector<char>& have,
                              std::span<const Rat> x_i, int64_t i, std::span<Rat> out) {
        for (const auto& head : layer.heads) {
          const size_t dqk = head.query.out_dim;
          std::vector<Rat> qv(dqk), kv(dqk), vv(m);
          head.query.apply(static_cast<size_t>(i), x_i, qv);
          bb_detail::ArgmaxPartial acc(m);
          for (int64_t j = 1; j <= spec.n; ++j) {
            if (!longformer_allowed(spec, i, j)) continue;
            if (!have[static_cast<size_t>(j - 1)]) {
              throw ConfigError("strided sim: position " + std::to_string(j) +
                                " is outside this player's entitlement");
            }
            std::fill(kv.begin(), kv.end(), Rat(0));
            std::fill(vv.begin(), vv.end(), Rat(0));
            head.key.apply(static_cast<size_t>(j), ctx.row(static_cast<size_t>(j - 1)), kv);
            head.value.apply(static_cast<size_t>(j), ctx.row(static_cast<size_t>(j - 1)), vv);
            acc.add(dot(std::span<const Rat>(qv), std::span<const Rat>(kv)), vv);
          }
          const auto f = acc.finish();
          for (size_t b = 0; b < m; ++b) {
            if (!f[b].is_zero()) out[b] += f[b];
          }
        }
      };

      // Rebuild own residuals through layer round-1 from completed rounds.
      for (int64_t l = 1; l < round; ++l) {
        auto [ctx, have] = context(l, x);
        Mat next(len, m);
        for (size_t r = 0; r < len; ++r) {
          std::vector<Rat> delta(m);
          attend(spec.layers[static_cast<size_t>(l - 1)], ctx, have, x.row(r),
                 win.begin + static_cast<int64_t>(r), delta);
          for (size_t b = 0; b < m; ++b) next.at(r, b) = x.at(r, b) + delta[b];
        }
        x = std::move(next);
      }

      if (round == depth && win.player == 1) {
        // Finish the last layer at the final position from this round's shares.
        auto [ctx, have] = context(depth, x);
        std::vector<Rat> delta(m);
        attend(spec.layers[static_cast<size_t>(depth - 1)], ctx, have, x.row(len - 1), spec.n,
               delta);
        std::vector<Rat> x_last(m);
        for (size_t b = 0; b < m; ++b) x_last[b] = x.at(len - 1, b) + delta[b];
        Message out(spec.d_out);
        spec.output_map.apply(static_cast<size_t>(spec.n), x_last, out);
        return out;
      }

      const auto shares = share_positions(win, spec.w, spec.g);
      Message msg;
      msg.reserve(shares.size() * m);
      for (const int64_t pos : shares) {
        const auto row = x.row(static_cast<size_t>(pos - win.begin));
        msg.insert(msg.end(), row.begin(), row.end());
      }
      return msg;
    };
  }

  SimResult res;
  res.transcript = run_blackboard(config, players, inputs);
  res.transcript.note =
      "budget: max(4*(w + ceil(n/(g*k)) + ceil(2k/g) + 2)*m, d_out) words of precision_p bits";
  res.output = res.transcript.output;
  return res;
}

// ---------------------------------------------------------------------------
// Greedy suffix decoding.

using CotReadout = std::function<std::vector<Rat>(size_t next_idx, std::span<const Rat> psi_row)>;

// Streaming simulation of greedy decoding for a one-layer causal hardmax
// spec. The final prefix row is shared context (as in the chase encoding,
// where the last token is public). In round r every player publishes the
// per-head argmax partial of its window against the current query row; each
// player maintains the decoded suffix locally by merging the previous rounds'
// partials with the globally known rows (start row and suffix), so no row
// content ever travels beyond the partials. After n_cot+1 rounds player 1's
// final write is greedy decoding's last appended row (or, for n_cot = 0, the
// direct output at the last position). Budget: max(H*(m+2), d_in, d_out)
// words of precision_p bits.
inline SimResult sim_cot(const TransformerSpec& spec, const Mat& prefix, const CotReadout& readout,
                         int64_t n_cot, int64_t k) {
  validate_spec(spec);
  if (spec.depth() != 1) throw ConfigError("decode sim: spec must have exactly one layer");
  if (spec.layers[0].mask != MaskKind::Causal) {
    throw ConfigError("decode sim: the layer must be causally masked");
  }
  for (const auto& h : spec.layers[0].heads) {
    if (h.mode != AttnMode::Hardmax) throw ConfigError("decode sim: heads must be hardmax");
  }
  if (spec.n_pad != 0) throw ConfigError("decode sim: padding rows are not supported");
  if (n_cot < 0) throw ConfigError("decode sim: suffix length must be >= 0");
  if (!readout && n_cot > 0) throw ConfigError("decode sim: missing readout");
  if (prefix.cols() != spec.d_in) throw ConfigError("decode sim: prefix width must be d_in");
  const int64_t n = static_cast<int64_t>(prefix.rows());
  if (n + n_cot > spec.n_task) throw ConfigError("decode sim: prefix plus suffix exceeds n_task");

  const auto wins = partition_windows(n, k);
  const size_t m = spec.m;
  const auto& heads = spec.layers[0].heads;
  const size_t partial_words = heads.size() * (m + 2);

  BlackboardConfig config;
  config.players = k;
  config.rounds = n_cot + 1;
  config.word_bits = spec.precision_p;
  config.space_bits = std::max({static_cast<int64_t>(partial_words),
                                static_cast<int64_t>(spec.d_in),
                                static_cast<int64_t>(spec.d_out)}) *
                      spec.precision_p;

  // Embed of engine row idx given its raw row.
  const auto embed_at = [&spec](int64_t idx, std::span<const Rat> raw_row) {
    std::vector<Rat> x(spec.m);
    spec.input_embed.apply(static_cast<size_t>(idx), raw_row, x);
    return x;
  };

  const auto start_embed = [&spec] {
    std::vector<Rat> synth(spec.d_in);
    if (spec.d_in > 0) synth[0] = spec.start_token;
    std::vector<Rat> x(spec.m);
    spec.input_embed.apply(0, synth, x);
    return x;
  };

  // Head queries of the round's query row.
  const auto queries_of = [&heads](int64_t i_q, const std::vector<Rat>& q_embed) {
    std::vector<std::vector<Rat>> queries(heads.size());
    for (size_t hi = 0; hi < heads.size(); ++hi) {
      queries[hi].assign(heads[hi].query.out_dim, Rat(0));
      heads[hi].query.apply(static_cast<size_t>(i_q), q_embed, queries[hi]);
    }
    return queries;
  };

  // Adds one embedded row to every head's partial.
  const auto add_row = [&heads, m](int64_t idx, const std::vector<Rat>& x_j,
                                   const std::vector<std::vector<Rat>>& queries,
                                   std::vector<bb_detail::ArgmaxPartial>& parts) {
    for (size_t hi = 0; hi < heads.size(); ++hi) {
      std::vector<Rat> kv(heads[hi].key.out_dim), vv(m);
      heads[hi].key.apply(static_cast<size_t>(idx), x_j, kv);
      heads[hi].value.apply(static_cast<size_t>(idx), x_j, vv);
      parts[hi].add(dot(std::span<const Rat>(queries[hi]), std::span<const Rat>(kv)), vv);
    }
  };

  std::vector<Message> inputs(static_cast<size_t>(k));
  std::vector<PlayerFn> players(static_cast<size_t>(k));
  for (const auto& win : wins) {
    // Window rows plus the shared final prefix row.
    Message in = bb_detail::flatten_rows(prefix, win.begin, win.end);
    const auto last_row = prefix.row(static_cast<size_t>(n - 1));
    in.insert(in.end(), last_row.begin(), last_row.end());
    inputs[static_cast<size_t>(win.player - 1)] = std::move(in);

    players[static_cast<size_t>(win.player - 1)] =
        [&spec, &heads, &readout, win, n, n_cot, m, k, partial_words, embed_at, start_embed,
         queries_of, add_row](const Message& input, int64_t round, const Board& board) -> Message {
      const size_t len = static_cast<size_t>(win.end - win.begin + 1);
      if (input.size() != (len + 1) * spec.d_in) {
        throw ConfigError("decode sim input: bad word count");
      }
      const Mat win_raw = bb_detail::rows_from_message(
          Message(input.begin(), input.begin() + static_cast<int64_t>(len * spec.d_in)), len,
          spec.d_in, "decode sim input");
      const Message public_last(input.end() - static_cast<int64_t>(spec.d_in), input.end());

      // Merges the round-t board partials (optionally with a local stand-in
      // for one player) and the globally known rows against the round-t
      // queries; returns psi of the query row.
      const auto merged_psi = [&](int64_t t, const std::vector<Message>& suffix,
                                  const std::vector<std::vector<Rat>>& suffix_embeds,
                                  const std::vector<bb_detail::ArgmaxPartial>* local,
                                  int64_t local_player) {
        const int64_t i_q = n + t - 1;
        const Message& q_raw = t == 1 ? public_last : suffix[static_cast<size_t>(t - 2)];
        const auto q_embed = embed_at(i_q, q_raw);
        const auto queries = queries_of(i_q, q_embed);

        std::vector<bb_detail::ArgmaxPartial> acc;
        acc.reserve(heads.size());
        for (size_t hi = 0; hi < heads.size(); ++hi) acc.emplace_back(m);
        // Globally known rows: the start row and the decoded suffix through
        // the query row itself.
        add_row(0, start_embed(), queries, acc);
        for (int64_t idx = n + 1; idx <= i_q; ++idx) {
          add_row(idx, suffix_embeds[static_cast<size_t>(idx - n - 1)], queries, acc);
        }
        for (int64_t p = 1; p <= k; ++p) {
          if (p == local_player) {
            for (size_t hi = 0; hi < heads.size(); ++hi) acc[hi].merge((*local)[hi]);
            continue;
          }
          const auto& msg = bb_detail::sized(board.read(t, p), partial_words, "decode partial");
          for (size_t hi = 0; hi < heads.size(); ++hi) {
            acc[hi].merge(bb_detail::ArgmaxPartial::parse(
                std::span<const Rat>(msg).subspan(hi * (m + 2), m + 2), m));
          }
        }

        std::vector<Rat> x_q = q_embed;
        for (const auto& p : acc) {
          const auto f = p.finish();
          for (size_t b = 0; b < m; ++b) {
            if (!f[b].is_zero()) x_q[b] += f[b];
          }
        }
        std::vector<Rat> psi(spec.d_out);
        spec.output_map.apply(static_cast<size_t>(i_q), x_q, psi);
        return psi;
      };

      // Rebuild the decoded suffix from the completed rounds.
      std::vector<Message> suffix;
      std::vector<std::vector<Rat>> suffix_embeds;
      const int64_t known = std::min<int64_t>(round - 1, n_cot);
      for (int64_t t = 1; t <= known; ++t) {
        const auto psi = merged_psi(t, suffix, suffix_embeds, nullptr, 0);
        auto next = readout(static_cast<size_t>(n + t), psi);
        if (next.size() != spec.d_in) throw ConfigError("decode sim: readout width must be d_in");
        suffix_embeds.push_back(embed_at(n + t, next));
        suffix.push_back(std::move(next));
      }

      if (win.player == 1 && round == n_cot + 1) {
        if (n_cot > 0) return suffix.back();
        // No suffix: merge this round's partials (ours computed locally) and
        // emit the direct output at the last position.
        const auto q_embed = embed_at(n, public_last);
        const auto queries = queries_of(n, q_embed);
        std::vector<bb_detail::ArgmaxPartial> own;
        own.reserve(heads.size());
        for (size_t hi = 0; hi < heads.size(); ++hi) own.emplace_back(m);
        for (size_t r = 0; r < len; ++r) {
          add_row(win.begin + static_cast<int64_t>(r), embed_at(win.begin + static_cast<int64_t>(r), win_raw.row(r)),
                  queries, own);
        }
        const auto psi = merged_psi(1, suffix, suffix_embeds, &own, 1);
        return Message(psi.begin(), psi.end());
      }

      // Window partial against this round's query row.
      const int64_t i_q = n + round - 1;
      const Message& q_raw = round == 1 ? public_last : suffix[static_cast<size_t>(round - 2)];
      const auto queries = queries_of(i_q, embed_at(i_q, q_raw));
      std::vector<bb_detail::ArgmaxPartial> own;
      own.reserve(heads.size());
      for (size_t hi = 0; hi < heads.size(); ++hi) own.emplace_back(m);
      for (size_t r = 0; r < len; ++r) {
        const int64_t idx = win.begin + static_cast<int64_t>(r);
        add_row(idx, embed_at(idx, win_raw.row(r)), queries, own);
      }
      Message msg;
      msg.reserve(partial_words);
      for (const auto& p : own) p.append_to(msg);
      return msg;
    };
  }

  SimResult res;
  res.transcript = run_blackboard(config, players, inputs);
  res.transcript.note = "budget: max(H*(m+2), d_in, d_out) words of precision_p bits";
  res.output = res.transcript.output;
  return res;
}

// ---------------------------------------------------------------------------
// Hand-built chase stepper for greedy decoding.

// One-layer causal hardmax spec that walks one most-recent-match step per
// decoded row. Input rows carry (token, one-step link, linked token); each
// suffix row holds the current chase position and its token, and the single
// lookup head fetches the stored link of that position, so `steps` decode
// steps finish a `steps`-fold hop. The answer is the second coordinate of the
// last decoded row (0 once the chase dies).
struct ChaseStepper {
  TransformerSpec spec;
  Mat input;  // n x 3
  CotReadout readout;
  int64_t steps = 0;
};

inline Mat chase_stepper_input(const std::vector<int32_t>& tokens) {
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n < 1) throw ConfigError("chase stepper: empty sequence");
  Mat raw(static_cast<size_t>(n), 3);
  for (int64_t i = 1; i <= n; ++i) {
    const int64_t link = khop::find_oracle(tokens, 1, i);
    raw.at(static_cast<size_t>(i - 1), 0) = Rat(tokens[static_cast<size_t>(i - 1)]);
    raw.at(static_cast<size_t>(i - 1), 1) = Rat(link);
    raw.at(static_cast<size_t>(i - 1), 2) = Rat(khop::token_at(tokens, link));
  }
  return raw;
}

inline ChaseStepper build_hop_stepper(const std::vector<int32_t>& tokens, int64_t steps) {
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n < 1) throw ConfigError("chase stepper: empty sequence");
  if (steps < 0) throw ConfigError("chase stepper: steps must be >= 0");
  const int64_t total = n + steps;

  ChaseStepper st;
  st.steps = steps;
  st.input = chase_stepper_input(tokens);

  TransformerSpec spec;
  spec.n_task = total;
  spec.n_pad = 0;
  spec.m = 5;  // fetch target, link, linked token, fetched link, fetched token
  spec.d_in = 3;
  spec.d_out = 2;
  spec.precision_p = 48;
  spec.input_embed = make_custom(5, [n](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
    if (static_cast<int64_t>(idx) <= n) {
      out[0] = in[1];  // fetch own link (causal: the link points backwards)
      out[1] = in[1];
      out[2] = in[2];
      out[3] = Rat(0);
      out[4] = Rat(0);
    } else {
      out[0] = in[0];  // fetch the current chase position
      out[1] = Rat(0);
      out[2] = Rat(0);
      out[3] = Rat(0);
      out[4] = Rat(0);
    }
  });
  khop::TargetFn target = [](size_t, std::span<const Rat> row) -> int64_t {
    if (!row[0].is_integer()) throw ConfigError("chase stepper: fetch target must be an integer");
    return row[0].floor_i64();
  };
  Elementwise rho = make_custom(5, [](size_t, std::span<const Rat> in, std::span<Rat> out) {
    out[0] = Rat(0);
    out[1] = Rat(0);
    out[2] = Rat(0);
    out[3] = in[1];  // fetched row's link
    out[4] = in[2];  // fetched row's linked token
  });
  LayerSpec layer;
  layer.mask = MaskKind::Causal;
  layer.heads.push_back(khop::build_lookup_head(total, std::move(target), std::move(rho)));
  spec.layers.push_back(std::move(layer));
  spec.output_map = make_custom(2, [n](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
    if (static_cast<int64_t>(idx) <= n) {
      out[0] = in[1];
      out[1] = in[2];
    } else {
      out[0] = in[3];
      out[1] = in[4];
    }
  });
  st.spec = std::move(spec);

  st.readout = [](size_t, std::span<const Rat> psi) {
    return std::vector<Rat>{psi[0], psi[1], Rat(0)};
  };
  return st;
}

}  // namespace mpca::blackboard
