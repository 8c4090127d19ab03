#pragma once

// Task-level surface for the sequential hop problem: per-position label
// oracles, the no-repeat sampler, the error metric, multi-hop sample framing,
// graph serialization, and the explicit attention construction.
//
// The construction realizes every layer as one hardmax head over circular
// scores snapped to the 2^-24 dyadic grid:
//   layer 1   fetches the predecessor token (position circle),
//   layer 2   fetches the most recent row whose predecessor token equals the
//             querying row's token (content circle + position half-circle,
//             start-row fallback), which is exactly one find step,
//   layer 3+  fetch packed (even, odd) find-power pairs along the chain.
// Results ride the residual stream as one integer accumulator channel that
// gains a base-`block` digit per layer, so nothing is ever overwritten and a
// single readout extracts the answer from the final digit.
//
// Depth: one fetch can at most double the deepest find power either half of
// the running pair holds, and the pair starts at depth one after layer 2, so
// k hops need ceil(log2 k) chain fetches; powers of two skip the odd half and
// land one layer earlier. Hence depth(1) = 2 and depth(k) = ceil(log2 k) + 2.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mpca/elementwise.hpp"
#include "mpca/errors.hpp"
#include "mpca/khop_oracle.hpp"
#include "mpca/transformer.hpp"

namespace mpca::khop {

// ---------------------------------------------------------------------------
// Oracle surface.

// Validated k-fold step from position i (1-based); 0 is the absorbing miss.
inline int64_t find_oracle(const std::vector<int32_t>& x, int64_t k, int64_t i) {
  if (k < 1) throw ConfigError("find_oracle: k must be >= 1");
  if (i < 1 || i > static_cast<int64_t>(x.size())) {
    throw IndexOutOfRange("find_oracle: position " + std::to_string(i) + " outside 1.." +
                          std::to_string(x.size()));
  }
  return find_pow(x, i, k);
}

// Per-position labels after k steps; 0 marks the undefined label. k = 0 is
// the identity labeling.
inline std::vector<int32_t> hop_oracle(const std::vector<int32_t>& x, int64_t k) {
  if (k < 0) throw ConfigError("hop_oracle: k must be >= 0");
  if (k == 0) return x;
  const auto table = find_table(x);
  std::vector<int32_t> labels(x.size(), 0);
  for (size_t i = 0; i < x.size(); ++i) {
    int64_t p = static_cast<int64_t>(i) + 1;
    for (int64_t step = 0; step < k && p != 0; ++step) {
      p = table[static_cast<size_t>(p - 1)];
    }
    labels[i] = token_at(x, p);
  }
  return labels;
}

inline std::vector<int32_t> labels_for(const Instance& inst) {
  return hop_oracle(inst.tokens, inst.k);
}

// Draws with the no-adjacent-repeat law: the first token is uniform and each
// successor is uniform over the alphabet minus its left neighbor.
inline Instance sample_instance(int64_t n, int32_t sigma, int64_t k, uint64_t seed) {
  if (n < 1 || k < 0) throw ConfigError("sample_instance: need N >= 1 and k >= 0");
  if (sigma < 2) throw ConfigError("sample_instance: need sigma >= 2 to avoid repeats");
  std::mt19937_64 rng(seed);
  Instance inst;
  inst.k = k;
  inst.sigma = sigma;
  inst.tokens.resize(static_cast<size_t>(n));
  std::uniform_int_distribution<int32_t> first(1, sigma);
  std::uniform_int_distribution<int32_t> rest(1, sigma - 1);
  inst.tokens[0] = first(rng);
  for (size_t i = 1; i < inst.tokens.size(); ++i) {
    const int32_t draw = rest(rng);
    inst.tokens[i] = draw < inst.tokens[i - 1] ? draw : draw + 1;
  }
  inst.labels = labels_for(inst);
  return inst;
}

// Fraction of defined-label positions that are predicted wrong.
inline Rat token_error(const std::vector<int32_t>& predictions,
                       const std::vector<int32_t>& labels) {
  if (predictions.size() != labels.size()) {
    throw ConfigError("token_error: prediction/label length mismatch");
  }
  int64_t counted = 0, wrong = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) continue;
    ++counted;
    if (predictions[i] != labels[i]) ++wrong;
  }
  if (counted == 0) throw AllBottom("token_error: sample has no defined labels");
  return Rat(wrong, counted);
}

struct ErrorReport {
  Rat mean_error = Rat(0);      // average of per-sample errors over counted samples
  int64_t samples_counted = 0;  // samples with at least one defined label
  int64_t samples_skipped = 0;  // all-undefined samples (excluded from the mean)
};

inline ErrorReport token_error_report(const std::vector<std::vector<int32_t>>& predictions,
                                      const std::vector<std::vector<int32_t>>& labels) {
  if (predictions.size() != labels.size()) {
    throw ConfigError("token_error_report: sample count mismatch");
  }
  ErrorReport report;
  Rat sum(0);
  for (size_t s = 0; s < labels.size(); ++s) {
    try {
      sum = sum + token_error(predictions[s], labels[s]);
      ++report.samples_counted;
    } catch (const AllBottom&) {
      ++report.samples_skipped;
    }
  }
  if (report.samples_counted > 0) sum = sum / Rat(report.samples_counted);
  report.mean_error = sum;
  return report;
}

// ---------------------------------------------------------------------------
// Multi-hop task framing: the hop count k rides as a reserved prefix token and
// the target prepends a 0 placeholder for that prefix position.

inline int32_t hop_count_token(int32_t sigma, int64_t k) {
  // Reserved ids: 0 undefined, 1..sigma real, sigma+1..sigma+3 gadget
  // specials, then one token per hop count.
  return static_cast<int32_t>(sigma + 4 + k);
}

struct MultiHopSample {
  int64_t k = 0;
  std::vector<int32_t> input;   // hop-count token, then the base sequence
  std::vector<int32_t> target;  // 0 placeholder, then the hop labels
};

inline MultiHopSample make_multi_hop_sample(const std::vector<int32_t>& x, int32_t sigma,
                                            int64_t k, int64_t k_max) {
  if (k < 0 || k > k_max) throw ConfigError("make_multi_hop_sample: k outside 0..k_max");
  MultiHopSample sample;
  sample.k = k;
  sample.input.reserve(x.size() + 1);
  sample.input.push_back(hop_count_token(sigma, k));
  sample.input.insert(sample.input.end(), x.begin(), x.end());
  sample.target.reserve(x.size() + 1);
  sample.target.push_back(0);
  const auto labels = hop_oracle(x, k);
  sample.target.insert(sample.target.end(), labels.begin(), labels.end());
  return sample;
}

// ---------------------------------------------------------------------------
// Graphs as token sequences; budgeted blow-up.

inline std::vector<int32_t> serialize_graph(const Graph& g) {
  for (const auto& [u, v] : g.edges) {
    if (u < 1 || u > g.n_vertices || v < 1 || v > g.n_vertices) {
      throw InvalidGraph("serialize_graph: edge endpoint out of range");
    }
  }
  std::vector<int32_t> tokens;
  tokens.reserve(g.edges.size() * 2);
  for (const auto& [u, v] : g.edges) {
    tokens.push_back(u);
    tokens.push_back(v);
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Instance text lines: "k | tokens | labels".

inline std::string instance_to_line(const Instance& inst) {
  std::ostringstream out;
  out << inst.k << " |";
  for (const auto t : inst.tokens) out << ' ' << t;
  out << " |";
  const auto labels = inst.labels.empty() ? labels_for(inst) : inst.labels;
  for (const auto l : labels) out << ' ' << l;
  return out.str();
}

inline Instance instance_from_line(const std::string& line) {
  std::istringstream in(line);
  Instance inst;
  std::string sep;
  if (!(in >> inst.k >> sep) || sep != "|") {
    throw ConfigError("instance_from_line: expected 'k | tokens | labels'");
  }
  std::string tok;
  bool in_labels = false;
  while (in >> tok) {
    if (tok == "|") {
      if (in_labels) throw ConfigError("instance_from_line: too many separators");
      in_labels = true;
      continue;
    }
    try {
      const int32_t v = static_cast<int32_t>(std::stol(tok));
      (in_labels ? inst.labels : inst.tokens).push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("instance_from_line: bad token '" + tok + "'");
    }
  }
  if (inst.tokens.empty()) throw ConfigError("instance_from_line: empty token list");
  if (!in_labels) throw ConfigError("instance_from_line: missing label section");
  if (inst.labels.size() != inst.tokens.size()) {
    throw ConfigError("instance_from_line: token/label length mismatch");
  }
  int32_t top = 0;
  for (const auto t : inst.tokens) top = std::max(top, t);
  inst.sigma = top;  // alphabet inferred as the largest token seen
  return inst;
}

// ---------------------------------------------------------------------------
// Circular score geometry. Queries and keys live on dyadic-grid cos/sin
// coordinates; every certified margin below is recomputed from those exact
// grid values, so a passing certificate covers the shipped numbers, not the
// ideal ones.

namespace head_detail {

constexpr int kGridBits = 24;

// Coordinates are premultiplied by 2^kGridBits, so every query-key product is
// an int64-sized integer and the hardmax comparisons never normalize a
// fraction. Margins are divided by score_scale() before they are reported, so
// the published bounds stay on the unit-amplitude scale.
inline Rat coord_scale() { return Rat(int64_t{1} << kGridBits); }
inline Rat score_scale() { return coord_scale() * coord_scale(); }

inline Rat circle_cos(int64_t x, int64_t period, const Rat& amp) {
  const long double angle =
      tau() * static_cast<long double>(x % period) / static_cast<long double>(period);
  return grid_cos(angle, amp, kGridBits) * coord_scale();
}

inline Rat circle_sin(int64_t x, int64_t period, const Rat& amp) {
  const long double angle =
      tau() * static_cast<long double>(x % period) / static_cast<long double>(period);
  return grid_sin(angle, amp, kGridBits) * coord_scale();
}

// Constant score of the fallback key (carried on the bias coordinate against
// an unscaled 1 on the query side), already in scaled score units.
inline Rat start_key_component(const Rat& amp) {
  return (amp * amp - Rat(2)) * score_scale();
}

// Content-circle amplitude: big enough that one circle step of content
// mismatch costs more than the whole position-score range plus the start
// gap. 7/(2*(1-cos(2*pi/S))) gives a squared gap of at least 49/(4*delta) > 6.
inline Rat match_amplitude(int64_t symbols) {
  if (symbols <= 1) return Rat(1);
  const long double delta =
      1.0L - std::cos(tau() / static_cast<long double>(symbols));
  return Rat(static_cast<int64_t>(std::ceil(7.0L / (2.0L * delta))));
}

// Winner-vs-runner-up gap of the position circle used by plain fetches:
// positions 0..n on an (n+1)-point circle, exact match wanted.
inline Rat certify_lookup_margin(int64_t n) {
  if (n < 1 || n > 100000) throw ConfigError("lookup margin: positions out of range");
  const int64_t period = n + 1;
  std::vector<Rat> cx, cy;
  cx.reserve(static_cast<size_t>(period));
  cy.reserve(static_cast<size_t>(period));
  for (int64_t x = 0; x <= n; ++x) {
    cx.push_back(circle_cos(x, period, Rat(1)));
    cy.push_back(circle_sin(x, period, Rat(1)));
  }
  const auto score = [&](int64_t a, int64_t b) {
    return cx[static_cast<size_t>(a)] * cx[static_cast<size_t>(b)] +
           cy[static_cast<size_t>(a)] * cy[static_cast<size_t>(b)];
  };
  Rat margin;
  bool first = true;
  for (int64_t t = 0; t <= n; ++t) {
    const Rat own = score(t, t);
    for (int64_t j = 0; j <= n; ++j) {
      if (j == t) continue;
      const Rat gap = own - score(t, j);
      if (first || gap < margin) {
        margin = gap;
        first = false;
      }
    }
  }
  margin = margin / score_scale();
  const Rat threshold = Rat(1, n) * Rat(1, n);
  if (!(margin >= threshold)) {
    throw ConfigError("lookup margin below 1/n^2 on the value grid");
  }
  return margin;
}

struct MatchGeometry {
  int64_t n = 0;        // query/key positions 1..n; row 0 is the fallback
  int64_t symbols = 0;  // content values 0..symbols-1
  Rat amplitude;        // content-circle amplitude
  Rat start_score;      // constant score of the fallback key
  Rat margin;           // least winner-vs-runner-up gap over all cases
};

// Certifies the most-recent-match head: content match beats mismatch at any
// distance, nearer matches beat farther ones, and the fallback key sits
// strictly between the worst match and the best mismatch.
inline MatchGeometry match_geometry(int64_t n, int64_t symbols) {
  if (n < 1 || n > 100000) throw ConfigError("match geometry: positions out of range");
  if (symbols < 1 || symbols > 100000) throw ConfigError("match geometry: symbol count");
  MatchGeometry g;
  g.n = n;
  g.symbols = symbols;
  g.amplitude = match_amplitude(symbols);
  g.start_score = g.amplitude * g.amplitude - Rat(2);
  const Rat start_scaled = start_key_component(g.amplitude);

  const int64_t half_period = 2 * (n + 1);
  std::vector<Rat> px, py;
  px.reserve(static_cast<size_t>(n) + 1);
  py.reserve(static_cast<size_t>(n) + 1);
  for (int64_t x = 0; x <= n; ++x) {
    px.push_back(circle_cos(x, half_period, Rat(1)));
    py.push_back(circle_sin(x, half_period, Rat(1)));
  }
  const auto pos = [&](int64_t i, int64_t j) {
    return px[static_cast<size_t>(i)] * px[static_cast<size_t>(j)] +
           py[static_cast<size_t>(i)] * py[static_cast<size_t>(j)];
  };

  std::vector<Rat> tx, ty;
  tx.reserve(static_cast<size_t>(symbols));
  ty.reserve(static_cast<size_t>(symbols));
  for (int64_t u = 0; u < symbols; ++u) {
    tx.push_back(circle_cos(u, symbols, g.amplitude));
    ty.push_back(circle_sin(u, symbols, g.amplitude));
  }
  const auto content = [&](int64_t u, int64_t v) {
    return tx[static_cast<size_t>(u)] * tx[static_cast<size_t>(v)] +
           ty[static_cast<size_t>(u)] * ty[static_cast<size_t>(v)];
  };

  Rat margin;
  bool first = true;
  const auto fold = [&](const Rat& gap) {
    if (first || gap < margin) {
      margin = gap;
      first = false;
    }
  };

  // Recency: within one content class the larger key position must win.
  for (int64_t i = 2; i <= n; ++i) {
    for (int64_t j = 1; j < i; ++j) fold(pos(i, j + 1) - pos(i, j));
  }

  Rat pos_min = pos(1, 1), pos_max = pos(1, 1);
  for (int64_t i = 1; i <= n; ++i) {
    for (int64_t j = 1; j <= i; ++j) {
      const Rat v = pos(i, j);
      if (v < pos_min) pos_min = v;
      if (v > pos_max) pos_max = v;
    }
  }

  Rat match_min;
  bool match_first = true;
  for (int64_t u = 0; u < symbols; ++u) {
    const Rat own = content(u, u);
    if (match_first || own < match_min) {
      match_min = own;
      match_first = false;
    }
  }

  if (symbols > 1) {
    // Any content match at the worst position beats any mismatch at the best.
    Rat mismatch_max;
    bool mm_first = true;
    for (int64_t u = 0; u < symbols; ++u) {
      Rat worst;
      bool w_first = true;
      for (int64_t v = 0; v < symbols; ++v) {
        if (v == u) continue;
        const Rat c = content(u, v);
        if (w_first || c > worst) {
          worst = c;
          w_first = false;
        }
        if (mm_first || c > mismatch_max) {
          mismatch_max = c;
          mm_first = false;
        }
      }
      fold(content(u, u) - worst - (pos_max - pos_min));
    }
    // The fallback outranks every mismatch.
    fold(start_scaled - mismatch_max - pos_max);
  }
  // Every match outranks the fallback.
  fold(match_min + pos_min - start_scaled);

  margin = margin / score_scale();
  const Rat threshold = Rat(1, n) * Rat(1, n) * Rat(1, symbols) * Rat(1, symbols);
  if (!(margin >= threshold)) {
    throw ConfigError("match margin below 1/(n^2 symbols^2) on the value grid");
  }
  g.margin = margin;
  return g;
}

inline int64_t row_int(const Rat& v, int64_t lo, int64_t hi, const char* what) {
  if (!v.is_integer()) throw ConfigError(std::string(what) + ": expected an integer channel");
  const int64_t r = v.floor_i64();
  if (r < lo || r > hi) {
    throw ConfigError(std::string(what) + ": value " + std::to_string(r) + " outside " +
                      std::to_string(lo) + ".." + std::to_string(hi));
  }
  return r;
}

}  // namespace head_detail

// ---------------------------------------------------------------------------
// Generic head builders. Both return a single hardmax head meant for a layer
// with the causal mask; the declared margins hold over every reachable
// query/key combination, so the argmax set is always a single row and the
// fetched value row passes through attention unaveraged.

using TargetFn = std::function<int64_t(size_t idx, std::span<const Rat> row)>;
using SymbolFn = std::function<int64_t(size_t idx, std::span<const Rat> row)>;

// Row i fetches rho(state of row target_of(i)); the target must lie in
// [0, i] (0 is the start row). Certified margin >= 1/n^2.
inline Head build_lookup_head(int64_t n, TargetFn target_of, Elementwise rho) {
  head_detail::certify_lookup_margin(n);
  const int64_t period = n + 1;
  Head head;
  head.mode = AttnMode::Hardmax;
  head.query = make_custom(2, [n, period, target_of = std::move(target_of)](
                                  size_t idx, std::span<const Rat> in, std::span<Rat> out) {
    const int64_t t = target_of(idx, in);
    if (t < 0 || t > n) {
      throw ConfigError("lookup head: target " + std::to_string(t) + " outside 0.." +
                        std::to_string(n));
    }
    if (t > static_cast<int64_t>(idx)) {
      throw NonCausalTarget("lookup head: row " + std::to_string(idx) + " targets " +
                            std::to_string(t));
    }
    out[0] = head_detail::circle_cos(t, period, Rat(1));
    out[1] = head_detail::circle_sin(t, period, Rat(1));
  });
  head.key = make_custom(2, [period](size_t idx, std::span<const Rat>, std::span<Rat> out) {
    out[0] = head_detail::circle_cos(static_cast<int64_t>(idx), period, Rat(1));
    out[1] = head_detail::circle_sin(static_cast<int64_t>(idx), period, Rat(1));
  });
  head.value = std::move(rho);
  return head;
}

// Row i fetches rho at the most recent row j <= i with mu1(row j) equal to
// mu2(row i); when no row matches (the row itself included — a key row can
// beat the query row only through its content, never through position), the
// start row's rho value is returned. Symbols live in 0..symbols-1. Certified
// margin >= 1/(n^2 symbols^2).
inline Head build_last_occurrence_head(int64_t n, int64_t symbols, SymbolFn mu1, SymbolFn mu2,
                                       Elementwise rho) {
  const auto geometry = head_detail::match_geometry(n, symbols);
  const Rat amp = geometry.amplitude;
  const Rat start = head_detail::start_key_component(amp);
  const int64_t half_period = 2 * (n + 1);
  Head head;
  head.mode = AttnMode::Hardmax;
  head.query = make_custom(
      5, [symbols, amp, half_period, mu2 = std::move(mu2)](size_t idx, std::span<const Rat> in,
                                                           std::span<Rat> out) {
        const int64_t u = mu2(idx, in);
        if (u < 0 || u >= symbols) {
          throw ConfigError("last-occurrence head: query symbol out of range");
        }
        out[0] = head_detail::circle_cos(u, symbols, amp);
        out[1] = head_detail::circle_sin(u, symbols, amp);
        out[2] = head_detail::circle_cos(static_cast<int64_t>(idx), half_period, Rat(1));
        out[3] = head_detail::circle_sin(static_cast<int64_t>(idx), half_period, Rat(1));
        out[4] = Rat(1);
      });
  head.key = make_custom(
      5, [symbols, amp, start, half_period, mu1 = std::move(mu1)](
             size_t idx, std::span<const Rat> in, std::span<Rat> out) {
        if (idx == 0) {
          out[4] = start;
          return;
        }
        const int64_t v = mu1(idx, in);
        if (v < 0 || v >= symbols) {
          throw ConfigError("last-occurrence head: key symbol out of range");
        }
        out[0] = head_detail::circle_cos(v, symbols, amp);
        out[1] = head_detail::circle_sin(v, symbols, amp);
        out[2] = head_detail::circle_cos(static_cast<int64_t>(idx), half_period, Rat(1));
        out[3] = head_detail::circle_sin(static_cast<int64_t>(idx), half_period, Rat(1));
      });
  head.value = std::move(rho);
  return head;
}

// ---------------------------------------------------------------------------
// The hop construction plan. Residual channels: 0 = own token, 1 = predecessor
// token, 2 = integer accumulator of packed digits. The digit written by layer
// l sits at block^l and packs (even pos, even tok, odd pos, odd tok): the
// positions/tokens of find^a(i) and find^(a+1)(i) for the running power a.

struct KhopPlan {
  int64_t k = 1;
  int32_t sigma = 0;
  int64_t n = 0;
  int64_t depth = 2;     // layer count of the built spec
  bool dyadic = true;    // k == 1 or a power of two: the odd half stays unused
  std::vector<int> bits;  // bits of k below the leading one, consumed by layers 4..depth
  int64_t pos_radix = 0;  // positions 0..n
  int64_t tok_radix = 0;  // tokens 0..sigma
  int64_t block = 0;      // pos_radix^2 * tok_radix^2
  // (even, odd) find powers carried after layers 2..depth; -1 = never live.
  std::vector<std::pair<int64_t, int64_t>> powers;
};

inline KhopPlan plan_khop(int64_t k, int32_t sigma, int64_t n) {
  if (k < 1) throw ConfigError("plan_khop: k must be >= 1");
  if (sigma < 1) throw ConfigError("plan_khop: sigma must be >= 1");
  if (n < 1) throw ConfigError("plan_khop: n must be >= 1");
  if (sigma > n) throw ConfigError("plan_khop: alphabet larger than the sequence");
  KhopPlan plan;
  plan.k = k;
  plan.sigma = sigma;
  plan.n = n;
  plan.pos_radix = n + 1;
  plan.tok_radix = static_cast<int64_t>(sigma) + 1;
  const int64_t pair_radix = plan.pos_radix * plan.tok_radix;
  if (pair_radix > (int64_t{1} << 31)) throw ConfigError("plan_khop: packing radix too large");
  plan.block = pair_radix * pair_radix;

  int64_t t = 0;
  while ((int64_t{1} << (t + 1)) <= k) ++t;
  plan.dyadic = k == (int64_t{1} << t);
  plan.depth = k == 1 ? 2 : (plan.dyadic ? t + 2 : t + 3);
  if (!plan.dyadic) {
    for (int64_t j = t - 1; j >= 0; --j) plan.bits.push_back(static_cast<int>((k >> j) & 1));
  }

  plan.powers.emplace_back(1, -1);  // after layer 2
  if (plan.dyadic) {
    for (int64_t l = 3; l <= plan.depth; ++l) {
      plan.powers.emplace_back(int64_t{1} << (l - 2), -1);
    }
  } else {
    plan.powers.emplace_back(1, 2);  // bootstrap layer 3
    int64_t a = 1;
    for (size_t b = 0; b < plan.bits.size(); ++b) {
      a = 2 * a + plan.bits[b];
      plan.powers.emplace_back(a, a + 1);
    }
  }
  if (plan.powers.back().first != k) {
    throw ConfigError("plan_khop: internal schedule error");  // unreachable
  }
  return plan;
}

namespace khop_detail {

struct PairEntry {
  int64_t e_pos = 0, e_tok = 0, o_pos = 0, o_tok = 0;
};

inline int64_t pack_entry(const KhopPlan& p, const PairEntry& e) {
  return ((e.e_pos * p.tok_radix + e.e_tok) * p.pos_radix + e.o_pos) * p.tok_radix + e.o_tok;
}

inline PairEntry unpack_entry(const KhopPlan& p, int64_t d) {
  PairEntry e;
  e.o_tok = d % p.tok_radix;
  d /= p.tok_radix;
  e.o_pos = d % p.pos_radix;
  d /= p.pos_radix;
  e.e_tok = d % p.tok_radix;
  e.e_pos = d / p.tok_radix;
  return e;
}

inline BigInt block_power(const KhopPlan& p, int64_t layer) {
  return boost::multiprecision::pow(BigInt(p.block), static_cast<unsigned>(layer));
}

// The digit layer `layer` wrote into the accumulator channel.
inline int64_t digit_of(const KhopPlan& p, const Rat& acc, int64_t layer) {
  if (!acc.is_integer()) throw ConfigError("hop accumulator: non-integer channel");
  const BigInt d = (acc.numerator() / block_power(p, layer)) % BigInt(p.block);
  return d.convert_to<int64_t>();
}

// Registry factory behind every map of the built spec, so specs rebuilt from
// their serialized parameters evaluate identically.
inline Elementwise make_khop_map(const Json& params) {
  const auto role = require_field<std::string>(params, "role");
  const auto k = require_field<int64_t>(params, "k");
  const auto sigma = require_field<int64_t>(params, "sigma");
  const auto n = require_field<int64_t>(params, "n");
  const KhopPlan plan = plan_khop(k, static_cast<int32_t>(sigma), n);

  const auto lookup_query = [plan](int64_t layer, int bit) {
    return make_custom(2, [plan, layer, bit](size_t idx, std::span<const Rat> in,
                                             std::span<Rat> out) {
      int64_t target = 0;
      if (layer == 1) {
        target = idx == 0 ? 0 : static_cast<int64_t>(idx) - 1;
      } else {
        const auto entry = unpack_entry(plan, digit_of(plan, in[2], layer - 1));
        target = bit ? entry.o_pos : entry.e_pos;
      }
      if (target < 0 || target > static_cast<int64_t>(idx)) {
        throw NonCausalTarget("hop fetch: row " + std::to_string(idx) + " targets " +
                              std::to_string(target));
      }
      out[0] = head_detail::circle_cos(target, plan.pos_radix, Rat(1));
      out[1] = head_detail::circle_sin(target, plan.pos_radix, Rat(1));
    });
  };

  if (role == "embed") {
    return make_custom(3, [plan](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
      if (idx == 0) return;
      out[0] = Rat(head_detail::row_int(in[0], 1, plan.sigma, "hop embed"));
    });
  }
  if (role == "prev-query") return lookup_query(1, 0);
  if (role == "position-key") {
    return make_custom(2, [plan](size_t idx, std::span<const Rat>, std::span<Rat> out) {
      out[0] = head_detail::circle_cos(static_cast<int64_t>(idx), plan.pos_radix, Rat(1));
      out[1] = head_detail::circle_sin(static_cast<int64_t>(idx), plan.pos_radix, Rat(1));
    });
  }
  if (role == "prev-value") {
    return make_custom(3, [](size_t, std::span<const Rat> in, std::span<Rat> out) {
      out[1] = in[0];
    });
  }
  if (role == "match-query" || role == "match-key") {
    const bool query = role == "match-query";
    const Rat amp = head_detail::match_amplitude(plan.tok_radix);
    const Rat start = head_detail::start_key_component(amp);
    const int64_t half_period = 2 * (plan.n + 1);
    return make_custom(5, [plan, amp, start, half_period, query](
                              size_t idx, std::span<const Rat> in, std::span<Rat> out) {
      if (!query && idx == 0) {
        out[4] = start;
        return;
      }
      // Queries match their own token against key rows' predecessor tokens.
      const int64_t sym =
          head_detail::row_int(in[query ? 0 : 1], 0, plan.sigma, "hop match symbol");
      out[0] = head_detail::circle_cos(sym, plan.tok_radix, amp);
      out[1] = head_detail::circle_sin(sym, plan.tok_radix, amp);
      out[2] = head_detail::circle_cos(static_cast<int64_t>(idx), half_period, Rat(1));
      out[3] = head_detail::circle_sin(static_cast<int64_t>(idx), half_period, Rat(1));
      if (query) out[4] = Rat(1);
    });
  }
  if (role == "match-value") {
    return make_custom(3, [plan](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
      PairEntry e;
      e.e_pos = static_cast<int64_t>(idx);
      e.e_tok = idx == 0 ? 0 : head_detail::row_int(in[0], 0, plan.sigma, "hop match value");
      out[2] = Rat(BigInt(pack_entry(plan, e)) * block_power(plan, 2));
    });
  }
  if (role == "chain-query") {
    const auto layer = require_field<int64_t>(params, "layer");
    const auto bit = require_field<int64_t>(params, "bit");
    return lookup_query(layer, static_cast<int>(bit));
  }
  if (role == "chain-value") {
    const auto layer = require_field<int64_t>(params, "layer");
    return make_custom(3, [plan, layer](size_t, std::span<const Rat> in, std::span<Rat> out) {
      const int64_t d = digit_of(plan, in[2], layer - 1);
      out[2] = Rat(BigInt(d) * block_power(plan, layer));
    });
  }
  if (role == "chain-boot-value") {
    // Keeps the fetched row itself as the even half and promotes that row's
    // own even half to the odd half: powers (1, 2) in one fetch.
    return make_custom(3, [plan](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
      const auto prior = unpack_entry(plan, digit_of(plan, in[2], 2));
      PairEntry e;
      e.e_pos = static_cast<int64_t>(idx);
      e.e_tok = idx == 0 ? 0 : head_detail::row_int(in[0], 0, plan.sigma, "hop boot value");
      e.o_pos = prior.e_pos;
      e.o_tok = prior.e_tok;
      out[2] = Rat(BigInt(pack_entry(plan, e)) * block_power(plan, 3));
    });
  }
  if (role == "readout") {
    return make_custom(1, [plan](size_t, std::span<const Rat> in, std::span<Rat> out) {
      const auto entry = unpack_entry(plan, digit_of(plan, in[2], plan.depth));
      out[0] = Rat(entry.e_tok);
    });
  }
  throw ConfigError("khop-map: unknown role '" + role + "'");
}

[[maybe_unused]] inline const ElementwiseRegistration khop_map_registration{"khop-map",
                                                                            make_khop_map};

}  // namespace khop_detail

// Exact realization of the k-hop labeling as a causal hardmax stack with one
// head per layer and a three-channel residual. Output row i (d_out = 1) is
// the label token, 0 for undefined — identical to hop_oracle on every input
// whose tokens are integers in 1..sigma.
inline TransformerSpec build_khop_transformer(int64_t k, int32_t sigma, int64_t n) {
  const KhopPlan plan = plan_khop(k, sigma, n);
  head_detail::certify_lookup_margin(n);
  head_detail::match_geometry(n, plan.tok_radix);

  const auto map = [&](const std::string& role, int64_t layer = -1, int64_t bit = -1) {
    Json params{{"role", role}, {"k", k}, {"sigma", static_cast<int64_t>(sigma)}, {"n", n}};
    if (layer >= 0) params["layer"] = layer;
    if (bit >= 0) params["bit"] = bit;
    return ElementwiseRegistry::make("khop-map", params);
  };

  TransformerSpec spec;
  spec.n_task = n;
  spec.n_pad = 0;
  spec.start_token = Rat(0);
  spec.m = 3;
  spec.d_in = 1;
  spec.d_out = 1;
  spec.precision_p = 48;
  spec.input_embed = map("embed");

  const auto add_layer = [&](Head head) {
    LayerSpec layer;
    layer.mask = MaskKind::Causal;
    layer.heads.push_back(std::move(head));
    spec.layers.push_back(std::move(layer));
  };

  add_layer({map("prev-query"), map("position-key"), map("prev-value"), AttnMode::Hardmax, Rat(0)});
  add_layer({map("match-query"), map("match-key"), map("match-value"), AttnMode::Hardmax, Rat(0)});
  for (int64_t l = 3; l <= plan.depth; ++l) {
    const bool boot = !plan.dyadic && l == 3;
    // Doubling fetches follow the even half; consumed bits pick the odd one.
    const int64_t bit =
        plan.dyadic || l == 3 ? 0 : plan.bits[static_cast<size_t>(l - 4)];
    add_layer({map("chain-query", l, bit), map("position-key"),
               map(boot ? "chain-boot-value" : "chain-value", l), AttnMode::Hardmax, Rat(0)});
  }
  spec.output_map = map("readout");
  validate_spec(spec);
  return spec;
}

// Labels the built spec assigns to an instance: evaluate and read the task
// rows (row 0 is the synthetic start row).
inline std::vector<int32_t> transformer_labels(const TransformerSpec& spec,
                                               const std::vector<int32_t>& tokens) {
  Mat raw(tokens.size(), 1);
  for (size_t i = 0; i < tokens.size(); ++i) raw.at(i, 0) = Rat(tokens[i]);
  const auto result = evaluate(spec, raw, EvalOptions{});
  std::vector<int32_t> labels(tokens.size(), 0);
  for (size_t i = 0; i < tokens.size(); ++i) {
    const Rat& v = result.output.at(i + 1, 0);
    labels[i] = static_cast<int32_t>(head_detail::row_int(v, 0, int64_t{1} << 30, "hop output"));
  }
  return labels;
}

}  // namespace mpca::khop
