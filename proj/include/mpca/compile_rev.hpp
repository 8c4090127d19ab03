#pragma once

// Reverse direction: run an attention stack as a message-passing protocol.
//
// plan_simulation sizes the machine pool for a stack with residual width m,
// at most H heads per layer, and M rows, under a per-machine word budget s:
//   - token machines 1..M keep (row, X_row) resident across layers, which is
//     what preserves the residual (skip) stream;
//   - inner-product machines M+1..M+M^2 (row-major pairs) each own one score
//     entry per layer;
//   - one propagation tree per token, fanout b = floor(s / 4mH), internal
//     depths 1..D-1 with D = ceil(log_b M), laid out after the pair block in
//     (tree, depth, slot) lexicographic order.
// Each layer takes 2D+3 rounds: the token ships X down its tree (1 + D rounds,
// the last two hops splitting row targets from column targets), pair machines
// form per-head partial results (1), the partials merge back up (D-1), the
// token folds the merged heads into its residual (1), and one boundary round
// carries the state into the next layer -- the last layer uses it to apply the
// output map and spread the words positionally. One extra round up front
// moves the raw input words from their windows to the token machines, so a
// depth-L stack costs (2D+3)L + 1 rounds total.
//
// Two backends share the wire format (one 256-bit word packs one rational as
// offset-signed numerator and denominator):
//   - all-hardmax stacks travel exact: a partial is (max score, argmax
//     multiplicity, value sum) and merging is associative, so the protocol
//     reproduces the unquantized evaluation word for word;
//   - stacks with softmax heads mirror the quantized evaluation: a partial is
//     (logZ, S) with logZ merged by log-sum-exp and S by the Z-weighted convex
//     combination, values ride the 2^-(p/2) grid between hops, and deviations
//     stay within the caller's tolerance rather than being exact.
// Masked pairs contribute an empty partial (Z = 0), so they can never affect
// a merged value. Kernel-mode heads have no score matrix to distribute and
// are rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpca/errors.hpp"
#include "mpca/fixed_point.hpp"
#include "mpca/linalg.hpp"
#include "mpca/mpc.hpp"
#include "mpca/rational.hpp"
#include "mpca/transformer.hpp"

namespace mpca::simulate {

// ---------------------------------------------------------------------------
// Planning

enum class Role { Token, InnerProduct, Prop };

struct MachineRole {
  Role kind = Role::Token;
  int64_t i = 0;  // token row+1 / pair row side / tree owner
  int64_t k = 0;  // pair column side / slot within the depth
  int64_t d = 0;  // tree depth (Prop only, 1..D-1)
};

struct MachinePlan {
  int64_t m = 0;  // residual width
  int64_t H = 0;  // head budget per layer
  int64_t M = 0;  // rows (sequence length including the start row)
  int64_t s = 0;  // per-machine word budget

  int64_t b = 0;               // tree fanout, floor(s / 4mH)
  int64_t D = 0;               // tree depth, ceil(log_b M)
  int64_t q = 0;               // machine count M + M^2 + M * prop_per_tree
  int64_t rounds_per_layer = 0;  // 2D + 3
  int64_t prop_per_tree = 0;     // sum of b^d for d = 1..D-1
  std::vector<int64_t> pow_b;    // b^0 .. b^D

  int64_t token_id(int64_t i) const { return i; }
  int64_t inner_product_id(int64_t i, int64_t k) const { return M + (i - 1) * M + k; }
  int64_t prop_id(int64_t i, int64_t d, int64_t k) const {
    int64_t off = 0;
    for (int64_t dd = 1; dd < d; ++dd) off += pow_b[static_cast<size_t>(dd)];
    return M + M * M + (i - 1) * prop_per_tree + off + k;
  }

  MachineRole role_of(int64_t id) const {
    if (id < 1 || id > q) {
      throw ConfigError("role_of: machine id " + std::to_string(id) + " outside 1.." +
                        std::to_string(q));
    }
    if (id <= M) return {Role::Token, id, 0, 0};
    if (id <= M + M * M) {
      const int64_t e = id - M - 1;
      return {Role::InnerProduct, e / M + 1, e % M + 1, 0};
    }
    int64_t e = id - M - M * M - 1;
    const int64_t i = e / prop_per_tree + 1;
    int64_t r = e % prop_per_tree;
    for (int64_t d = 1; d < D; ++d) {
      if (r < pow_b[static_cast<size_t>(d)]) return {Role::Prop, i, r + 1, d};
      r -= pow_b[static_cast<size_t>(d)];
    }
    throw ConfigError("role_of: corrupt plan layout");
  }

  // Leaf block [lo, hi] (clipped to 1..M) served by tree node (d, k).
  std::pair<int64_t, int64_t> leaf_block(int64_t d, int64_t k) const {
    const int64_t w = pow_b[static_cast<size_t>(D - d)];
    return {(k - 1) * w + 1, std::min(k * w, M)};
  }
};

inline MachinePlan plan_simulation(int64_t m, int64_t H, int64_t M, int64_t s) {
  if (m < 1 || H < 1) throw ConfigError("plan_simulation: need m >= 1 and H >= 1");
  if (M < 2) throw ConfigError("plan_simulation: need M >= 2 rows");
  if (m > (int64_t(1) << 20) || H > (int64_t(1) << 20) || M > (int64_t(1) << 20) ||
      s > (int64_t(1) << 40)) {
    throw ConfigError("plan_simulation: dimension outside the supported range");
  }
  if (s < 8 * m * H) {
    throw InsufficientMemory("plan_simulation: need s >= 8*m*H = " + std::to_string(8 * m * H) +
                             ", got s = " + std::to_string(s));
  }

  MachinePlan plan;
  plan.m = m;
  plan.H = H;
  plan.M = M;
  plan.s = s;
  plan.b = s / (4 * m * H);  // >= 2 by the precondition

  plan.D = 1;
  int64_t cap = plan.b;
  while (cap < M) {
    cap *= plan.b;
    ++plan.D;
  }

  plan.pow_b.assign(static_cast<size_t>(plan.D) + 1, 1);
  for (int64_t d = 1; d <= plan.D; ++d) {
    plan.pow_b[static_cast<size_t>(d)] = plan.pow_b[static_cast<size_t>(d - 1)] * plan.b;
  }
  plan.prop_per_tree = 0;
  for (int64_t d = 1; d < plan.D; ++d) plan.prop_per_tree += plan.pow_b[static_cast<size_t>(d)];

  plan.q = M + M * M + M * plan.prop_per_tree;
  plan.rounds_per_layer = 2 * plan.D + 3;

  // Merge fan-in: each tree node absorbs b partials of (m+2) words per head.
  if (plan.b * (m + 1) * H > s || plan.b * (m + 2) * H > s) {
    throw InsufficientMemory("plan_simulation: fan-in b*(m+2)*H exceeds s");
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Attention partials

// Softmax partial: S is the Z-weighted convex combination of the covered
// values and log_z the log of the covered weight mass. log_z = -inf (with S
// meaningless) marks an empty partial, e.g. a fully masked leaf; every
// nonempty partial carries a finite log_z and S inside the covered values'
// magnitude range.
struct PartialSoftmax {
  std::vector<long double> S;
  long double log_z = -std::numeric_limits<long double>::infinity();

  bool empty() const { return std::isinf(log_z) && log_z < 0; }
};

// Hardmax partial: exact running maximum, its multiplicity, and the value sum
// over the current argmax set. count = 0 marks an empty partial. Merging is
// exact rational arithmetic, hence associative and order-independent.
struct PartialHardmax {
  Rat best;
  int64_t count = 0;
  std::vector<Rat> sum;
};

inline PartialSoftmax merge_partials(std::span<const PartialSoftmax> children) {
  PartialSoftmax out;
  size_t width = 0;
  bool any = false;
  long double mx = -std::numeric_limits<long double>::infinity();
  for (const auto& c : children) {
    if (c.empty()) continue;
    if (any && c.S.size() != width) throw ConfigError("merge_partials: width mismatch");
    width = c.S.size();
    any = true;
    mx = std::max(mx, c.log_z);
  }
  if (!any) {
    if (!children.empty()) out.S.assign(children.front().S.size(), 0.0L);
    return out;
  }
  long double z = 0.0L;
  for (const auto& c : children) {
    if (!c.empty()) z += std::exp(c.log_z - mx);
  }
  out.log_z = mx + std::log(z);
  out.S.assign(width, 0.0L);
  for (const auto& c : children) {
    if (c.empty()) continue;
    const long double w = std::exp(c.log_z - mx) / z;
    for (size_t col = 0; col < width; ++col) out.S[col] += w * c.S[col];
  }
  return out;
}

inline PartialHardmax merge_partials(std::span<const PartialHardmax> children) {
  PartialHardmax out;
  for (const auto& c : children) {
    if (c.count == 0) continue;
    if (out.count != 0 && c.sum.size() != out.sum.size()) {
      throw ConfigError("merge_partials: width mismatch");
    }
    if (out.count == 0 || c.best > out.best) {
      out = c;
    } else if (c.best == out.best) {
      out.count += c.count;
      for (size_t col = 0; col < out.sum.size(); ++col) out.sum[col] += c.sum[col];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word packing: one 256-bit word carries one rational as
// (numerator + 2^127) << 128 | denominator.

namespace sim_detail {

inline const BigInt& pack_offset() {
  static const BigInt off = BigInt(1) << 127;
  return off;
}

inline mpc::Word pack_rat(const Rat& r) {
  const BigInt num = r.numerator();
  const BigInt den = r.denominator();
  if (num < -pack_offset() || num >= pack_offset() || den >= (BigInt(1) << 128)) {
    throw PrecisionOverflow("pack_rat: " + r.to_string() + " exceeds the 128-bit word halves");
  }
  return ((num + pack_offset()) << 128) | den;
}

inline Rat unpack_rat(const mpc::Word& w) {
  static const BigInt mask = (BigInt(1) << 128) - 1;
  const BigInt den = w & mask;
  if (den == 0) throw UndecodableRow("unpack_rat: zero denominator");
  return Rat(BigRat((w >> 128) - pack_offset(), den));
}

struct Ctx {
  TransformerSpec spec;
  MachinePlan plan;
  bool quantized = false;  // any softmax head present
  int64_t L = 0;
  int64_t n_task = 0;
  int64_t d_in = 0;
  int64_t d_out = 0;
  int64_t n_in = 0;
  int64_t n_out = 0;
};

inline std::vector<mpc::Word> pack_row(std::span<const Rat> row) {
  std::vector<mpc::Word> out;
  out.reserve(row.size());
  for (const auto& r : row) out.push_back(pack_rat(r));
  return out;
}

// Inbox entries grouped into (src, values) runs in delivery order.
inline std::vector<std::pair<int64_t, std::vector<Rat>>> runs(const mpc::Inbox& inbox) {
  std::vector<std::pair<int64_t, std::vector<Rat>>> out;
  for (const auto& e : inbox) {
    if (out.empty() || out.back().first != e.src) out.push_back({e.src, {}});
    out.back().second.push_back(unpack_rat(e.payload));
  }
  return out;
}

inline std::vector<Rat> expect_run(const mpc::Inbox& inbox, int64_t src, size_t len,
                                   const char* what) {
  for (auto& [from, vals] : runs(inbox)) {
    if (from != src) continue;
    if (vals.size() != len) {
      throw UndecodableRow(std::string(what) + ": run from " + std::to_string(src) + " has " +
                           std::to_string(vals.size()) + " words, expected " +
                           std::to_string(len));
    }
    return std::move(vals);
  }
  throw UndecodableRow(std::string(what) + ": no run from machine " + std::to_string(src));
}

inline void quantize_if(std::vector<Rat>& row, const Ctx& ctx) {
  if (ctx.quantized) engine_detail::quantize_row(row, ctx.spec.precision_p);
}

inline std::vector<Rat> apply_map(const Elementwise& f, size_t idx, std::span<const Rat> in) {
  std::vector<Rat> out(f.out_dim);
  f.apply(idx, in, out);
  return out;
}

// Residual row for a token machine: embed the raw words (start/pad rows use
// the synthesized raw row, matching the evaluation path).
inline std::vector<Rat> embed_row(const Ctx& ctx, int64_t row, std::span<const Rat> raw) {
  std::vector<Rat> synth(static_cast<size_t>(ctx.d_in));
  std::span<const Rat> src = raw;
  const bool real = row >= 1 && row <= ctx.n_task;
  if (!real) {
    if (row == 0 && ctx.d_in > 0) synth[0] = ctx.spec.start_token;
    src = synth;
  }
  auto x = apply_map(ctx.spec.input_embed, static_cast<size_t>(row), src);
  std::vector<Rat> xv(x.begin(), x.end());
  quantize_if(xv, ctx);
  return xv;
}

// ---- partial wire frames: (m+2) words per head, [count, aux, S...] ----

inline void encode_hardmax(std::vector<mpc::Word>& out, const PartialHardmax& p, int64_t m) {
  out.push_back(pack_rat(Rat(p.count)));
  out.push_back(pack_rat(p.count == 0 ? Rat(0) : p.best));
  for (int64_t col = 0; col < m; ++col) {
    out.push_back(pack_rat(p.count == 0 ? Rat(0) : p.sum[static_cast<size_t>(col)]));
  }
}

inline void encode_softmax(std::vector<mpc::Word>& out, const PartialSoftmax& p, int64_t m,
                           int p_bits) {
  const int grid = p_bits / 2;
  int64_t count = p.empty() ? 0 : 1;
  out.push_back(pack_rat(Rat(count)));
  out.push_back(pack_rat(p.empty() ? Rat(0) : Rat::dyadic_round(p.log_z, grid)));
  for (int64_t col = 0; col < m; ++col) {
    out.push_back(
        pack_rat(p.empty() ? Rat(0) : Rat::dyadic_round(p.S[static_cast<size_t>(col)], grid)));
  }
}

inline PartialHardmax decode_hardmax(std::span<const Rat> frame, int64_t m) {
  PartialHardmax p;
  p.count = frame[0].floor_i64();
  if (p.count == 0) return p;
  p.best = frame[1];
  p.sum.assign(frame.begin() + 2, frame.begin() + 2 + m);
  return p;
}

inline PartialSoftmax decode_softmax(std::span<const Rat> frame, int64_t m) {
  PartialSoftmax p;
  if (frame[0].is_zero()) return p;
  p.log_z = frame[1].to_long_double();
  p.S.resize(static_cast<size_t>(m));
  for (int64_t col = 0; col < m; ++col) {
    p.S[static_cast<size_t>(col)] = frame[2 + static_cast<size_t>(col)].to_long_double();
  }
  return p;
}

// Merge the per-head frames carried by several children into one frame.
inline std::vector<mpc::Word> merge_frames(const Ctx& ctx, int64_t layer,
                                           std::span<const std::vector<Rat>> children) {
  const auto& heads = ctx.spec.layers[static_cast<size_t>(layer - 1)].heads;
  const int64_t m = static_cast<int64_t>(ctx.spec.m);
  const size_t stride = static_cast<size_t>(m + 2);
  for (const auto& c : children) {
    if (c.size() != stride * heads.size()) {
      throw UndecodableRow("merge_frames: child frame has " + std::to_string(c.size()) +
                           " words, expected " + std::to_string(stride * heads.size()));
    }
  }
  std::vector<mpc::Word> out;
  out.reserve(stride * heads.size());
  for (size_t h = 0; h < heads.size(); ++h) {
    const size_t at = h * stride;
    if (heads[h].mode == AttnMode::Hardmax) {
      std::vector<PartialHardmax> parts;
      parts.reserve(children.size());
      for (const auto& c : children) {
        parts.push_back(decode_hardmax(std::span<const Rat>(c).subspan(at, stride), m));
      }
      encode_hardmax(out, merge_partials(std::span<const PartialHardmax>(parts)), m);
    } else {
      std::vector<PartialSoftmax> parts;
      parts.reserve(children.size());
      for (const auto& c : children) {
        parts.push_back(decode_softmax(std::span<const Rat>(c).subspan(at, stride), m));
      }
      encode_softmax(out, merge_partials(std::span<const PartialSoftmax>(parts)), m,
                     ctx.spec.precision_p);
    }
  }
  return out;
}

// ---- per-role local behavior, one layer at local round t in 1..2D+3 ----

inline mpc::Message x_msg(int64_t dst, std::span<const Rat> x) { return {dst, pack_row(x)}; }

inline std::vector<mpc::Message> token_step(const Ctx& ctx, int64_t layer, int64_t t, int64_t id,
                                            const mpc::Inbox& inbox) {
  const auto& plan = ctx.plan;
  const int64_t row = id - 1;
  const size_t m = ctx.spec.m;
  std::vector<mpc::Message> out;

  if (t == 1) {
    std::vector<Rat> x;
    if (layer == 1) {
      std::vector<Rat> raw;
      for (const auto& e : inbox) raw.push_back(unpack_rat(e.payload));
      if (row >= 1 && row <= ctx.n_task && static_cast<int64_t>(raw.size()) != ctx.d_in) {
        throw UndecodableRow("token dispersal: row " + std::to_string(row) + " got " +
                             std::to_string(raw.size()) + " raw words");
      }
      x = embed_row(ctx, row, raw);
    } else {
      x = expect_run(inbox, id, m, "token layer boundary");
    }
    out.push_back(x_msg(id, x));
    if (plan.D == 1) {
      for (int64_t k = 1; k <= plan.M; ++k) out.push_back(x_msg(plan.inner_product_id(id, k), x));
    } else {
      for (int64_t j = 1; j <= plan.b; ++j) {
        if (plan.leaf_block(1, j).first <= plan.M) out.push_back(x_msg(plan.prop_id(id, 1, j), x));
      }
    }
    return out;
  }

  if (t <= 2 * plan.D + 1) {
    auto x = expect_run(inbox, id, m, "token hold");
    out.push_back(x_msg(id, x));
    if (plan.D == 1 && t == 2) {  // column hop runs from the token when the tree is flat
      for (int64_t k = 1; k <= plan.M; ++k) out.push_back(x_msg(plan.inner_product_id(k, id), x));
    }
    return out;
  }

  if (t == 2 * plan.D + 2) {
    auto x = expect_run(inbox, id, m, "token merge");
    std::vector<std::vector<Rat>> children;
    for (auto& [src, vals] : runs(inbox)) {
      if (src != id) children.push_back(std::move(vals));
    }
    const auto merged =
        merge_frames(ctx, layer, std::span<const std::vector<Rat>>(children));
    std::vector<Rat> frame;
    frame.reserve(merged.size());
    for (const auto& w : merged) frame.push_back(unpack_rat(w));

    const auto& heads = ctx.spec.layers[static_cast<size_t>(layer - 1)].heads;
    const size_t stride = m + 2;
    for (size_t h = 0; h < heads.size(); ++h) {
      std::vector<Rat> o(m, Rat(0));
      const auto head_frame = std::span<const Rat>(frame).subspan(h * stride, stride);
      if (heads[h].mode == AttnMode::Hardmax) {
        auto p = decode_hardmax(head_frame, static_cast<int64_t>(m));
        if (p.count > 0) {
          o = p.sum;
          if (p.count > 1) {
            const Rat inv(1, p.count);
            for (auto& v : o) {
              if (!v.is_zero()) v *= inv;
            }
          }
        }
        if (ctx.quantized) engine_detail::quantize_row(o, ctx.spec.precision_p);
      } else {
        auto p = decode_softmax(head_frame, static_cast<int64_t>(m));
        if (!p.empty()) {
          const int p_bits = ctx.spec.precision_p;
          for (size_t col = 0; col < m; ++col) {
            o[col] = quantize(Rat::dyadic_round(p.S[col], p_bits / 2), p_bits);
          }
        }
      }
      for (size_t col = 0; col < m; ++col) x[col] += o[col];
    }
    quantize_if(x, ctx);
    out.push_back(x_msg(id, x));
    return out;
  }

  // t == 2D+3: layer boundary. Inner layers carry X forward; the last layer
  // applies the output map and spreads the words by output position.
  auto x = expect_run(inbox, id, m, "token boundary");
  if (layer < ctx.L) {
    out.push_back(x_msg(id, x));
    return out;
  }
  if (row >= 1 && row <= ctx.n_task) {
    auto y = apply_map(ctx.spec.output_map, static_cast<size_t>(row), x);
    quantize_if(y, ctx);
    for (int64_t c = 0; c < ctx.d_out; ++c) {
      const int64_t pos = (row - 1) * ctx.d_out + c + 1;
      out.push_back({(pos - 1) / ctx.plan.s + 1, {pack_rat(y[static_cast<size_t>(c)])}});
    }
  }
  return out;
}

inline std::vector<mpc::Message> prop_step(const Ctx& ctx, int64_t layer, int64_t t,
                                           const MachineRole& role, const mpc::Inbox& inbox) {
  const auto& plan = ctx.plan;
  const size_t m = ctx.spec.m;
  const auto [lo, hi] = plan.leaf_block(role.d, role.k);
  if (lo > plan.M) return {};  // dead branch
  std::vector<mpc::Message> out;
  const int64_t self = plan.prop_id(role.i, role.d, role.k);

  if (role.d < plan.D - 1 && t == role.d + 1) {
    // Forward X one level down.
    const auto& run = runs(inbox);
    if (run.size() != 1 || run.front().second.size() != m) {
      throw UndecodableRow("prop descent: malformed X delivery");
    }
    const auto& x = run.front().second;
    for (int64_t j = 1; j <= plan.b; ++j) {
      const int64_t child = (role.k - 1) * plan.b + j;
      if (plan.leaf_block(role.d + 1, child).first <= plan.M) {
        out.push_back(x_msg(plan.prop_id(role.i, role.d + 1, child), x));
      }
    }
    return out;
  }

  if (role.d == plan.D - 1 && t == plan.D) {
    // Row hop: deliver X_i to the pair machines (i, k') in this block.
    const auto& run = runs(inbox);
    if (run.size() != 1 || run.front().second.size() != m) {
      throw UndecodableRow("prop row hop: malformed X delivery");
    }
    const auto& x = run.front().second;
    out.push_back(x_msg(self, x));
    for (int64_t k = lo; k <= hi; ++k) out.push_back(x_msg(plan.inner_product_id(role.i, k), x));
    return out;
  }

  if (role.d == plan.D - 1 && t == plan.D + 1) {
    // Column hop: deliver X_i to the pair machines (k', i).
    auto x = expect_run(inbox, self, m, "prop column hop");
    for (int64_t k = lo; k <= hi; ++k) out.push_back(x_msg(plan.inner_product_id(k, role.i), x));
    return out;
  }

  if (t == 2 * plan.D + 2 - role.d) {
    // Merge the children's partials and forward one level up.
    std::vector<std::vector<Rat>> children;
    for (auto& [src, vals] : runs(inbox)) children.push_back(std::move(vals));
    if (children.empty()) throw UndecodableRow("prop merge: no child partials arrived");
    auto merged = merge_frames(ctx, layer, std::span<const std::vector<Rat>>(children));
    const int64_t parent =
        role.d == 1 ? plan.token_id(role.i) : plan.prop_id(role.i, role.d - 1, (role.k - 1) / plan.b + 1);
    out.push_back({parent, std::move(merged)});
    return out;
  }

  return out;
}

inline std::vector<mpc::Message> pair_step(const Ctx& ctx, int64_t layer, int64_t t,
                                           const MachineRole& role, const mpc::Inbox& inbox) {
  const auto& plan = ctx.plan;
  const size_t m = ctx.spec.m;
  const int64_t self = plan.inner_product_id(role.i, role.k);

  if (t == plan.D + 1) {
    // Hold the query-side X_i for one round while the column hop runs.
    const auto& run = runs(inbox);
    if (run.size() != 1 || run.front().second.size() != m) {
      throw UndecodableRow("pair hold: malformed X delivery");
    }
    return {x_msg(self, run.front().second)};
  }

  if (t != plan.D + 2) return {};

  // Score the pair (row i-1 attends row k-1) and push per-head partials to
  // the tree parent.
  std::vector<Rat> xq, xk;
  for (auto& [src, vals] : runs(inbox)) {
    if (src == self) {
      xq = std::move(vals);
    } else {
      xk = std::move(vals);
    }
  }
  if (xq.size() != m || xk.size() != m) {
    throw UndecodableRow("pair score: missing query or key residual");
  }

  const auto& lyr = ctx.spec.layers[static_cast<size_t>(layer - 1)];
  const size_t qi = static_cast<size_t>(role.i - 1);
  const size_t kj = static_cast<size_t>(role.k - 1);
  const bool allowed = engine_detail::allowed(lyr.mask, qi, kj);

  std::vector<mpc::Word> frame;
  frame.reserve((m + 2) * lyr.heads.size());
  for (const auto& head : lyr.heads) {
    if (!allowed) {
      // Empty partial; count 0 with zero aux/values reads the same in both modes.
      encode_hardmax(frame, PartialHardmax{}, static_cast<int64_t>(m));
      continue;
    }
    const auto q = apply_map(head.query, qi, xq);
    const auto k = apply_map(head.key, kj, xk);
    const auto v = apply_map(head.value, kj, xk);
    const Rat score = dot(q, k);
    if (head.mode == AttnMode::Hardmax) {
      PartialHardmax p;
      p.best = score;
      p.count = 1;
      p.sum.assign(v.begin(), v.end());
      encode_hardmax(frame, p, static_cast<int64_t>(m));
    } else {
      PartialSoftmax p;
      p.log_z = head.temperature.to_long_double() * score.to_long_double();
      p.S.resize(m);
      for (size_t col = 0; col < m; ++col) p.S[col] = v[col].to_long_double();
      encode_softmax(frame, p, static_cast<int64_t>(m), ctx.spec.precision_p);
    }
  }

  const int64_t parent = plan.D == 1
                             ? plan.token_id(role.i)
                             : plan.prop_id(role.i, plan.D - 1, (role.k - 1) / plan.b + 1);
  return {{parent, std::move(frame)}};
}

// Round 1 for depth-0 stacks: each input window applies embed + output map to
// the rows it holds whole and ships the results by output position.
inline std::vector<mpc::Message> psi_only_step(const Ctx& ctx, const mpc::Inbox& inbox) {
  std::vector<mpc::Message> out;
  std::vector<Rat> raw;
  int64_t row = 0;
  auto flush = [&]() {
    if (row == 0 || static_cast<int64_t>(raw.size()) != ctx.d_in) return;
    auto x = embed_row(ctx, row, raw);
    auto y = apply_map(ctx.spec.output_map, static_cast<size_t>(row), x);
    quantize_if(y, ctx);
    for (int64_t c = 0; c < ctx.d_out; ++c) {
      const int64_t pos = (row - 1) * ctx.d_out + c + 1;
      out.push_back({(pos - 1) / ctx.plan.s + 1, {pack_rat(y[static_cast<size_t>(c)])}});
    }
  };
  for (const auto& e : inbox) {
    const int64_t r = (e.src - 1) / ctx.d_in + 1;
    if (r != row) {
      flush();
      row = r;
      raw.clear();
      if ((e.src - 1) % ctx.d_in != 0) {
        row = 0;  // leading fragment of a row that started on the previous window
        continue;
      }
    }
    if (row != 0) raw.push_back(unpack_rat(e.payload));
  }
  flush();
  return out;
}

}  // namespace sim_detail

// ---------------------------------------------------------------------------
// Compilation

inline mpc::ProtocolSpec compile_to_protocol(const TransformerSpec& spec, int64_t s) {
  validate_spec(spec);
  for (const auto& layer : spec.layers) {
    for (const auto& head : layer.heads) {
      if (head.mode == AttnMode::Kernel) {
        throw ConfigError(
            "compile_to_protocol: kernel heads have no score matrix to distribute");
      }
    }
  }
  if (spec.d_in < 1 || spec.d_out < 1) {
    throw ConfigError("compile_to_protocol: need d_in >= 1 and d_out >= 1");
  }

  auto ctx = std::make_shared<sim_detail::Ctx>();
  ctx->spec = spec;
  ctx->L = static_cast<int64_t>(spec.layers.size());
  ctx->n_task = spec.n_task;
  ctx->d_in = static_cast<int64_t>(spec.d_in);
  ctx->d_out = static_cast<int64_t>(spec.d_out);
  ctx->n_in = ctx->n_task * ctx->d_in;
  ctx->n_out = ctx->n_task * ctx->d_out;
  for (const auto& layer : spec.layers) {
    for (const auto& head : layer.heads) {
      if (head.mode == AttnMode::Softmax) ctx->quantized = true;
    }
  }

  int64_t heads = 1;
  for (const auto& layer : spec.layers) {
    heads = std::max(heads, static_cast<int64_t>(layer.heads.size()));
  }
  ctx->plan = plan_simulation(static_cast<int64_t>(spec.m), heads,
                              static_cast<int64_t>(spec.n_rows()), s);

  if (ctx->d_in > s || ctx->d_out > s) {
    throw InsufficientMemory("compile_to_protocol: a raw or output row exceeds the word budget");
  }
  if (ctx->L == 0) {
    std::vector<int64_t> rows_held(static_cast<size_t>((ctx->n_in - 1) / s + 1), 0);
    for (int64_t row = 1; row <= ctx->n_task; ++row) {
      const int64_t first = (row - 1) * ctx->d_in + 1;
      const int64_t last = row * ctx->d_in;
      if ((first - 1) / s != (last - 1) / s) {
        throw InsufficientMemory("compile_to_protocol: raw row " + std::to_string(row) +
                                 " straddles an input window; a depth-0 stack needs whole rows");
      }
      ++rows_held[static_cast<size_t>((first - 1) / s)];
    }
    for (const int64_t held : rows_held) {
      if (held * ctx->d_out > s) {
        throw InsufficientMemory(
            "compile_to_protocol: depth-0 output fan-out exceeds the word budget");
      }
    }
  }

  mpc::ProtocolSpec proto;
  proto.name = "attention-sim";
  proto.n_in = ctx->n_in;
  proto.n_out = ctx->n_out;
  proto.q = ctx->plan.q;
  proto.s = s;
  proto.rounds = ctx->plan.rounds_per_layer * ctx->L + 1;
  proto.word_bits = 256;
  proto.local = [ctx](int64_t round, int64_t machine,
                      const mpc::Inbox& inbox) -> std::vector<mpc::Message> {
    if (round == 1) {
      if (ctx->L == 0) return sim_detail::psi_only_step(*ctx, inbox);
      // Input dispersal: word g belongs to task row (g-1)/d_in + 1, whose
      // token machine is row+1.
      std::vector<mpc::Message> out;
      for (const auto& e : inbox) {
        out.push_back({(e.src - 1) / ctx->d_in + 2, {e.payload}});
      }
      return out;
    }
    const int64_t layer = (round - 2) / ctx->plan.rounds_per_layer + 1;
    const int64_t t = (round - 2) % ctx->plan.rounds_per_layer + 1;
    const auto role = ctx->plan.role_of(machine);
    switch (role.kind) {
      case Role::Token:
        return sim_detail::token_step(*ctx, layer, t, machine, inbox);
      case Role::InnerProduct:
        return sim_detail::pair_step(*ctx, layer, t, role, inbox);
      case Role::Prop:
        return sim_detail::prop_step(*ctx, layer, t, role, inbox);
    }
    return {};
  };
  return proto;
}

// ---------------------------------------------------------------------------
// Equivalence checking

struct SimViolation {
  int64_t input_index = 0;
  int64_t row = 0;   // task row, 1-based
  int64_t col = 0;   // output column, 0-based
  Rat expected;
  Rat got;
};

struct SimReport {
  int64_t inputs_checked = 0;
  bool exact_expected = false;  // every head is hardmax, so deviation must be 0
  Rat tolerance;                // effective tolerance applied per entry
  Rat max_deviation;
  std::vector<SimViolation> violations;

  bool ok() const { return violations.empty(); }
};

// Runs the protocol next to the direct evaluation on every input and records
// per-entry deviations; threshold breaches become report content, not errors.
inline SimReport check_simulation(const TransformerSpec& spec, const mpc::ProtocolSpec& proto,
                                  const std::vector<Mat>& inputs, const Rat& tolerance) {
  validate_spec(spec);
  if (tolerance.sign() < 0) throw ConfigError("check_simulation: tolerance must be >= 0");
  const int64_t n_task = spec.n_task;
  const int64_t d_in = static_cast<int64_t>(spec.d_in);
  const int64_t d_out = static_cast<int64_t>(spec.d_out);
  if (proto.n_in != n_task * d_in || proto.n_out != n_task * d_out) {
    throw ConfigError("check_simulation: protocol word shape disagrees with the stack");
  }

  bool quantized = false;
  bool certified = true;  // every head hardmax => exact replication expected
  for (const auto& layer : spec.layers) {
    for (const auto& head : layer.heads) {
      if (head.mode == AttnMode::Softmax) quantized = true;
      if (head.mode != AttnMode::Hardmax) certified = false;
    }
  }

  SimReport report;
  report.exact_expected = certified;
  report.tolerance = certified ? Rat(0) : tolerance;

  for (size_t n = 0; n < inputs.size(); ++n) {
    const Mat& raw = inputs[n];
    if (static_cast<int64_t>(raw.rows()) != n_task || raw.cols() != spec.d_in) {
      throw ConfigError("check_simulation: input " + std::to_string(n) +
                        " is not n_task x d_in");
    }
    const auto direct = evaluate(spec, raw, {.quantized = quantized});

    std::vector<mpc::Word> words;
    words.reserve(static_cast<size_t>(n_task * d_in));
    for (int64_t i = 0; i < n_task; ++i) {
      for (int64_t c = 0; c < d_in; ++c) {
        words.push_back(sim_detail::pack_rat(raw.at(static_cast<size_t>(i),
                                                    static_cast<size_t>(c))));
      }
    }
    const auto run = mpc::run_mpc(proto, words);

    for (int64_t i = 1; i <= n_task; ++i) {
      for (int64_t c = 0; c < d_out; ++c) {
        const Rat expected = direct.output.at(static_cast<size_t>(i), static_cast<size_t>(c));
        const Rat got =
            sim_detail::unpack_rat(run.outputs[static_cast<size_t>((i - 1) * d_out + c)]);
        const Rat dev = (expected - got).abs();
        if (dev > report.max_deviation) report.max_deviation = dev;
        if (dev > report.tolerance) {
          report.violations.push_back({static_cast<int64_t>(n), i, c, expected, got});
        }
      }
    }
    ++report.inputs_checked;
  }
  return report;
}

}  // namespace mpca::simulate
