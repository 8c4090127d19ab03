#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mpca/hashing.hpp"
#include "mpca/transformer.hpp"

namespace mpca::routing {

// One round of point-to-point traffic: out[src-1] lists what machine src emits.
// Valid when every source emits at most s messages (to distinct destinations),
// every destination receives at most s, and payloads stay within beta words.
struct OutMsg {
  std::vector<Rat> payload;
  int64_t dst = 0;
};

struct InMsg {
  std::vector<Rat> payload;
  int64_t src = 0;
  friend bool operator==(const InMsg& a, const InMsg& b) {
    return a.src == b.src && a.payload == b.payload;
  }
};

struct RoutingInstance {
  int64_t N = 0;
  int64_t beta = 0;
  int64_t s = 0;
  std::vector<std::vector<OutMsg>> out;  // out[src-1]
};

inline void validate_routing_instance(const RoutingInstance& inst) {
  if (inst.N < 1 || inst.beta < 1 || inst.s < 1) {
    throw ConfigError("routing instance: N, beta, s must be positive");
  }
  if (inst.out.size() != static_cast<size_t>(inst.N)) {
    throw ConfigError("routing instance: out must have one entry per index");
  }
  std::vector<int64_t> indegree(static_cast<size_t>(inst.N), 0);
  for (int64_t src = 1; src <= inst.N; ++src) {
    const auto& msgs = inst.out[static_cast<size_t>(src - 1)];
    if (msgs.size() > static_cast<size_t>(inst.s)) {
      throw ConfigError("routing instance: source " + std::to_string(src) +
                        " exceeds s outgoing messages");
    }
    std::vector<int64_t> seen;
    for (const auto& m : msgs) {
      if (m.dst < 1 || m.dst > inst.N) {
        throw ConfigError("routing instance: destination out of range");
      }
      if (m.payload.empty() || m.payload.size() > static_cast<size_t>(inst.beta)) {
        throw ConfigError("routing instance: payload length outside [1, beta]");
      }
      if (std::find(seen.begin(), seen.end(), m.dst) != seen.end()) {
        throw ConfigError("routing instance: duplicate destination from source " +
                          std::to_string(src));
      }
      seen.push_back(m.dst);
      ++indegree[static_cast<size_t>(m.dst - 1)];
    }
  }
  for (int64_t dst = 1; dst <= inst.N; ++dst) {
    if (indegree[static_cast<size_t>(dst - 1)] > inst.s) {
      throw ConfigError("routing instance: destination " + std::to_string(dst) +
                        " exceeds s incoming messages");
    }
  }
}

// Reference inversion of Out: per destination, messages sorted by source,
// payloads padded with zero words to `pad_to` (0 = keep original length).
inline std::vector<std::vector<InMsg>> derive_in(const RoutingInstance& inst, int64_t pad_to = 0) {
  std::vector<std::vector<InMsg>> in(static_cast<size_t>(inst.N));
  for (int64_t src = 1; src <= inst.N; ++src) {
    for (const auto& m : inst.out[static_cast<size_t>(src - 1)]) {
      InMsg r;
      r.payload = m.payload;
      if (pad_to > 0) r.payload.resize(static_cast<size_t>(pad_to), Rat(0));
      r.src = src;
      in[static_cast<size_t>(m.dst - 1)].push_back(std::move(r));
    }
  }
  for (auto& v : in) {
    std::sort(v.begin(), v.end(), [](const InMsg& a, const InMsg& b) { return a.src < b.src; });
  }
  return in;
}

// A packet is (msg words, src, dst, validity); alpha == 0 means an empty slot.
struct Packet {
  std::vector<Rat> msg;
  Rat src = Rat(0);
  Rat dst = Rat(0);
  Rat alpha = Rat(0);
};

namespace route_detail {

inline int64_t isqrt_exact(int64_t n, const char* what) {
  int64_t r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  if (r * r != n) throw ConfigError(std::string(what) + ": expected a perfect square");
  return r;
}

}  // namespace route_detail

// Redundant sparse placement: slot j carries the packet for (msg, dst) exactly
// when the hash matrix lights the (src, dst) pair at column j and no other
// destination of this source does.  The matrix indexes pairs as N(src-1)+dst.
inline std::vector<Packet> encode_packets(const std::vector<OutMsg>& out_src, int64_t src,
                                          const HashMatrix& a, int64_t beta) {
  const int64_t n_machines = route_detail::isqrt_exact(a.n, "encode_packets hash matrix");
  const int64_t s_limit = route_detail::isqrt_exact(a.b, "encode_packets subset budget");
  if (static_cast<int64_t>(out_src.size()) > s_limit) {
    throw TooManyMessages("encode_packets: source " + std::to_string(src) + " holds " +
                          std::to_string(out_src.size()) + " messages, slot layout supports " +
                          std::to_string(s_limit));
  }
  if (src < 1 || src > n_machines) {
    throw ConfigError("encode_packets: source index out of range");
  }
  for (const auto& m : out_src) {
    if (m.dst < 1 || m.dst > n_machines) {
      throw ConfigError("encode_packets: destination out of range for the pair index");
    }
    if (static_cast<int64_t>(m.payload.size()) > beta) {
      throw ConfigError("encode_packets: payload longer than beta");
    }
  }
  std::vector<Packet> slots(static_cast<size_t>(a.d));
  for (auto& p : slots) p.msg.assign(static_cast<size_t>(beta), Rat(0));
  for (int64_t j = 1; j <= a.d; ++j) {
    const OutMsg* hit = nullptr;
    bool collision = false;
    for (const auto& m : out_src) {
      if (a.at(n_machines * (src - 1) + m.dst, j)) {
        if (hit != nullptr) {
          collision = true;
          break;
        }
        hit = &m;
      }
    }
    if (hit == nullptr || collision) continue;
    Packet& p = slots[static_cast<size_t>(j - 1)];
    for (size_t w = 0; w < hit->payload.size(); ++w) p.msg[w] = hit->payload[w];
    p.src = Rat(src);
    p.dst = Rat(hit->dst);
    p.alpha = Rat(1);
  }
  return slots;
}

inline std::vector<Rat> flatten_packets(const std::vector<Packet>& slots, int64_t beta) {
  std::vector<Rat> row;
  row.reserve(slots.size() * static_cast<size_t>(beta + 3));
  for (const auto& p : slots) {
    for (int64_t w = 0; w < beta; ++w) row.push_back(p.msg[static_cast<size_t>(w)]);
    row.push_back(p.src);
    row.push_back(p.dst);
    row.push_back(p.alpha);
  }
  return row;
}

// Classifies averaged slots by validity level: the smallest nonzero alpha is
// 1/|In_dst|; slots exactly at that level are uncorrupted, and rescaling by
// |In_dst| restores the original packet fields.
inline std::vector<InMsg> decode_packets(const std::vector<Rat>& y_dst, int64_t dst, int64_t beta) {
  if (y_dst.size() % static_cast<size_t>(beta + 3) != 0) {
    throw ConfigError("decode_packets: row width is not a whole number of slots");
  }
  const size_t slots = y_dst.size() / static_cast<size_t>(beta + 3);
  bool any_nonzero = false;
  Rat min_alpha(0);
  for (size_t j = 0; j < slots; ++j) {
    const size_t base = j * static_cast<size_t>(beta + 3);
    for (int64_t w = 0; w < beta + 3; ++w) {
      if (!y_dst[base + static_cast<size_t>(w)].is_zero()) any_nonzero = true;
    }
    const Rat& alpha = y_dst[base + static_cast<size_t>(beta) + 2];
    if (alpha.sign() > 0 && (min_alpha.is_zero() || alpha < min_alpha)) min_alpha = alpha;
  }
  if (!any_nonzero) return {};

  std::map<int64_t, std::vector<Rat>> by_src;
  if (min_alpha.sign() > 0) {
    const Rat fan = Rat(1) / min_alpha;  // |In_dst| candidate
    if (fan.is_integer() && fan.sign() > 0) {
      for (size_t j = 0; j < slots; ++j) {
        const size_t base = j * static_cast<size_t>(beta + 3);
        if (y_dst[base + static_cast<size_t>(beta) + 2] != min_alpha) continue;
        const Rat dst_field = y_dst[base + static_cast<size_t>(beta) + 1] * fan;
        if (!dst_field.is_integer() || dst_field != Rat(dst)) continue;
        const Rat src_field = y_dst[base + static_cast<size_t>(beta)] * fan;
        if (!src_field.is_integer() || src_field.sign() <= 0) {
          throw UndecodableRow("decode_packets: clean slot with non-index source field");
        }
        std::vector<Rat> msg(static_cast<size_t>(beta));
        for (int64_t w = 0; w < beta; ++w) {
          msg[static_cast<size_t>(w)] = y_dst[base + static_cast<size_t>(w)] * fan;
        }
        const int64_t src = src_field.floor_i64();
        auto [it, inserted] = by_src.try_emplace(src, std::move(msg));
        if (!inserted && it->second != msg) {
          throw UndecodableRow("decode_packets: conflicting clean slots for source " +
                               std::to_string(src));
        }
      }
    }
  }
  if (by_src.empty()) {
    throw UndecodableRow("decode_packets: nonzero row for destination " + std::to_string(dst) +
                         " yields no message");
  }
  std::vector<InMsg> result;
  for (auto& [src, msg] : by_src) result.push_back({std::move(msg), src});
  return result;
}

// Function-level propagation: destination dst receives the average of the
// flattened packet rows of every source that sent to it (what the attention
// head computes); destinations with no sender get a zero row.
inline std::vector<std::vector<Rat>> qsp_average(const std::vector<std::vector<Rat>>& rows,
                                                 const RoutingInstance& inst) {
  if (rows.size() != static_cast<size_t>(inst.N)) {
    throw ConfigError("qsp_average: need one packet row per source");
  }
  const size_t width = rows.empty() ? 0 : rows[0].size();
  std::vector<std::vector<int64_t>> senders(static_cast<size_t>(inst.N));
  for (int64_t src = 1; src <= inst.N; ++src) {
    if (rows[static_cast<size_t>(src - 1)].size() != width) {
      throw ConfigError("qsp_average: ragged packet rows");
    }
    for (const auto& m : inst.out[static_cast<size_t>(src - 1)]) {
      senders[static_cast<size_t>(m.dst - 1)].push_back(src);
    }
  }
  std::vector<std::vector<Rat>> y(static_cast<size_t>(inst.N));
  for (int64_t dst = 1; dst <= inst.N; ++dst) {
    auto& row = y[static_cast<size_t>(dst - 1)];
    row.assign(width, Rat(0));
    const auto& from = senders[static_cast<size_t>(dst - 1)];
    if (from.empty()) continue;
    const Rat w(1, static_cast<int64_t>(from.size()));
    for (const int64_t src : from) {
      const auto& z = rows[static_cast<size_t>(src - 1)];
      for (size_t c = 0; c < width; ++c) {
        if (!z[c].is_zero()) row[c] += w * z[c];
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Sparse propagation as a single attention head.
//
// Input row i carries a payload z_i and the indicator of the index set S_i it
// contributes to.  Scores are exact: 1 when i in S_j, 3/4 for the start row,
// 0 otherwise, so hardmax averages exactly the contributors (margin 1/4) and
// indices with no contributor fall back to the start row's zero payload.
// ---------------------------------------------------------------------------

struct QspHead {
  TransformerSpec spec;
  int64_t n = 0;      // real rows (indices)
  int64_t dim = 0;    // payload width
  int64_t q_cap = 0;  // max contributors per index
};

inline QspHead build_qsp_head(int64_t q_cap, int64_t dim, int64_t n) {
  if (n < 1 || dim < 1 || q_cap < 1 || q_cap > n) {
    throw ConfigError("build_qsp_head: need n, dim >= 1 and 1 <= q_cap <= n");
  }
  // Residual layout: [start flag][indicator n][subset n][payload dim][output dim].
  const int64_t ind0 = 1;
  const int64_t sub0 = 1 + n;
  const int64_t pay0 = 1 + 2 * n;
  const int64_t out0 = 1 + 2 * n + dim;
  const int64_t m = 1 + 2 * n + 2 * dim;

  QspHead head;
  head.n = n;
  head.dim = dim;
  head.q_cap = q_cap;

  TransformerSpec spec;
  spec.n_task = n;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = m;
  spec.d_in = dim + n;
  spec.d_out = dim;
  spec.precision_p = 32;  // unused: evaluation is exact
  spec.input_embed = make_custom(
      m, [n, dim, ind0, sub0, pay0](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
        if (idx == 0) {
          out[0] = Rat(1);  // start flag
          return;
        }
        out[static_cast<size_t>(ind0) + idx - 1] = Rat(1);
        for (int64_t c = 0; c < dim; ++c) {
          out[static_cast<size_t>(pay0 + c)] = in[static_cast<size_t>(c)];
        }
        for (int64_t c = 0; c < n; ++c) {
          out[static_cast<size_t>(sub0 + c)] = in[static_cast<size_t>(dim + c)];
        }
      });

  Head h;
  h.mode = AttnMode::Hardmax;
  h.query = make_custom(
      n + 1, [n, ind0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < n; ++c) out[static_cast<size_t>(c)] = in[static_cast<size_t>(ind0 + c)];
        out[static_cast<size_t>(n)] = Rat(1);
      });
  h.key = make_custom(
      n + 1, [n, sub0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < n; ++c) out[static_cast<size_t>(c)] = in[static_cast<size_t>(sub0 + c)];
        out[static_cast<size_t>(n)] = Rat(3, 4) * in[0];
      });
  h.value = make_custom(
      m, [dim, pay0, out0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < dim; ++c) {
          out[static_cast<size_t>(out0 + c)] = in[static_cast<size_t>(pay0 + c)];
        }
      });
  spec.layers.push_back({{std::move(h)}, MaskKind::None});

  spec.output_map = make_custom(
      dim, [dim, out0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < dim; ++c) out[static_cast<size_t>(c)] = in[static_cast<size_t>(out0 + c)];
      });
  validate_spec(spec);
  head.spec = std::move(spec);
  return head;
}

// Evaluates the head on payloads z and contribution sets S: output row i is
// the average of z_j over all j whose S_j contains i (zero when none do).
inline std::vector<std::vector<Rat>> qsp_apply(const QspHead& head,
                                               const std::vector<std::vector<Rat>>& z,
                                               const std::vector<std::vector<int64_t>>& subsets) {
  if (z.size() != static_cast<size_t>(head.n) || subsets.size() != z.size()) {
    throw ConfigError("qsp_apply: need one payload and one subset per index");
  }
  std::vector<int64_t> degree(static_cast<size_t>(head.n), 0);
  for (const auto& s : subsets) {
    for (const int64_t i : s) {
      if (i < 1 || i > head.n) throw ConfigError("qsp_apply: subset index out of range");
      ++degree[static_cast<size_t>(i - 1)];
    }
  }
  for (int64_t i = 1; i <= head.n; ++i) {
    if (degree[static_cast<size_t>(i - 1)] > head.q_cap) {
      throw DegreeExceeded("qsp_apply: index " + std::to_string(i) + " has " +
                           std::to_string(degree[static_cast<size_t>(i - 1)]) +
                           " contributors, cap is " + std::to_string(head.q_cap));
    }
  }
  Mat raw(static_cast<size_t>(head.n), static_cast<size_t>(head.dim + head.n));
  for (int64_t j = 1; j <= head.n; ++j) {
    const auto& payload = z[static_cast<size_t>(j - 1)];
    if (payload.size() != static_cast<size_t>(head.dim)) {
      throw ConfigError("qsp_apply: payload width mismatch");
    }
    for (int64_t c = 0; c < head.dim; ++c) {
      raw.at(static_cast<size_t>(j - 1), static_cast<size_t>(c)) = payload[static_cast<size_t>(c)];
    }
    for (const int64_t i : subsets[static_cast<size_t>(j - 1)]) {
      raw.at(static_cast<size_t>(j - 1), static_cast<size_t>(head.dim + i - 1)) = Rat(1);
    }
  }
  const auto res = evaluate(head.spec, raw, {});
  std::vector<std::vector<Rat>> out(static_cast<size_t>(head.n));
  for (int64_t i = 1; i <= head.n; ++i) {
    const auto row = res.output.row(static_cast<size_t>(i));
    out[static_cast<size_t>(i - 1)].assign(row.begin(), row.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Single-scale route block: encode -> propagate -> decode as one attention
// layer.  Raw input row src lists its outgoing messages as s slots of
// (dst, beta words); raw output row dst lists incoming messages as s slots of
// (src, beta words) sorted by source, zero-padded.
// ---------------------------------------------------------------------------

struct RouteBlock {
  TransformerSpec spec;
  int64_t N = 0;
  int64_t beta = 0;
  int64_t s = 0;
  int64_t m_prime = 0;  // packet slots
  int64_t width = 0;    // residual width m
  uint64_t hash_seed = 0;
};

namespace route_detail {

struct OutParse {
  std::vector<OutMsg> msgs;
};

// Raw slot layout is (dst, w_1..w_beta); dst == 0 marks an empty slot.
inline OutParse parse_out_row(std::span<const Rat> raw, int64_t s, int64_t beta, int64_t n) {
  OutParse parsed;
  for (int64_t slot = 0; slot < s; ++slot) {
    const size_t base = static_cast<size_t>(slot * (beta + 1));
    const Rat& dst = raw[base];
    if (dst.is_zero()) continue;
    if (!dst.is_integer() || dst.sign() < 0 || dst > Rat(n)) {
      throw ConfigError("route block: slot destination is not an index");
    }
    OutMsg m;
    m.dst = dst.floor_i64();
    m.payload.assign(raw.begin() + static_cast<ptrdiff_t>(base + 1),
                     raw.begin() + static_cast<ptrdiff_t>(base + 1 + static_cast<size_t>(beta)));
    parsed.msgs.push_back(std::move(m));
  }
  return parsed;
}

}  // namespace route_detail

inline RouteBlock build_route_block(int64_t beta, int64_t s, int64_t N, uint64_t hash_seed = 1) {
  if (beta < 1 || s < 1 || N < 1) {
    throw ConfigError("build_route_block: beta, s, N must be positive");
  }
  const HashMatrix& a = hash_matrix_cached(N * N, s * s, hash_seed);
  const int64_t mp = a.d;
  const int64_t packet_w = mp * (beta + 3);
  // Residual layout: [start][indicator N][subset N][packets][averaged packets].
  const int64_t ind0 = 1;
  const int64_t sub0 = 1 + N;
  const int64_t pak0 = 1 + 2 * N;
  const int64_t avg0 = 1 + 2 * N + packet_w;
  const int64_t m = 1 + 2 * N + 2 * packet_w;

  RouteBlock block;
  block.N = N;
  block.beta = beta;
  block.s = s;
  block.m_prime = mp;
  block.width = m;
  block.hash_seed = hash_seed;

  TransformerSpec spec;
  spec.n_task = N;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = m;
  spec.d_in = s * (beta + 1);
  spec.d_out = s * (beta + 1);
  spec.precision_p = 32;  // unused: exact evaluation
  spec.input_embed = make_custom(
      m, [&a, s, beta, N, ind0, sub0, pak0](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
        if (idx == 0) {
          out[0] = Rat(1);
          return;
        }
        const auto parsed = route_detail::parse_out_row(in, s, beta, N);
        out[static_cast<size_t>(ind0) + idx - 1] = Rat(1);
        for (const auto& msg : parsed.msgs) {
          out[static_cast<size_t>(sub0 + msg.dst - 1)] = Rat(1);
        }
        const auto slots = encode_packets(parsed.msgs, static_cast<int64_t>(idx), a, beta);
        const auto flat = flatten_packets(slots, beta);
        for (size_t c = 0; c < flat.size(); ++c) out[static_cast<size_t>(pak0) + c] = flat[c];
      });

  Head h;
  h.mode = AttnMode::Hardmax;
  h.query = make_custom(
      N + 1, [N, ind0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < N; ++c) out[static_cast<size_t>(c)] = in[static_cast<size_t>(ind0 + c)];
        out[static_cast<size_t>(N)] = Rat(1);
      });
  h.key = make_custom(
      N + 1, [N, sub0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < N; ++c) out[static_cast<size_t>(c)] = in[static_cast<size_t>(sub0 + c)];
        out[static_cast<size_t>(N)] = Rat(3, 4) * in[0];
      });
  h.value = make_custom(
      m, [packet_w, pak0, avg0](size_t, std::span<const Rat> in, std::span<Rat> out) {
        for (int64_t c = 0; c < packet_w; ++c) {
          out[static_cast<size_t>(avg0 + c)] = in[static_cast<size_t>(pak0 + c)];
        }
      });
  spec.layers.push_back({{std::move(h)}, MaskKind::None});

  spec.output_map = make_custom(
      s * (beta + 1), [s, beta, packet_w, avg0](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
        if (idx == 0) return;
        std::vector<Rat> avg(in.begin() + static_cast<ptrdiff_t>(avg0),
                             in.begin() + static_cast<ptrdiff_t>(avg0 + packet_w));
        bool all_zero = true;
        for (const auto& v : avg) {
          if (!v.is_zero()) {
            all_zero = false;
            break;
          }
        }
        if (all_zero) return;
        const auto msgs = decode_packets(avg, static_cast<int64_t>(idx), beta);
        if (static_cast<int64_t>(msgs.size()) > s) {
          throw UndecodableRow("route block: decoded more than s messages");
        }
        for (size_t k = 0; k < msgs.size(); ++k) {
          const size_t base = k * static_cast<size_t>(beta + 1);
          out[base] = Rat(msgs[k].src);
          for (int64_t w = 0; w < beta; ++w) {
            out[base + 1 + static_cast<size_t>(w)] = msgs[k].payload[static_cast<size_t>(w)];
          }
        }
      });
  validate_spec(spec);
  block.spec = std::move(spec);
  return block;
}

// Runs a full routing instance through the block; payloads come back padded to
// the block's beta (the transport width).
inline std::vector<std::vector<InMsg>> route_apply(const RouteBlock& block,
                                                   const RoutingInstance& inst) {
  validate_routing_instance(inst);
  if (inst.N != block.N || inst.beta > block.beta || inst.s > block.s) {
    throw ConfigError("route_apply: instance does not fit the block");
  }
  Mat raw(static_cast<size_t>(block.N), static_cast<size_t>(block.s * (block.beta + 1)));
  for (int64_t src = 1; src <= block.N; ++src) {
    const auto& msgs = inst.out[static_cast<size_t>(src - 1)];
    for (size_t k = 0; k < msgs.size(); ++k) {
      const size_t base = k * static_cast<size_t>(block.beta + 1);
      raw.at(static_cast<size_t>(src - 1), base) = Rat(msgs[k].dst);
      for (size_t w = 0; w < msgs[k].payload.size(); ++w) {
        raw.at(static_cast<size_t>(src - 1), base + 1 + w) = msgs[k].payload[w];
      }
    }
  }
  const auto res = evaluate(block.spec, raw, {});
  std::vector<std::vector<InMsg>> in(static_cast<size_t>(block.N));
  for (int64_t dst = 1; dst <= block.N; ++dst) {
    const auto row = res.output.row(static_cast<size_t>(dst));
    for (int64_t k = 0; k < block.s; ++k) {
      const size_t base = static_cast<size_t>(k * (block.beta + 1));
      if (row[base].is_zero()) continue;
      InMsg msg;
      msg.src = row[base].floor_i64();
      msg.payload.assign(row.begin() + static_cast<ptrdiff_t>(base + 1),
                         row.begin() + static_cast<ptrdiff_t>(base + 1 + static_cast<size_t>(block.beta)));
      in[static_cast<size_t>(dst - 1)].push_back(std::move(msg));
    }
  }
  return in;
}

// ---------------------------------------------------------------------------
// Multi-scale router: one head per payload-length class.  The class caps grow
// doubly exponentially (beta_h = min(2 beta_{h-1}^3, q+1) from beta_0 = 1), so
// the head count is O(log log q).
// ---------------------------------------------------------------------------

inline std::vector<int64_t> multiscale_schedule(int64_t q) {
  if (q < 1) throw ConfigError("multiscale_schedule: q must be positive");
  std::vector<int64_t> betas{1};
  while (betas.back() < q + 1) {
    const int64_t prev = betas.back();
    int64_t next = q + 1;
    if (prev <= 1290) {  // 2*prev^3 cannot overflow below this
      next = std::min(next, 2 * prev * prev * prev);
    }
    betas.push_back(next);
  }
  return betas;
}

struct MultiscaleRouter {
  TransformerSpec spec;
  std::vector<int64_t> betas;  // beta_0 .. beta_H
  int64_t N = 0;
  int64_t s = 0;
  int64_t q = 0;
  int64_t width = 0;
  uint64_t hash_seed = 0;
};

namespace route_detail {

// Head h (1-based) serves payload lengths in (betas[h-1], betas[h]], with the
// first head also covering length ranges down to 1.
inline int64_t length_class(const std::vector<int64_t>& betas, int64_t len) {
  for (size_t h = 1; h < betas.size(); ++h) {
    if (len <= betas[h]) return static_cast<int64_t>(h);
  }
  throw ConfigError("multiscale router: payload length " + std::to_string(len) +
                    " exceeds the top scale");
}

}  // namespace route_detail

inline MultiscaleRouter build_multiscale_router(int64_t s, int64_t q, int64_t N,
                                                uint64_t hash_seed = 1) {
  if (s < 1 || q < 1 || N < 1) {
    throw ConfigError("build_multiscale_router: s, q, N must be positive");
  }
  const auto betas = multiscale_schedule(q);
  const int64_t H = static_cast<int64_t>(betas.size()) - 1;
  const HashMatrix& a = hash_matrix_cached(N * N, s * s, hash_seed);
  const int64_t mp = a.d;

  // Residual layout: [start][indicator N] then per head h: [subset_h N]
  // [packets_h][avg_h]; all heads share the indicator block.
  const int64_t ind0 = 1;
  std::vector<int64_t> sub0(static_cast<size_t>(H)), pak0(static_cast<size_t>(H)),
      avg0(static_cast<size_t>(H)), packet_w(static_cast<size_t>(H));
  int64_t cursor = 1 + N;
  for (int64_t h = 0; h < H; ++h) {
    packet_w[static_cast<size_t>(h)] = mp * (betas[static_cast<size_t>(h + 1)] + 3);
    sub0[static_cast<size_t>(h)] = cursor;
    cursor += N;
    pak0[static_cast<size_t>(h)] = cursor;
    cursor += packet_w[static_cast<size_t>(h)];
    avg0[static_cast<size_t>(h)] = cursor;
    cursor += packet_w[static_cast<size_t>(h)];
  }
  const int64_t m = cursor;
  const int64_t max_beta = betas.back();

  MultiscaleRouter router;
  router.betas = betas;
  router.N = N;
  router.s = s;
  router.q = q;
  router.width = m;
  router.hash_seed = hash_seed;

  TransformerSpec spec;
  spec.n_task = N;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = m;
  spec.d_in = s * (max_beta + 1);
  spec.d_out = s * (max_beta + 1);
  spec.precision_p = 32;
  spec.input_embed = make_custom(
      m, [&a, s, N, betas, sub0, pak0, ind0, max_beta](size_t idx, std::span<const Rat> in,
                                                       std::span<Rat> out) {
        if (idx == 0) {
          out[0] = Rat(1);
          return;
        }
        out[static_cast<size_t>(ind0) + idx - 1] = Rat(1);
        const auto parsed = route_detail::parse_out_row(in, s, max_beta, N);
        const int64_t H = static_cast<int64_t>(betas.size()) - 1;
        for (int64_t h = 1; h <= H; ++h) {
          std::vector<OutMsg> mine;
          for (const auto& msg : parsed.msgs) {
            int64_t len = static_cast<int64_t>(msg.payload.size());
            while (len > 1 && msg.payload[static_cast<size_t>(len - 1)].is_zero()) --len;
            if (route_detail::length_class(betas, len) != h) continue;
            OutMsg trimmed;
            trimmed.dst = msg.dst;
            trimmed.payload.assign(msg.payload.begin(), msg.payload.begin() + static_cast<ptrdiff_t>(len));
            mine.push_back(std::move(trimmed));
          }
          for (const auto& msg : mine) {
            out[static_cast<size_t>(sub0[static_cast<size_t>(h - 1)] + msg.dst - 1)] = Rat(1);
          }
          const auto slots = encode_packets(mine, static_cast<int64_t>(idx), a, betas[static_cast<size_t>(h)]);
          const auto flat = flatten_packets(slots, betas[static_cast<size_t>(h)]);
          for (size_t c = 0; c < flat.size(); ++c) {
            out[static_cast<size_t>(pak0[static_cast<size_t>(h - 1)]) + c] = flat[c];
          }
        }
      });

  LayerSpec layer;
  layer.mask = MaskKind::None;
  for (int64_t h = 0; h < H; ++h) {
    Head head;
    head.mode = AttnMode::Hardmax;
    const int64_t sub = sub0[static_cast<size_t>(h)];
    const int64_t pak = pak0[static_cast<size_t>(h)];
    const int64_t avg = avg0[static_cast<size_t>(h)];
    const int64_t pw = packet_w[static_cast<size_t>(h)];
    head.query = make_custom(
        N + 1, [N, ind0](size_t, std::span<const Rat> in, std::span<Rat> out) {
          for (int64_t c = 0; c < N; ++c) {
            out[static_cast<size_t>(c)] = in[static_cast<size_t>(ind0 + c)];
          }
          out[static_cast<size_t>(N)] = Rat(1);
        });
    head.key = make_custom(
        N + 1, [N, sub](size_t, std::span<const Rat> in, std::span<Rat> out) {
          for (int64_t c = 0; c < N; ++c) {
            out[static_cast<size_t>(c)] = in[static_cast<size_t>(sub + c)];
          }
          out[static_cast<size_t>(N)] = Rat(3, 4) * in[0];
        });
    head.value = make_custom(
        m, [pw, pak, avg](size_t, std::span<const Rat> in, std::span<Rat> out) {
          for (int64_t c = 0; c < pw; ++c) {
            out[static_cast<size_t>(avg + c)] = in[static_cast<size_t>(pak + c)];
          }
        });
    layer.heads.push_back(std::move(head));
  }
  spec.layers.push_back(std::move(layer));

  spec.output_map = make_custom(
      s * (max_beta + 1),
      [s, betas, avg0, packet_w, max_beta](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
        if (idx == 0) return;
        const int64_t H = static_cast<int64_t>(betas.size()) - 1;
        std::map<int64_t, std::vector<Rat>> merged;  // src -> payload (padded to max_beta)
        for (int64_t h = 0; h < H; ++h) {
          const int64_t bh = betas[static_cast<size_t>(h + 1)];
          std::vector<Rat> block(in.begin() + static_cast<ptrdiff_t>(avg0[static_cast<size_t>(h)]),
                                 in.begin() + static_cast<ptrdiff_t>(avg0[static_cast<size_t>(h)] +
                                                                     packet_w[static_cast<size_t>(h)]));
          bool all_zero = true;
          for (const auto& v : block) {
            if (!v.is_zero()) {
              all_zero = false;
              break;
            }
          }
          if (all_zero) continue;
          for (auto& msg : decode_packets(block, static_cast<int64_t>(idx), bh)) {
            msg.payload.resize(static_cast<size_t>(max_beta), Rat(0));
            if (!merged.try_emplace(msg.src, std::move(msg.payload)).second) {
              throw UndecodableRow("multiscale router: one source decoded in two scales");
            }
          }
        }
        if (static_cast<int64_t>(merged.size()) > s) {
          throw UndecodableRow("multiscale router: decoded more than s messages");
        }
        size_t k = 0;
        for (auto& [src, payload] : merged) {
          const size_t base = k++ * static_cast<size_t>(max_beta + 1);
          out[base] = Rat(src);
          for (int64_t w = 0; w < max_beta; ++w) {
            out[base + 1 + static_cast<size_t>(w)] = payload[static_cast<size_t>(w)];
          }
        }
      });
  validate_spec(spec);
  router.spec = std::move(spec);
  return router;
}

// Payloads come back padded to q+1 (the top transport width).
inline std::vector<std::vector<InMsg>> multiscale_apply(const MultiscaleRouter& router,
                                                        const RoutingInstance& inst) {
  validate_routing_instance(inst);
  if (inst.N != router.N || inst.s > router.s || inst.beta > router.betas.back()) {
    throw ConfigError("multiscale_apply: instance does not fit the router");
  }
  const int64_t max_beta = router.betas.back();
  Mat raw(static_cast<size_t>(router.N),
                       static_cast<size_t>(router.s * (max_beta + 1)));
  for (int64_t src = 1; src <= router.N; ++src) {
    const auto& msgs = inst.out[static_cast<size_t>(src - 1)];
    for (size_t k = 0; k < msgs.size(); ++k) {
      const size_t base = k * static_cast<size_t>(max_beta + 1);
      raw.at(static_cast<size_t>(src - 1), base) = Rat(msgs[k].dst);
      for (size_t w = 0; w < msgs[k].payload.size(); ++w) {
        raw.at(static_cast<size_t>(src - 1), base + 1 + w) = msgs[k].payload[w];
      }
    }
  }
  const auto res = evaluate(router.spec, raw, {});
  std::vector<std::vector<InMsg>> in(static_cast<size_t>(router.N));
  for (int64_t dst = 1; dst <= router.N; ++dst) {
    const auto row = res.output.row(static_cast<size_t>(dst));
    for (int64_t k = 0; k < router.s; ++k) {
      const size_t base = static_cast<size_t>(k * (max_beta + 1));
      if (row[base].is_zero()) continue;
      InMsg msg;
      msg.src = row[base].floor_i64();
      msg.payload.assign(row.begin() + static_cast<ptrdiff_t>(base + 1),
                         row.begin() + static_cast<ptrdiff_t>(base + 1 + static_cast<size_t>(max_beta)));
      in[static_cast<size_t>(dst - 1)].push_back(std::move(msg));
    }
  }
  return in;
}

// Deterministic generator for valid routing instances (used by property tests
// and the CLI trial runner).
inline RoutingInstance random_routing_instance(int64_t N, int64_t s, int64_t beta,
                                               std::mt19937_64& rng) {
  RoutingInstance inst;
  inst.N = N;
  inst.beta = beta;
  inst.s = s;
  inst.out.resize(static_cast<size_t>(N));
  std::vector<int64_t> indegree(static_cast<size_t>(N), 0);
  for (int64_t src = 1; src <= N; ++src) {
    const int64_t want = static_cast<int64_t>(rng() % static_cast<uint64_t>(s + 1));
    std::vector<int64_t> dsts;
    for (int64_t tries = 0; static_cast<int64_t>(dsts.size()) < want && tries < 4 * s; ++tries) {
      const int64_t dst = static_cast<int64_t>(rng() % static_cast<uint64_t>(N)) + 1;
      if (std::find(dsts.begin(), dsts.end(), dst) != dsts.end()) continue;
      if (indegree[static_cast<size_t>(dst - 1)] >= s) continue;
      dsts.push_back(dst);
      ++indegree[static_cast<size_t>(dst - 1)];
    }
    for (const int64_t dst : dsts) {
      OutMsg m;
      m.dst = dst;
      const int64_t len = 1 + static_cast<int64_t>(rng() % static_cast<uint64_t>(beta));
      for (int64_t w = 0; w < len; ++w) {
        m.payload.push_back(Rat(static_cast<int64_t>(rng() % 2001) - 1000));
      }
      inst.out[static_cast<size_t>(src - 1)].push_back(std::move(m));
    }
  }
  return inst;
}

}  // namespace mpca::routing
