#pragma once

// Compiles a message-passing protocol into an attention stack:
//
//   layer 0          input distribution (sinusoidal window selection)
//   layers 1..R-1    one routing layer per communication round, with the
//                    protocol's local function fused into the query/key/value
//                    embeddings
//   layer R          the last round plus an output spread so that row i of
//                    the transformer output carries output word i
//
// A machine's between-round memory lives in the residual stream as averaged
// packet blocks, one block per payload-length class of the multiscale
// schedule. Transport frames are length-prefixed ([len, w_1..w_len]) and all
// words from one source to one destination in a round travel in a single
// frame, which preserves the runtime's (source, emission-order) delivery
// order after the per-destination decode sorts by source. Every residual
// value is an exact rational, so compiled outputs match the protocol runtime
// word for word.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpca/json_util.hpp"
#include "mpca/mpc.hpp"
#include "mpca/routing.hpp"
#include "mpca/transformer.hpp"

namespace mpca::compile {

using mpc::Inbox;
using routing::HashMatrix;

// ---------------------------------------------------------------------------
// Protocol registry: compiled specs reference protocol code by id instead of
// copying it, so serialized layers can be rebuilt as long as the protocol is
// registered under the same id in the loading process.
// ---------------------------------------------------------------------------

namespace compile_detail {

inline std::map<std::string, mpc::ProtocolSpec>& protocol_table() {
  static std::map<std::string, mpc::ProtocolSpec> table;
  return table;
}

inline std::mutex& registry_mutex() {
  static std::mutex mu;
  return mu;
}

}  // namespace compile_detail

inline void register_protocol(const mpc::ProtocolSpec& p) {
  mpc::validate_protocol(p);
  std::lock_guard lock(compile_detail::registry_mutex());
  compile_detail::protocol_table().insert_or_assign(p.name, p);
}

inline mpc::ProtocolSpec lookup_protocol(const std::string& id) {
  std::lock_guard lock(compile_detail::registry_mutex());
  const auto& table = compile_detail::protocol_table();
  const auto it = table.find(id);
  if (it == table.end()) throw ConfigError("protocol registry: unknown id '" + id + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Residual layout. Transport frames are [len, words...], so frame lengths run
// 2..s+1 and the multiscale schedule is driven by s. Class h carries frames
// of length in (beta_{h-1}, beta_h]; a machine fits at most floor(s/beta_{h-1})
// such frames in its budget, which caps both a sender's class-h frame count
// and a receiver's class-h fan-in, so the class hash budget is that square.
// ---------------------------------------------------------------------------

struct StackLayout {
  int64_t rows = 0;  // real transformer rows (max of tokens, machines, outputs)
  int64_t q = 0;     // machines
  int64_t s = 0;     // word budget
  int word_bits = 64;
  uint64_t hash_seed = 1;
  std::vector<int64_t> betas;    // frame-length schedule, betas.back() = s+1
  std::vector<int64_t> class_b;  // hash subset budget per class
  std::vector<int64_t> class_d;  // packet slots per class
  std::vector<int64_t> scr0;     // scratch block offset per class
  std::vector<int64_t> scr_w;    // scratch block width per class
  int64_t word_ch = -1;  // raw-word channel (input distribution), -1 if absent
  int64_t mem0 = -1;     // vectorized-memory block offset, -1 if absent
  int64_t scratch0 = 0;  // first scratch coordinate; scratch is contiguous to m
  int64_t m = 0;         // residual width

  int64_t classes() const { return static_cast<int64_t>(betas.size()) - 1; }
};

namespace compile_detail {

inline const HashMatrix& class_hash(const StackLayout& lay, int64_t h) {
  return routing::hash_matrix_cached(lay.rows * lay.rows,
                                     lay.class_b[static_cast<size_t>(h - 1)], lay.hash_seed);
}

}  // namespace compile_detail

inline StackLayout make_layout(int64_t rows, int64_t q, int64_t s, int word_bits, bool with_word,
                               bool with_mem, uint64_t hash_seed) {
  if (rows < 1 || q < 1 || s < 1) throw ConfigError("layout: rows, q, s must be positive");
  StackLayout lay;
  lay.rows = rows;
  lay.q = q;
  lay.s = s;
  lay.word_bits = word_bits;
  lay.hash_seed = hash_seed;
  lay.betas = routing::multiscale_schedule(s);
  int64_t cursor = 1;  // coordinate 0 is the start flag
  if (with_word) lay.word_ch = cursor++;
  if (with_mem) {
    lay.mem0 = cursor;
    cursor += 2 * s;
  }
  lay.scratch0 = cursor;
  const int64_t pairs = rows * rows;
  for (int64_t h = 1; h <= lay.classes(); ++h) {
    const int64_t cap = lay.s / lay.betas[static_cast<size_t>(h - 1)];
    lay.class_b.push_back(std::min(cap * cap, pairs));
    const HashMatrix& a = compile_detail::class_hash(lay, h);
    lay.class_d.push_back(a.d);
    lay.scr0.push_back(cursor);
    const int64_t width = a.d * (lay.betas[static_cast<size_t>(h)] + 3);
    lay.scr_w.push_back(width);
    cursor += width;
  }
  lay.m = cursor;
  return lay;
}

// ---------------------------------------------------------------------------
// Transport helpers.
// ---------------------------------------------------------------------------

namespace compile_detail {

inline mpc::Word word_of(const Rat& r, const char* what) {
  if (!r.is_integer()) throw UndecodableRow(std::string(what) + ": expected an integer word");
  return r.numerator();
}

// One frame per destination: emission-order concatenation of everything the
// local function sends there this round, masked and length-prefixed. Budget
// and addressing checks mirror the protocol runtime.
struct LocalSlice {
  mpc::LocalFn local;
  int64_t q = 0, s = 0;
  int word_bits = 64;
};

inline std::vector<routing::OutMsg> round_messages(const LocalSlice& ctx, int64_t round,
                                                   int64_t machine, const Inbox& inbox) {
  const auto msgs = ctx.local(round, machine, inbox);
  int64_t sent = 0;
  std::map<int64_t, std::vector<Rat>> frames;
  for (const auto& msg : msgs) {
    if (msg.dst < 1 || msg.dst > ctx.q) {
      throw ConfigError("round " + std::to_string(round) + ": machine " + std::to_string(machine) +
                        " addressed machine " + std::to_string(msg.dst));
    }
    if (msg.payload.empty()) continue;  // delivers no entries, costs no budget
    sent += static_cast<int64_t>(msg.payload.size());
    auto& frame = frames[msg.dst];
    if (frame.empty()) frame.push_back(Rat(0));  // length prefix, filled below
    for (const auto& w : msg.payload) frame.push_back(Rat(mpc::mask_word(w, ctx.word_bits)));
  }
  if (sent > ctx.s) {
    throw BudgetViolation("round " + std::to_string(round) + ": machine " +
                          std::to_string(machine) + " sent " + std::to_string(sent) +
                          " words with budget " + std::to_string(ctx.s));
  }
  std::vector<routing::OutMsg> out;
  out.reserve(frames.size());
  for (auto& [dst, frame] : frames) {
    frame[0] = Rat(static_cast<int64_t>(frame.size()) - 1);
    out.push_back({std::move(frame), dst});
  }
  return out;
}

}  // namespace compile_detail

// Rebuilds a machine's inbox from its scratch blocks: decode each length
// class, merge by source, unwrap the length prefixes. The result matches the
// protocol runtime's inbox exactly (source-ascending, emission order within a
// source).
inline Inbox decode_memories(const StackLayout& lay, std::span<const Rat> row, int64_t machine) {
  if (static_cast<int64_t>(row.size()) != lay.m) {
    throw ConfigError("decode_memories: row width disagrees with the layout");
  }
  std::map<int64_t, std::vector<Rat>> by_src;
  for (int64_t h = 1; h <= lay.classes(); ++h) {
    const auto block = row.subspan(static_cast<size_t>(lay.scr0[static_cast<size_t>(h - 1)]),
                                   static_cast<size_t>(lay.scr_w[static_cast<size_t>(h - 1)]));
    bool any = false;
    for (const auto& v : block) {
      if (!v.is_zero()) {
        any = true;
        break;
      }
    }
    if (!any) continue;
    auto msgs = routing::decode_packets(std::vector<Rat>(block.begin(), block.end()), machine,
                                        lay.betas[static_cast<size_t>(h)]);
    for (auto& msg : msgs) {
      if (!by_src.try_emplace(msg.src, std::move(msg.payload)).second) {
        throw UndecodableRow("decode_memories: source " + std::to_string(msg.src) +
                             " decoded in two length classes");
      }
    }
  }
  Inbox inbox;
  int64_t received = 0;
  for (auto& [src, frame] : by_src) {
    const mpc::Word len_w = compile_detail::word_of(frame.at(0), "decode_memories length prefix");
    if (len_w < 1 || len_w >= mpc::Word(frame.size())) {
      throw UndecodableRow("decode_memories: frame length prefix out of range");
    }
    const auto len = len_w.convert_to<int64_t>();
    received += len;
    for (int64_t k = 1; k <= len; ++k) {
      inbox.push_back({compile_detail::word_of(frame[static_cast<size_t>(k)],
                                               "decode_memories payload"),
                       src});
    }
  }
  if (received > lay.s) {
    throw BudgetViolation("decode_memories: machine " + std::to_string(machine) + " received " +
                          std::to_string(received) + " words with budget " + std::to_string(lay.s));
  }
  return inbox;
}

// Vectorized inbox interface used by the standalone layer builders: 2s raw
// coordinates per row, slot k = [source, word], source 0 marks the end.
inline std::vector<Rat> vectorize_inbox(const Inbox& inbox, int64_t s) {
  if (static_cast<int64_t>(inbox.size()) > s) {
    throw ConfigError("vectorize_inbox: inbox exceeds the word budget");
  }
  std::vector<Rat> row(static_cast<size_t>(2 * s));
  for (size_t k = 0; k < inbox.size(); ++k) {
    row[2 * k] = Rat(inbox[k].src);
    row[2 * k + 1] = Rat(inbox[k].payload);
  }
  return row;
}

inline Inbox devectorize_inbox(std::span<const Rat> row, int64_t s) {
  if (static_cast<int64_t>(row.size()) != 2 * s) {
    throw ConfigError("devectorize_inbox: row must have 2s coordinates");
  }
  Inbox inbox;
  for (int64_t k = 0; k < s; ++k) {
    const Rat& src = row[static_cast<size_t>(2 * k)];
    if (src.is_zero()) break;
    if (!src.is_integer() || src.sign() <= 0) {
      throw ConfigError("devectorize_inbox: slot source is not an index");
    }
    inbox.push_back({compile_detail::word_of(row[static_cast<size_t>(2 * k + 1)],
                                             "devectorize_inbox word"),
                     src.floor_i64()});
  }
  return inbox;
}

// ---------------------------------------------------------------------------
// Layer construction internals.
// ---------------------------------------------------------------------------

namespace compile_detail {

// Everything a fused closure needs, shared across one built spec.
struct CoreCtx {
  StackLayout lay;
  std::vector<const HashMatrix*> hash;  // one per length class
  LocalSlice local;
  int64_t n_in = 0, n_out = 0, rounds = 0;
};

using CorePtr = std::shared_ptr<const CoreCtx>;
using MemFn = std::function<Inbox(int64_t machine, std::span<const Rat> row)>;
using TagFn = std::function<Json(const std::string& part)>;

inline CorePtr make_core(StackLayout lay, LocalSlice local, int64_t n_in, int64_t n_out,
                         int64_t rounds) {
  auto core = std::make_shared<CoreCtx>();
  core->lay = std::move(lay);
  for (int64_t h = 1; h <= core->lay.classes(); ++h) core->hash.push_back(&class_hash(core->lay, h));
  core->local = std::move(local);
  core->n_in = n_in;
  core->n_out = n_out;
  core->rounds = rounds;
  return core;
}

inline Elementwise wrapped(Json params, size_t out_dim, ElementwiseFn fn) {
  Elementwise e;
  e.kind = "local-mpc-wrapper";
  e.params = std::move(params);
  e.out_dim = out_dim;
  e.fn = std::move(fn);
  return e;
}

inline MemFn scratch_memory(CorePtr core) {
  return [core](int64_t machine, std::span<const Rat> row) {
    return decode_memories(core->lay, row, machine);
  };
}

inline MemFn block_memory(CorePtr core) {
  return [core](int64_t machine, std::span<const Rat> row) {
    Inbox inbox;
    if (machine > core->lay.q) return inbox;
    for (int64_t k = 0; k < core->lay.s; ++k) {
      const Rat& src = row[static_cast<size_t>(core->lay.mem0 + 2 * k)];
      if (src.is_zero()) break;
      inbox.push_back({word_of(row[static_cast<size_t>(core->lay.mem0 + 2 * k + 1)],
                               "memory block word"),
                       src.floor_i64()});
    }
    return inbox;
  };
}

// Raw input row -> [start flag | masked word]; token rows past n_in stay blank.
inline Elementwise make_word_embed(CorePtr core, const TagFn& tag) {
  return wrapped(tag("embed"), static_cast<size_t>(core->lay.m),
                 [core](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                   if (idx == 0) {
                     out[0] = Rat(1);
                     return;
                   }
                   if (static_cast<int64_t>(idx) > core->n_in) return;
                   const Rat& v = in[0];
                   if (!v.is_integer()) {
                     throw ConfigError("compiled input words must be integers");
                   }
                   out[static_cast<size_t>(core->lay.word_ch)] =
                       Rat(mpc::mask_word(v.numerator(), core->lay.word_bits));
                 });
}

// Vectorized inbox -> [start flag | memory slots]; masks on receipt like the
// runtime and requires the slots to fill a prefix.
inline Elementwise make_mem_embed(CorePtr core, const TagFn& tag) {
  return wrapped(tag("embed"), static_cast<size_t>(core->lay.m),
                 [core](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                   const StackLayout& lay = core->lay;
                   if (idx == 0) {
                     out[0] = Rat(1);
                     return;
                   }
                   if (static_cast<int64_t>(idx) > lay.q) return;
                   bool ended = false;
                   for (int64_t k = 0; k < lay.s; ++k) {
                     const Rat& src = in[static_cast<size_t>(2 * k)];
                     const Rat& word = in[static_cast<size_t>(2 * k + 1)];
                     if (src.is_zero()) {
                       if (!word.is_zero()) {
                         throw ConfigError("memory slots: word without a source");
                       }
                       ended = true;
                       continue;
                     }
                     if (ended) throw ConfigError("memory slots must fill a prefix");
                     // Round-1 inboxes carry global input indices, later ones machine ids.
                     if (!src.is_integer() || src.sign() <= 0 ||
                         src > Rat(std::max(core->n_in, lay.q))) {
                       throw ConfigError("memory slots: source out of range");
                     }
                     out[static_cast<size_t>(lay.mem0 + 2 * k)] = src;
                     out[static_cast<size_t>(lay.mem0 + 2 * k + 1)] =
                         Rat(mpc::mask_word(word_of(word, "memory slot word"), lay.word_bits));
                   }
                 });
}

enum class QueryTarget { SelfRow, OutputWindow };

// One routing head per length class: keys light the destinations of this
// row's class-h frames, queries select the row's own index (or its output
// window's machine in the final layer), values carry the encoded packets.
// Hardmax then averages exactly the class-h senders of each destination.
inline Head make_router_head(CorePtr core, MemFn mem, int64_t round, int64_t h, QueryTarget target,
                             const TagFn& tag) {
  const StackLayout& lay = core->lay;
  const int64_t rows = lay.rows;
  Head head;
  head.mode = AttnMode::Hardmax;
  head.query = wrapped(tag("query"), static_cast<size_t>(rows + 1),
                       [core, target](size_t idx, std::span<const Rat>, std::span<Rat> out) {
                         out[static_cast<size_t>(core->lay.rows)] = Rat(1);
                         if (idx == 0) return;
                         const int64_t sel =
                             target == QueryTarget::SelfRow
                                 ? static_cast<int64_t>(idx)
                                 : (static_cast<int64_t>(idx) - 1) / core->lay.s + 1;
                         out[static_cast<size_t>(sel - 1)] = Rat(1);
                       });
  head.key = wrapped(tag("key"), static_cast<size_t>(rows + 1),
                     [core, mem, round, h](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                       out[static_cast<size_t>(core->lay.rows)] = Rat(3, 4) * in[0];
                       if (idx == 0 || static_cast<int64_t>(idx) > core->lay.q) return;
                       const Inbox inbox = mem(static_cast<int64_t>(idx), in);
                       for (const auto& msg :
                            round_messages(core->local, round, static_cast<int64_t>(idx), inbox)) {
                         if (routing::route_detail::length_class(
                                 core->lay.betas, static_cast<int64_t>(msg.payload.size())) != h) {
                           continue;
                         }
                         out[static_cast<size_t>(msg.dst - 1)] = Rat(1);
                       }
                     });
  head.value = wrapped(tag("value"), static_cast<size_t>(lay.m),
                       [core, mem, round, h](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                         const StackLayout& l = core->lay;
                         if (idx == 0 || static_cast<int64_t>(idx) > l.q) return;
                         const Inbox inbox = mem(static_cast<int64_t>(idx), in);
                         std::vector<routing::OutMsg> mine;
                         for (auto& msg :
                              round_messages(core->local, round, static_cast<int64_t>(idx), inbox)) {
                           if (routing::route_detail::length_class(
                                   l.betas, static_cast<int64_t>(msg.payload.size())) == h) {
                             mine.push_back(std::move(msg));
                           }
                         }
                         const auto slots =
                             routing::encode_packets(mine, static_cast<int64_t>(idx),
                                                     *core->hash[static_cast<size_t>(h - 1)],
                                                     l.betas[static_cast<size_t>(h)]);
                         const auto flat =
                             routing::flatten_packets(slots, l.betas[static_cast<size_t>(h)]);
                         for (size_t c = 0; c < flat.size(); ++c) {
                           out[static_cast<size_t>(l.scr0[static_cast<size_t>(h - 1)]) + c] = flat[c];
                         }
                       });
  return head;
}

// Every row attends to itself and subtracts its own scratch, so the residual
// update replaces last round's blocks with this round's instead of summing.
inline Head make_cancel_head(CorePtr core, const TagFn& tag) {
  const int64_t rows = core->lay.rows;
  Head head;
  head.mode = AttnMode::Hardmax;
  head.query = wrapped(tag("query"), static_cast<size_t>(rows + 1),
                       [rows](size_t idx, std::span<const Rat>, std::span<Rat> out) {
                         out[static_cast<size_t>(rows)] = Rat(1);
                         if (idx >= 1) out[idx - 1] = Rat(1);
                       });
  head.key = wrapped(tag("key"), static_cast<size_t>(rows + 1),
                     [rows](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                       out[static_cast<size_t>(rows)] = Rat(3, 4) * in[0];
                       if (idx >= 1) out[idx - 1] = Rat(1);
                     });
  head.value = wrapped(tag("value"), static_cast<size_t>(core->lay.m),
                       [core](size_t, std::span<const Rat> in, std::span<Rat> out) {
                         for (int64_t c = core->lay.scratch0; c < core->lay.m; ++c) {
                           const Rat& v = in[static_cast<size_t>(c)];
                           if (!v.is_zero()) out[static_cast<size_t>(c)] = -v;
                         }
                       });
  return head;
}

// psi for memory-producing layers: decode the row's scratch as machine idx.
inline Elementwise make_memory_psi(CorePtr core, const TagFn& tag) {
  return wrapped(tag("psi"), static_cast<size_t>(2 * core->lay.s),
                 [core](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                   if (idx == 0 || static_cast<int64_t>(idx) > core->lay.q) return;
                   const Inbox inbox = decode_memories(core->lay, in, static_cast<int64_t>(idx));
                   for (size_t k = 0; k < inbox.size(); ++k) {
                     out[2 * k] = Rat(inbox[k].src);
                     out[2 * k + 1] = Rat(inbox[k].payload);
                   }
                 });
}

// psi for the output spread: row i reads output word i out of its window
// machine's final inbox, enforcing the runtime's positional-collection checks.
inline Elementwise make_output_psi(CorePtr core, const TagFn& tag) {
  return wrapped(tag("psi"), 1, [core](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
    if (idx == 0) return;
    const StackLayout& lay = core->lay;
    const int64_t w = (static_cast<int64_t>(idx) - 1) / lay.s + 1;
    const int64_t out_machines = (core->n_out + lay.s - 1) / lay.s;
    if (w > out_machines) return;
    const Inbox inbox = decode_memories(lay, in, w);
    const auto [lo, hi] = mpc::window(w, lay.s, core->n_out);
    const int64_t want = hi - lo + 1;
    const auto got = static_cast<int64_t>(inbox.size());
    if (got < want) {
      throw OutputMissing("collect_output: machine " + std::to_string(w) + " holds " +
                          std::to_string(got) + " words for a window of " + std::to_string(want));
    }
    if (got > want) {
      throw DuplicateOutputIndex("collect_output: machine " + std::to_string(w) + " holds " +
                                 std::to_string(got) + " words for a window of " +
                                 std::to_string(want));
    }
    if (static_cast<int64_t>(idx) <= core->n_out) {
      out[0] = Rat(inbox[static_cast<size_t>((static_cast<int64_t>(idx) - 1) % lay.s)].payload);
    }
  });
}

}  // namespace compile_detail

// ---------------------------------------------------------------------------
// Input distribution layer. Token row i carries (x_i, i); machine row w
// selects its window by angle: queries and keys sit on the unit circle at
// 2*pi*w/M (M = rows), window ties are exact because keys depend only on the
// window index, and a start-row bonus halfway between the weakest self match
// and the strongest cross match catches machines with empty windows. The
// separation is certified on the dyadic grid at build time.
// ---------------------------------------------------------------------------

struct InitMargin {
  Rat min_self;       // weakest matched-window score over populated machines
  Rat max_cross;      // strongest mismatched score (floored at 0)
  Rat bonus;          // start-row fallback score
  Rat margin;         // min_self - max_cross, certified >= 1/M^2
};

inline InitMargin certify_init_margin(int64_t rows, int64_t q, int64_t s, int64_t n_in,
                                      int grid_bits = 24) {
  const auto point = [&](int64_t w) {
    const long double angle = tau() * static_cast<long double>(w) / static_cast<long double>(rows);
    return std::pair<Rat, Rat>{grid_cos(angle, Rat(1), grid_bits),
                               grid_sin(angle, Rat(1), grid_bits)};
  };
  const int64_t in_windows = (n_in + s - 1) / s;
  InitMargin cert;
  cert.max_cross = Rat(0);
  bool first = true;
  for (int64_t w = 1; w <= in_windows; ++w) {
    const auto [c, sn] = point(w);
    const Rat self = c * c + sn * sn;
    if (first || self < cert.min_self) cert.min_self = self;
    first = false;
  }
  for (int64_t w = 1; w <= q; ++w) {
    const auto [qc, qs] = point(w);
    for (int64_t v = 1; v <= in_windows; ++v) {
      if (v == w) continue;
      const auto [kc, ks] = point(v);
      const Rat cross = qc * kc + qs * ks;
      if (cross > cert.max_cross) cert.max_cross = cross;
    }
  }
  cert.margin = cert.min_self - cert.max_cross;
  if (cert.margin * Rat(rows * rows) < Rat(1)) {
    throw ConfigError("input distribution: grid margin below 1/M^2 for M = " +
                      std::to_string(rows));
  }
  cert.bonus = (cert.min_self + cert.max_cross) / Rat(2);
  return cert;
}

namespace compile_detail {

inline Head make_init_head(CorePtr core, const InitMargin& cert, int grid_bits,
                           const TagFn& tag) {
  const StackLayout& lay = core->lay;
  const int64_t rows = lay.rows;
  const auto angle_of = [rows](int64_t w) {
    return tau() * static_cast<long double>(w) / static_cast<long double>(rows);
  };
  Head head;
  head.mode = AttnMode::Hardmax;
  head.query = wrapped(tag("query"), 3,
                       [core, angle_of, grid_bits](size_t idx, std::span<const Rat>,
                                                   std::span<Rat> out) {
                         out[2] = Rat(1);
                         if (idx == 0 || static_cast<int64_t>(idx) > core->lay.q) return;
                         out[0] = grid_cos(angle_of(static_cast<int64_t>(idx)), Rat(1), grid_bits);
                         out[1] = grid_sin(angle_of(static_cast<int64_t>(idx)), Rat(1), grid_bits);
                       });
  head.key = wrapped(tag("key"), 3,
                     [core, cert, angle_of, grid_bits](size_t idx, std::span<const Rat> in,
                                                       std::span<Rat> out) {
                       if (idx == 0) {
                         out[2] = cert.bonus * in[0];
                         return;
                       }
                       if (static_cast<int64_t>(idx) > core->n_in) {
                         out[2] = Rat(-2);  // dead token row: below every live score
                         return;
                       }
                       const int64_t w = (static_cast<int64_t>(idx) - 1) / core->lay.s + 1;
                       out[0] = grid_cos(angle_of(w), Rat(1), grid_bits);
                       out[1] = grid_sin(angle_of(w), Rat(1), grid_bits);
                     });
  head.value = wrapped(tag("value"), static_cast<size_t>(lay.m),
                       [core](size_t idx, std::span<const Rat> in, std::span<Rat> out) {
                         const StackLayout& l = core->lay;
                         if (idx == 0 || static_cast<int64_t>(idx) > core->n_in) return;
                         const int64_t w = (static_cast<int64_t>(idx) - 1) / l.s + 1;
                         std::vector<routing::OutMsg> frame(1);
                         frame[0].dst = w;
                         frame[0].payload = {Rat(1), in[static_cast<size_t>(l.word_ch)]};
                         const auto slots = routing::encode_packets(
                             frame, static_cast<int64_t>(idx), *core->hash[0], l.betas[1]);
                         const auto flat = routing::flatten_packets(slots, l.betas[1]);
                         for (size_t c = 0; c < flat.size(); ++c) {
                           out[static_cast<size_t>(l.scr0[0]) + c] = flat[c];
                         }
                       });
  return head;
}

inline Json base_tag(std::string key, Json extra) {
  Json p = std::move(extra);
  p["scheme"] = std::move(key);
  return p;
}

inline TagFn layer_tag(Json base, int64_t layer) {
  return [base = std::move(base), layer](const std::string& part) {
    Json p = base;
    p["layer"] = layer;
    p["part"] = part;
    return p;
  };
}

inline TagFn head_tag(Json base, int64_t layer, int64_t head) {
  return [base = std::move(base), layer, head](const std::string& part) {
    Json p = base;
    p["layer"] = layer;
    p["head"] = head;
    p["part"] = part;
    return p;
  };
}

}  // namespace compile_detail

// ---------------------------------------------------------------------------
// Best-effort budget probe: run the protocol on random inputs and surface any
// budget violation now instead of at evaluation time. Inputs the protocol
// cannot parse are skipped; the runtime checks remain authoritative.
// ---------------------------------------------------------------------------

struct CompileOptions {
  bool probe = true;
  int probe_trials = 32;
  uint64_t probe_seed = 0x5EEDF00D;
  uint64_t hash_seed = 1;
  int grid_bits = 24;
};

inline void probe_budgets(const mpc::ProtocolSpec& p, int trials, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const uint64_t span = p.word_bits >= 20 ? (uint64_t{1} << 20) : (uint64_t{1} << p.word_bits);
  for (int t = 0; t < trials; ++t) {
    std::vector<mpc::Word> input(static_cast<size_t>(p.n_in));
    for (auto& w : input) w = mpc::Word(rng() % span);
    try {
      mpc::run_mpc(p, input);
    } catch (const BudgetViolation& e) {
      throw BudgetViolationAtCompileTime(std::string("budget probe: ") + e.what());
    } catch (const std::exception&) {
      // unparseable random input; only budget overruns matter here
    }
  }
}

// ---------------------------------------------------------------------------
// Standalone layer builders (the compiled stack wires the same parts
// together, exchanging the vectorized-memory interface for scratch blocks).
// ---------------------------------------------------------------------------

inline TransformerSpec build_init_layer(int64_t n_in, int64_t s, int64_t q, int grid_bits = 24,
                                        uint64_t hash_seed = 1) {
  if (n_in < 1 || s < 1 || q < 1) throw ConfigError("init layer: n_in, s, q must be positive");
  if (n_in > q * s) {
    throw CapacityExceeded("init layer: " + std::to_string(n_in) + " input words exceed " +
                           std::to_string(q) + " machines x " + std::to_string(s) + " words");
  }
  const int64_t rows = std::max(n_in, q);
  auto core = compile_detail::make_core(make_layout(rows, q, s, 64, true, false, hash_seed), {},
                                        n_in, 0, 0);
  const InitMargin cert = certify_init_margin(rows, q, s, n_in, grid_bits);
  const Json base = compile_detail::base_tag(
      "init", Json{{"n_in", n_in}, {"s", s}, {"q", q}, {"grid_bits", grid_bits},
                   {"hash_seed", hash_seed}});

  TransformerSpec spec;
  spec.n_task = rows;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = static_cast<size_t>(core->lay.m);
  spec.d_in = 1;
  spec.d_out = static_cast<size_t>(2 * s);
  spec.precision_p = 32;  // unused: evaluation is exact
  spec.input_embed = compile_detail::make_word_embed(core, compile_detail::layer_tag(base, -1));
  LayerSpec layer;
  layer.mask = MaskKind::None;
  layer.heads.push_back(
      compile_detail::make_init_head(core, cert, grid_bits, compile_detail::head_tag(base, 0, 0)));
  spec.layers.push_back(std::move(layer));
  spec.output_map = compile_detail::make_memory_psi(core, compile_detail::layer_tag(base, -2));
  validate_spec(spec);
  return spec;
}

inline TransformerSpec build_round_layer(const mpc::ProtocolSpec& proto, int64_t r,
                                         CompileOptions opt = {}) {
  mpc::validate_protocol(proto);
  if (r < 1 || r > proto.rounds - 1) {
    throw ConfigError("round layer: need 1 <= r <= R-1, got r = " + std::to_string(r));
  }
  if (opt.probe) probe_budgets(proto, opt.probe_trials, opt.probe_seed);
  auto core = compile_detail::make_core(
      make_layout(proto.q, proto.q, proto.s, proto.word_bits, false, true, opt.hash_seed),
      {proto.local, proto.q, proto.s, proto.word_bits}, proto.n_in, proto.n_out, proto.rounds);
  const Json base =
      compile_detail::base_tag("round", Json{{"protocol", proto.name}, {"round", r},
                                             {"hash_seed", opt.hash_seed}});
  const auto mem = compile_detail::block_memory(core);

  TransformerSpec spec;
  spec.n_task = proto.q;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = static_cast<size_t>(core->lay.m);
  spec.d_in = static_cast<size_t>(2 * proto.s);
  spec.d_out = static_cast<size_t>(2 * proto.s);
  spec.precision_p = 32;
  spec.input_embed = compile_detail::make_mem_embed(core, compile_detail::layer_tag(base, -1));
  LayerSpec layer;
  layer.mask = MaskKind::None;
  for (int64_t h = 1; h <= core->lay.classes(); ++h) {
    layer.heads.push_back(compile_detail::make_router_head(
        core, mem, r, h, compile_detail::QueryTarget::SelfRow,
        compile_detail::head_tag(base, 0, h - 1)));
  }
  layer.heads.push_back(
      compile_detail::make_cancel_head(core, compile_detail::head_tag(base, 0, core->lay.classes())));
  spec.layers.push_back(std::move(layer));
  spec.output_map = compile_detail::make_memory_psi(core, compile_detail::layer_tag(base, -2));
  validate_spec(spec);
  return spec;
}

inline TransformerSpec build_final_layer(const mpc::ProtocolSpec& proto, CompileOptions opt = {}) {
  mpc::validate_protocol(proto);
  if (opt.probe) probe_budgets(proto, opt.probe_trials, opt.probe_seed);
  const int64_t rows = std::max(proto.q, proto.n_out);
  auto core = compile_detail::make_core(
      make_layout(rows, proto.q, proto.s, proto.word_bits, false, true, opt.hash_seed),
      {proto.local, proto.q, proto.s, proto.word_bits}, proto.n_in, proto.n_out, proto.rounds);
  const Json base = compile_detail::base_tag(
      "final", Json{{"protocol", proto.name}, {"hash_seed", opt.hash_seed}});
  const auto mem = compile_detail::block_memory(core);

  TransformerSpec spec;
  spec.n_task = rows;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = static_cast<size_t>(core->lay.m);
  spec.d_in = static_cast<size_t>(2 * proto.s);
  spec.d_out = 1;
  spec.precision_p = 32;
  spec.input_embed = compile_detail::make_mem_embed(core, compile_detail::layer_tag(base, -1));
  LayerSpec layer;
  layer.mask = MaskKind::None;
  for (int64_t h = 1; h <= core->lay.classes(); ++h) {
    layer.heads.push_back(compile_detail::make_router_head(
        core, mem, proto.rounds, h, compile_detail::QueryTarget::OutputWindow,
        compile_detail::head_tag(base, 0, h - 1)));
  }
  layer.heads.push_back(
      compile_detail::make_cancel_head(core, compile_detail::head_tag(base, 0, core->lay.classes())));
  spec.layers.push_back(std::move(layer));
  spec.output_map = compile_detail::make_output_psi(core, compile_detail::layer_tag(base, -2));
  validate_spec(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Whole-protocol compilation.
// ---------------------------------------------------------------------------

struct WidthReport {
  size_t m = 0;
  std::vector<int64_t> heads_per_layer;
};

struct CompiledTransformer {
  TransformerSpec spec;
  std::string source;  // protocol id
  std::vector<std::string> layer_roles;
  WidthReport width_report;
  StackLayout layout;
  int64_t n_in = 0, n_out = 0, q = 0, s = 0, rounds = 0;
  int word_bits = 64;
};

inline CompiledTransformer compile_protocol(const mpc::ProtocolSpec& proto,
                                            CompileOptions opt = {}) {
  mpc::validate_protocol(proto);
  if (proto.n_out > proto.n_in) {
    throw ConfigError("compile: n_out must not exceed n_in (rows carry one word each)");
  }
  if (opt.probe) probe_budgets(proto, opt.probe_trials, opt.probe_seed);
  const int64_t rows = std::max(proto.n_in, proto.q);
  auto core = compile_detail::make_core(
      make_layout(rows, proto.q, proto.s, proto.word_bits, true, false, opt.hash_seed),
      {proto.local, proto.q, proto.s, proto.word_bits}, proto.n_in, proto.n_out, proto.rounds);
  const InitMargin cert = certify_init_margin(rows, proto.q, proto.s, proto.n_in, opt.grid_bits);
  const Json base = compile_detail::base_tag("protocol", Json{{"protocol", proto.name},
                                                              {"hash_seed", opt.hash_seed},
                                                              {"grid_bits", opt.grid_bits}});
  const auto mem = compile_detail::scratch_memory(core);

  CompiledTransformer out;
  out.source = proto.name;
  out.layout = core->lay;
  out.n_in = proto.n_in;
  out.n_out = proto.n_out;
  out.q = proto.q;
  out.s = proto.s;
  out.rounds = proto.rounds;
  out.word_bits = proto.word_bits;

  TransformerSpec spec;
  spec.n_task = rows;
  spec.n_pad = 0;
  spec.start_token = Rat(1);
  spec.m = static_cast<size_t>(core->lay.m);
  spec.d_in = 1;
  spec.d_out = 1;
  spec.precision_p = 32;
  spec.input_embed = compile_detail::make_word_embed(core, compile_detail::layer_tag(base, -1));

  LayerSpec init;
  init.mask = MaskKind::None;
  init.heads.push_back(
      compile_detail::make_init_head(core, cert, opt.grid_bits, compile_detail::head_tag(base, 0, 0)));
  spec.layers.push_back(std::move(init));
  out.layer_roles.push_back("Init");

  for (int64_t r = 1; r <= proto.rounds; ++r) {
    const bool last = r == proto.rounds;
    LayerSpec layer;
    layer.mask = MaskKind::None;
    const int64_t li = static_cast<int64_t>(spec.layers.size());
    for (int64_t h = 1; h <= core->lay.classes(); ++h) {
      layer.heads.push_back(compile_detail::make_router_head(
          core, mem, r, h,
          last ? compile_detail::QueryTarget::OutputWindow : compile_detail::QueryTarget::SelfRow,
          compile_detail::head_tag(base, li, h - 1)));
    }
    layer.heads.push_back(compile_detail::make_cancel_head(
        core, compile_detail::head_tag(base, li, core->lay.classes())));
    spec.layers.push_back(std::move(layer));
    out.layer_roles.push_back(last ? "Final" : "Round(" + std::to_string(r) + ")");
  }

  spec.output_map = compile_detail::make_output_psi(core, compile_detail::layer_tag(base, -2));
  validate_spec(spec);

  out.width_report.m = spec.m;
  for (const auto& layer : spec.layers) {
    out.width_report.heads_per_layer.push_back(static_cast<int64_t>(layer.heads.size()));
  }
  out.spec = std::move(spec);
  return out;
}

inline std::vector<mpc::Word> run_compiled(const CompiledTransformer& compiled,
                                           const std::vector<mpc::Word>& input) {
  if (static_cast<int64_t>(input.size()) != compiled.n_in) {
    throw ConfigError("run_compiled: input must have exactly n_in words");
  }
  Mat raw(static_cast<size_t>(compiled.spec.n_task), 1);
  for (size_t i = 0; i < input.size(); ++i) raw.at(i, 0) = Rat(input[i]);
  const auto res = evaluate(compiled.spec, raw, {});
  std::vector<mpc::Word> out;
  out.reserve(static_cast<size_t>(compiled.n_out));
  for (int64_t i = 1; i <= compiled.n_out; ++i) {
    out.push_back(compile_detail::word_of(res.output.at(static_cast<size_t>(i), 0),
                                          "run_compiled output"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Equivalence checking.
// ---------------------------------------------------------------------------

inline int64_t round_head_bound(int64_t q) {
  const long double inner = std::log2(std::log2(static_cast<long double>(q) + 2.0L));
  return static_cast<int64_t>(std::ceil(inner - 1e-9L)) + 2;
}

struct EquivalenceMismatch {
  size_t input_index = 0;
  int64_t position = -1;  // -1: outcome-level difference (shape or error)
  std::string expected;
  std::string got;
};

struct EquivalenceReport {
  int64_t inputs_checked = 0;
  std::vector<EquivalenceMismatch> mismatches;
  size_t m = 0;
  std::vector<int64_t> heads_per_layer;
  int64_t head_bound = 0;       // ceil(log2 log2 (q+2)) + 2
  int64_t width_reference = 0;  // s^4 * ceil(log2 n_in) comparison scale
  bool ok() const { return mismatches.empty(); }
};

namespace compile_detail {

struct Outcome {
  bool failed = false;
  std::string error;
  std::vector<mpc::Word> words;
};

template <typename F>
Outcome run_outcome(F&& f) {
  Outcome o;
  try {
    o.words = f();
  } catch (const std::exception& e) {
    o.failed = true;
    o.error = e.what();
  }
  return o;
}

inline std::string words_str(const std::vector<mpc::Word>& w) {
  std::string s = "[";
  for (size_t i = 0; i < w.size(); ++i) {
    if (i) s += ", ";
    s += w[i].str();
  }
  return s + "]";
}

}  // namespace compile_detail

inline EquivalenceReport check_equivalence(const mpc::ProtocolSpec& proto,
                                           const CompiledTransformer& compiled,
                                           const std::vector<std::vector<mpc::Word>>& inputs) {
  if (proto.n_in != compiled.n_in || proto.n_out != compiled.n_out) {
    throw ConfigError("check_equivalence: protocol and compiled shapes disagree");
  }
  EquivalenceReport report;
  report.m = compiled.width_report.m;
  report.heads_per_layer = compiled.width_report.heads_per_layer;
  report.head_bound = round_head_bound(compiled.q);
  int64_t log_n = 1;
  while ((int64_t{1} << log_n) < std::max<int64_t>(proto.n_in, 2)) ++log_n;
  report.width_reference = proto.s * proto.s * proto.s * proto.s * log_n;

  for (size_t t = 0; t < inputs.size(); ++t) {
    const auto& input = inputs[t];
    const auto expected =
        compile_detail::run_outcome([&] { return mpc::run_mpc(proto, input).outputs; });
    const auto got = compile_detail::run_outcome([&] { return run_compiled(compiled, input); });
    ++report.inputs_checked;
    if (expected.failed || got.failed) {
      const std::string e = expected.failed ? "<error: " + expected.error + ">"
                                            : compile_detail::words_str(expected.words);
      const std::string g =
          got.failed ? "<error: " + got.error + ">" : compile_detail::words_str(got.words);
      if (e != g) report.mismatches.push_back({t, -1, e, g});
      continue;
    }
    if (expected.words.size() != got.words.size()) {
      report.mismatches.push_back({t, -1, compile_detail::words_str(expected.words),
                                   compile_detail::words_str(got.words)});
      continue;
    }
    for (size_t i = 0; i < expected.words.size(); ++i) {
      if (expected.words[i] != got.words[i]) {
        report.mismatches.push_back(
            {t, static_cast<int64_t>(i) + 1, expected.words[i].str(), got.words[i].str()});
      }
    }
  }
  return report;
}

inline std::string format_report(const EquivalenceReport& r) {
  std::string s;
  s += "inputs checked: " + std::to_string(r.inputs_checked) + "\n";
  s += "mismatches: " + std::to_string(r.mismatches.size()) + "\n";
  s += "residual width m = " + std::to_string(r.m) +
       " (reference scale s^4 log2 n = " + std::to_string(r.width_reference) + ")\n";
  s += "heads per layer:";
  for (const auto h : r.heads_per_layer) s += " " + std::to_string(h);
  s += " (round-layer bound " + std::to_string(r.head_bound) + ")\n";
  for (const auto& mm : r.mismatches) {
    s += "  input " + std::to_string(mm.input_index) + " position " +
         std::to_string(mm.position) + ": expected " + mm.expected + ", got " + mm.got + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Registry hook: rebuilds any compiled-layer elementwise map from its tag,
// provided the protocol id is registered. Probing is skipped on rebuild; it
// only affects compile-time errors, never the produced functions.
// ---------------------------------------------------------------------------

namespace compile_detail {

inline const TransformerSpec& wrapper_spec(const Json& params) {
  static std::map<std::string, TransformerSpec> cache;
  static std::mutex mu;
  Json key = params;
  key.erase("layer");
  key.erase("head");
  key.erase("part");
  const std::string dump = key.dump();
  std::lock_guard lock(mu);
  const auto it = cache.find(dump);
  if (it != cache.end()) return it->second;

  const std::string scheme = key.at("scheme").get<std::string>();
  CompileOptions opt;
  opt.probe = false;
  if (key.contains("hash_seed")) opt.hash_seed = key.at("hash_seed").get<uint64_t>();
  if (key.contains("grid_bits")) opt.grid_bits = key.at("grid_bits").get<int>();
  TransformerSpec spec;
  if (scheme == "protocol") {
    spec = compile_protocol(lookup_protocol(key.at("protocol").get<std::string>()), opt).spec;
  } else if (scheme == "init") {
    spec = build_init_layer(key.at("n_in").get<int64_t>(), key.at("s").get<int64_t>(),
                            key.at("q").get<int64_t>(), opt.grid_bits, opt.hash_seed);
  } else if (scheme == "round") {
    spec = build_round_layer(lookup_protocol(key.at("protocol").get<std::string>()),
                             key.at("round").get<int64_t>(), opt);
  } else if (scheme == "final") {
    spec = build_final_layer(lookup_protocol(key.at("protocol").get<std::string>()), opt);
  } else {
    throw ConfigError("local-mpc-wrapper: unknown scheme '" + scheme + "'");
  }
  return cache.emplace(dump, std::move(spec)).first->second;
}

inline Elementwise rebuild_wrapped(const Json& params) {
  const TransformerSpec& spec = wrapper_spec(params);
  const std::string part = params.at("part").get<std::string>();
  if (part == "embed") return spec.input_embed;
  if (part == "psi") return spec.output_map;
  const auto layer = params.at("layer").get<size_t>();
  const auto head = params.at("head").get<size_t>();
  if (layer >= spec.layers.size() || head >= spec.layers[layer].heads.size()) {
    throw ConfigError("local-mpc-wrapper: layer/head tag out of range");
  }
  const Head& h = spec.layers[layer].heads[head];
  if (part == "query") return h.query;
  if (part == "key") return h.key;
  if (part == "value") return h.value;
  throw ConfigError("local-mpc-wrapper: unknown part '" + part + "'");
}

}  // namespace compile_detail

namespace {
const ElementwiseRegistration kLocalMpcWrapperRegistered{
    "local-mpc-wrapper", [](const Json& params) { return compile_detail::rebuild_wrapped(params); }};
}  // namespace

}  // namespace mpca::compile
