#pragma once

// Demonstration protocols for the message-passing runtime. Each builder
// returns a fully validated ProtocolSpec; the graph labeling demo encodes a
// graph as [V, E, u1, v1, u2, v2, ...] and deliberately runs the linear-round
// relaxation (one label step per edge round), not a doubling scheme.

#include <algorithm>
#include <numeric>
#include <vector>

#include "mpca/khop_oracle.hpp"
#include "mpca/mpc.hpp"

namespace mpca::protocols {

using mpc::Entry;
using mpc::Inbox;
using mpc::Message;
using mpc::ProtocolSpec;
using mpc::Word;

// Every machine resends its window to itself; output = input.
inline ProtocolSpec echo(int64_t n, int64_t s) {
  ProtocolSpec p;
  p.name = "echo";
  p.n_in = p.n_out = n;
  p.s = s;
  p.q = (n + s - 1) / s;
  p.rounds = 1;
  p.local = [](int64_t, int64_t machine, const Inbox& in) {
    std::vector<Word> words;
    for (const auto& e : in) words.push_back(e.payload);
    if (words.empty()) return std::vector<Message>{};
    return std::vector<Message>{{machine, std::move(words)}};
  };
  mpc::validate_protocol(p);
  return p;
}

// Left rotation by one window: y_j = x_{j+s} cyclically; requires s | n.
inline ProtocolSpec rotate(int64_t n, int64_t s) {
  if (n % s != 0) throw ConfigError("rotate: requires s | n");
  ProtocolSpec p;
  p.name = "rotate";
  p.n_in = p.n_out = n;
  p.s = s;
  p.q = n / s;
  p.rounds = 1;
  const int64_t q = p.q;
  p.local = [q](int64_t, int64_t machine, const Inbox& in) {
    std::vector<Word> words;
    for (const auto& e : in) words.push_back(e.payload);
    const int64_t dst = machine == 1 ? q : machine - 1;
    return std::vector<Message>{{dst, std::move(words)}};
  };
  mpc::validate_protocol(p);
  return p;
}

// Binary-tree reduction with two-word machines: log2(n) rounds, one output.
inline ProtocolSpec tree_sum(int64_t n) {
  if (n < 2 || (n & (n - 1)) != 0) throw ConfigError("tree_sum: n must be a power of two >= 2");
  ProtocolSpec p;
  p.name = "tree-sum";
  p.n_in = n;
  p.n_out = 1;
  p.s = 2;
  p.q = n / 2;
  int64_t rounds = 0;
  for (int64_t m = n; m > 1; m /= 2) ++rounds;
  p.rounds = rounds;
  p.local = [](int64_t, int64_t machine, const Inbox& in) {
    if (in.empty()) return std::vector<Message>{};
    Word sum = 0;
    for (const auto& e : in) sum += e.payload;
    return std::vector<Message>{{(machine + 1) / 2, {sum}}};
  };
  mpc::validate_protocol(p);
  return p;
}

// Window maxima funnel into machine 1, which re-emits the global maximum.
// Needs ceil(n/s) <= s so the aggregator's inbox fits.
inline ProtocolSpec broadcast_max(int64_t n, int64_t s) {
  const int64_t q = (n + s - 1) / s;
  if (q > s) throw ConfigError("broadcast_max: needs ceil(n/s) <= s");
  ProtocolSpec p;
  p.name = "broadcast-max";
  p.n_in = n;
  p.n_out = 1;
  p.s = s;
  p.q = q;
  p.rounds = 2;
  p.local = [](int64_t round, int64_t machine, const Inbox& in) {
    if (in.empty()) return std::vector<Message>{};
    Word best = in[0].payload;
    for (const auto& e : in) best = std::max(best, e.payload);
    if (round == 1) return std::vector<Message>{{1, {best}}};
    if (machine == 1) return std::vector<Message>{{1, {best}}};
    return std::vector<Message>{};
  };
  mpc::validate_protocol(p);
  return p;
}

inline std::vector<Word> graph_words(const khop::Graph& g) {
  std::vector<Word> words;
  words.push_back(g.n_vertices);
  words.push_back(static_cast<int64_t>(g.edges.size()));
  for (const auto& [u, v] : g.edges) {
    words.push_back(u);
    words.push_back(v);
  }
  return words;
}

// Reference labeling: every vertex gets the minimum vertex id reachable from
// it (plain union-find, any degree).
inline std::vector<int64_t> min_label_oracle(const khop::Graph& g) {
  std::vector<int64_t> parent(static_cast<size_t>(g.n_vertices) + 1);
  std::iota(parent.begin(), parent.end(), 0);
  const std::function<int64_t(int64_t)> find = [&](int64_t x) {
    while (parent[static_cast<size_t>(x)] != x) {
      parent[static_cast<size_t>(x)] =
          parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
      x = parent[static_cast<size_t>(x)];
    }
    return x;
  };
  for (const auto& [u, v] : g.edges) {
    const int64_t ru = find(u), rv = find(v);
    if (ru != rv) parent[static_cast<size_t>(std::max(ru, rv))] = std::min(ru, rv);
  }
  std::vector<int64_t> label(static_cast<size_t>(g.n_vertices));
  for (int64_t v = 1; v <= g.n_vertices; ++v) {
    label[static_cast<size_t>(v - 1)] = find(v);
  }
  return label;
}

// Connected-component minimum labels for graphs of maximum degree 2 (paths
// and cycles). Machine layout: window machines 1..B, then one machine per
// edge, then one per vertex. Rounds: parse (1), incidence (1), then v
// alternating label/min exchanges (2v), then the final label spread (1).
// Vertices of degree > 2 overflow the round budgets and surface as
// BudgetViolation, which is the intended rejection path.
inline ProtocolSpec min_label(int64_t v, int64_t e, int64_t s = 6) {
  if (v < 1 || e < 0) throw ConfigError("min_label: need v >= 1, e >= 0");
  if (s < 6 || s % 2 != 0) throw ConfigError("min_label: need even s >= 6");
  ProtocolSpec p;
  p.name = "min-label";
  p.n_in = 2 + 2 * e;
  p.n_out = v;
  p.s = s;
  const int64_t in_windows = (p.n_in + s - 1) / s;
  const int64_t out_windows = (v + s - 1) / s;
  const int64_t base = std::max(in_windows, out_windows);
  p.q = base + e + v;
  p.rounds = 2 * v + 3;
  const int64_t edge0 = base;      // edge j -> machine edge0 + j
  const int64_t vert0 = base + e;  // vertex w -> machine vert0 + w

  p.local = [v, s, edge0, vert0, rounds = p.rounds](int64_t round, int64_t machine,
                                                    const Inbox& in) {
    std::vector<Message> out;

    if (machine <= edge0) {
      // Window machine: on round 1, route edge-list words to edge machines.
      if (round == 1) {
        for (const auto& entry : in) {
          const int64_t pos = entry.src;  // global input position
          if (pos <= 2) continue;         // header words V, E
          const int64_t j = (pos - 1) / 2;
          out.push_back({edge0 + j, {entry.payload}});
        }
      }
      return out;
    }

    if (machine <= vert0) {
      // Edge machine: learn (u, v) on round 2, then relay minima on even
      // rounds while keeping the endpoints alive via self-messages.
      if (round < 2) return out;
      std::vector<Word> ends;    // from the window machine or our self-state
      std::vector<Word> labels;  // from vertex machines
      for (const auto& entry : in) {
        if (entry.src == machine || entry.src <= edge0) {
          ends.push_back(entry.payload);
        } else {
          labels.push_back(entry.payload);
        }
      }
      if (ends.size() != 2) return out;  // not a live edge machine
      const auto eu = ends[0].convert_to<int64_t>();
      const auto ev = ends[1].convert_to<int64_t>();
      if (eu < 1 || eu > v || ev < 1 || ev > v) {
        throw ConfigError("min_label: edge endpoint outside 1..V");
      }
      if (round == 2) {
        // Incidence markers: vertices learn their edges from the source id.
        out.push_back({vert0 + eu, {Word(0)}});
        out.push_back({vert0 + ev, {Word(0)}});
      }
      if (!labels.empty()) {
        Word m = labels[0];
        for (const auto& l : labels) m = std::min(m, l);
        out.push_back({vert0 + eu, {m}});
        out.push_back({vert0 + ev, {m}});
      }
      if (round < rounds - 1) out.push_back({machine, {ends[0], ends[1]}});
      return out;
    }

    // Vertex machine w. Self-state layout: [label, incident edge machines...].
    const int64_t w = machine - vert0;
    if (round < 3) return out;
    std::vector<Word> self_words;
    std::vector<Word> mins;
    std::vector<int64_t> incident;
    for (const auto& entry : in) {
      if (entry.src == machine) {
        self_words.push_back(entry.payload);
      } else if (round == 3) {
        incident.push_back(entry.src);  // incidence markers from edge machines
      } else {
        mins.push_back(entry.payload);
      }
    }
    Word label = w;
    if (!self_words.empty()) {
      label = self_words[0];
      for (size_t i = 1; i < self_words.size(); ++i) {
        incident.push_back(self_words[i].convert_to<int64_t>());
      }
    }
    for (const auto& m : mins) label = std::min(label, m);
    if (round == rounds) {
      out.push_back({(w - 1) / s + 1, {label}});
      return out;
    }
    std::vector<Word> self = {label};
    for (const int64_t em : incident) self.push_back(em);
    out.push_back({machine, std::move(self)});
    if (round % 2 == 1) {
      for (const int64_t em : incident) out.push_back({em, {label}});
    }
    return out;
  };
  mpc::validate_protocol(p);
  return p;
}

}  // namespace mpca::protocols
