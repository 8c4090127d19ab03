#pragma once

// Reference implementations for the sequential hop task. These are the
// ground-truth oracles the attention constructions are tested against, so the
// code here favors the obviously-correct loop over anything clever.
//
// Conventions: positions are 1-based; position 0 is the "undefined" absorber
// and token 0 is the undefined marker. A step from position i lands one past
// the most recent earlier occurrence of the token at i, or at 0 if there is
// none; steps from 0 stay at 0.

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mpca/errors.hpp"

namespace mpca::khop {

struct Instance {
  int64_t k = 1;
  int32_t sigma = 0;            // alphabet size; real tokens are 1..sigma
  std::vector<int32_t> tokens;  // X_1..X_N stored at indices 0..N-1
  std::vector<int32_t> labels;  // optional materialized hop labels (may be empty)
};

inline int32_t token_at(const std::vector<int32_t>& x, int64_t i) {
  if (i < 1 || i > static_cast<int64_t>(x.size())) return 0;
  return x[static_cast<size_t>(i - 1)];
}

// One step: 1 + max{j < i : X_j = X_i}, or 0 when no earlier occurrence
// exists. 0 is absorbing.
inline int64_t find_step(const std::vector<int32_t>& x, int64_t i) {
  if (i < 1 || i > static_cast<int64_t>(x.size())) return 0;
  const int32_t t = token_at(x, i);
  for (int64_t j = i - 1; j >= 1; --j) {
    if (token_at(x, j) == t) return j + 1;
  }
  return 0;
}

inline int64_t find_pow(const std::vector<int32_t>& x, int64_t i, int64_t r) {
  int64_t p = i;
  for (int64_t step = 0; step < r && p != 0; ++step) p = find_step(x, p);
  return p;
}

// Token reached after k steps from the final position (0 = undefined).
inline int32_t hop(const Instance& inst) {
  const int64_t n = static_cast<int64_t>(inst.tokens.size());
  return token_at(inst.tokens, find_pow(inst.tokens, n, inst.k));
}

// find_step for every position in one left-to-right pass.
inline std::vector<int64_t> find_table(const std::vector<int32_t>& x) {
  std::vector<int64_t> out(x.size(), 0);
  std::vector<int64_t> last;  // last position seen per token
  for (size_t i = 0; i < x.size(); ++i) {
    const auto t = static_cast<size_t>(x[i]);
    if (t >= last.size()) last.resize(t + 1, 0);
    if (last[t] != 0) out[i] = last[t] + 1;
    last[t] = static_cast<int64_t>(i) + 1;
  }
  return out;
}

inline Instance random_instance(int64_t n, int32_t sigma, int64_t k, std::mt19937_64& rng) {
  if (n < 1 || sigma < 1 || k < 0) {
    throw ConfigError("random_instance: need N >= 1, sigma >= 1, k >= 0");
  }
  Instance inst;
  inst.k = k;
  inst.sigma = sigma;
  inst.tokens.resize(static_cast<size_t>(n));
  std::uniform_int_distribution<int32_t> tok(1, sigma);
  for (auto& t : inst.tokens) t = tok(rng);
  return inst;
}

// ---------------------------------------------------------------------------
// Cycle-family encodings. A 2-regular multigraph on vertices 1..k is given as
// k undirected edges (order and per-edge orientation are deliberately free).
// Each edge {u, v} contributes the nine-token block  * u # v u # v * _
// (specials * = k+1, # = k+2, _ = k+3); two hops inside a block swap u and v.
// The full block sweep is repeated k/2 times and closed by the token of
// vertex 1, so k hops from the end execute k/2 edge traversals.

using EdgeList = std::vector<std::pair<int32_t, int32_t>>;

inline void validate_two_regular(const EdgeList& edges) {
  const auto k = static_cast<int32_t>(edges.size());
  std::vector<int32_t> degree(static_cast<size_t>(k), 0);
  for (const auto& [u, v] : edges) {
    if (u < 1 || u > k || v < 1 || v > k) {
      throw InvalidGraph("cycle_instance: edge endpoint outside 1..k");
    }
    ++degree[static_cast<size_t>(u - 1)];
    ++degree[static_cast<size_t>(v - 1)];
  }
  for (int32_t v = 1; v <= k; ++v) {
    if (degree[static_cast<size_t>(v - 1)] != 2) {
      throw InvalidGraph("cycle_instance: vertex " + std::to_string(v) +
                         " does not have degree 2");
    }
  }
}

inline Instance cycle_instance(const EdgeList& edges) {
  const auto k = static_cast<int32_t>(edges.size());
  if (k < 4 || k % 2 != 0) throw ConfigError("cycle_instance: need an even edge count >= 4");
  validate_two_regular(edges);
  const int32_t star = k + 1, dagger = k + 2, blank = k + 3;
  Instance inst;
  inst.k = k;
  inst.sigma = k + 3;
  inst.tokens.reserve(static_cast<size_t>(9) * k * (k / 2) + 1);
  for (int32_t rep = 0; rep < k / 2; ++rep) {
    for (const auto& [u, v] : edges) {
      for (const int32_t s : {star, u, dagger, v, u, dagger, v, star, blank}) {
        inst.tokens.push_back(s);
      }
    }
  }
  inst.tokens.push_back(1);
  return inst;
}

// One k-cycle 1-2-...-k-1.
inline EdgeList single_cycle(int32_t k) {
  if (k < 4 || k % 2 != 0) throw ConfigError("single_cycle: k must be even and >= 4");
  EdgeList edges;
  for (int32_t v = 1; v <= k; ++v) edges.emplace_back(v, v == k ? 1 : v + 1);
  return edges;
}

// Two (k/2)-cycles, on {1..k/2} and {k/2+1..k}; a length-2 cycle is a pair of
// parallel edges.
inline EdgeList two_cycles(int32_t k) {
  if (k < 4 || k % 2 != 0) throw ConfigError("two_cycles: k must be even and >= 4");
  const int32_t half = k / 2;
  EdgeList edges;
  for (int32_t v = 1; v <= half; ++v) edges.emplace_back(v, v == half ? 1 : v + 1);
  for (int32_t v = half + 1; v <= k; ++v) edges.emplace_back(v, v == k ? half + 1 : v + 1);
  return edges;
}

// ---------------------------------------------------------------------------
// Graph blow-up: k vertex-disjoint copies tied together by hub edges from
// every copy's vertex 1 back to the first copy's vertex 1 (the j = 1 hub edge
// is a self-loop), so |V'| = k|V| and |E'| = k|E| + k exactly.

struct Graph {
  int64_t n_vertices = 0;
  std::vector<std::pair<int32_t, int32_t>> edges;  // 1-based, undirected
};

inline Graph blow_up_graph(const Graph& g, int32_t hub, int32_t k, int64_t edge_budget) {
  if (k < 1) throw ConfigError("blow_up_graph: k must be >= 1");
  if (g.n_vertices < 1) throw ConfigError("blow_up_graph: graph must have a vertex");
  if (hub < 1 || hub > g.n_vertices) throw ConfigError("blow_up_graph: hub out of range");
  for (const auto& [u, v] : g.edges) {
    if (u < 1 || u > g.n_vertices || v < 1 || v > g.n_vertices) {
      throw ConfigError("blow_up_graph: edge endpoint out of range");
    }
  }
  const int64_t total = static_cast<int64_t>(k) * (static_cast<int64_t>(g.edges.size()) + 1);
  if (total > edge_budget) {
    throw BudgetExceeded("blow_up_graph: " + std::to_string(total) + " edges exceed budget " +
                         std::to_string(edge_budget));
  }
  Graph out;
  out.n_vertices = g.n_vertices * k;
  out.edges.reserve(static_cast<size_t>(total));
  const auto lift = [&](int32_t copy, int32_t v) {
    return static_cast<int32_t>((copy - 1) * g.n_vertices + v);
  };
  for (int32_t copy = 1; copy <= k; ++copy) {
    for (const auto& [u, v] : g.edges) out.edges.emplace_back(lift(copy, u), lift(copy, v));
  }
  // Hub edges tie every copy back to the first one; copy 1's is a self-loop.
  for (int32_t copy = 1; copy <= k; ++copy) out.edges.emplace_back(lift(copy, hub), lift(1, hub));
  return out;
}

inline Graph blow_up_graph(const Graph& g, int32_t k) {
  return blow_up_graph(g, 1, k, std::numeric_limits<int64_t>::max());
}

}  // namespace mpca::khop
