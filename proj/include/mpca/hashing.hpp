#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "mpca/errors.hpp"

namespace mpca::routing {

// Binary matrix with the unique-column ("all elementary vectors") property:
// for every tested row subset S with |S| <= b, each row of the restriction
// A_S owns at least one column where it is the only 1.  Rows and columns are
// 1-based to match the index arithmetic of the packet encoder.
struct HashMatrix {
  int64_t n = 0;             // rows
  int64_t b = 0;             // subset-size budget the property was checked for
  int64_t d = 0;             // columns
  uint64_t seed = 0;         // seed of the accepted sample
  uint64_t requested_seed = 0;
  int attempts = 0;          // samples drawn, including the accepted one
  bool exhaustive = false;   // verification enumerated every subset of size <= min(b, n)
  int64_t subsets_checked = 0;
  std::vector<uint64_t> bits;  // row-major, ceil(d / 64) words per row

  int64_t words_per_row() const { return (d + 63) / 64; }

  bool at(int64_t row, int64_t col) const {
    const int64_t idx = (row - 1) * words_per_row() + (col - 1) / 64;
    return (bits[static_cast<size_t>(idx)] >> ((col - 1) % 64)) & 1u;
  }

  void set(int64_t row, int64_t col, bool value) {
    const int64_t idx = (row - 1) * words_per_row() + (col - 1) / 64;
    const uint64_t mask = uint64_t{1} << ((col - 1) % 64);
    if (value) {
      bits[static_cast<size_t>(idx)] |= mask;
    } else {
      bits[static_cast<size_t>(idx)] &= ~mask;
    }
  }

  const uint64_t* row_words(int64_t row) const {
    return bits.data() + (row - 1) * words_per_row();
  }
};

// Columns of the matrix restricted to `rows` must include every |rows|-dim
// elementary vector.  Carry-save trick: track columns seen once vs at least
// twice; a row passes if it owns a column in the exactly-once set.
inline bool subset_has_all_elementary(const HashMatrix& a, const std::vector<int64_t>& rows,
                                      std::vector<uint64_t>& once, std::vector<uint64_t>& twice) {
  const size_t w = static_cast<size_t>(a.words_per_row());
  once.assign(w, 0);
  twice.assign(w, 0);
  for (const int64_t r : rows) {
    const uint64_t* rw = a.row_words(r);
    for (size_t i = 0; i < w; ++i) {
      twice[i] |= once[i] & rw[i];
      once[i] |= rw[i];
    }
  }
  for (const int64_t r : rows) {
    const uint64_t* rw = a.row_words(r);
    bool alone = false;
    for (size_t i = 0; i < w; ++i) {
      if (rw[i] & once[i] & ~twice[i]) {
        alone = true;
        break;
      }
    }
    if (!alone) return false;
  }
  return true;
}

namespace hash_detail {

// Binomial coefficient saturated above `cap` (only compared against thresholds).
inline int64_t binomial_capped(int64_t n, int64_t k, int64_t cap) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  long double acc = 1.0L;
  for (int64_t i = 1; i <= k; ++i) {
    acc = acc * static_cast<long double>(n - k + i) / static_cast<long double>(i);
    if (acc > static_cast<long double>(cap) * 2) return cap + 1;
  }
  return static_cast<int64_t>(llroundl(acc));
}

// Enumerates subsets of {1..n} of each size 1..t and checks the property.
inline bool verify_exhaustive(const HashMatrix& a, int64_t t, int64_t& checked) {
  std::vector<uint64_t> once;
  std::vector<uint64_t> twice;
  checked = 0;
  for (int64_t size = 1; size <= t; ++size) {
    std::vector<int64_t> rows(static_cast<size_t>(size));
    for (int64_t i = 0; i < size; ++i) rows[static_cast<size_t>(i)] = i + 1;
    while (true) {
      ++checked;
      if (!subset_has_all_elementary(a, rows, once, twice)) return false;
      // Next combination in lexicographic order.
      int64_t i = size - 1;
      while (i >= 0 && rows[static_cast<size_t>(i)] == a.n - (size - 1 - i)) --i;
      if (i < 0) break;
      ++rows[static_cast<size_t>(i)];
      for (int64_t j = i + 1; j < size; ++j) {
        rows[static_cast<size_t>(j)] = rows[static_cast<size_t>(j - 1)] + 1;
      }
    }
  }
  return true;
}

inline bool verify_sampled(const HashMatrix& a, int64_t t, int64_t trials, uint64_t seed,
                           int64_t& checked) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<uint64_t> once;
  std::vector<uint64_t> twice;
  checked = 0;
  for (int64_t trial = 0; trial < trials; ++trial) {
    // Floyd's subset sampling: t distinct rows out of 1..n.
    std::set<int64_t> pick;
    for (int64_t i = a.n - t; i < a.n; ++i) {
      const int64_t r = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1)) + 1;
      if (!pick.insert(r).second) pick.insert(i + 1);
    }
    const std::vector<int64_t> rows(pick.begin(), pick.end());
    ++checked;
    if (!subset_has_all_elementary(a, rows, once, twice)) return false;
  }
  return true;
}

}  // namespace hash_detail

// Samples Bern(1/(b+1)) entries until the elementary-vector property verifies,
// bumping the seed by one per attempt; sixteen failures is a hard stop.
// Column count follows ceil(12 b^2 ln n), floored at one column so tiny inputs
// still have somewhere to put a 1.
inline HashMatrix build_hash_matrix(int64_t n, int64_t b, uint64_t seed) {
  if (n < 1 || b < 1 || b > n) {
    throw ConfigError("build_hash_matrix: need 1 <= b <= n");
  }
  const int64_t d =
      std::max<int64_t>(1, static_cast<int64_t>(std::ceil(12.0L * b * b * std::log((long double)n))));
  const int64_t t = std::min(b, n);
  const bool exhaustive = hash_detail::binomial_capped(n, b, 100000) <= 100000;
  constexpr int kMaxAttempts = 16;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    HashMatrix a;
    a.n = n;
    a.b = b;
    a.d = d;
    a.requested_seed = seed;
    a.seed = seed + static_cast<uint64_t>(attempt);
    a.attempts = attempt + 1;
    a.exhaustive = exhaustive;
    a.bits.assign(static_cast<size_t>(n * a.words_per_row()), 0);
    std::mt19937_64 rng(a.seed);
    for (int64_t r = 1; r <= n; ++r) {
      for (int64_t c = 1; c <= d; ++c) {
        if (rng() % static_cast<uint64_t>(b + 1) == 0) a.set(r, c, true);
      }
    }
    const bool ok = exhaustive
                        ? hash_detail::verify_exhaustive(a, t, a.subsets_checked)
                        : hash_detail::verify_sampled(a, t, 10000, a.seed, a.subsets_checked);
    if (ok) return a;
  }
  throw ConstructionFailed("build_hash_matrix: no verified sample for n=" + std::to_string(n) +
                           " b=" + std::to_string(b) + " within 16 attempts from seed " +
                           std::to_string(seed));
}

// Construction is deterministic in (n, b, seed), so repeated requests share one matrix.
inline const HashMatrix& hash_matrix_cached(int64_t n, int64_t b, uint64_t seed) {
  static std::mutex mu;
  static std::map<std::tuple<int64_t, int64_t, uint64_t>, std::unique_ptr<HashMatrix>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{n, b, seed}];
  if (!slot) slot = std::make_unique<HashMatrix>(build_hash_matrix(n, b, seed));
  return *slot;
}

}  // namespace mpca::routing
