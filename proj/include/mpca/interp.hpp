#pragma once

// Attention-trace interpretability tools.
//
// The central quantity is the normalized element-wise inner product of two
// equally shaped matrices,
//
//     inner(A, B) = |A .* B|_F^2 / (|A|_F * |B|_F),
//
// which lies in [0, 1] whenever both matrices have entries in [0, 1] and
// equals 1 exactly when both are the same binary matrix. Alignment tables
// score every attention head of a spec against the iterated
// most-recent-match targets of the hop task: for each head the per-sample
// trace (cropped to the task block, dropping the synthetic start row and
// column) is compared against the pattern matrix of each target power, and
// the scores are averaged over seeded samples. Heads of the doubling
// construction score exactly 1 on their own power because every defined row
// places weight 1 on the target column and every undefined row attends the
// start column, which the crop removes.
//
// Square roots of rationals are taken exactly when the radicand is a perfect
// square and are otherwise rounded UP at resolution 2^-bits, so normalized
// scores never exceed their exact value and the [0, 1] bound is preserved.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "khop.hpp"
#include "linalg.hpp"
#include "rational.hpp"
#include "transformer.hpp"

namespace mpca::interp {

// ---------------------------------------------------------------------------
// Rational square root.

// sqrt(v) as a rational: exact if v is the square of a rational, otherwise
// the smallest multiple of 2^-bits * (denominator scale) at or above the true
// root (rounding up keeps normalized quotients conservative).
inline Rat sqrt_dyadic(const Rat& v, int bits = 48) {
  if (v.sign() < 0) throw ConfigError("sqrt: negative radicand");
  if (v.is_zero()) return Rat(0);
  if (bits < 1 || bits > 512) throw ConfigError("sqrt: bits out of range");
  const BigInt num = v.numerator();
  const BigInt den = v.denominator();
  // sqrt(n/d) = sqrt(n*d) / d; scale by 4^bits so the integer root carries
  // `bits` fractional bits.
  BigInt radicand = num * den;
  radicand <<= 2 * bits;
  BigInt root = boost::multiprecision::sqrt(radicand);
  if (root * root < radicand) ++root;  // ceiling
  BigInt scale = den;
  scale <<= bits;
  return Rat(BigRat(root, scale));
}

// ---------------------------------------------------------------------------
// Normalized element-wise inner product.

inline Rat matrix_inner(const Mat& a, const Mat& b, int bits = 48) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("matrix inner: shapes must agree");
  }
  Rat prod_sq(0), a_sq(0), b_sq(0);
  for (size_t r = 0; r < a.rows(); ++r) {
    for (size_t c = 0; c < a.cols(); ++c) {
      const Rat& x = a.at(r, c);
      const Rat& y = b.at(r, c);
      if (!x.is_zero()) a_sq += x * x;
      if (!y.is_zero()) b_sq += y * y;
      if (!x.is_zero() && !y.is_zero()) {
        const Rat p = x * y;
        prod_sq += p * p;
      }
    }
  }
  if (a_sq.is_zero() || b_sq.is_zero()) {
    throw ZeroMatrices(std::string("matrix inner: ") +
                       (a_sq.is_zero() ? "first" : "second") + " matrix has no support");
  }
  return prod_sq / sqrt_dyadic(a_sq * b_sq, bits);
}

// ---------------------------------------------------------------------------
// Target pattern matrices.

// 1-based index function: g(j) in {0} union [N], 0 meaning "no target".
using IndexFn = std::function<int64_t(int64_t)>;

// Which cell carries the 1 for target g at argument j:
//   ColumnTarget — entry (g(j), j), the printed definition;
//   RowTarget    — entry (j, g(j)), the pattern attention traces draw
//                  (query row j attends column g(j)).
enum class Orientation { ColumnTarget, RowTarget };

inline Mat target_matrix(const IndexFn& g, int64_t n,
                         Orientation orient = Orientation::ColumnTarget) {
  if (!g) throw ConfigError("target matrix: missing index function");
  if (n < 1) throw ConfigError("target matrix: size must be >= 1");
  Mat a(static_cast<size_t>(n), static_cast<size_t>(n));
  for (int64_t j = 1; j <= n; ++j) {
    const int64_t t = g(j);
    if (t < 0 || t > n) {
      throw IndexOutOfRange("target matrix: target " + std::to_string(t) + " outside 0.." +
                            std::to_string(n));
    }
    if (t == 0) continue;
    if (orient == Orientation::ColumnTarget) {
      a.at(static_cast<size_t>(t - 1), static_cast<size_t>(j - 1)) = Rat(1);
    } else {
      a.at(static_cast<size_t>(j - 1), static_cast<size_t>(t - 1)) = Rat(1);
    }
  }
  return a;
}

// j-fold most-recent-match step over a fixed token sequence, as an IndexFn.
inline IndexFn find_power_fn(const std::vector<int32_t>& tokens, int64_t j) {
  if (j < 1) throw ConfigError("find power: exponent must be >= 1");
  return [tokens, j](int64_t i) { return khop::find_pow(tokens, i, j); };
}

// ---------------------------------------------------------------------------
// Alignment tables.

struct AlignmentCell {
  int64_t layer = 0;  // 0-based
  int64_t head = 0;   // 0-based
  int64_t j = 0;      // target power, 1..k
  Rat score;          // mean inner product, trace-style (RowTarget) pattern
  Rat score_printed;  // same cells scored against the ColumnTarget pattern
};

struct HeadArgmax {
  int64_t layer = 0;
  int64_t head = 0;
  int64_t best_j = 0;  // smallest maximizing power of `score`
  Rat best_score;
};

struct AlignmentTable {
  int64_t k = 0;          // hop count of the sampled task
  int64_t n_samples = 0;  // samples averaged per cell
  int64_t n = 0;          // task positions
  int32_t sigma = 0;      // alphabet size of the sampled task
  uint64_t seed = 0;
  std::vector<AlignmentCell> cells;  // lexicographic (layer, head, j)
  std::vector<HeadArgmax> argmax;    // per (layer, head)
};

namespace interp_detail {

// Crops an attention trace to the task block: rows and columns 1..n of the
// engine's (1 + n_task + n_pad)-row matrix.
inline Mat crop_task_block(const Mat& weights, int64_t n) {
  if (weights.rows() < static_cast<size_t>(n + 1) || weights.cols() < static_cast<size_t>(n + 1)) {
    throw ConfigError("trace crop: matrix smaller than the task block");
  }
  Mat out(static_cast<size_t>(n), static_cast<size_t>(n));
  for (int64_t r = 1; r <= n; ++r) {
    for (int64_t c = 1; c <= n; ++c) {
      out.at(static_cast<size_t>(r - 1), static_cast<size_t>(c - 1)) =
          weights.at(static_cast<size_t>(r), static_cast<size_t>(c));
    }
  }
  return out;
}

// matrix_inner with vacuous cases mapped to zero: a target power with no
// defined positions, or a trace whose task block is empty, carries no
// alignment evidence.
inline Rat guarded_inner(const Mat& a, const Mat& b, int bits) {
  try {
    return matrix_inner(a, b, bits);
  } catch (const ZeroMatrices&) {
    return Rat(0);
  }
}

}  // namespace interp_detail

// Scores every head of `spec` against find powers j = 1..k, averaged over
// n_samples drawn from the no-adjacent-repeat distribution with the given
// alphabet. Traces must be dense (kernel heads are rejected). Layers and
// heads are reported 0-based; argmax ties resolve to the smallest j.
inline AlignmentTable alignment_table(const TransformerSpec& spec, int64_t k, int64_t n_samples,
                                      uint64_t seed, int32_t sigma, int bits = 48) {
  if (k < 1) throw ConfigError("alignment: k must be >= 1");
  if (n_samples < 1) throw ConfigError("alignment: need at least one sample");
  const int64_t n = spec.n_task;

  AlignmentTable table;
  table.k = k;
  table.n_samples = n_samples;
  table.n = n;
  table.sigma = sigma;
  table.seed = seed;

  const size_t layers = spec.layers.size();
  std::vector<std::vector<std::vector<Rat>>> sum_row(layers), sum_col(layers);
  for (size_t l = 0; l < layers; ++l) {
    sum_row[l].assign(spec.layers[l].heads.size(), std::vector<Rat>(static_cast<size_t>(k)));
    sum_col[l].assign(spec.layers[l].heads.size(), std::vector<Rat>(static_cast<size_t>(k)));
  }

  std::mt19937_64 master(seed);
  EvalOptions opt;
  opt.capture_trace = true;
  for (int64_t s = 0; s < n_samples; ++s) {
    const auto inst = khop::sample_instance(n, sigma, k, master());
    Mat raw(static_cast<size_t>(n), 1);
    for (int64_t i = 0; i < n; ++i) raw.at(static_cast<size_t>(i), 0) = Rat(inst.tokens[static_cast<size_t>(i)]);
    const auto res = evaluate(spec, raw, opt);

    // Target patterns for every power, both orientations.
    std::vector<Mat> row_targets, col_targets;
    row_targets.reserve(static_cast<size_t>(k));
    col_targets.reserve(static_cast<size_t>(k));
    for (int64_t j = 1; j <= k; ++j) {
      const auto g = find_power_fn(inst.tokens, j);
      row_targets.push_back(target_matrix(g, n, Orientation::RowTarget));
      col_targets.push_back(target_matrix(g, n, Orientation::ColumnTarget));
    }

    for (size_t l = 0; l < layers; ++l) {
      for (size_t h = 0; h < spec.layers[l].heads.size(); ++h) {
        const auto& ht = res.trace.layers[l][h];
        if (!ht.available) {
          throw KernelTraceUnavailable("alignment: layer " + std::to_string(l) + " head " +
                                       std::to_string(h) + " has no dense trace");
        }
        const Mat block = interp_detail::crop_task_block(ht.weights, n);
        for (int64_t j = 1; j <= k; ++j) {
          sum_row[l][h][static_cast<size_t>(j - 1)] +=
              interp_detail::guarded_inner(row_targets[static_cast<size_t>(j - 1)], block, bits);
          sum_col[l][h][static_cast<size_t>(j - 1)] +=
              interp_detail::guarded_inner(col_targets[static_cast<size_t>(j - 1)], block, bits);
        }
      }
    }
  }

  const Rat inv(1, n_samples);
  for (size_t l = 0; l < layers; ++l) {
    for (size_t h = 0; h < sum_row[l].size(); ++h) {
      HeadArgmax best;
      best.layer = static_cast<int64_t>(l);
      best.head = static_cast<int64_t>(h);
      for (int64_t j = 1; j <= k; ++j) {
        AlignmentCell cell;
        cell.layer = static_cast<int64_t>(l);
        cell.head = static_cast<int64_t>(h);
        cell.j = j;
        cell.score = sum_row[l][h][static_cast<size_t>(j - 1)] * inv;
        cell.score_printed = sum_col[l][h][static_cast<size_t>(j - 1)] * inv;
        if (best.best_j == 0 || best.best_score < cell.score) {
          best.best_j = j;
          best.best_score = cell.score;
        }
        table.cells.push_back(std::move(cell));
      }
      table.argmax.push_back(std::move(best));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Report emission.

enum class ReportFormat { Csv, Text };

// Renders tables with stable column order (k, layer, head, j, score, then the
// printed-orientation score). Both formats carry identical numeric strings.
inline std::string render_report(const std::vector<AlignmentTable>& tables, ReportFormat format,
                                 bool elide_zero_scores = false) {
  if (tables.empty()) throw ConfigError("report: no tables");
  std::string out;
  if (format == ReportFormat::Csv) {
    out += "k,layer,head,j,score,score_printed_orientation\n";
  }
  for (const auto& t : tables) {
    for (const auto& c : t.cells) {
      if (elide_zero_scores && c.score.is_zero() && c.score_printed.is_zero()) continue;
      if (format == ReportFormat::Csv) {
        out += std::to_string(t.k) + "," + std::to_string(c.layer) + "," +
               std::to_string(c.head) + "," + std::to_string(c.j) + "," + c.score.to_string() +
               "," + c.score_printed.to_string() + "\n";
      } else {
        out += "k=" + std::to_string(t.k) + " layer=" + std::to_string(c.layer) +
               " head=" + std::to_string(c.head) + " j=" + std::to_string(c.j) +
               " score=" + c.score.to_string() +
               " score_printed_orientation=" + c.score_printed.to_string() + "\n";
      }
    }
    for (const auto& a : t.argmax) {
      if (format == ReportFormat::Text) {
        out += "argmax layer=" + std::to_string(a.layer) + " head=" + std::to_string(a.head) +
               " j=" + std::to_string(a.best_j) + " score=" + a.best_score.to_string() + "\n";
      }
    }
  }
  return out;
}

inline void emit_report(const std::vector<AlignmentTable>& tables, ReportFormat format,
                        const std::string& path, bool elide_zero_scores = false) {
  const std::string text = render_report(tables, format, elide_zero_scores);
  std::ofstream out(path);
  if (!out) throw IoFailure("report: cannot open " + path);
  out << text;
  out.flush();
  if (!out) throw IoFailure("report: write to " + path + " failed");
}

}  // namespace mpca::interp
