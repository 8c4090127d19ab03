#pragma once

// Attention engine over exact rationals. Row 0 is a synthetic start row,
// rows 1..n_task carry the raw input, and n_pad trailing blank rows follow.
// Heads run in one of three modes:
//   - Hardmax: exact uniform average over the argmax set of the score row.
//   - Softmax: scores scaled by an inverse temperature, evaluated in long
//     double with max-subtraction, output rounded to the 2^-(p/2) grid.
//     Only available in quantized evaluation.
//   - Kernel:  linear attention Q'(K'^T V), exact, no score matrix.
// Residual update per layer: X <- X + sum over heads of the head output.

#include <cstdint>
#include <string>
#include <vector>

#include "mpca/elementwise.hpp"
#include "mpca/fixed_point.hpp"
#include "mpca/linalg.hpp"

namespace mpca {

enum class MaskKind { None, Causal };
enum class AttnMode { Hardmax, Softmax, Kernel };

struct Head {
  Elementwise query;  // (idx, residual row) -> R^d_qk
  Elementwise key;    // (idx, residual row) -> R^d_qk
  Elementwise value;  // (idx, residual row) -> R^m
  AttnMode mode = AttnMode::Hardmax;
  Rat temperature = Rat(0);  // softmax inverse temperature, > 0
};

struct LayerSpec {
  std::vector<Head> heads;
  MaskKind mask = MaskKind::None;
};

struct TransformerSpec {
  int64_t n_task = 0;         // input positions 1..n_task
  int64_t n_pad = 0;          // trailing blank positions
  Rat start_token = Rat(0);   // raw value presented to the embedding at row 0
  size_t m = 0;               // residual width
  size_t d_in = 0;            // raw input row width
  size_t d_out = 0;           // output row width
  int precision_p = 32;
  Elementwise input_embed;    // (idx, raw row) -> R^m
  std::vector<LayerSpec> layers;
  Elementwise output_map;     // psi: (idx, final residual row) -> R^d_out

  size_t n_rows() const { return static_cast<size_t>(1 + n_task + n_pad); }
  size_t depth() const { return layers.size(); }
};

inline void validate_spec(const TransformerSpec& spec) {
  if (spec.n_task < 1) throw ConfigError("spec: n_task must be >= 1");
  if (spec.n_pad < 0) throw ConfigError("spec: n_pad must be >= 0");
  if (spec.m == 0) throw ConfigError("spec: residual width m must be > 0");
  if (spec.input_embed.out_dim != spec.m) {
    throw ConfigError("spec: input embedding must produce m coordinates");
  }
  if (spec.output_map.out_dim != spec.d_out) {
    throw ConfigError("spec: output map width disagrees with d_out");
  }
  validate_precision(spec.precision_p);
  for (size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    if (layer.heads.empty()) throw ConfigError("spec: layer without heads");
    for (const auto& h : layer.heads) {
      const std::string where = "spec: layer " + std::to_string(l);
      if (h.query.out_dim == 0 || h.query.out_dim != h.key.out_dim) {
        throw ConfigError(where + ": query/key widths must match and be > 0");
      }
      if (h.value.out_dim != spec.m) {
        throw ConfigError(where + ": value width must equal m");
      }
      if (h.mode == AttnMode::Softmax && h.temperature.sign() <= 0) {
        throw ConfigError(where + ": softmax head needs a positive temperature");
      }
    }
  }
}

struct EvalOptions {
  bool quantized = false;      // round embeddings, head outputs, psi to the grid
  bool capture_trace = false;  // record per-head attention weights
};

struct HeadTrace {
  bool available = false;  // false for kernel heads
  Mat weights;             // n_rows x n_rows row-stochastic matrix
};

struct Trace {
  std::vector<std::vector<HeadTrace>> layers;  // [layer][head]
  Mat final_residual;
};

struct EvalResult {
  Mat output;  // n_rows x d_out; row 0 is the start row's image
  Trace trace;
};

namespace engine_detail {

inline void quantize_row(std::span<Rat> row, int p) {
  for (auto& v : row) v = quantize(v, p);
}

inline bool allowed(MaskKind mask, size_t i, size_t j) {
  return mask == MaskKind::None || j <= i;
}

// Exact hardmax attention for row i; writes the head output and, if asked,
// the weight row.
inline void hardmax_row(const Mat& scores_qk, const Mat& values, MaskKind mask, size_t i,
                        std::span<Rat> out, Mat* weights) {
  const size_t t = values.rows();
  bool seen = false;
  Rat best;
  std::vector<size_t> arg;
  for (size_t j = 0; j < t; ++j) {
    if (!allowed(mask, i, j)) continue;
    const Rat& s = scores_qk.at(i, j);
    if (!seen || s > best) {
      best = s;
      arg.assign(1, j);
      seen = true;
    } else if (s == best) {
      arg.push_back(j);
    }
  }
  const Rat inv(1, static_cast<int64_t>(arg.size()));
  for (const size_t j : arg) {
    for (size_t c = 0; c < out.size(); ++c) {
      const Rat& v = values.at(j, c);
      if (!v.is_zero()) out[c] += v;
    }
    if (weights) weights->at(i, j) = inv;
  }
  if (arg.size() > 1) {
    for (auto& v : out) {
      if (!v.is_zero()) v *= inv;
    }
  }
}

inline void softmax_row(const Mat& scores_qk, const Mat& values, MaskKind mask, size_t i,
                        const Rat& temperature, int p, std::span<Rat> out, Mat* weights) {
  const size_t t = values.rows();
  bool seen = false;
  Rat best;
  for (size_t j = 0; j < t; ++j) {
    if (allowed(mask, i, j) && (!seen || scores_qk.at(i, j) > best)) {
      best = scores_qk.at(i, j);
      seen = true;
    }
  }
  const long double c = temperature.to_long_double();
  long double z = 0.0L;
  std::vector<long double> w(t, 0.0L);
  for (size_t j = 0; j < t; ++j) {
    if (!allowed(mask, i, j)) continue;
    const long double gap = (scores_qk.at(i, j) - best).to_long_double();
    w[j] = std::exp(c * gap);
    z += w[j];
  }
  std::vector<long double> acc(out.size(), 0.0L);
  for (size_t j = 0; j < t; ++j) {
    if (w[j] == 0.0L) continue;
    const long double wj = w[j] / z;
    for (size_t col = 0; col < out.size(); ++col) {
      const Rat& v = values.at(j, col);
      if (!v.is_zero()) acc[col] += wj * v.to_long_double();
    }
    if (weights) weights->at(i, j) = Rat::dyadic_round(wj, p / 2 + 1);
  }
  for (size_t col = 0; col < out.size(); ++col) {
    out[col] = quantize(Rat::dyadic_round(acc[col], p / 2), p);
  }
}

}  // namespace engine_detail

inline EvalResult evaluate(const TransformerSpec& spec, const Mat& raw, EvalOptions opt = {}) {
  validate_spec(spec);
  if (static_cast<int64_t>(raw.rows()) != spec.n_task || raw.cols() != spec.d_in) {
    throw ConfigError("evaluate: raw input must be n_task x d_in");
  }
  const size_t t = spec.n_rows();
  const int p = spec.precision_p;

  Mat x(t, spec.m);
  std::vector<Rat> synth(spec.d_in);  // start/pad raw rows
  for (size_t i = 0; i < t; ++i) {
    if (i == 0 && spec.d_in > 0) synth[0] = spec.start_token;
    const bool real = i >= 1 && i <= static_cast<size_t>(spec.n_task);
    spec.input_embed.apply(i, real ? raw.row(i - 1) : std::span<const Rat>(synth), x.row(i));
    if (i == 0 && spec.d_in > 0) synth[0] = Rat(0);
    if (opt.quantized) engine_detail::quantize_row(x.row(i), p);
  }

  EvalResult result;
  if (opt.capture_trace) result.trace.layers.resize(spec.layers.size());

  for (size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    Mat delta(t, spec.m);
    if (opt.capture_trace) result.trace.layers[l].resize(layer.heads.size());

    for (size_t hi = 0; hi < layer.heads.size(); ++hi) {
      const auto& head = layer.heads[hi];
      if (head.mode == AttnMode::Softmax && !opt.quantized) {
        throw ConfigError("softmax heads require quantized evaluation");
      }
      const size_t dqk = head.query.out_dim;
      Mat q(t, dqk), k(t, dqk), v(t, spec.m);
      for (size_t i = 0; i < t; ++i) {
        head.query.apply(i, x.row(i), q.row(i));
        head.key.apply(i, x.row(i), k.row(i));
        head.value.apply(i, x.row(i), v.row(i));
      }

      HeadTrace* ht = opt.capture_trace ? &result.trace.layers[l][hi] : nullptr;

      if (head.mode == AttnMode::Kernel) {
        // f_i = q_i (sum_j k_j v_j^T), prefix-summed under a causal mask.
        Mat s(dqk, spec.m);
        Mat f(t, spec.m);
        if (layer.mask == MaskKind::Causal) {
          for (size_t i = 0; i < t; ++i) {
            for (size_t a = 0; a < dqk; ++a) {
              const Rat& ka = k.at(i, a);
              if (ka.is_zero()) continue;
              for (size_t b = 0; b < spec.m; ++b) {
                const Rat& vb = v.at(i, b);
                if (!vb.is_zero()) s.at(a, b) += ka * vb;
              }
            }
            for (size_t b = 0; b < spec.m; ++b) {
              Rat acc;
              for (size_t a = 0; a < dqk; ++a) {
                const Rat& qa = q.at(i, a);
                if (!qa.is_zero() && !s.at(a, b).is_zero()) acc += qa * s.at(a, b);
              }
              f.at(i, b) = std::move(acc);
            }
          }
        } else {
          for (size_t j = 0; j < t; ++j) {
            for (size_t a = 0; a < dqk; ++a) {
              const Rat& ka = k.at(j, a);
              if (ka.is_zero()) continue;
              for (size_t b = 0; b < spec.m; ++b) {
                const Rat& vb = v.at(j, b);
                if (!vb.is_zero()) s.at(a, b) += ka * vb;
              }
            }
          }
          for (size_t i = 0; i < t; ++i) {
            for (size_t b = 0; b < spec.m; ++b) {
              Rat acc;
              for (size_t a = 0; a < dqk; ++a) {
                const Rat& qa = q.at(i, a);
                if (!qa.is_zero() && !s.at(a, b).is_zero()) acc += qa * s.at(a, b);
              }
              f.at(i, b) = std::move(acc);
            }
          }
        }
        for (size_t i = 0; i < t; ++i) {
          if (opt.quantized) engine_detail::quantize_row(f.row(i), p);
          for (size_t b = 0; b < spec.m; ++b) delta.at(i, b) += f.at(i, b);
        }
        if (ht) ht->available = false;  // no attention matrix exists
        continue;
      }

      // Score matrix for hardmax / softmax heads.
      Mat scores(t, t);
      for (size_t i = 0; i < t; ++i) {
        for (size_t j = 0; j < t; ++j) {
          if (engine_detail::allowed(layer.mask, i, j)) scores.at(i, j) = dot(q.row(i), k.row(j));
        }
      }
      if (ht) {
        ht->available = true;
        ht->weights = Mat(t, t);
      }
      std::vector<Rat> f(spec.m);
      for (size_t i = 0; i < t; ++i) {
        for (auto& r : f) r = Rat(0);
        if (head.mode == AttnMode::Hardmax) {
          engine_detail::hardmax_row(scores, v, layer.mask, i, f, ht ? &ht->weights : nullptr);
          if (opt.quantized) engine_detail::quantize_row(f, p);
        } else {
          engine_detail::softmax_row(scores, v, layer.mask, i, head.temperature, p, f,
                                     ht ? &ht->weights : nullptr);
        }
        for (size_t b = 0; b < spec.m; ++b) delta.at(i, b) += f[b];
      }
    }

    for (size_t i = 0; i < t; ++i) {
      for (size_t b = 0; b < spec.m; ++b) x.at(i, b) += delta.at(i, b);
      if (opt.quantized) engine_detail::quantize_row(x.row(i), p);
    }
  }

  result.output = Mat(t, spec.d_out);
  for (size_t i = 0; i < t; ++i) {
    spec.output_map.apply(i, x.row(i), result.output.row(i));
    if (opt.quantized) engine_detail::quantize_row(result.output.row(i), p);
  }
  if (opt.capture_trace) result.trace.final_residual = std::move(x);
  return result;
}

// Greedy autoregressive decoding for causal specs: evaluate on the prefix
// padded with blank rows, read psi at the last real row, convert it to the
// next raw row, append, repeat. Returns the full raw matrix after `steps`
// appends. Soundness needs every layer causally masked.
inline Mat autoregressive_decode(
    const TransformerSpec& spec, const Mat& prefix, size_t steps,
    const std::function<std::vector<Rat>(size_t next_idx, std::span<const Rat> psi_row)>& readout,
    EvalOptions opt = {}) {
  for (const auto& layer : spec.layers) {
    if (layer.mask != MaskKind::Causal) {
      throw NonCausalSpec("autoregressive_decode: every layer must be causally masked");
    }
  }
  if (prefix.cols() != spec.d_in) throw ConfigError("decode: prefix width must be d_in");
  if (static_cast<int64_t>(prefix.rows() + steps) > spec.n_task) {
    throw ConfigError("decode: prefix plus steps exceeds n_task");
  }
  Mat raw(static_cast<size_t>(spec.n_task), spec.d_in);
  for (size_t r = 0; r < prefix.rows(); ++r) {
    for (size_t c = 0; c < spec.d_in; ++c) raw.at(r, c) = prefix.at(r, c);
  }
  size_t filled = prefix.rows();
  for (size_t step = 0; step < steps; ++step) {
    const EvalResult res = evaluate(spec, raw, opt);
    const auto next = readout(filled + 1, res.output.row(filled));
    if (next.size() != spec.d_in) throw ConfigError("decode: readout width must be d_in");
    for (size_t c = 0; c < spec.d_in; ++c) raw.at(filled, c) = next[c];
    ++filled;
  }
  return raw;
}

}  // namespace mpca
