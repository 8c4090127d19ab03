#pragma once

// Index-aware elementwise maps: the building block for input embeddings,
// per-head query/key/value functions, and output readouts. Each map carries a
// registry kind plus JSON parameters so specs can round-trip through files;
// the "custom-test" kind is the one deliberate exception (function injected
// by test code, never serialized).

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpca/json_util.hpp"
#include "mpca/linalg.hpp"

namespace mpca {

using ElementwiseFn = std::function<void(size_t idx, std::span<const Rat> in, std::span<Rat> out)>;

struct Elementwise {
  std::string kind;
  Json params = Json::object();
  size_t out_dim = 0;
  ElementwiseFn fn;

  bool serializable() const { return kind != "custom-test"; }

  void apply(size_t idx, std::span<const Rat> in, std::span<Rat> out) const {
    if (out.size() != out_dim) throw ConfigError("elementwise: output span size mismatch");
    for (auto& r : out) r = Rat(0);
    fn(idx, in, out);
  }
};

inline Elementwise make_custom(size_t out_dim, ElementwiseFn fn) {
  return {"custom-test", Json::object(), out_dim, std::move(fn)};
}

class ElementwiseRegistry {
 public:
  using Factory = std::function<Elementwise(const Json& params)>;

  static void add(const std::string& kind, Factory f) { table()[kind] = std::move(f); }
  static bool has(const std::string& kind) { return table().count(kind) > 0; }

  static Elementwise make(const std::string& kind, const Json& params) {
    const auto it = table().find(kind);
    if (it == table().end()) throw ConfigError("unknown elementwise kind: " + kind);
    Elementwise e = it->second(params);
    e.kind = kind;
    e.params = params;
    return e;
  }

 private:
  static std::map<std::string, Factory>& table() {
    static std::map<std::string, Factory> t;
    return t;
  }
};

// Registration helper for use at namespace scope in module headers.
struct ElementwiseRegistration {
  ElementwiseRegistration(const std::string& kind, ElementwiseRegistry::Factory f) {
    if (!ElementwiseRegistry::has(kind)) ElementwiseRegistry::add(kind, std::move(f));
  }
};

// --------------------------------------------------------------------------
// Grid trigonometry: cos/sin snapped to multiples of 2^-grid_bits. Hardmax
// margins certified elsewhere are always rechecked against these exact grid
// values, so the rounding here never silently changes a selection.

inline Rat grid_cos(long double angle, const Rat& amplitude, int grid_bits) {
  return Rat::dyadic_round(amplitude.to_long_double() * std::cos(angle), grid_bits);
}
inline Rat grid_sin(long double angle, const Rat& amplitude, int grid_bits) {
  return Rat::dyadic_round(amplitude.to_long_double() * std::sin(angle), grid_bits);
}
inline long double tau() { return 2.0L * std::numbers::pi_v<long double>; }

namespace builtin_elementwise {

inline Elementwise identity(const Json& params) {
  const auto dim = require_field<size_t>(params, "dim");
  Elementwise e;
  e.out_dim = dim;
  e.fn = [dim](size_t, std::span<const Rat> in, std::span<Rat> out) {
    if (in.size() != dim) throw ConfigError("identity: input dim mismatch");
    for (size_t i = 0; i < dim; ++i) out[i] = in[i];
  };
  return e;
}

inline Elementwise zero(const Json& params) {
  Elementwise e;
  e.out_dim = require_field<size_t>(params, "dim");
  e.fn = [](size_t, std::span<const Rat>, std::span<Rat>) {};
  return e;
}

inline Elementwise constant(const Json& params) {
  auto values = rats_from_json(params.at("values"));
  Elementwise e;
  e.out_dim = values.size();
  e.fn = [values = std::move(values)](size_t, std::span<const Rat>, std::span<Rat> out) {
    for (size_t i = 0; i < values.size(); ++i) out[i] = values[i];
  };
  return e;
}

// out[j] = in[indices[j]].
inline Elementwise project(const Json& params) {
  auto idxs = require_field<std::vector<size_t>>(params, "indices");
  Elementwise e;
  e.out_dim = idxs.size();
  e.fn = [idxs = std::move(idxs)](size_t, std::span<const Rat> in, std::span<Rat> out) {
    for (size_t i = 0; i < idxs.size(); ++i) {
      if (idxs[i] >= in.size()) throw ConfigError("project: index out of range");
      out[i] = in[idxs[i]];
    }
  };
  return e;
}

// [a*cos(2*pi*idx/period), a*sin(2*pi*idx/period)] on the dyadic grid.
inline Elementwise sinusoidal_position(const Json& params) {
  const auto period = require_field<int64_t>(params, "period");
  if (period < 1) throw ConfigError("sinusoidal-position: period must be >= 1");
  const Rat amp = params.contains("amplitude") ? rat_from_json(params.at("amplitude")) : Rat(1);
  const int grid_bits = params.value("grid_bits", 24);
  Elementwise e;
  e.out_dim = 2;
  e.fn = [period, amp, grid_bits](size_t idx, std::span<const Rat>, std::span<Rat> out) {
    const long double angle = tau() * static_cast<long double>(idx % static_cast<size_t>(period)) /
                              static_cast<long double>(period);
    out[0] = grid_cos(angle, amp, grid_bits);
    out[1] = grid_sin(angle, amp, grid_bits);
  };
  return e;
}

// Row lookup keyed by the integer value of in[0]; rows are indexed 1..#rows,
// anything else falls back to the default row.
inline Elementwise table_lookup(const Json& params) {
  std::vector<std::vector<Rat>> rows;
  for (const auto& r : params.at("table")) rows.push_back(rats_from_json(r));
  if (rows.empty()) throw ConfigError("table-lookup: empty table");
  std::vector<Rat> fallback = params.contains("default")
                                  ? rats_from_json(params.at("default"))
                                  : std::vector<Rat>(rows[0].size());
  const size_t dim = rows[0].size();
  for (const auto& r : rows) {
    if (r.size() != dim) throw ConfigError("table-lookup: ragged table");
  }
  if (fallback.size() != dim) throw ConfigError("table-lookup: default width mismatch");
  Elementwise e;
  e.out_dim = dim;
  e.fn = [rows = std::move(rows), fallback = std::move(fallback)](
             size_t, std::span<const Rat> in, std::span<Rat> out) {
    if (in.empty()) throw ConfigError("table-lookup: needs an input coordinate");
    const Rat& v = in[0];
    size_t key = 0;
    if (v.is_integer() && v.sign() > 0) {
      const int64_t k = v.floor_i64();
      if (k >= 1 && k <= static_cast<int64_t>(rows.size())) key = static_cast<size_t>(k);
    }
    const auto& row = key == 0 ? fallback : rows[key - 1];
    for (size_t i = 0; i < row.size(); ++i) out[i] = row[i];
  };
  return e;
}

inline Elementwise custom_test(const Json&) {
  throw ConfigError("custom-test elementwise maps cannot be built from parameters");
}

}  // namespace builtin_elementwise

namespace {
const bool kBuiltinElementwiseRegistered = [] {
  ElementwiseRegistry::add("identity", builtin_elementwise::identity);
  ElementwiseRegistry::add("zero", builtin_elementwise::zero);
  ElementwiseRegistry::add("constant", builtin_elementwise::constant);
  ElementwiseRegistry::add("project", builtin_elementwise::project);
  ElementwiseRegistry::add("sinusoidal-position", builtin_elementwise::sinusoidal_position);
  ElementwiseRegistry::add("table-lookup", builtin_elementwise::table_lookup);
  ElementwiseRegistry::add("custom-test", builtin_elementwise::custom_test);
  return true;
}();
}  // namespace

}  // namespace mpca
