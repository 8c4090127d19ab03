#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpca/errors.hpp"
#include "mpca/rational.hpp"

namespace mpca {

using Json = nlohmann::json;

// Rationals travel through JSON as canonical "num/den" strings.
inline Json rat_to_json(const Rat& r) { return Json(r.to_string()); }

inline Rat rat_from_json(const Json& j) {
  if (j.is_number_integer()) return Rat(j.get<int64_t>());
  if (!j.is_string()) throw ConfigError("expected rational as \"num/den\" string");
  try {
    return Rat::from_string(j.get<std::string>());
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad rational literal: ") + e.what());
  }
}

inline Json rats_to_json(std::span<const Rat> v) {
  Json arr = Json::array();
  for (const auto& r : v) arr.push_back(rat_to_json(r));
  return arr;
}

inline std::vector<Rat> rats_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("expected array of rationals");
  std::vector<Rat> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(rat_from_json(e));
  return out;
}

template <typename T>
T require_field(const Json& j, const std::string& key) {
  if (!j.contains(key)) throw ConfigError("missing field: " + key);
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw ConfigError("bad field " + key + ": " + e.what());
  }
}

}  // namespace mpca
