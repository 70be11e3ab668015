#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "upc/errors.hpp"

namespace upc {

// Rejects any key of `obj` not in `allowed`, naming it and its section.
inline void check_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                       const std::string& section) {
  if (!obj.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || a == item.key();
    if (!ok) throw ConfigError("unknown config key '" + section + "." + item.key() + "'");
  }
}

// Reads obj[key] into out when present; type errors become ConfigError.
template <class T>
void read_key(const nlohmann::json& obj, const std::string& key, T& out,
              const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

}  // namespace upc
