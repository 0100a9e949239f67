#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "hdrfuse/error.hpp"

namespace hdrfuse::detail {

inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                               std::string_view where) {
  if (!j.is_object()) throw Error(ErrorKind::BadConfig, std::string(where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw Error(ErrorKind::BadConfig, "unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace hdrfuse::detail
