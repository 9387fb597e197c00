#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include <json.hpp>

namespace v2f {

/// FNV-1a over the canonical JSON dump, hex encoded.
inline std::string hash_json(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace v2f
