#ifndef SHORTLVLM_HASH_HPP
#define SHORTLVLM_HASH_HPP

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "shortlvlm/error.hpp"

namespace shortlvlm {

/// 64-bit FNV-1a. Content fingerprint, not a security primitive.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string content_digest(std::string_view bytes) { return "fnv1a64:" + hex64(fnv1a64(bytes)); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("io", "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("io", "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("io", "short write to '" + path + "'");
}

inline std::string file_digest(const std::string& path) { return content_digest(read_file(path)); }

}  // namespace shortlvlm

#endif  // SHORTLVLM_HASH_HPP
