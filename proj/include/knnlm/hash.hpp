#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "knnlm/error.hpp"

namespace knnlm {

/// 256-bit content hash (SHA-256) identifying an artifact by its bytes.
using Hash = std::array<std::uint8_t, 32>;

inline Hash sha256(std::span<const std::uint8_t> bytes) {
  Hash out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(),
                 nullptr) != 1 ||
      len != out.size()) {
    throw std::runtime_error("sha256 failed");
  }
  return out;
}

inline Hash sha256(std::string_view bytes) {
  return sha256(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

inline Hash sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return sha256(bytes);
}

inline std::string to_hex(const Hash& h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : h) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

inline Hash hash_from_hex(std::string_view hex) {
  if (hex.size() != 64) fail_data("malformed hash: " + std::string(hex));
  auto nibble = [&](char c) -> std::uint8_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
    fail_data("malformed hash: " + std::string(hex));
  };
  Hash h{};
  for (std::size_t i = 0; i < h.size(); ++i)
    h[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
  return h;
}

}  // namespace knnlm
