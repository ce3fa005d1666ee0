#pragma once

// Little-endian binary encoding helpers shared by the checkpoint, datastore
// and index file formats.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

#include "knnlm/error.hpp"

namespace knnlm::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }

  void put_bytes(std::string_view s) { buf_.append(s); }

  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

/// Bounds-checked reader; every overrun is reported as a data error.
class Reader {
 public:
  Reader(std::string_view bytes, std::string what)
      : data_(bytes), what_(std::move(what)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out) {
    auto s = take(out.size_bytes());
    std::memcpy(out.data(), s.data(), s.size());
  }

  std::string_view get_bytes(std::size_t n) { return take(n); }

  std::string get_string(std::size_t max_len = 1u << 30) {
    auto n = get<std::uint32_t>();
    if (n > max_len) fail_data(what_ + ": string length out of range");
    return std::string(take(n));
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void expect_end() const {
    if (remaining() != 0) fail_data(what_ + ": trailing bytes");
  }

 private:
  std::string_view take(std::size_t n) {
    if (n > remaining()) fail_data(what_ + ": truncated file");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

/// Writes via a temporary sibling and renames, so readers never observe a
/// partially written artifact.
inline void write_file(const std::string& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail_data("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

/// Shortest decimal text that reads back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace knnlm::io
