#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "blocr/common.hpp"

namespace blocr::io {

// All binary formats are little-endian on disk regardless of host order.

namespace detail {
template <typename T>
inline T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
  }
  return v;
}
}  // namespace detail

class BinaryWriter {
public:
  explicit BinaryWriter(const std::filesystem::path& path)
      : path_(path.string()), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw validation_error("cannot open for writing: " + path_);
  }

  void magic(const char tag[4]) { out_.write(tag, 4); }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) { raw(detail::to_little(v)); }
  void u64(std::uint64_t v) { raw(detail::to_little(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void f64_array(const double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) f64(data[i]);
  }

  void close() {
    out_.close();
    if (!out_) throw validation_error("write failed: " + path_);
  }

private:
  template <typename T>
  void raw(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
public:
  explicit BinaryReader(const std::filesystem::path& path)
      : path_(path.string()), in_(path, std::ios::binary) {
    if (!in_) throw validation_error("cannot open for reading: " + path_);
  }

  void expect_magic(const char tag[4], const std::string& what) {
    char buf[4] = {};
    in_.read(buf, 4);
    if (!in_ || std::memcmp(buf, tag, 4) != 0)
      throw validation_error(what + ": bad magic in " + path_);
  }
  std::uint8_t u8() {
    char c;
    in_.get(c);
    check();
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() { return detail::to_little(raw<std::uint32_t>()); }
  std::uint64_t u64() { return detail::to_little(raw<std::uint64_t>()); }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void f64_array(double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) data[i] = f64();
  }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

private:
  template <typename T>
  T raw() {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  void check() {
    if (!in_) throw validation_error("truncated or unreadable file: " + path_);
  }
  std::string path_;
  std::ifstream in_;
};

// Round-trip exact double formatting for CSV output.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return {buf};
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw validation_error("write failed: " + path.string());
}

// FNV-1a; used for config/input hashes in run manifests.
inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(0xCBF29CE484222325ULL, s.data(), s.size());
}

}  // namespace blocr::io
