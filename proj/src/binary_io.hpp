#pragma once

// Little-endian primitive readers/writers shared by the binary containers.

#include "paln/error.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

namespace paln::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes.data(), sizeof(T));
  }
  return value;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed");
    written_ += n;
  }

  template <typename T>
  void put(T value) {
    value = to_little(value);
    bytes(&value, sizeof(T));
  }

  void floats(const float* src, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(src, n * sizeof(float));
    } else {
      for (std::size_t i = 0; i < n; ++i) put(src[i]);
    }
  }

  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  std::uint64_t finish() {
    out_.flush();
    if (!out_) throw IoError("flush failed");
    return written_;
  }

 private:
  std::ofstream out_;
  std::uint64_t written_ = 0;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("truncated payload in " + path_);
  }

  template <typename T>
  T get() {
    T value;
    bytes(&value, sizeof(T));
    return to_little(value);
  }

  void floats(float* dst, std::size_t n) {
    bytes(dst, n * sizeof(float));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < n; ++i) dst[i] = to_little(dst[i]);
  }

  std::string str(std::uint32_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError("string length out of range in " + path_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void expect_magic(const char (&magic)[5]) {
    char got[4];
    in_.read(got, 4);
    if (in_.gcount() != 4 || std::memcmp(got, magic, 4) != 0)
      throw FormatError(std::string("bad magic in ") + path_ + " (expected " + magic + ")");
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace paln::detail
