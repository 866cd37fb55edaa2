#pragma once

// Little-endian primitive readers/writers over std streams.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "laff/errors.hpp"

namespace laff::detail {

template <typename T>
T byteswap_if_needed(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

template <typename T>
void write_le(std::ostream& os, T value) {
  value = byteswap_if_needed(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

/// Reader that reports the byte offset of every failure.
class LeReader {
 public:
  LeReader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  template <typename T>
  T read(const char* what) {
    T value{};
    const auto at = offset_;
    is_.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T))) fail(at, std::string("truncated ") + what);
    offset_ += sizeof(T);
    return byteswap_if_needed(value);
  }

  std::string read_bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    const auto at = offset_;
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n)) fail(at, std::string("truncated ") + what);
    offset_ += n;
    return s;
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  std::uint64_t offset() const { return offset_; }

  [[noreturn]] void fail(std::uint64_t at, const std::string& msg) const {
    throw FormatError(path_ + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  std::istream& is_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

}  // namespace laff::detail
