#pragma once

// Little-endian primitive streams shared by the checkpoint and dataset formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "rttdp/errors.hpp"

namespace rttdp::detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}
  template <typename T>
  T get() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw FormatError(what_ + ": truncated");
    return to_little(v);
  }
  std::string str(std::size_t limit = 1 << 16) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw FormatError(what_ + ": string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) throw FormatError(what_ + ": truncated");
    return s;
  }

 private:
  std::istream& is_;
  std::string what_;
};

}  // namespace rttdp::detail
