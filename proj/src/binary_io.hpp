#pragma once

// Little-endian binary helpers shared by the patch cache and checkpoint
// formats. Readers throw FormatError on truncation.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "incseg/error.hpp"

namespace incseg::detail {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(std::span<const float> v) { bytes(v.data(), v.size() * sizeof(float)); }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  template <typename T>
  T pod() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(what_ + ": truncated");
  }
  std::string str(std::size_t max_len = 1u << 24) {
    const auto n = pod<std::uint32_t>();
    if (n > max_len) throw FormatError(what_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }

 private:
  std::istream& in_;
  std::string what_;
};

}  // namespace incseg::detail
