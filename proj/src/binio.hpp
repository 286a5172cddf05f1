#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "ftex/error.hpp"

namespace ftex::binio {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline void put_floats(std::ostream& out, std::span<const float> values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

// Reads exactly n bytes or throws; `what` names the field for the message.
inline void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void get_floats(std::istream& in, std::span<float> dst, const char* what) {
  for (float& f : dst) f = std::bit_cast<float>(get_u32(in, what));
}

inline void expect_magic(std::istream& in, const char (&magic)[9]) {
  char got[8];
  read_exact(in, got, 8, "magic");
  if (std::memcmp(got, magic, 8) != 0) {
    throw FormatError(std::string("bad magic: expected ") + magic);
  }
}

}  // namespace ftex::binio
