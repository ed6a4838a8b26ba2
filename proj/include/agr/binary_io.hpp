#pragma once

// Little-endian primitive encoding for the on-disk formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "agr/tensor.hpp"

namespace agr::io {

template <typename U>
  requires std::is_unsigned_v<U>
void write_le(std::ostream& os, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
  requires std::is_unsigned_v<U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw Error("unexpected end of file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void write_u8(std::ostream& os, std::uint8_t v) { write_le<std::uint8_t>(os, v); }
inline void write_u32(std::ostream& os, std::uint32_t v) { write_le<std::uint32_t>(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le<std::uint64_t>(os, v); }
inline void write_i32(std::ostream& os, std::int32_t v) { write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
inline void write_f32(std::ostream& os, float v) { write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
inline void write_f64(std::ostream& os, double v) { write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
inline std::int32_t read_i32(std::istream& is) { return std::bit_cast<std::int32_t>(read_le<std::uint32_t>(is)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1 << 20) {
  const std::uint32_t n = read_u32(is);
  if (n > max_len) throw Error("string field of " + std::to_string(n) + " bytes exceeds limit");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw Error("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view what) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw Error(std::string(what) + ": bad magic, expected \"" + std::string(magic) + "\"");
  }
}

}  // namespace agr::io
