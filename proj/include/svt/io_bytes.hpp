#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "svt/tensor.hpp"

namespace svt::detail {

inline std::uint32_t read_u32(std::istream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw io_error("'" + path + "' truncated reading u32");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void write_u32(std::ostream& f, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff),
                        (unsigned char)(v >> 8 & 0xff),
                        (unsigned char)(v >> 16 & 0xff),
                        (unsigned char)(v >> 24 & 0xff)};
  f.write(reinterpret_cast<char*>(b), 4);
}

inline void write_u16(std::ostream& f, std::uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
  f.write(reinterpret_cast<char*>(b), 2);
}

inline std::uint16_t read_u16(std::istream& f, const std::string& path) {
  unsigned char b[2];
  f.read(reinterpret_cast<char*>(b), 2);
  if (!f) throw io_error("'" + path + "' truncated reading u16");
  return std::uint16_t(b[0] | b[1] << 8);
}

}  // namespace svt::detail
