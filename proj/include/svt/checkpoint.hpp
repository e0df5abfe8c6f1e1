#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "svt/io_bytes.hpp"
#include "svt/optim.hpp"
#include "svt/tensor.hpp"

namespace svt {

// On-disk layout (all integers and f32 payload little-endian):
//   "SVTC" | u32 version | u32 meta_len | meta bytes (JSON text)
//   | u32 entry_count | per entry:
//       u16 name_len | name | u8 dtype(0=f32) | u8 rank | rank*u32 dims
//       | numel * f32
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string meta;  // config snapshot / stage / epoch / seed as JSON text
  struct Entry {
    std::string name;
    Shape dims;
    std::vector<float> data;
  };
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

inline void write_f32s(std::ostream& f, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    f.write(reinterpret_cast<const char*>(v.data()),
            std::streamsize(v.size() * 4));
  } else {
    for (float x : v) {
      auto u = std::bit_cast<std::uint32_t>(x);
      unsigned char b[4] = {(unsigned char)(u & 0xff),
                            (unsigned char)(u >> 8 & 0xff),
                            (unsigned char)(u >> 16 & 0xff),
                            (unsigned char)(u >> 24 & 0xff)};
      f.write(reinterpret_cast<char*>(b), 4);
    }
  }
}

inline void read_f32s(std::istream& f, std::vector<float>& v,
                      const std::string& path) {
  if constexpr (std::endian::native == std::endian::little) {
    f.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * 4));
    if (!f) throw io_error("checkpoint '" + path + "' truncated in payload");
  } else {
    for (auto& x : v) {
      unsigned char b[4];
      f.read(reinterpret_cast<char*>(b), 4);
      if (!f) throw io_error("checkpoint '" + path + "' truncated in payload");
      x = std::bit_cast<float>(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
                               std::uint32_t(b[2]) << 16 |
                               std::uint32_t(b[3]) << 24);
    }
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::set<std::string> names;
  for (const auto& e : ck.entries) {
    if (!names.insert(e.name).second)
      throw io_error("checkpoint has duplicate entry name '" + e.name + "'");
    std::size_t n = 1;
    for (int d : e.dims) n *= (std::size_t)std::max(d, 0);
    if (e.dims.size() > 255 || n != e.data.size())
      throw shape_error("checkpoint entry '" + e.name + "': dims " +
                        shape_str(e.dims) + " do not cover " +
                        std::to_string(e.data.size()) + " values");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f.write("SVTC", 4);
  detail::write_u32(f, ck.version);
  detail::write_u32(f, std::uint32_t(ck.meta.size()));
  f.write(ck.meta.data(), std::streamsize(ck.meta.size()));
  detail::write_u32(f, std::uint32_t(ck.entries.size()));
  for (const auto& e : ck.entries) {
    detail::write_u16(f, std::uint16_t(e.name.size()));
    f.write(e.name.data(), std::streamsize(e.name.size()));
    f.put(char(0));  // dtype tag: f32
    f.put(char(e.dims.size()));
    for (int d : e.dims) detail::write_u32(f, std::uint32_t(d));
    detail::write_f32s(f, e.data);
  }
  if (!f) throw io_error("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "SVTC")
    throw io_error("'" + path + "' has no SVTC magic");
  Checkpoint ck;
  ck.version = detail::read_u32(f, path);
  if (ck.version != kCheckpointVersion)
    throw io_error("checkpoint '" + path + "' is format version " +
                   std::to_string(ck.version) + ", this build reads version " +
                   std::to_string(kCheckpointVersion));
  const auto meta_len = detail::read_u32(f, path);
  ck.meta.resize(meta_len);
  f.read(ck.meta.data(), meta_len);
  if (!f) throw io_error("checkpoint '" + path + "' truncated in metadata");
  const auto count = detail::read_u32(f, path);
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    const auto name_len = detail::read_u16(f, path);
    e.name.resize(name_len);
    f.read(e.name.data(), name_len);
    const int dtype = f.get();
    const int rank = f.get();
    if (!f || rank < 0)
      throw io_error("checkpoint '" + path + "' truncated in entry header");
    if (dtype != 0)
      throw io_error("checkpoint '" + path + "' entry '" + e.name +
                     "' has dtype tag " + std::to_string(dtype) +
                     ", this build reads f32 (0)");
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      e.dims.push_back(int(detail::read_u32(f, path)));
      n *= (std::size_t)e.dims.back();
    }
    e.data.resize(n);
    detail::read_f32s(f, e.data, path);
    if (!names.insert(e.name).second)
      throw io_error("checkpoint '" + path + "' has duplicate entry name '" +
                     e.name + "'");
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

// snapshot named parameters into checkpoint entries
inline Checkpoint checkpoint_from(const Params<float>& params,
                                  std::string meta) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  ck.entries.reserve(params.size());
  for (const auto& p : params)
    ck.entries.push_back({p.name, p.t->shape, p.t->data});
  return ck;
}

// copy entries into an existing parameter list, bit-exact; every parameter
// must be found with matching shape (extra checkpoint entries are allowed)
inline void load_into(const Checkpoint& ck, Params<float>& params,
                      const std::string& prefix = "") {
  for (auto& p : params) {
    const auto* e = ck.find(prefix + p.name);
    if (!e)
      throw io_error("checkpoint is missing tensor '" + prefix + p.name + "'");
    if (e->dims != p.t->shape)
      throw shape_error("checkpoint tensor '" + prefix + p.name + "' is " +
                        shape_str(e->dims) + ", model wants " +
                        shape_str(p.t->shape));
    p.t->data = e->data;
  }
}

}  // namespace svt
