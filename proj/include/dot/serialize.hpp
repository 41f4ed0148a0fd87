#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dot/tensor.hpp"

namespace dot {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw FormatError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

// Tensor blob: magic "DOTT", u32 rank, u64 extents, float64 payload.
// All fields little-endian.
inline void write_tensor_blob(std::ostream& os, const Tensor& t) {
  os.write("DOTT", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_u64(os, e);
  for (double v : t.data()) detail::write_f64(os, v);
}

inline Tensor read_tensor_blob(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DOTT", 4) != 0)
    throw FormatError("bad tensor magic (expected \"DOTT\")");
  const std::uint32_t rank = detail::read_u32(is);
  if (rank > 8) throw FormatError("implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(detail::read_u64(is));
    if (e == 0) throw FormatError("zero extent in tensor shape");
  }
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = detail::read_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

// Container file: magic "DOTF", u32 version, u64 manifest length, manifest
// bytes (JSON text), u32 blob count, then (u32 name length, name, tensor
// blob) per entry.
struct NamedBlobs {
  std::string manifest;
  std::vector<std::pair<std::string, Tensor>> blobs;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : blobs)
      if (n == name) return t;
    throw FormatError("missing blob \"" + name + "\"");
  }
};

inline void write_container(std::ostream& os, const NamedBlobs& c) {
  os.write("DOTF", 4);
  detail::write_u32(os, 1);
  detail::write_u64(os, c.manifest.size());
  os.write(c.manifest.data(), static_cast<std::streamsize>(c.manifest.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(c.blobs.size()));
  for (const auto& [name, tensor] : c.blobs) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_blob(os, tensor);
  }
  if (!os) throw FormatError("write failure");
}

inline NamedBlobs read_container(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DOTF", 4) != 0)
    throw FormatError("bad container magic (expected \"DOTF\")");
  const std::uint32_t version = detail::read_u32(is);
  if (version != 1)
    throw FormatError("unsupported container version " +
                      std::to_string(version));
  const std::uint64_t mlen = detail::read_u64(is);
  NamedBlobs c;
  c.manifest.resize(mlen);
  if (mlen && !is.read(c.manifest.data(), static_cast<std::streamsize>(mlen)))
    throw FormatError("unexpected end of file in manifest");
  const std::uint32_t count = detail::read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = detail::read_u32(is);
    std::string name(nlen, '\0');
    if (nlen && !is.read(name.data(), nlen))
      throw FormatError("unexpected end of file in blob name");
    Tensor t = read_tensor_blob(is);
    c.blobs.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

inline void write_container_file(const std::string& path, const NamedBlobs& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  write_container(os, c);
}

inline NamedBlobs read_container_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  return read_container(is);
}

}  // namespace dot
