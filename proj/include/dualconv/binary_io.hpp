#pragma once

// Flat binary weight files shared by patterns, dual and primal weights:
//
//   u64 count | u64 dim | f64 body[...]      (all little-endian)
//
// What the body holds depends on the file kind; readers check its length.

#include "error.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace dualconv::binio {

struct FlatFile {
  std::uint64_t count = 0;
  std::uint64_t dim = 0;
  std::vector<double> body;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf, 8);
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return true;
}

}  // namespace detail

inline void write_flat(const std::string& path, std::uint64_t count, std::uint64_t dim,
                       std::span<const double> body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  detail::put_u64(os, count);
  detail::put_u64(os, dim);
  for (double v : body) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline FlatFile read_flat(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  FlatFile f;
  if (!detail::get_u64(is, f.count) || !detail::get_u64(is, f.dim)) {
    throw TruncatedFileError(path + ": truncated header");
  }
  std::uint64_t bits = 0;
  while (detail::get_u64(is, bits)) f.body.push_back(std::bit_cast<double>(bits));
  if (is.gcount() != 0) throw TruncatedFileError(path + ": trailing partial value");
  return f;
}

inline void expect_body(const FlatFile& f, std::uint64_t expected, const std::string& what) {
  if (f.body.size() != expected) {
    throw TruncatedFileError(what + ": body has " + std::to_string(f.body.size()) + " values, expected " +
                             std::to_string(expected));
  }
}

}  // namespace dualconv::binio
