#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "infolens/error.hpp"
#include "infolens/linalg.hpp"

namespace infolens {

namespace fs = std::filesystem;

// IMAT1 layout: "IMAT1", version byte, rows u32 LE, cols u32 LE, row-major f64 LE payload.
inline constexpr std::string_view kImatMagic = "IMAT1";
inline constexpr std::uint8_t kImatVersion = 1;
inline constexpr std::size_t kImatHeaderBytes = 14;

using Bytes = std::vector<unsigned char>;

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline Bytes encode_matrix(const Matrix& m) {
  if (!m.allFinite()) fail(ErrorCode::invalid_data, "matrix has non-finite entries");
  if (m.rows() > 0xFFFFFFFFLL || m.cols() > 0xFFFFFFFFLL) fail(ErrorCode::invalid_data, "matrix too large for IMAT1");
  Bytes out;
  out.reserve(kImatHeaderBytes + static_cast<std::size_t>(m.size()) * 8);
  out.insert(out.end(), kImatMagic.begin(), kImatMagic.end());
  out.push_back(kImatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_u64(out, std::bit_cast<std::uint64_t>(m(r, c)));
  return out;
}

inline Matrix decode_matrix(const Bytes& bytes, std::string_view what = "buffer") {
  const std::string where(what);
  if (bytes.size() < kImatHeaderBytes)
    fail(ErrorCode::corrupt_file, where + ": expected at least " + std::to_string(kImatHeaderBytes) +
                                      " header bytes, got " + std::to_string(bytes.size()));
  if (!std::equal(kImatMagic.begin(), kImatMagic.end(), bytes.begin()))
    fail(ErrorCode::corrupt_file, where + ": bad magic");
  if (bytes[5] != kImatVersion)
    fail(ErrorCode::corrupt_file, where + ": unsupported version " + std::to_string(bytes[5]));
  const std::uint64_t rows = detail::get_u32(bytes.data() + 6);
  const std::uint64_t cols = detail::get_u32(bytes.data() + 10);
  const std::uint64_t expected = kImatHeaderBytes + rows * cols * 8;
  if (bytes.size() != expected)
    fail(ErrorCode::corrupt_file, where + ": expected " + std::to_string(expected) + " bytes for " +
                                      std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                                      std::to_string(bytes.size()));
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const unsigned char* p = bytes.data() + kImatHeaderBytes;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c, p += 8) m(r, c) = std::bit_cast<double>(detail::get_u64(p));
  return m;
}

inline Bytes read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::missing_input, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temp file, then renames over the target.
inline void write_bytes_atomic(const fs::path& path, const void* data, std::size_t size) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io_failure, "cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) fail(ErrorCode::io_failure, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorCode::io_failure, "cannot rename into " + path.string());
  }
}

inline void write_text_atomic(const fs::path& path, std::string_view text) {
  write_bytes_atomic(path, text.data(), text.size());
}

inline void write_matrix(const fs::path& path, const Matrix& m) {
  const Bytes bytes = encode_matrix(m);
  write_bytes_atomic(path, bytes.data(), bytes.size());
}

inline Matrix read_matrix(const fs::path& path) { return decode_matrix(read_bytes(path), path.string()); }

inline std::uint64_t fnv1a64_bytes(const Bytes& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(v));
  return buf.data();
}

inline std::string file_checksum(const fs::path& path) { return hex64(fnv1a64_bytes(read_bytes(path))); }

/// Column vector <-> n x 1 matrix helpers for label files.
inline Matrix as_column(std::span<const int> values) {
  Matrix m(static_cast<Eigen::Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = values[i];
  return m;
}

inline std::vector<int> to_ints(const Matrix& m) {
  if (m.cols() != 1) fail(ErrorCode::invalid_data, "expected a single-column matrix");
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double v = m(i, 0);
    if (v != std::floor(v)) fail(ErrorCode::invalid_data, "non-integer label at row " + std::to_string(i));
    out[static_cast<std::size_t>(i)] = static_cast<int>(v);
  }
  return out;
}

}  // namespace infolens
