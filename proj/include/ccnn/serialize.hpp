#pragma once

// Little-endian binary encoding shared by the model (CCNN) and feature
// (CCNF) files. Numeric arrays carry a dtype tag and row-major dims; every
// file ends with a CRC32 over all preceding bytes.

#include "ccnn/common.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace ccnn::io {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i64(std::int64_t v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s);
  }

  template <typename Derived>
  void matrix(const Eigen::MatrixBase<Derived>& m, DType dtype = DType::f64) {
    u8(static_cast<std::uint8_t>(dtype));
    u64(std::uint64_t(m.rows()));
    u64(std::uint64_t(m.cols()));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) {
        if (dtype == DType::f32)
          f32(static_cast<float>(m(i, j)));
        else
          f64(static_cast<double>(m(i, j)));
      }
  }

  /// Appends the CRC32 trailer and returns the finished buffer.
  std::vector<std::uint8_t> finish() {
    const std::uint32_t crc = crc32_of(buf_.data(), buf_.size());
    u32(crc);
    return std::move(buf_);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> data, std::string what = "file") : buf_(std::move(data)), what_(std::move(what)) {}

  /// Verifies and strips the CRC32 trailer.
  void verify_checksum() {
    if (buf_.size() < 4) throw DataError(what_ + ": truncated (no checksum)");
    const std::size_t body = buf_.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf_[body + std::size_t(i)]) << (8 * i);
    if (crc32_of(buf_.data(), body) != stored) throw ChecksumError(what_ + ": checksum mismatch (file is corrupted)");
    end_ = body;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return std::uint8_t(le(1)); }
  std::uint16_t u16() { return std::uint16_t(le(2)); }
  std::uint32_t u32() { return std::uint32_t(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int64_t i64() { return std::bit_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return bytes(checked_count(u64(), 1)); }

  Matrix matrix() {
    const auto tag = u8();
    if (tag != std::uint8_t(DType::f32) && tag != std::uint8_t(DType::f64))
      throw DataError(what_ + ": unknown dtype tag " + std::to_string(tag));
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    const std::size_t width = tag == std::uint8_t(DType::f32) ? 4 : 8;
    if (cols != 0 && rows > (remaining() / width) / cols) throw DataError(what_ + ": truncated array payload");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = tag == std::uint8_t(DType::f32) ? double(f32()) : f64();
    return m;
  }

  Vector vector() {
    Matrix m = matrix();
    if (m.cols() != 1 && m.size() != 0) throw DataError(what_ + ": expected a column vector");
    return m.reshaped();
  }

  std::size_t remaining() const { return end() - pos_; }
  bool at_end() const { return pos_ == end(); }
  const std::string& what() const { return what_; }

  std::size_t checked_count(std::uint64_t n, std::size_t unit) const {
    if (unit != 0 && n > remaining() / unit) throw DataError(what_ + ": truncated (length field exceeds payload)");
    return std::size_t(n);
  }

 private:
  std::size_t end() const { return end_ == npos ? buf_.size() : end_; }
  void need(std::size_t n) const {
    if (n > remaining()) throw DataError(what_ + ": truncated");
  }
  std::uint64_t le(int n) {
    need(std::size_t(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }

  static constexpr std::size_t npos = std::size_t(-1);
  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = npos;
};

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_all(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace ccnn::io
