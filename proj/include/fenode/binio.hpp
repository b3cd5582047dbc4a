#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "fenode/error.hpp"

namespace fenode {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swaps");

/// Little-endian binary writer over a growable buffer. Files are written in
/// one shot so a failed run never leaves a half-written artifact behind.
class BinWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { append(&v, sizeof v); }
  void u64(std::uint64_t v) { append(&v, sizeof v); }
  void i32(std::int32_t v) { append(&v, sizeof v); }
  void f64(double v) { append(&v, sizeof v); }
  void f64_span(std::span<const double> v) { append(v.data(), v.size() * sizeof(double)); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  const std::vector<char>& buffer() const { return buf_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("short write: " + path.string());
  }

 private:
  void append(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char> buf_;
};

/// Little-endian reader over an in-memory file image. Every read is
/// bounds-checked; running off the end means a truncated or corrupt file.
class BinReader {
 public:
  explicit BinReader(std::vector<char> data, std::string name)
      : data_(std::move(data)), name_(std::move(name)) {}

  static BinReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return BinReader(std::move(data), path.string());
  }

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }
  std::int32_t i32() { return scalar<std::int32_t>(); }
  double f64() { return scalar<double>(); }

  void f64_span(std::span<double> out) {
    const char* p = take(out.size() * sizeof(double));
    std::memcpy(out.data(), p, out.size() * sizeof(double));
  }

  std::string bytes(std::size_t n) {
    const char* p = take(n);
    return std::string(p, n);
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  template <class T>
  T scalar() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > data_.size())
      throw IoError("corrupt or truncated file: " + name_);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::vector<char> data_;
  std::string name_;
  std::size_t pos_ = 0;
};

/// FNV-1a over a byte string; used to stamp outputs with a config fingerprint.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fenode
