#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tracto/errors.hpp"

namespace tracto {

// Little-endian binary readers/writers shared by the VOL1/TRX1/CKP1 formats.
// Offsets are tracked so format errors can name the failing byte.

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("cannot open '" + path + "' for writing");
  }

  void u8(uint8_t v) { raw(&v, 1); }
  void u16(uint16_t v) { put_le(v); }
  void u32(uint32_t v) { put_le(v); }
  void u64(uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<uint32_t>(v)); }

  void f32_array(const float* data, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(data[i]);
  }

  void magic(const char tag[5]) { raw(tag, 4); }

  void bytes(const void* data, size_t n) { raw(data, n); }

  void close() {
    out_.close();
    if (!out_) throw Error("write to '" + path_ + "' failed");
  }

 private:
  template <class T>
  void put_le(T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    raw(buf, sizeof(T));
  }

  void raw(const void* data, size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write to '" + path_ + "' failed");
  }

  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw Error("cannot open '" + path + "' for reading");
  }

  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() { return get_le<uint16_t>(); }
  uint32_t u32() { return get_le<uint32_t>(); }
  uint64_t u64() { return get_le<uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<uint32_t>()); }

  void f32_array(float* data, size_t n) {
    for (size_t i = 0; i < n; ++i) data[i] = f32();
  }

  void expect_magic(const char tag[5]) {
    const size_t at = offset_;
    char buf[4];
    raw(buf, 4);
    if (std::memcmp(buf, tag, 4) != 0)
      throw FormatError("'" + path_ + "': bad magic at offset " + std::to_string(at) +
                        " (expected " + std::string(tag, 4) + ")");
  }

  std::string str(size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  size_t offset() const { return offset_; }

  void expect_eof() {
    char c;
    in_.read(&c, 1);
    if (!in_.eof())
      throw FormatError("'" + path_ + "': trailing bytes at offset " + std::to_string(offset_));
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("'" + path_ + "': " + what + " at offset " + std::to_string(offset_));
  }

 private:
  template <class T>
  T get_le() {
    unsigned char buf[sizeof(T)];
    raw(buf, sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
  }

  void raw(void* data, size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw FormatError("'" + path_ + "': truncated file at offset " + std::to_string(offset_));
    offset_ += n;
  }

  std::ifstream in_;
  std::string path_;
  size_t offset_ = 0;
};

}  // namespace tracto
