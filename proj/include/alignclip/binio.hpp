#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace alignclip {

// FNV-1a 64-bit, used as the integrity checksum on every binary artifact.
uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 1469598103934665603ULL);

// Little-endian byte serialization regardless of host order.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);  // u32 length prefix + bytes
  void raw(const void* p, size_t n);

  const std::vector<uint8_t>& bytes() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

// Bounds-checked reader over a byte span; overruns throw CorruptFile.
class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t n) : p_(data), n_(n) {}
  explicit ByteReader(const std::vector<uint8_t>& v) : ByteReader(v.data(), v.size()) {}

  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  float f32();
  double f64();
  std::string str();
  void raw(void* out, size_t n);

  size_t remaining() const { return n_ - pos_; }
  void expect_end() const;  // CorruptFile if trailing bytes remain

 private:
  void need(size_t n) const;
  const uint8_t* p_;
  size_t n_;
  size_t pos_ = 0;
};

// On-disk framing shared by all binary artifacts:
//   [magic u32][version u32][payload ...][fnv1a64 of everything before]
// A bad checksum, bad magic, or truncation throws CorruptFile; version
// interpretation is left to the caller.
void write_checked_file(const std::string& path, uint32_t magic, uint32_t version,
                        const std::vector<uint8_t>& payload);

struct CheckedFile {
  uint32_t version = 0;
  std::vector<uint8_t> payload;
  uint64_t checksum = 0;
};

CheckedFile read_checked_file(const std::string& path, uint32_t magic);

// Checksum of the framed file as written by write_checked_file, without
// touching disk. Used to tag artifacts.
uint64_t framed_checksum(uint32_t magic, uint32_t version, const std::vector<uint8_t>& payload);

std::string checksum_hex(uint64_t checksum);

}  // namespace alignclip
