#include "alignclip/binio.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "alignclip/errors.hpp"

namespace alignclip {

uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void ByteWriter::u16(uint16_t v) {
  buf_.push_back(static_cast<uint8_t>(v));
  buf_.push_back(static_cast<uint8_t>(v >> 8));
}

void ByteWriter::u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteWriter::raw(const void* p, size_t n) {
  const uint8_t* b = static_cast<const uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void ByteReader::need(size_t n) const {
  if (pos_ + n > n_) throw CorruptFile("file truncated: wanted " + std::to_string(n) + " more bytes");
}

uint8_t ByteReader::u8() {
  need(1);
  return p_[pos_++];
}

uint16_t ByteReader::u16() {
  need(2);
  uint16_t v = static_cast<uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

uint32_t ByteReader::u32() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::u64() {
  need(8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
  pos_ += n;
  return s;
}

void ByteReader::raw(void* out, size_t n) {
  need(n);
  std::memcpy(out, p_ + pos_, n);
  pos_ += n;
}

void ByteReader::expect_end() const {
  if (pos_ != n_) throw CorruptFile("file has " + std::to_string(n_ - pos_) + " unexpected trailing bytes");
}

namespace {

std::vector<uint8_t> frame(uint32_t magic, uint32_t version, const std::vector<uint8_t>& payload) {
  ByteWriter w;
  w.u32(magic);
  w.u32(version);
  w.raw(payload.data(), payload.size());
  uint64_t sum = fnv1a64(w.bytes().data(), w.bytes().size());
  w.u64(sum);
  return w.take();
}

}  // namespace

void write_checked_file(const std::string& path, uint32_t magic, uint32_t version,
                        const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> framed = frame(magic, version, payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(framed.data()), static_cast<std::streamsize>(framed.size()));
  if (!out) throw IoError("short write to " + path);
}

CheckedFile read_checked_file(const std::string& path, uint32_t magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw CorruptFile(path + ": too short to be a valid artifact");
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed) throw CorruptFile(path + ": checksum mismatch");
  ByteReader r(bytes.data(), bytes.size() - 8);
  uint32_t m = r.u32();
  if (m != magic) throw CorruptFile(path + ": wrong file type");
  CheckedFile out;
  out.version = r.u32();
  out.payload.assign(bytes.begin() + 8, bytes.end() - 8);
  out.checksum = computed;
  return out;
}

uint64_t framed_checksum(uint32_t magic, uint32_t version, const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> framed = frame(magic, version, payload);
  return fnv1a64(framed.data(), framed.size() - 8);
}

std::string checksum_hex(uint64_t checksum) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum));
  return buf;
}

}  // namespace alignclip
