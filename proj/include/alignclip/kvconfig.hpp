#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace alignclip {

// Flat key=value config text. One "key = value" pair per line, '#' starts a
// comment, blank lines ignored. Values are kept as strings; typed getters
// parse on demand and must consume the whole token. serialize() emits keys in
// sorted order with doubles at full precision, so a parse/serialize round
// trip is lossless and byte-stable.
class KvConfig {
 public:
  static KvConfig parse_text(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  std::string serialize() const;
  void save_file(const std::string& path) const;

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  void set(const std::string& key, const std::string& value);
  void set_u64(const std::string& key, uint64_t value);
  void set_i64(const std::string& key, int64_t value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  uint64_t get_u64(const std::string& key) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

  bool operator==(const KvConfig& other) const { return kv_ == other.kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace alignclip
