#include "alignclip/kvconfig.hpp"

#include <cstdio>
#include <charconv>
#include <fstream>
#include <sstream>

#include "alignclip/errors.hpp"

namespace alignclip {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig out;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got \"" + t + "\"");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (out.kv_.count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key \"" + key + "\"");
    out.kv_[key] = value;
  }
  return out;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

std::string KvConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : kv_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void KvConfig::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write config file " + path);
  out << serialize();
  if (!out) throw IoError("short write to config file " + path);
}

void KvConfig::set(const std::string& key, const std::string& value) { kv_[key] = value; }
void KvConfig::set_u64(const std::string& key, uint64_t value) { kv_[key] = std::to_string(value); }
void KvConfig::set_i64(const std::string& key, int64_t value) { kv_[key] = std::to_string(value); }

void KvConfig::set_double(const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  kv_[key] = buf;
}

void KvConfig::set_bool(const std::string& key, bool value) { kv_[key] = value ? "true" : "false"; }

std::string KvConfig::get_string(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("missing config key \"" + key + "\"");
  return it->second;
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

uint64_t KvConfig::get_u64(const std::string& key) const {
  std::string s = get_string(key);
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError("config key \"" + key + "\": expected unsigned integer, got \"" + s + "\"");
  return v;
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
  return has(key) ? get_u64(key) : fallback;
}

double KvConfig::get_double(const std::string& key) const {
  std::string s = get_string(key);
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": expected number, got \"" + s + "\"");
  }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KvConfig::get_bool(const std::string& key) const {
  std::string s = get_string(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key \"" + key + "\": expected true/false, got \"" + s + "\"");
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

}  // namespace alignclip
