#pragma once

// Flat key=value configuration files. One assignment per line, '#' comments,
// blank lines ignored. Readers consume keys through the typed getters; after
// parsing a whole section set, finish() rejects anything left over so typos
// fail loudly instead of silently keeping a default.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "relctr/errors.hpp"
#include "relctr/rng.hpp"

namespace relctr::cfg {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues from_string(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(lineno) +
                          " is not key=value: " + t);
      const std::string key = detail::trim(t.substr(0, eq));
      const std::string value = detail::trim(t.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config: empty key on line " + std::to_string(lineno));
      if (kv.values_.count(key))
        throw ConfigError("config: duplicate key: " + key);
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_string(buf.str());
  }

  // CLI overrides land here after file parsing; they replace file values.
  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("config: empty key in override");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    used_.insert(key);
    return it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    used_.insert(key);
    const std::string& v = it->second;
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("config: " + key + " is not a number: " + v);
    return out;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    used_.insert(key);
    const std::string& v = it->second;
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("config: " + key + " is not a non-negative integer: " + v);
    return out;
  }

  std::size_t get_size(const std::string& key, std::size_t dflt) const {
    return static_cast<std::size_t>(get_u64(key, static_cast<std::uint64_t>(dflt)));
  }

  bool get_bool(const std::string& key, bool dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    used_.insert(key);
    const std::string& v = it->second;
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + " must be true/false/1/0, got: " + v);
  }

  // Call once every section has pulled its keys. Leftovers are typos or
  // keys from a different tool version; both deserve a hard stop.
  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) unknown.push_back(k);
    if (unknown.empty()) return;
    std::string msg = "config: unknown key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

  // Stable digest of the effective assignments (std::map keeps keys sorted).
  std::uint64_t hash() const {
    std::string canon;
    for (const auto& [k, v] : values_) {
      canon += k;
      canon += '=';
      canon += v;
      canon += '\n';
    }
    return fnv1a64(canon.data(), canon.size());
  }

  std::map<std::string, std::string> entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace relctr::cfg
