#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "demask/error.hpp"

namespace demask {

/// Plain `key = value` document. Lines starting with '#' are comments.
/// Keys are unique; unknown keys are rejected by `require_known`.
class KeyValueDocument {
 public:
  KeyValueDocument() = default;

  static KeyValueDocument parse(std::string_view text, std::string_view origin = "<memory>") {
    KeyValueDocument doc;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(start, end - start);
      ++line_no;
      start = end + 1;
      line = trim(line);
      if (line.empty() || line.front() == '#') {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      }
      std::string key(trim(line.substr(0, eq)));
      std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      }
      if (!doc.values_.emplace(key, value).second) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                          ": duplicate key '" + key + "'");
      }
      doc.order_.push_back(key);
      if (end == text.size()) break;
    }
    return doc;
  }

  static KeyValueDocument load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end()) order_.push_back(key);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void require_known(const std::set<std::string>& allowed) const {
    for (const auto& key : order_) {
      if (allowed.count(key) == 0) throw ConfigError("unknown key '" + key + "'");
    }
  }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required key '" + key + "'");
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
  }

  std::int64_t get_int(const std::string& key) const { return parse_int(key, get_string(key)); }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::uint64_t get_uint(const std::string& key) const {
    const auto v = parse_int(key, get_string(key));
    if (v < 0) throw ConfigError("key '" + key + "': expected a nonnegative integer");
    return static_cast<std::uint64_t>(v);
  }
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint(key) : fallback;
  }

  double get_double(const std::string& key) const { return parse_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
  }

  /// Comma-separated list of reals.
  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    const auto text = get_string(key);
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find(',', start);
      if (end == std::string::npos) end = text.size();
      out.push_back(parse_double(key, std::string(trim(std::string_view(text).substr(start, end - start)))));
      start = end + 1;
    }
    return out;
  }

  /// Serializes in insertion order.
  std::string to_string() const {
    std::string out;
    for (const auto& key : order_) out += key + " = " + values_.at(key) + "\n";
    return out;
  }

  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

 private:
  static std::int64_t parse_int(const std::string& key, const std::string& text) {
    std::int64_t v = 0;
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
      throw ConfigError("key '" + key + "': expected an integer, got '" + text + "'");
    }
    return v;
  }

  static double parse_double(const std::string& key, const std::string& text) {
    if (text == "inf" || text == "infinity" || text == "+inf") {
      return std::numeric_limits<double>::infinity();
    }
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || std::isnan(v)) {
      throw ConfigError("key '" + key + "': expected a real number, got '" + text + "'");
    }
    return v;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

/// Shortest text that round-trips a double exactly.
inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace demask
