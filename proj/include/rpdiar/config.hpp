// Copyright (c) 2026 The rpdiar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef RPDIAR_CONFIG_HPP_
#define RPDIAR_CONFIG_HPP_

// Flat `key = value` configuration text. `#` starts a comment, later
// assignments of a key override earlier ones, serialization is canonical
// (sorted keys, one `key = value` per line) so identical settings produce
// identical bytes in config echoes and checkpoints.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "rpdiar/common.hpp"

namespace rpdiar {

class ConfigMap {
 public:
  ConfigMap() = default;

  static ConfigMap parse(const std::string& text, const std::string& name = "config") {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::string body = trim(line);
      if (body.empty()) continue;
      const std::string where = name + ":" + std::to_string(lineno);
      std::size_t eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(where + ": expected `key = value`, got '" + body + "'");
      }
      std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (key.find_first_of(" \t") != std::string::npos) {
        throw ConfigError(where + ": key contains whitespace: '" + key + "'");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  // Canonical form: keys sorted, exactly `key = value\n` per entry.
  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) {
      out += k;
      out += " = ";
      out += v;
      out += '\n';
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write config file: " + path);
    out << serialize();
    if (!out) throw IoError("failed while writing config file: " + path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, bool value) {
    values_[key] = value ? "true" : "false";
  }
  void set(const std::string& key, std::int64_t value) {
    values_[key] = std::to_string(value);
  }
  void set(const std::string& key, int value) {
    values_[key] = std::to_string(value);
  }
  void set(const std::string& key, std::size_t value) {
    values_[key] = std::to_string(value);
  }
  // Shortest representation that parses back to the same double.
  void set(const std::string& key, double value) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    values_[key] = std::string(buf, res.ptr);
  }

  const std::string& get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::int64_t get_int(const std::string& key) const {
    return parse_int(get_string(key), key);
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  double get_double(const std::string& key) const {
    return parse_dbl(get_string(key), key);
  }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": expected true/false, got '" + v +
                      "'");
  }
  bool get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  // Later maps win; used to layer flag overrides on top of a config file.
  void merge_from(const ConfigMap& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool operator==(const ConfigMap& other) const {
    return values_ == other.values_;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::int64_t parse_int(const std::string& v, const std::string& key) {
    std::int64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
      throw ConfigError("config key " + key + ": expected integer, got '" + v +
                        "'");
    }
    return out;
  }

  static double parse_dbl(const std::string& v, const std::string& key) {
    try {
      std::size_t used = 0;
      double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected number, got '" + v +
                        "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace rpdiar

#endif  // RPDIAR_CONFIG_HPP_
