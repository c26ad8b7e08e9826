#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "psnet/common.hpp"

namespace psnet {

/// Run configuration: INI-style sections of key = value pairs, '#' or ';'
/// comments. CLI flags override file keys via set(). Missing keys raise
/// ConfigError naming section and key, which the CLI maps to exit code 2.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    Config cfg;
    cfg.parse_stream(f, path);
    return cfg;
  }

  static Config from_string(const std::string& text) {
    std::istringstream s(text);
    Config cfg;
    cfg.parse_stream(s, "<string>");
    return cfg;
  }

  void set(const std::string& section, const std::string& key,
           const std::string& value) {
    sections_[section][key] = value;
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  std::string get_string(const std::string& section,
                         const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end() || !s->second.count(key))
      throw ConfigError("missing config key [" + section + "] " + key);
    return s->second.at(key);
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    return has(section, key) ? get_string(section, key) : fallback;
  }

  double get_real(const std::string& section, const std::string& key) const {
    return parse_real(get_string(section, key), "[" + section + "] " + key);
  }

  double get_real(const std::string& section, const std::string& key,
                  double fallback) const {
    return has(section, key) ? get_real(section, key) : fallback;
  }

  long get_int(const std::string& section, const std::string& key) const {
    return parse_int(get_string(section, key), "[" + section + "] " + key);
  }

  long get_int(const std::string& section, const std::string& key,
               long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
  }

  bool get_bool(const std::string& section, const std::string& key,
                bool fallback) const {
    if (!has(section, key)) return fallback;
    std::string v = lower(get_string(section, key));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("expected a boolean for [" + section + "] " + key +
                      ", got '" + v + "'");
  }

  std::vector<double> get_real_list(const std::string& section,
                                    const std::string& key) const {
    std::vector<double> out;
    for (auto& tok : split(get_string(section, key), ',')) {
      std::string t = trim(tok);
      if (!t.empty())
        out.push_back(parse_real(t, "[" + section + "] " + key));
    }
    return out;
  }

  std::vector<long> get_int_list(const std::string& section,
                                 const std::string& key) const {
    std::vector<long> out;
    for (auto& tok : split(get_string(section, key), ',')) {
      std::string t = trim(tok);
      if (!t.empty()) out.push_back(parse_int(t, "[" + section + "] " + key));
    }
    return out;
  }

  const std::map<std::string, std::map<std::string, std::string>>& sections()
      const {
    return sections_;
  }

  /// Full snapshot, re-parseable; stored in every run manifest.
  std::string to_string() const {
    std::string out;
    for (const auto& [name, kv] : sections_) {
      out += "[" + name + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
      out += "\n";
    }
    return out;
  }

 private:
  template <class Stream>
  void parse_stream(Stream& f, const std::string& path) {
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw ConfigError(path + ":" + std::to_string(lineno) +
                            ": unterminated section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      std::string value = trim(t.substr(eq + 1));
      if (key.empty())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
      sections_[section][key] = value;
    }
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace psnet
