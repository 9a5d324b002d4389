#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "dvs/common.hpp"

namespace dvs {

// Line-oriented `key = value` text.  '#' starts a comment line, blank lines
// are ignored.  Readers mark keys as consumed so a finished parse can reject
// anything it never understood instead of silently ignoring a typo.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text, const std::string& what = "config") {
    ConfigMap m;
    std::istringstream is(text);
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const std::size_t eq = t.find('=');
      DVS_CHECK(eq != std::string::npos, what, " line ", lineno,
                ": expected `key = value`, got \"", t, "\"");
      const std::string key = trim(t.substr(0, eq));
      const std::string val = trim(t.substr(eq + 1));
      DVS_CHECK(!key.empty(), what, " line ", lineno, ": empty key");
      DVS_CHECK(!m.kv_.count(key), what, " line ", lineno, ": duplicate key '",
                key, "'");
      m.kv_[key] = val;
    }
    return m;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream f(path);
    DVS_CHECK(f.good(), "config: cannot read '", path, "'");
    std::ostringstream os;
    os << f.rdbuf();
    return parse(os.str(), path);
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& dflt) const {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }

  long get_long(const std::string& key, long dflt) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(it->second, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    DVS_CHECK(pos == it->second.size() && !it->second.empty(), "config: key '",
              key, "' wants an integer, got \"", it->second, "\"");
    return v;
  }

  double get_double(const std::string& key, double dflt) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(it->second, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    DVS_CHECK(pos == it->second.size() && !it->second.empty(), "config: key '",
              key, "' wants a number, got \"", it->second, "\"");
    return v;
  }

  bool get_bool(const std::string& key, bool dflt) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    DVS_CHECK(false, "config: key '", key, "' wants a boolean, got \"", v, "\"");
    return dflt;
  }

  // Call after all known keys were read.
  void reject_unknown() const {
    std::string extra;
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) extra += (extra.empty() ? "" : ", ") + k;
    DVS_CHECK(extra.empty(), "config: unknown key(s): ", extra);
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace((unsigned char)s[a])) ++a;
    while (b > a && std::isspace((unsigned char)s[b - 1])) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> used_;
};

}  // namespace dvs
