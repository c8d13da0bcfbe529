#include "ltxb/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ltxb/error.hpp"
#include "ltxb/hashing.hpp"

namespace ltxb {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace((unsigned char)s[a])) ++a;
  while (b > a && std::isspace((unsigned char)s[b - 1])) --b;
  return s.substr(a, b - a);
}

// strips an unquoted trailing comment
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

bool valid_key_char(char c) {
  return std::isalnum((unsigned char)c) || c == '_' || c == '-';
}

}  // namespace

Config::Value Config::parse_value(const std::string& raw, const std::string& where) {
  std::string v = trim(raw);
  require(!v.empty(), ErrorKind::config, where + ": empty value");
  if (v.front() == '"') {
    require(v.size() >= 2 && v.back() == '"', ErrorKind::config,
            where + ": unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  {
    int64_t iv;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), iv);
    if (ec == std::errc() && p == v.data() + v.size()) return iv;
  }
  {
    char* end = nullptr;
    double dv = std::strtod(v.c_str(), &end);
    if (end == v.c_str() + v.size()) return dv;
  }
  fail(ErrorKind::config, where + ": cannot parse value '" + v + "' (quote strings)");
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string where = origin + ":" + std::to_string(lineno);
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', ErrorKind::config, where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      require(!section.empty(), ErrorKind::config, where + ": empty section name");
      for (char c : section)
        require(valid_key_char(c) || c == '.', ErrorKind::config,
                where + ": bad section name '" + section + "'");
      continue;
    }
    size_t eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::config, where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    require(!key.empty(), ErrorKind::config, where + ": empty key");
    for (char c : key)
      require(valid_key_char(c), ErrorKind::config, where + ": bad key '" + key + "'");
    std::string full = section.empty() ? key : section + "." + key;
    require(!cfg.kv_.count(full), ErrorKind::config, where + ": duplicate key '" + full + "'");
    cfg.kv_[full] = parse_value(line.substr(eq + 1), where);
  }
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path);
}

void Config::set_from_text(const std::string& key, const std::string& raw) {
  kv_[key] = parse_value(raw, "override " + key);
}

int64_t Config::get_int(const std::string& key, int64_t def) const {
  Value v = def;
  auto it = kv_.find(key);
  if (it != kv_.end()) {
    used_[key] = true;
    require(std::holds_alternative<int64_t>(it->second), ErrorKind::config,
            "config key '" + key + "' must be an integer");
    v = it->second;
  }
  resolved_[key] = v;
  return std::get<int64_t>(v);
}

double Config::get_float(const std::string& key, double def) const {
  Value v = def;
  auto it = kv_.find(key);
  if (it != kv_.end()) {
    used_[key] = true;
    if (std::holds_alternative<int64_t>(it->second))
      v = (double)std::get<int64_t>(it->second);
    else {
      require(std::holds_alternative<double>(it->second), ErrorKind::config,
              "config key '" + key + "' must be a number");
      v = it->second;
    }
  }
  resolved_[key] = v;
  return std::get<double>(v);
}

bool Config::get_bool(const std::string& key, bool def) const {
  Value v = def;
  auto it = kv_.find(key);
  if (it != kv_.end()) {
    used_[key] = true;
    require(std::holds_alternative<bool>(it->second), ErrorKind::config,
            "config key '" + key + "' must be a boolean");
    v = it->second;
  }
  resolved_[key] = v;
  return std::get<bool>(v);
}

std::string Config::get_str(const std::string& key, const std::string& def) const {
  Value v = def;
  auto it = kv_.find(key);
  if (it != kv_.end()) {
    used_[key] = true;
    require(std::holds_alternative<std::string>(it->second), ErrorKind::config,
            "config key '" + key + "' must be a string");
    v = it->second;
  }
  resolved_[key] = v;
  return std::get<std::string>(v);
}

std::string value_to_json(const Config::Value& v) {
  if (std::holds_alternative<int64_t>(v)) return std::to_string(std::get<int64_t>(v));
  if (std::holds_alternative<bool>(v)) return std::get<bool>(v) ? "true" : "false";
  if (std::holds_alternative<double>(v)) {
    char buf[40];
    snprintf(buf, sizeof buf, "%.17g", std::get<double>(v));
    return buf;
  }
  std::string out = "\"";
  for (char c : std::get<std::string>(v)) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string Config::resolved_json() const {
  std::string out = "{";
  bool first = true;
  for (const auto& [k, v] : resolved_) {
    if (!first) out += ",";
    first = false;
    out += "\"" + k + "\":" + value_to_json(v);
  }
  return out + "}";
}

uint64_t Config::model_hash() const {
  static const char* kModelSections[] = {"seed", "model.", "schedule.", "data.", "pretrain."};
  std::string canon;
  for (const auto& [k, v] : resolved_) {
    bool in_scope = false;
    for (const char* s : kModelSections)
      if (k == s || k.rfind(s, 0) == 0) in_scope = true;
    if (!in_scope) continue;
    canon += k + "=" + value_to_json(v) + "\n";
  }
  return fnv1a64(canon);
}

std::string Config::first_unused_key() const {
  for (const auto& [k, v] : kv_)
    if (!used_.count(k)) return k;
  return "";
}

}  // namespace ltxb
