#include "tlkit/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tlkit/errors.hpp"

namespace tlkit {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KvConfig::get_str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key: " + key);
  return it->second;
}

std::string KvConfig::get_str(const std::string& key, const std::string& def) const {
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

int64_t KvConfig::get_int(const std::string& key) const {
  const std::string v = get_str(key);
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') {
    throw ConfigError("config key " + key + ": not an integer: " + v);
  }
  return x;
}

int64_t KvConfig::get_int(const std::string& key, int64_t def) const {
  return has(key) ? get_int(key) : def;
}

double KvConfig::get_double(const std::string& key) const {
  const std::string v = get_str(key);
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') {
    throw ConfigError("config key " + key + ": not a number: " + v);
  }
  return x;
}

double KvConfig::get_double(const std::string& key, double def) const {
  return has(key) ? get_double(key) : def;
}

bool KvConfig::get_bool(const std::string& key) const {
  const std::string v = get_str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + v);
}

bool KvConfig::get_bool(const std::string& key, bool def) const {
  return has(key) ? get_bool(key) : def;
}

}  // namespace tlkit
