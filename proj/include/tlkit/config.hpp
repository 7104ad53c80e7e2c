#pragma once

#include <map>
#include <string>

namespace tlkit {

// Flat key=value text config. `#` starts a comment; whitespace is trimmed.
class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& def) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t def) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double def) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool def) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace tlkit
