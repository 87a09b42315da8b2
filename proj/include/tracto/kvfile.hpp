#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tracto/errors.hpp"
#include "tracto/vec3.hpp"

namespace tracto {

// Flat key=value config files: one `key = value` pair per line, '#' comments.
// Consumers fetch typed values; finish() rejects keys nobody asked for, which
// catches typos in experiment configs.
class KvFile {
 public:
  KvFile() = default;

  static KvFile parse_file(const std::string& path);
  static KvFile parse_text(const std::string& text, const std::string& origin = "<text>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key);
  std::string get_string(const std::string& key, const std::string& fallback);
  int64_t get_int(const std::string& key);
  int64_t get_int(const std::string& key, int64_t fallback);
  double get_double(const std::string& key);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  Vec3 get_vec3(const std::string& key);
  std::vector<double> get_doubles(const std::string& key);

  // Keys beginning with `prefix`; used to enumerate bundle blocks.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

  // Throws if any key was never consumed.
  void finish() const;

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  std::string fetch(const std::string& key);

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
  std::string origin_;
};

}  // namespace tracto
