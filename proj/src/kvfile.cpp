#include "tracto/kvfile.hpp"

#include <fstream>
#include <sstream>

namespace tracto {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KvFile KvFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

KvFile KvFile::parse_text(const std::string& text, const std::string& origin) {
  KvFile kv;
  kv.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!kv.values_.emplace(key, value).second)
      throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

std::string KvFile::fetch(const std::string& key) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(origin_ + ": missing required key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string KvFile::get_string(const std::string& key) { return fetch(key); }

std::string KvFile::get_string(const std::string& key, const std::string& fallback) {
  if (!has(key)) return fallback;
  return fetch(key);
}

int64_t KvFile::get_int(const std::string& key) {
  const std::string v = fetch(key);
  size_t pos = 0;
  const int64_t n = std::stoll(v, &pos);
  if (pos != v.size()) throw Error(origin_ + ": key '" + key + "' is not an integer: " + v);
  return n;
}

int64_t KvFile::get_int(const std::string& key, int64_t fallback) {
  return has(key) ? get_int(key) : fallback;
}

double KvFile::get_double(const std::string& key) {
  const std::string v = fetch(key);
  size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw Error(origin_ + ": key '" + key + "' is not a number: " + v);
  return d;
}

double KvFile::get_double(const std::string& key, double fallback) {
  return has(key) ? get_double(key) : fallback;
}

bool KvFile::get_bool(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  const std::string v = fetch(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(origin_ + ": key '" + key + "' is not a boolean: " + v);
}

std::vector<double> KvFile::get_doubles(const std::string& key) {
  std::istringstream in(fetch(key));
  std::vector<double> out;
  double d;
  while (in >> d) out.push_back(d);
  if (!in.eof()) throw Error(origin_ + ": key '" + key + "' is not a number list");
  return out;
}

Vec3 KvFile::get_vec3(const std::string& key) {
  const auto v = get_doubles(key);
  if (v.size() != 3) throw Error(origin_ + ": key '" + key + "' needs exactly 3 numbers");
  return {v[0], v[1], v[2]};
}

std::vector<std::string> KvFile::keys_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

void KvFile::finish() const {
  std::string unknown;
  for (const auto& [k, v] : values_)
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty()) throw Error(origin_ + ": unknown keys: " + unknown);
}

}  // namespace tracto
