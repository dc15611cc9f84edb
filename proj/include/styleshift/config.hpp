#pragma once

// Flat key-value configuration files:
//
//   # comment
//   key = value
//   gan.lambda = 1, 1, 1, 1, 1, 1
//
// Keys are unique; later files or overrides replace earlier values. Lists are comma separated.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace styleshift {

class FlatConfig {
 public:
  FlatConfig() = default;

  static FlatConfig parse(const std::string& text, const std::string& origin = "<string>");
  static FlatConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback = {}) const;
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback = {}) const;
  std::vector<std::int64_t> get_int_list(const std::string& key, const std::vector<std::int64_t>& fallback = {}) const;

  /// Keys under `prefix` ("model." -> {"M_base.mode", ...}), prefix stripped.
  std::map<std::string, std::string> with_prefix(const std::string& prefix) const;

  /// Canonical text: sorted "key = value" lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string trim(const std::string& s);
std::vector<std::string> split_list(const std::string& s, char sep = ',');

}  // namespace styleshift
