#include "styleshift/config.hpp"

#include "styleshift/checkpoint.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

namespace styleshift {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

FlatConfig FlatConfig::parse(const std::string& text, const std::string& origin) {
  FlatConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.has(key)) throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
    cfg.values_[key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("config file " + path.string() + " does not exist");
  return parse(read_file(path), path.string());
}

std::string FlatConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string FlatConfig::require(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end() || it->second.empty()) throw std::runtime_error("missing config key " + key);
  return it->second;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) throw std::runtime_error("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

}  // namespace

double FlatConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? parse_number<double>(key, values_.at(key)) : fallback;
}

std::int64_t FlatConfig::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? parse_number<std::int64_t>(key, values_.at(key)) : fallback;
}

std::uint64_t FlatConfig::get_uint(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? parse_number<std::uint64_t>(key, values_.at(key)) : fallback;
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = values_.at(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key " + key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> FlatConfig::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
  return has(key) ? split_list(values_.at(key)) : fallback;
}

std::vector<double> FlatConfig::get_double_list(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<double> out;
  for (const auto& s : split_list(values_.at(key))) out.push_back(parse_number<double>(key, s));
  return out;
}

std::vector<std::int64_t> FlatConfig::get_int_list(const std::string& key, const std::vector<std::int64_t>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<std::int64_t> out;
  for (const auto& s : split_list(values_.at(key))) out.push_back(parse_number<std::int64_t>(key, s));
  return out;
}

std::map<std::string, std::string> FlatConfig::with_prefix(const std::string& prefix) const {
  std::map<std::string, std::string> out;
  for (auto it = values_.lower_bound(prefix); it != values_.end() && it->first.rfind(prefix, 0) == 0; ++it)
    out.emplace(it->first.substr(prefix.size()), it->second);
  return out;
}

std::string FlatConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace styleshift
