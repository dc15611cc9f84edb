#include "styleshift/manifest.hpp"

#include "styleshift/checkpoint.hpp"
#include "styleshift/image_io.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace styleshift {

namespace {

constexpr const char* kMagic = "# styleshift-manifest 1";
constexpr const char* kColumns = "rel_path\tlabel\tclass_name\tdomain\tprovenance";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

void check_field(const std::string& f, const char* what) {
  if (f.find_first_of("\t\n\r") != std::string::npos) throw std::invalid_argument(std::string(what) + " contains a tab or newline: " + f);
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  static const std::set<std::string> known{".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff", ".webp"};
  return known.count(ext) > 0;
}

}  // namespace

std::string to_string(Direction d) { return d == Direction::source_to_adapted ? "source_to_adapted" : "target_to_adapted"; }
std::string to_string(AdaptedOutput o) { return o == AdaptedOutput::translated ? "translated" : "reconstructed"; }

Direction parse_direction(const std::string& text) {
  if (text == "source_to_adapted") return Direction::source_to_adapted;
  if (text == "target_to_adapted") return Direction::target_to_adapted;
  throw std::invalid_argument("unknown direction " + text);
}

AdaptedOutput parse_adapted_output(const std::string& text) {
  if (text == "translated") return AdaptedOutput::translated;
  if (text == "reconstructed") return AdaptedOutput::reconstructed;
  throw std::invalid_argument("unknown adapted output " + text);
}

std::string Provenance::str() const {
  if (!adapted) return "original";
  return "adapted|" + to_string(direction) + "|" + to_string(output) + "|" + checkpoint;
}

Provenance Provenance::parse(const std::string& text) {
  if (text == "original") return original();
  if (text.rfind("adapted|", 0) != 0) throw std::invalid_argument("bad provenance " + text);
  const auto a = text.find('|', 8);
  const auto b = a == std::string::npos ? a : text.find('|', a + 1);
  if (b == std::string::npos) throw std::invalid_argument("bad provenance " + text);
  return from_checkpoint(text.substr(b + 1), parse_direction(text.substr(8, a - 8)),
                         parse_adapted_output(text.substr(a + 1, b - a - 1)));
}

std::vector<fs::path> DatasetManifest::paths() const {
  std::vector<fs::path> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(path_of(r));
  return out;
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

std::string serialize_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << kMagic << '\n';
  os << "# k\t" << m.k << '\n';
  check_field(m.root.string(), "root");
  os << "# root\t" << m.root.string() << '\n';
  os << "# provenance\t" << m.provenance.str() << '\n';
  os << "# classes\t";
  for (std::size_t i = 0; i < m.classes.size(); ++i) {
    if (m.classes[i].find(',') != std::string::npos) throw std::invalid_argument("class name contains a comma: " + m.classes[i]);
    check_field(m.classes[i], "class name");
    os << (i ? "," : "") << m.classes[i];
  }
  os << '\n' << kColumns << '\n';
  for (const auto& r : m.records) {
    check_field(r.rel_path, "path");
    check_field(r.class_name, "class name");
    check_field(r.domain, "domain");
    os << r.rel_path << '\t' << r.label << '\t' << r.class_name << '\t' << r.domain << '\t' << r.provenance.str() << '\n';
  }
  return os.str();
}

DatasetManifest parse_manifest(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw std::runtime_error("not a styleshift manifest");
  DatasetManifest m;
  bool have_k = false, columns = false;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!columns && line.rfind("# ", 0) == 0) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw std::runtime_error("malformed manifest header line " + std::to_string(lineno));
      const std::string key = line.substr(2, tab - 2), value = line.substr(tab + 1);
      if (key == "k") {
        m.k = std::stoi(value);
        have_k = true;
      } else if (key == "root") {
        m.root = value;
      } else if (key == "provenance") {
        m.provenance = Provenance::parse(value);
      } else if (key == "classes") {
        m.classes = value.empty() ? std::vector<std::string>{} : split(value, ',');
      }
      continue;
    }
    if (!columns) {
      if (line != kColumns) throw std::runtime_error("manifest column header missing");
      columns = true;
      continue;
    }
    const auto f = split(line, '\t');
    if (f.size() != 5) throw std::runtime_error("manifest line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    m.records.push_back({f[0], std::stoi(f[1]), f[2], f[3], Provenance::parse(f[4])});
  }
  if (!have_k || !columns) throw std::runtime_error("manifest header incomplete");
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) { atomic_write(path, serialize_manifest(m)); }

DatasetManifest load_manifest(const fs::path& path) {
  try {
    return parse_manifest(read_file(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void validate_manifest(const DatasetManifest& m, bool check_files) {
  if (m.k < 1) throw std::invalid_argument("manifest has no classes");
  if (!m.classes.empty() && static_cast<int>(m.classes.size()) != m.k)
    throw std::invalid_argument("manifest class list has " + std::to_string(m.classes.size()) + " names for k=" + std::to_string(m.k));
  std::set<std::string> seen;
  for (const auto& r : m.records) {
    if (r.label < 0 || r.label >= m.k)
      throw std::invalid_argument("label " + std::to_string(r.label) + " out of range for k=" + std::to_string(m.k) + " at " + r.rel_path);
    if (!seen.insert(r.rel_path).second) throw std::invalid_argument("duplicate path " + r.rel_path);
    if (!m.classes.empty() && m.classes[static_cast<std::size_t>(r.label)] != r.class_name)
      throw std::invalid_argument("class name " + r.class_name + " disagrees with label " + std::to_string(r.label));
    if (check_files && !fs::exists(m.path_of(r))) throw std::invalid_argument("missing file " + m.path_of(r).string());
  }
}

std::string pairing_key(const std::string& rel_path) {
  const auto slash = rel_path.find_last_of('/');
  const auto dot = rel_path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return rel_path;
  return rel_path.substr(0, dot);
}

std::vector<std::string> list_domains(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root " + root.string() + " is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

DatasetManifest ingest(const fs::path& root, const std::string& domain) {
  const fs::path dir = root / domain;
  if (!fs::is_directory(dir)) throw std::runtime_error("no domain folder " + dir.string());
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw std::runtime_error("empty dataset root " + dir.string());

  DatasetManifest m;
  m.root = fs::absolute(root).lexically_normal();
  m.k = static_cast<int>(classes.size());
  m.classes = classes;
  std::size_t skipped = 0;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir / classes[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string rel = fs::relative(f, root).generic_string();
      // a tiny decode confirms the file is a readable image
      if (!is_image_file(f) || !read_image(f, 8)) {
        std::cerr << "warning: skipping undecodable file " << f.string() << '\n';
        ++skipped;
        continue;
      }
      m.records.push_back({rel, static_cast<int>(label), classes[label], domain, Provenance::original()});
    }
  }
  if (m.records.empty())
    throw std::runtime_error(skipped ? "no decodable images under " + dir.string() : "empty dataset root " + dir.string());
  validate_manifest(m, false);
  return m;
}

DatasetManifest subsample(const DatasetManifest& m, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample fraction must be in (0, 1]");
  if (fraction == 1.0) return m;
  DatasetManifest out = m;
  out.records.clear();
  std::map<int, std::vector<std::pair<std::uint64_t, const ManifestRecord*>>> by_class;
  for (const auto& r : m.records)
    by_class[r.label].emplace_back(mix64(fnv1a(std::to_string(seed) + "/" + pairing_key(r.rel_path))), &r);
  for (auto& [label, recs] : by_class) {
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(recs.size()))));
    std::vector<const ManifestRecord*> kept;
    for (std::size_t i = 0; i < keep && i < recs.size(); ++i) kept.push_back(recs[i].second);
    std::sort(kept.begin(), kept.end(), [](auto* a, auto* b) { return a->rel_path < b->rel_path; });
    for (auto* r : kept) out.records.push_back(*r);
  }
  std::stable_sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  return out;
}

Split split_manifest(const DatasetManifest& m, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must be in (0, 1)");
  Split s{m, m};
  s.train.records.clear();
  s.test.records.clear();
  for (const auto& r : m.records) {
    const double u = static_cast<double>(mix64(fnv1a("split/" + pairing_key(r.rel_path))) >> 11) * 0x1.0p-53;
    (u < train_fraction ? s.train : s.test).records.push_back(r);
  }
  return s;
}

}  // namespace styleshift
