#pragma once

// Dataset manifests: which images belong to a dataset, their labels, and where they came from.
//
// File format (tab separated, UTF-8):
//   # styleshift-manifest 1
//   # k<TAB>8
//   # root<TAB>/abs/root
//   # provenance<TAB>original
//   # classes<TAB>circle,square,...
//   rel_path<TAB>label<TAB>class_name<TAB>domain<TAB>provenance
//   A/circle/0000.png<TAB>0<TAB>circle<TAB>A<TAB>original
//
// Adapted provenance is written as adapted|<direction>|<output>|<checkpoint>.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace styleshift {

namespace fs = std::filesystem;

enum class Direction { source_to_adapted, target_to_adapted };
enum class AdaptedOutput { translated, reconstructed };

std::string to_string(Direction d);
std::string to_string(AdaptedOutput o);
Direction parse_direction(const std::string& text);
AdaptedOutput parse_adapted_output(const std::string& text);

struct Provenance {
  bool adapted = false;
  Direction direction = Direction::source_to_adapted;
  AdaptedOutput output = AdaptedOutput::translated;
  std::string checkpoint;  // checkpoint id (path) the images were generated with

  static Provenance original() { return {}; }
  static Provenance from_checkpoint(std::string ckpt, Direction d, AdaptedOutput o = AdaptedOutput::translated) {
    return {true, d, o, std::move(ckpt)};
  }

  std::string str() const;
  static Provenance parse(const std::string& text);
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ManifestRecord {
  std::string rel_path;  // relative to the manifest root, '/' separated
  int label = 0;
  std::string class_name;
  std::string domain;
  Provenance provenance;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  fs::path root;
  int k = 0;
  std::vector<std::string> classes;  // label index -> class name
  Provenance provenance;
  std::vector<ManifestRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  fs::path path_of(const ManifestRecord& r) const { return root / r.rel_path; }
  std::vector<fs::path> paths() const;
  std::vector<int> labels() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

std::string serialize_manifest(const DatasetManifest& m);
DatasetManifest parse_manifest(const std::string& text);
void save_manifest(const DatasetManifest& m, const fs::path& path);
DatasetManifest load_manifest(const fs::path& path);

/// Throws on out-of-range labels, duplicate paths, class-name/label disagreement and, when
/// `check_files` is set, on missing files.
void validate_manifest(const DatasetManifest& m, bool check_files = true);

/// Relative path without its extension; links an original image to its adapted counterpart.
std::string pairing_key(const std::string& rel_path);

/// Builds a manifest from root/<domain>/<class>/<image>. Labels follow sorted class names.
/// Undecodable files are skipped with a warning on stderr.
DatasetManifest ingest(const fs::path& root, const std::string& domain);

/// Domain folder names under `root`, sorted.
std::vector<std::string> list_domains(const fs::path& root);

/// Keeps a deterministic fraction of each class, chosen by hashing relative paths.
DatasetManifest subsample(const DatasetManifest& m, double fraction, std::uint64_t seed);

/// Deterministic split: records whose path hash falls below `train_fraction` go to train.
/// Adapted and original versions of one image land on the same side.
struct Split {
  DatasetManifest train;
  DatasetManifest test;
};
Split split_manifest(const DatasetManifest& m, double train_fraction);

}  // namespace styleshift
