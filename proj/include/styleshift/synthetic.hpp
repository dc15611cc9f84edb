#pragma once

// Synthetic shape domains for desk-scale experiments. All styles share the same shape classes
// and geometry distribution and differ only in rendering:
//   A: warm foreground colours on a plain light background
//   B: cool foreground colours on a dark striped background
//   C: held-out style, saturated green/magenta shapes on a noisy dotted mid-tone background

#include "styleshift/manifest.hpp"
#include "styleshift/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace styleshift {

struct SyntheticSpec {
  int k = 8;
  int n_per_class = 25;
  Index resolution = 64;

  void validate() const;
};

enum class SyntheticStyle { A, B, C };

std::string to_string(SyntheticStyle s);
SyntheticStyle parse_synthetic_style(const std::string& name);

/// Names of the first k shape classes (k <= 8).
std::vector<std::string> synthetic_class_names(int k);

/// Renders one image as a (3, R, R) tensor in [-1, 1]; depends only on its arguments.
Tensor<float> render_synthetic(std::uint64_t seed, const SyntheticSpec& spec, SyntheticStyle style, int label, int index);

/// Writes root/<style>/<class>/<class>_<index>.png for every class and index and returns the
/// manifest. Byte-identical for a fixed seed.
DatasetManifest make_synthetic_domain(std::uint64_t seed, const SyntheticSpec& spec, SyntheticStyle style,
                                      const fs::path& root);

/// The source/target pair (styles A and B).
std::pair<DatasetManifest, DatasetManifest> make_synthetic_domains(std::uint64_t seed, const SyntheticSpec& spec,
                                                                   const fs::path& root);

}  // namespace styleshift
