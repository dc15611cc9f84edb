#pragma once

// Style-adapted dataset instances: every image of a manifest pushed through a trained generator
// and stored losslessly next to a manifest that records where it came from.

#include "styleshift/manifest.hpp"
#include "styleshift/stylegan.hpp"
#include "styleshift/synthetic.hpp"

#include <vector>

namespace styleshift {

struct AdaptedDatasetSpec {
  /// GAN checkpoints. With more than one, each image uses the checkpoint picked by hashing its
  /// relative path, mixing epochs into one dataset.
  std::vector<fs::path> checkpoints;
  Direction direction = Direction::source_to_adapted;
  AdaptedOutput output = AdaptedOutput::translated;
  fs::path output_root;
  int workers = 1;
  Index batch_size = 16;
};

/// Applies U_s (source inputs) or U_t (target inputs) to every image, or both in sequence for the
/// reconstructed output, and writes root/<rel path>.png. Labels, classes and record order are
/// preserved.
DatasetManifest materialize_adapted(const DatasetManifest& manifest, const AdaptedDatasetSpec& spec);

/// Same with an already loaded state; the provenance records `checkpoint_id`.
DatasetManifest materialize_adapted(const DatasetManifest& manifest, const GanState& state, const std::string& checkpoint_id,
                                    const AdaptedDatasetSpec& spec);

/// The generator chain a direction/output pair applies, on an in-memory batch.
Tensor<float> adapt_images(const GanState& state, const Tensor<float>& images, Direction direction, AdaptedOutput output);

}  // namespace styleshift
