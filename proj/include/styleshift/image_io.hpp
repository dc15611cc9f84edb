#pragma once

#include "styleshift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace styleshift {

namespace fs = std::filesystem;

/// Decodes an image, center-crops it to a square and resizes it to `resolution`. Returns a
/// (3, R, R) RGB tensor in [-1, 1], or nothing if the file cannot be decoded.
std::optional<Tensor<float>> read_image(const fs::path& path, Index resolution);

/// Like read_image but throws on failure.
Tensor<float> load_image(const fs::path& path, Index resolution);

/// Loads many images into one (N, 3, R, R) batch.
Tensor<float> load_images(const std::vector<fs::path>& paths, Index resolution);

/// Writes a (3, R, R) tensor in [-1, 1] as an 8-bit RGB PNG via temp file and rename.
void write_png(const fs::path& path, const Tensor<float>& chw);

/// Encodes a (3, R, R) tensor in [-1, 1] as PNG bytes (deterministic).
std::vector<std::uint8_t> encode_png(const Tensor<float>& chw);

/// Quantizes a value in [-1, 1] the same way write_png does.
inline std::uint8_t quantize_pixel(float v) {
  const float u = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
  return static_cast<std::uint8_t>(std::lround(u));
}

inline float dequantize_pixel(std::uint8_t u) { return static_cast<float>(u) / 127.5f - 1.0f; }

}  // namespace styleshift
