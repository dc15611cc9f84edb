#pragma once

// Content/style disentanglement through a frozen VGG-16-topology backbone.
//
// Content is the relu5_2 activation map. Style is the ordered list of Gram matrices of relu1_2,
// relu2_2, relu3_3, relu4_3 and relu5_3, each normalised by C*H*W, computed per image and then
// averaged over the batch. Distances are sums of per-layer mean squared errors.

#include "styleshift/checkpoint.hpp"
#include "styleshift/image_batch.hpp"
#include "styleshift/nn.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace styleshift {

/// (C, H, W) features -> (C, C) Gram matrix F F^T / (C H W).
template <typename Scalar>
Tensor<Scalar> gram_matrix(const Tensor<Scalar>& features) {
  if (features.rank() != 3) throw std::invalid_argument("gram_matrix expects (C, H, W), got " + shape_string(features.shape()));
  if (features.size() > 0 && !features.all_finite()) throw std::invalid_argument("non-finite features");
  NoGradGuard guard;
  auto x = Var<Scalar>::constant(features.reshaped({1, features.dim(0), features.dim(1), features.dim(2)}));
  return gram(x).value().reshaped({features.dim(0), features.dim(0)});
}

template <typename Scalar>
struct ContentRepr {
  Var<Scalar> features;  // (N, C, h, w)
};

template <typename Scalar>
struct StyleRepr {
  std::vector<Var<Scalar>> grams;  // one (C_l, C_l) matrix per layer
  std::vector<std::string> layer_ids;
};

/// Sum over layers of the MSE between corresponding Gram matrices.
template <typename Scalar>
Var<Scalar> style_distance(const StyleRepr<Scalar>& a, const StyleRepr<Scalar>& b) {
  if (a.layer_ids != b.layer_ids || a.grams.size() != b.grams.size())
    throw std::invalid_argument("style representations have different layer lists");
  if (a.grams.empty()) throw std::invalid_argument("empty style representation");
  Var<Scalar> total = mse(a.grams[0], b.grams[0]);
  for (std::size_t l = 1; l < a.grams.size(); ++l) total = add(total, mse(a.grams[l], b.grams[l]));
  return total;
}

template <typename Scalar>
Var<Scalar> content_distance(const ContentRepr<Scalar>& a, const ContentRepr<Scalar>& b) {
  return mse(a.features, b.features);
}

struct BackboneHandle {
  std::string identifier;
  std::array<Index, 5> widths{64, 128, 256, 512, 512};
  std::string content_tap = "relu5_2";
  std::vector<std::string> style_taps{"relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"};
  bool frozen = true;
};

/// Fixed VGG-16 convolutional trunk (2-2-3-3-3 convolutions, 3x3, ReLU, 2x2 max pooling between
/// stages). Parameters never require gradients; gradients still flow to the input images.
template <typename Scalar>
class Backbone {
 public:
  static constexpr std::array<int, 5> kConvsPerStage{2, 2, 3, 3, 3};
  static constexpr Index kMinResolution = 16;

  /// Deterministic He-initialised weights.
  Backbone(std::array<Index, 5> widths, std::uint64_t seed) {
    handle_.widths = widths;
    handle_.identifier = "vgg16-random-seed" + std::to_string(seed);
    std::mt19937_64 rng(seed);
    build(rng);
  }

  explicit Backbone(const Checkpoint& ckpt) {
    if (ckpt.meta.value("kind", "") != "backbone" || ckpt.meta.value("arch", "") != "vgg16")
      throw std::runtime_error("weights file is not a vgg16 backbone");
    handle_.widths = ckpt.meta.at("widths").get<std::array<Index, 5>>();
    handle_.identifier = ckpt.meta.value("identifier", "vgg16");
    std::mt19937_64 rng(0);
    build(rng);
    params_.import_values(ckpt.tensors);
  }

  static Backbone load(const std::filesystem::path& path) { return Backbone(load_checkpoint(path)); }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "backbone"}, {"arch", "vgg16"}, {"widths", handle_.widths}, {"identifier", handle_.identifier}};
    ckpt.tensors = params_.export_values();
    return ckpt;
  }

  const BackboneHandle& handle() const { return handle_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  std::uint64_t checksum() const { return params_.checksum(); }

  void check_input(const Var<Scalar>& images) const {
    validate_images(images.value());
    const Index r = images.dim(2);
    if (r < kMinResolution || r % kMinResolution != 0)
      throw std::invalid_argument("backbone input resolution " + std::to_string(r) + " must be a positive multiple of 16");
  }

  struct Taps {
    Var<Scalar> content;
    std::vector<Var<Scalar>> style;
  };

  /// Runs the trunk up to relu5_3 on images in [-1, 1].
  Taps forward(const Var<Scalar>& images) const {
    check_input(images);
    static const std::vector<Scalar> mean{Scalar(0.485), Scalar(0.456), Scalar(0.406)};
    static const std::vector<Scalar> stdev{Scalar(0.229), Scalar(0.224), Scalar(0.225)};
    std::vector<Scalar> gain(3), bias(3);
    for (int c = 0; c < 3; ++c) {
      gain[c] = Scalar(0.5) / stdev[c];
      bias[c] = (Scalar(0.5) - mean[c]) / stdev[c];
    }
    Var<Scalar> h = channel_affine(images, gain, bias);
    Taps taps;
    std::size_t li = 0;
    for (int s = 0; s < 5; ++s) {
      if (s > 0) h = max_pool2(h);
      for (int j = 0; j < kConvsPerStage[s]; ++j) {
        h = relu(convs_[li++](h));
        if (s == 4 && j == 1) taps.content = h;
      }
      taps.style.push_back(h);
    }
    return taps;
  }

 private:
  void build(std::mt19937_64& rng) {
    Index in = 3;
    for (int s = 0; s < 5; ++s)
      for (int j = 0; j < kConvsPerStage[s]; ++j) {
        const std::string name = "conv" + std::to_string(s + 1) + "_" + std::to_string(j + 1);
        convs_.emplace_back(params_, name, in, handle_.widths[s], ConvGeometry{3, 1, 1}, rng);
        in = handle_.widths[s];
      }
    params_.set_requires_grad(false);
  }

  BackboneHandle handle_;
  ParameterSet<Scalar> params_;
  std::vector<Conv2d<Scalar>> convs_;
};

template <typename Scalar>
ContentRepr<Scalar> content_from_taps(const typename Backbone<Scalar>::Taps& taps) {
  return {taps.content};
}

/// Batch style: per-image Gram matrices averaged over the batch.
template <typename Scalar>
StyleRepr<Scalar> style_from_taps(const typename Backbone<Scalar>::Taps& taps, const BackboneHandle& handle) {
  StyleRepr<Scalar> repr;
  repr.layer_ids = handle.style_taps;
  for (const auto& f : taps.style) {
    const Index c = f.dim(1);
    repr.grams.push_back(reshape(mean_batch(gram(f)), {c, c}));
  }
  return repr;
}

/// One StyleRepr per image of the batch.
template <typename Scalar>
std::vector<StyleRepr<Scalar>> styles_per_image_from_taps(const typename Backbone<Scalar>::Taps& taps,
                                                         const BackboneHandle& handle) {
  const Index n = taps.style.front().dim(0);
  std::vector<StyleRepr<Scalar>> out(static_cast<std::size_t>(n));
  for (const auto& f : taps.style) {
    const Index c = f.dim(1);
    auto g = gram(f);
    for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)].grams.push_back(reshape(slice_batch(g, i, i + 1), {c, c}));
  }
  for (auto& r : out) r.layer_ids = handle.style_taps;
  return out;
}

template <typename Scalar>
ContentRepr<Scalar> extract_content(const Var<Scalar>& images, const Backbone<Scalar>& backbone) {
  return content_from_taps<Scalar>(backbone.forward(images));
}

template <typename Scalar>
ContentRepr<Scalar> extract_content(const ImageBatch<Scalar>& batch, const Backbone<Scalar>& backbone) {
  return extract_content(batch.var(), backbone);
}

template <typename Scalar>
StyleRepr<Scalar> extract_style(const Var<Scalar>& images, const Backbone<Scalar>& backbone) {
  return style_from_taps<Scalar>(backbone.forward(images), backbone.handle());
}

template <typename Scalar>
StyleRepr<Scalar> extract_style(const ImageBatch<Scalar>& batch, const Backbone<Scalar>& backbone) {
  return extract_style(batch.var(), backbone);
}

template <typename Scalar>
std::vector<StyleRepr<Scalar>> extract_styles_per_image(const Var<Scalar>& images, const Backbone<Scalar>& backbone) {
  return styles_per_image_from_taps<Scalar>(backbone.forward(images), backbone.handle());
}

/// Backbone used when no weights file is configured: VGG-16 topology at a fraction of the width.
inline std::array<Index, 5> scaled_vgg16_widths(Index divisor) {
  return {64 / divisor, 128 / divisor, 256 / divisor, 512 / divisor, 512 / divisor};
}

}  // namespace styleshift
