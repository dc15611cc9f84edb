#pragma once

// Stochastic style transfer GAN: two UNet generators, three patch discriminators and the six loss
// terms (content, crossed style, cycle reconstruction, three adversarial readouts).

#include "styleshift/checkpoint.hpp"
#include "styleshift/disentangle.hpp"
#include "styleshift/image_batch.hpp"
#include "styleshift/manifest.hpp"
#include "styleshift/nn.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace styleshift {

struct GeneratorConfig {
  std::string arch = "unet";  // "unet", "unet-residual" or "identity" (test double, no parameters)
  Index width = 8;
  int depth = 3;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct DiscriminatorConfig {
  Index width = 16;
  int layers = 3;

  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

/// UNet-shaped image-to-image network with a tanh output.
///
/// e0 = lrelu(conv3x3(x)); e_i = lrelu(IN(conv4x4/2(e_{i-1}))) for i = 1..depth, then
/// d_{i-1} = relu(IN(conv3x3([up2(d_i), e_{i-1}]))) back to full resolution and tanh(conv1x1(d_0)).
/// "unet-residual" instead outputs tanh(atanh(x) + conv1x1(d_0)) with a zero-initialised head, so it
/// starts as the identity map.
template <typename Scalar>
class Generator {
 public:
  Generator() = default;
  Generator(GeneratorConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
    if (cfg_.arch == "identity") return;
    if (cfg_.arch != "unet" && cfg_.arch != "unet-residual") throw std::invalid_argument("unknown generator arch " + cfg_.arch);
    if (cfg_.width < 1 || cfg_.depth < 1) throw std::invalid_argument("generator width and depth must be positive");
    const auto ch = channels();
    const double lrelu_gain = std::sqrt(2.0 / (1.0 + 0.04));
    stem_ = Conv2d<Scalar>(params_, "enc0", 3, ch[0], {3, 1, 1}, rng, lrelu_gain);
    for (int i = 1; i <= cfg_.depth; ++i)
      down_.emplace_back(params_, "enc" + std::to_string(i), ch[i - 1], ch[i], ConvGeometry{4, 2, 1}, rng, lrelu_gain);
    for (int i = cfg_.depth; i >= 1; --i)
      up_.emplace_back(params_, "dec" + std::to_string(i - 1), ch[i] + ch[i - 1], ch[i - 1], ConvGeometry{3, 1, 1}, rng);
    head_ = Conv2d<Scalar>(params_, "out", ch[0], 3, {1, 1, 0}, rng, residual() ? 0.0 : 1.0);
  }

  const GeneratorConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  bool is_identity() const { return cfg_.arch == "identity"; }
  bool residual() const { return cfg_.arch == "unet-residual"; }

  /// Smallest resolution step the architecture accepts.
  Index resolution_multiple() const { return is_identity() ? 1 : Index{1} << cfg_.depth; }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    validate_images(x.value());
    if (is_identity()) return x;
    if (x.dim(2) % resolution_multiple() != 0)
      throw std::invalid_argument("generator input resolution " + std::to_string(x.dim(2)) + " is not a multiple of " +
                                  std::to_string(resolution_multiple()));
    const Scalar slope(0.2);
    std::vector<Var<Scalar>> skips{leaky_relu(stem_(x), slope)};
    for (const auto& conv : down_) skips.push_back(leaky_relu(instance_norm(conv(skips.back())), slope));
    Var<Scalar> h = skips.back();
    for (std::size_t j = 0; j < up_.size(); ++j) {
      const auto& skip = skips[skips.size() - 2 - j];
      h = relu(instance_norm(up_[j](concat_channels(upsample2(h), skip))));
    }
    if (residual()) return tanh(add(atanh_clamped(x, kResidualClamp), head_(h)));
    return tanh(head_(h));
  }

  /// Inputs are clamped to this magnitude before atanh; tanh(atanh(0.999)) stays within 1/255 of 1.
  static constexpr Scalar kResidualClamp = Scalar(0.999);

 private:
  std::vector<Index> channels() const {
    std::vector<Index> ch{cfg_.width};
    for (int i = 1; i <= cfg_.depth; ++i) ch.push_back(cfg_.width << std::min(i, 2));
    return ch;
  }

  GeneratorConfig cfg_;
  ParameterSet<Scalar> params_;
  Conv2d<Scalar> stem_;
  std::vector<Conv2d<Scalar>> down_;
  std::vector<Conv2d<Scalar>> up_;
  Conv2d<Scalar> head_;
};

/// Patch discriminator: strided 4x4 convolutions with leaky ReLU (no normalisation, so colour and
/// texture statistics reach the readout), a 3x3 score map, sigmoid, averaged to one score per image.
template <typename Scalar>
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(DiscriminatorConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg_.width < 1 || cfg_.layers < 1) throw std::invalid_argument("discriminator width and layers must be positive");
    Index in = 3;
    const double lrelu_gain = std::sqrt(2.0 / (1.0 + 0.04));
    for (int i = 0; i < cfg_.layers; ++i) {
      const Index out = cfg_.width << std::min(i, 3);
      convs_.emplace_back(params_, "conv" + std::to_string(i), in, out, ConvGeometry{4, 2, 1}, rng, lrelu_gain);
      in = out;
    }
    head_ = Conv2d<Scalar>(params_, "score", in, 1, {3, 1, 1}, rng, 1.0);
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  /// (N, 1, h, w) map of patch probabilities.
  Var<Scalar> patch_scores(const Var<Scalar>& x) const {
    validate_images(x.value());
    Var<Scalar> h = x;
    for (const auto& conv : convs_) h = leaky_relu(conv(h), Scalar(0.2));
    return sigmoid(head_(h));
  }

  /// (N) per-image scores in (0, 1).
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    auto p = patch_scores(x);
    const Index n = p.dim(0), hw = p.dim(2) * p.dim(3);
    return reshape(global_avg_pool(reshape(p, {n, 1, hw, 1})), {n});
  }

 private:
  DiscriminatorConfig cfg_;
  ParameterSet<Scalar> params_;
  std::vector<Conv2d<Scalar>> convs_;
  Conv2d<Scalar> head_;
};

template <typename Scalar>
struct DiscriminatorSet {
  PatchDiscriminator<Scalar> style_s;  // real source vs U_t(I_t)
  PatchDiscriminator<Scalar> style_t;  // real target vs U_s(I_s)
  PatchDiscriminator<Scalar> content;  // originals vs generated, both domains pooled
};

inline constexpr std::array<const char*, 6> kLossTermNames{"l_in", "l_cross", "l_rec", "l_adv1", "l_adv2", "l_adv3"};

struct LossWeights {
  std::array<double, 6> lambda{1, 1, 1, 1, 1, 1};

  void validate() const {
    for (std::size_t i = 0; i < lambda.size(); ++i)
      if (!(lambda[i] >= 0.0) || !std::isfinite(lambda[i]))
        throw std::invalid_argument(std::string("loss weight for ") + kLossTermNames[i] + " must be finite and >= 0");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Applies a generator; throws when the batch does not match the generator.
template <typename Scalar>
ImageBatch<Scalar> translate(const Generator<Scalar>& g, const ImageBatch<Scalar>& batch) {
  NoGradGuard guard;
  return ImageBatch<Scalar>(g(batch.var()).value(), batch.domain);
}

/// MSE(c_s, c_su) + MSE(c_t, c_tu).
template <typename Scalar>
Var<Scalar> loss_intra(const ContentRepr<Scalar>& c_s, const ContentRepr<Scalar>& c_su, const ContentRepr<Scalar>& c_t,
                       const ContentRepr<Scalar>& c_tu) {
  return add(content_distance(c_s, c_su), content_distance(c_t, c_tu));
}

/// Crossed style loss: the target-derived image must carry source style and vice versa.
template <typename Scalar>
Var<Scalar> loss_cross(const StyleRepr<Scalar>& s_s, const StyleRepr<Scalar>& s_t, const StyleRepr<Scalar>& s_su,
                       const StyleRepr<Scalar>& s_tu) {
  return add(style_distance(s_s, s_tu), style_distance(s_t, s_su));
}

/// MSE(i_s, U_t(U_s(i_s))) + MSE(i_t, U_s(U_t(i_t))).
template <typename Scalar>
Var<Scalar> loss_reconstruction(const Var<Scalar>& i_s, const Var<Scalar>& i_srec, const Var<Scalar>& i_t,
                                const Var<Scalar>& i_trec) {
  return add(mse(i_s, i_srec), mse(i_t, i_trec));
}

template <typename Scalar>
Var<Scalar> loss_reconstruction(const ImageBatch<Scalar>& i_s, const ImageBatch<Scalar>& i_srec, const ImageBatch<Scalar>& i_t,
                                const ImageBatch<Scalar>& i_trec) {
  return loss_reconstruction(i_s.var(), i_srec.var(), i_t.var(), i_trec.var());
}

inline constexpr double kProbabilityClamp = 1e-7;

/// Discriminator cross-entropy: -mean log D(real) - mean log(1 - D(fake)).
template <typename Scalar>
Var<Scalar> discriminator_bce(const Var<Scalar>& d_real, const Var<Scalar>& d_fake) {
  const auto eps = static_cast<Scalar>(kProbabilityClamp);
  return add(mean(neg_log(d_real, eps)), mean(neg_log1m(d_fake, eps)));
}

/// Generator-side readout with the labels swapped: -mean log D(fake) - mean log(1 - D(real)).
/// Only the first half depends on the generator, which gives the non-saturating gradient; the
/// second half keeps the term equal to the discriminator loss at D = 0.5.
template <typename Scalar>
Var<Scalar> generator_bce(const Var<Scalar>& d_real, const Var<Scalar>& d_fake) {
  const auto eps = static_cast<Scalar>(kProbabilityClamp);
  return add(mean(neg_log(d_fake, eps)), mean(neg_log1m(d_real, eps)));
}

template <typename Scalar>
struct AdversarialLosses {
  std::array<Var<Scalar>, 3> generator;      // l_adv1 (D_style_s), l_adv2 (D_style_t), l_adv3 (D_content)
  std::array<Var<Scalar>, 3> discriminator;  // same order
};

template <typename Scalar>
struct DiscriminatorScores {
  Var<Scalar> style_s_real, style_s_fake, style_t_real, style_t_fake, content_real, content_fake;
};

/// real_s/real_t are I_s/I_t; gen_s = U_s(I_s) carries target style, gen_t = U_t(I_t) source style.
template <typename Scalar>
DiscriminatorScores<Scalar> score_all(const Var<Scalar>& real_s, const Var<Scalar>& real_t, const Var<Scalar>& gen_s,
                                      const Var<Scalar>& gen_t, const DiscriminatorSet<Scalar>& d) {
  detail::require_same_shape(real_s, gen_s, "adversarial_losses");
  detail::require_same_shape(real_t, gen_t, "adversarial_losses");
  detail::require(real_s.dim(2) == real_t.dim(2), "adversarial_losses: source and target resolution differ");
  DiscriminatorScores<Scalar> s;
  s.style_s_real = d.style_s(real_s);
  s.style_s_fake = d.style_s(gen_t);
  s.style_t_real = d.style_t(real_t);
  s.style_t_fake = d.style_t(gen_s);
  s.content_real = d.content(concat_batch<Scalar>({real_s, real_t}));
  s.content_fake = d.content(concat_batch<Scalar>({gen_s, gen_t}));
  return s;
}

template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(const Var<Scalar>& real_s, const Var<Scalar>& real_t, const Var<Scalar>& gen_s,
                                             const Var<Scalar>& gen_t, const DiscriminatorSet<Scalar>& d) {
  const auto s = score_all(real_s, real_t, gen_s, gen_t, d);
  AdversarialLosses<Scalar> out;
  out.generator = {generator_bce(s.style_s_real, s.style_s_fake), generator_bce(s.style_t_real, s.style_t_fake),
                   generator_bce(s.content_real, s.content_fake)};
  out.discriminator = {discriminator_bce(s.style_s_real, s.style_s_fake), discriminator_bce(s.style_t_real, s.style_t_fake),
                       discriminator_bce(s.content_real, s.content_fake)};
  return out;
}

template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(const ImageBatch<Scalar>& real_s, const ImageBatch<Scalar>& real_t,
                                             const ImageBatch<Scalar>& gen_s, const ImageBatch<Scalar>& gen_t,
                                             const DiscriminatorSet<Scalar>& d) {
  return adversarial_losses(real_s.var(), real_t.var(), gen_s.var(), gen_t.var(), d);
}

/// sum_i lambda_i * l_i; throws naming the first non-finite term.
template <typename Scalar>
Var<Scalar> total_loss(const std::array<Var<Scalar>, 6>& parts, const LossWeights& w) {
  w.validate();
  Var<Scalar> total;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].value().size() != 1) throw std::invalid_argument(std::string("loss term ") + kLossTermNames[i] + " is not a scalar");
    if (!std::isfinite(static_cast<double>(parts[i].item())))
      throw std::runtime_error(std::string("non-finite loss term ") + kLossTermNames[i]);
    auto term = scale(parts[i], static_cast<Scalar>(w.lambda[i]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------- training state

struct GanConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  LossWeights weights;
  AdamOptions adam;  // 2e-4, (0.5, 0.999)
  Index resolution = 64;
  int epochs = 5;
  Index batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything needed to resume GAN training: networks, optimiser moments, epoch counter.
struct GanState {
  GanConfig config;
  Generator<float> U_s, U_t;
  DiscriminatorSet<float> discs;
  std::vector<Adam<float>> optimizers;  // U_s, U_t, D_style_s, D_style_t, D_content
  int epoch = 0;
  std::string backbone_id;

  explicit GanState(const GanConfig& cfg);
  GanState(GanState&&) = default;
  GanState& operator=(GanState&&) = default;
  // networks share parameter nodes with their optimisers; copies would alias
  GanState(const GanState&) = delete;
  GanState& operator=(const GanState&) = delete;

  Checkpoint to_checkpoint() const;
  static GanState from_checkpoint(const Checkpoint& ckpt);
  void save(const fs::path& path) const { save_checkpoint(to_checkpoint(), path); }
  static GanState load(const fs::path& path) { return from_checkpoint(load_checkpoint(path)); }

  std::uint64_t generator_checksum() const;
  std::uint64_t discriminator_checksum() const;
};

nlohmann::json to_json(const GanConfig& cfg);
GanConfig gan_config_from_json(const nlohmann::json& j);
std::string config_hash(const GanConfig& cfg);

/// Loss values of one training step.
struct GanStepMetrics {
  std::array<double, 6> terms{};
  double total = 0;
  std::array<double, 3> discriminator{};
};

/// One discriminator update followed by one generator update on a (source, target) batch pair.
GanStepMetrics gan_train_step(GanState& state, const Backbone<float>& backbone, const Tensor<float>& source,
                              const Tensor<float>& target);

struct GanTrainOptions {
  fs::path output_dir;      // epoch_XXXX.ckpt and metrics.jsonl go here
  bool resume = true;       // continue from the newest checkpoint in output_dir
  bool verbose = false;
};

/// Path of the checkpoint written after `epoch`.
fs::path gan_checkpoint_path(const fs::path& dir, int epoch);

/// Trains for config.epochs epochs over independently shuffled source/target batches, writing one
/// checkpoint per epoch and per-step metrics records (epoch, step, term, value). Returns the
/// checkpoint paths in epoch order.
std::vector<fs::path> train_gan(const DatasetManifest& source, const DatasetManifest& target, const GanConfig& config,
                                const Backbone<float>& backbone, const GanTrainOptions& options);

/// Same, on in-memory image tensors.
std::vector<fs::path> train_gan(const Tensor<float>& source, const Tensor<float>& target, const GanConfig& config,
                                const Backbone<float>& backbone, const GanTrainOptions& options);

}  // namespace styleshift
