#pragma once

// Teacher-student self-ensembling classifier. The student learns from labelled source images
// (original and style-adapted) plus a consistency term between its predictions on target images
// and the teacher's predictions on their style-adapted counterparts. The teacher tracks the
// student through an exponential moving average and never receives gradients.

#include "styleshift/checkpoint.hpp"
#include "styleshift/manifest.hpp"
#include "styleshift/nn.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace styleshift {

struct ClassifierConfig {
  int k = 8;
  Index width = 16;  // channels of the first block, doubled per block
  int blocks = 4;

  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// conv3x3 + ReLU + 2x2 max pooling blocks, global average pooling, linear head over k classes.
template <typename Scalar>
class Classifier {
 public:
  Classifier() = default;
  Classifier(ClassifierConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg_.k < 2) throw std::invalid_argument("classifier needs k >= 2");
    if (cfg_.width < 1 || cfg_.blocks < 1) throw std::invalid_argument("classifier width and blocks must be positive");
    Index in = 3;
    for (int b = 0; b < cfg_.blocks; ++b) {
      const Index out = cfg_.width << b;
      convs_.emplace_back(params_, "block" + std::to_string(b), in, out, ConvGeometry{3, 1, 1}, rng);
      in = out;
    }
    head_ = Linear<Scalar>(params_, "head", in, cfg_.k, rng);
  }

  const ClassifierConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  /// (N, 3, R, R) -> (N, k) logits; R must be divisible by 2^blocks.
  Var<Scalar> logits(const Var<Scalar>& x) const {
    if (x.value().rank() != 4 || x.dim(1) != 3) throw std::invalid_argument("classifier expects (N, 3, R, R) images");
    if (x.dim(2) % (Index{1} << cfg_.blocks) != 0)
      throw std::invalid_argument("classifier input resolution must be divisible by 2^blocks");
    Var<Scalar> h = x;
    for (const auto& conv : convs_) h = max_pool2(relu(conv(h)));
    return head_(global_avg_pool(h));
  }

  Var<Scalar> probabilities(const Var<Scalar>& x) const { return softmax(logits(x)); }

 private:
  ClassifierConfig cfg_;
  ParameterSet<Scalar> params_;
  std::vector<Conv2d<Scalar>> convs_;
  Linear<Scalar> head_;
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> supervised_loss(const Var<Scalar>& logits, const std::vector<int>& labels) {
  detail::require_rank(logits, 2, "supervised_loss");
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("supervised_loss: label count does not match batch");
  if (!logits.value().all_finite()) throw std::invalid_argument("non-finite logits");
  Tensor<Scalar> onehot({n, k});
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("label " + std::to_string(y) + " out of range for k=" + std::to_string(k));
    onehot.at(i, y) = Scalar(1);
  }
  return scale(sum(mul(log_softmax(logits), Var<Scalar>::constant(std::move(onehot)))), Scalar(-1) / static_cast<Scalar>(n));
}

namespace detail {
template <typename Scalar>
void require_probability_rows(const Tensor<Scalar>& p, const char* what) {
  const auto m = p.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    if ((m.row(r).array() < Scalar(0)).any() || std::abs(static_cast<double>(m.row(r).sum()) - 1.0) > 1e-4)
      throw std::invalid_argument(std::string("consistency_loss: ") + what + " row " + std::to_string(r) + " is not normalized");
  }
}
}  // namespace detail

/// Mean squared difference of two (N, k) probability arrays. With `mask` (one 0/1 weight per
/// row) excluded rows contribute zero while the normaliser stays N * k.
template <typename Scalar>
Var<Scalar> consistency_loss(const Var<Scalar>& student_probs, const Var<Scalar>& teacher_probs,
                             const std::vector<Scalar>* mask = nullptr) {
  detail::require_rank(student_probs, 2, "consistency_loss");
  detail::require_same_shape(student_probs, teacher_probs, "consistency_loss");
  detail::require_probability_rows(student_probs.value(), "student");
  detail::require_probability_rows(teacher_probs.value(), "teacher");
  if (!mask) return mse(student_probs, teacher_probs);
  const Index n = student_probs.dim(0), k = student_probs.dim(1);
  if (static_cast<Index>(mask->size()) != n) throw std::invalid_argument("consistency_loss: mask length does not match batch");
  Tensor<Scalar> w({n, k});
  for (Index i = 0; i < n; ++i) w.matrix().row(i).setConstant((*mask)[static_cast<std::size_t>(i)]);
  const auto d = sub(student_probs, teacher_probs);
  return scale(sum(mul(mul(d, d), Var<Scalar>::constant(std::move(w)))), Scalar(1) / static_cast<Scalar>(n * k));
}

/// teacher <- alpha * teacher + (1 - alpha) * student, elementwise. The student is untouched.
template <typename Scalar>
void ema_update(ParameterSet<Scalar>& teacher, const ParameterSet<Scalar>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1]");
  if (teacher.size() != student.size()) throw std::invalid_argument("teacher/student architecture mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& [tname, tv] = teacher.entries()[i];
    const auto& [sname, sv] = student.entries()[i];
    if (tname != sname || tv.shape() != sv.shape()) throw std::invalid_argument("teacher/student architecture mismatch at " + tname);
    if (alpha == 1.0) continue;
    if (alpha == 0.0) {
      tv.mutable_value().array() = sv.value().array();
      continue;
    }
    const auto a = static_cast<Scalar>(alpha), b = static_cast<Scalar>(1.0 - alpha);
    tv.mutable_value().array() = a * tv.value().array() + b * sv.value().array();
  }
}

enum class TrainMode { base, tune, ensemble };

std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& text);

struct ConsistencyOptions {
  double confidence_threshold = 0.0;  // 0 disables; otherwise rows whose teacher max prob is below are dropped
  bool symmetric = false;             // also match student(mapped) against teacher(original)
};

struct EnsembleState {
  ClassifierConfig config;
  Classifier<float> student;
  Classifier<float> teacher;  // same architecture, parameters never require gradients
  Adam<float> optimizer;
  double ema_decay = 0.99;
  std::int64_t step = 0;

  EnsembleState(const ClassifierConfig& cfg, std::uint64_t seed, AdamOptions adam, double decay);
  EnsembleState(EnsembleState&&) = default;
  EnsembleState& operator=(EnsembleState&&) = default;
  EnsembleState(const EnsembleState&) = delete;
  EnsembleState& operator=(const EnsembleState&) = delete;

  void ema_update() { styleshift::ema_update(teacher.parameters(), student.parameters(), ema_decay); }
};

struct StepMetrics {
  double supervised = 0;
  double unsupervised = 0;
  double total = 0;
  double weight = 0;  // w_u used for this step
};

/// One optimiser step on L_sup + w_u * L_unsup followed by one EMA update. The student sees the
/// original target images and the teacher their style-mapped counterparts.
StepMetrics train_step(EnsembleState& state, const Tensor<float>& sup_images, const std::vector<int>& sup_labels,
                       const std::optional<std::pair<Tensor<float>, Tensor<float>>>& unsup_pair, double w_u,
                       const ConsistencyOptions& consistency = {});

struct ClassifierTrainConfig {
  ClassifierConfig net;
  Index resolution = 64;
  int epochs = 20;
  Index batch_size = 8;
  AdamOptions adam{1e-3, 0.9, 0.999, 1e-8};
  double ema_decay = 0.99;
  double w_u = 1.0;
  bool rampup = true;
  double rampup_fraction = 0.1;
  ConsistencyOptions consistency;
  bool evaluate_teacher = true;  // ensemble mode only
  std::uint64_t seed = 0;
};

struct ClassifierData {
  const DatasetManifest* source = nullptr;
  const DatasetManifest* source_adapted = nullptr;
  const DatasetManifest* target = nullptr;
  const DatasetManifest* target_adapted = nullptr;
};

struct TrainResult {
  EnsembleState state;
  TrainMode mode;
  bool evaluate_teacher;
  std::vector<StepMetrics> epoch_means;
};

struct ClassifierOutputs {
  fs::path checkpoint;  // written when non-empty
  fs::path metrics;     // JSONL (epoch, step, term, value), written when non-empty
  bool verbose = false;
};

/// Trains one model of the given mode; throws on missing/extra datasets or k mismatch.
TrainResult train_classifier(TrainMode mode, const ClassifierData& data, const ClassifierTrainConfig& config,
                             const ClassifierOutputs& outputs = {});

/// Matches target records with their adapted versions by relative path (extension ignored).
/// Returns index pairs (target, adapted); throws if any target record has no counterpart.
std::vector<std::pair<std::size_t, std::size_t>> pair_records(const DatasetManifest& target, const DatasetManifest& adapted);

Checkpoint classifier_checkpoint(const TrainResult& r, const ClassifierTrainConfig& cfg);

/// The evaluation network stored in a classifier checkpoint (teacher or student per its meta).
struct LoadedClassifier {
  Classifier<float> net;
  TrainMode mode;
  std::string network;  // "teacher" or "student"
};
LoadedClassifier load_classifier(const fs::path& path, std::optional<std::string> network = std::nullopt);

/// Softmax probabilities for a batch of images, evaluated in chunks.
Tensor<float> predict(const Classifier<float>& net, const Tensor<float>& images, Index chunk = 64);

}  // namespace styleshift
