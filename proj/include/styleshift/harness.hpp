#pragma once

// Experiment orchestration: configuration, top-k evaluation, transfer matrices and reports.

#include "styleshift/adapted_data.hpp"
#include "styleshift/config.hpp"
#include "styleshift/ensemble_da.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace styleshift {

/// Fraction of rows whose label is among the k highest-probability classes. A class outranks
/// the label when its probability is higher, or equal with a lower class index.
template <typename Scalar>
double top_k_accuracy(const Tensor<Scalar>& probs, const std::vector<int>& labels, int k) {
  if (probs.rank() != 2) throw std::invalid_argument("top_k_accuracy expects an (N, classes) array");
  const Index n = probs.dim(0), c = probs.dim(1);
  if (k < 1 || k > c) throw std::invalid_argument("k=" + std::to_string(k) + " out of range [1, " + std::to_string(c) + "]");
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("top_k_accuracy: label count does not match rows");
  if (n == 0) throw std::invalid_argument("top_k_accuracy: no rows");
  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::invalid_argument("label out of range");
    const Scalar py = probs.at(i, y);
    Index rank = 0;
    for (Index j = 0; j < c; ++j) {
      const Scalar pj = probs.at(i, j);
      rank += (pj > py || (pj == py && j < y)) ? 1 : 0;
    }
    hits += rank < k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

enum class Annotation { supervised_original, supervised_adapted, unsupervised, unseen };

std::string to_string(Annotation a);
Annotation parse_annotation(const std::string& text);

struct ModelSpec {
  std::string name;
  TrainMode mode = TrainMode::base;
  std::string source;
  std::string source_adapted;
  std::string target;
  std::string target_adapted;

  std::vector<std::string> supervised() const;
  std::vector<std::string> unsupervised() const;
};

/// Derived mechanically from the model's dataset lists.
Annotation annotate(const ModelSpec& model, const std::string& dataset);

struct TransferCell {
  std::map<int, double> accuracy;                // k -> mean over seeds
  std::map<int, std::vector<double>> per_seed;   // k -> one value per seed
  Annotation annotation = Annotation::unseen;
  std::string provenance;                        // dataset provenance and model checkpoints
};

/// Rows are evaluation datasets, columns are models.
struct TransferMatrix {
  std::vector<std::string> datasets;
  std::vector<std::string> models;
  std::vector<int> ks;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<TransferCell>> cells;  // [row][column]

  const TransferCell& at(const std::string& dataset, const std::string& model) const;
  /// Index of the best column for a row at top-k (leftmost on ties).
  std::size_t best_column(std::size_t row, int k) const;
};

nlohmann::json to_json(const TransferMatrix& m);
TransferMatrix transfer_matrix_from_json(const nlohmann::json& j);

/// Largest per-cell absolute difference over all k; throws if the shapes differ.
double max_cell_difference(const TransferMatrix& a, const TransferMatrix& b);

enum class ReportFormat { csv, markdown };
ReportFormat parse_report_format(const std::string& text);

/// Deterministic text rendering; rows are (dataset, k) pairs, the best model is marked per row.
std::string render_report(const TransferMatrix& m, ReportFormat format);
std::string render_report(const TransferMatrix& m, const std::string& format);

/// Values parsed back out of a rendered report.
struct ReportRow {
  std::string dataset;
  int k = 1;
  std::vector<double> values;
  std::string best;
  std::vector<std::string> annotations;
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};
struct ParsedReport {
  std::vector<std::string> models;
  std::vector<ReportRow> rows;
  friend bool operator==(const ParsedReport&, const ParsedReport&) = default;
};
ParsedReport parse_report(const std::string& text, ReportFormat format);

// ---------------------------------------------------------------- experiment configuration

struct DatasetSource {
  std::string name;
  fs::path root;    // ingested from root/<domain>/<class>/<image>
  std::string domain;
  double fraction = 1.0;
};

struct AdaptedName {
  std::string dataset;  // X in X@S:T
  std::string source;   // S
  std::string target;   // T
  Direction direction() const { return dataset == source ? Direction::source_to_adapted : Direction::target_to_adapted; }
  std::string pair() const { return source + ":" + target; }
};

/// Parses "X@S:T"; X must be S or T.
std::optional<AdaptedName> parse_adapted_name(const std::string& name);

struct ExperimentConfig {
  fs::path output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  bool deterministic = true;
  int workers = 1;
  Index resolution = 64;

  // synthetic data
  std::vector<std::string> synthetic_styles;
  SyntheticSpec synthetic;
  std::uint64_t synthetic_seed = 7;
  // real data
  std::vector<DatasetSource> datasets;

  // GAN
  std::vector<std::pair<std::string, std::string>> gan_pairs;
  GanConfig gan;
  int checkpoint_epoch = 5;
  std::vector<int> mix_epochs;  // several epochs mixed into one adapted dataset; empty = checkpoint_epoch
  AdaptedOutput adapted_output = AdaptedOutput::translated;

  // backbone
  fs::path backbone_weights;
  Index backbone_width_divisor = 4;
  std::uint64_t backbone_seed = 1;

  // classifiers
  ClassifierTrainConfig clf;
  std::vector<ModelSpec> models;

  // evaluation
  std::vector<std::string> eval_datasets;
  std::vector<int> topk{1, 5};
  bool eval_full = false;
  double train_fraction = 0.9;

  static ExperimentConfig from_flat(const FlatConfig& flat);
  /// Throws when the roster references unknown datasets or modes lack their datasets.
  void validate() const;
  std::vector<std::string> original_dataset_names() const;
  std::vector<std::string> adapted_dataset_names() const;
};

/// Pipeline stages, in execution order.
enum class Stage { data, train_gan, generate, train_clf, evaluate, report };
std::string to_string(Stage s);

/// Failure in a named stage; partial artifacts stay on disk.
class StageError : public std::runtime_error {
 public:
  StageError(Stage s, const std::string& what) : std::runtime_error(to_string(s) + ": " + what), stage_(s) {}
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

struct RunOptions {
  Stage until = Stage::report;
  bool verbose = false;
};

/// Runs every stage up to `until`, skipping work whose artifacts already exist. Returns the
/// aggregated matrix when the report stage ran.
std::optional<TransferMatrix> run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Loads the backbone named by the configuration (weights file or deterministic random init).
Backbone<float> make_backbone(const ExperimentConfig& config);

/// Mean style distance between the batch-averaged styles of two image sets (chunked).
double dataset_style_distance(const Backbone<float>& backbone, const Tensor<float>& a, const Tensor<float>& b, Index chunk = 32);

}  // namespace styleshift
