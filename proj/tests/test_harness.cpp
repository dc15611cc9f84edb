#include "styleshift/harness.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace styleshift;

namespace {

Tensor<double> probs(Index n, Index k, std::initializer_list<double> values) {
  Tensor<double> t({n, k});
  Index i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

// Sorts class indices by descending probability, lower index first on ties, and checks whether
// the label is among the first k.
double brute_force_top_k(const Tensor<double>& p, const std::vector<int>& labels, int k) {
  const Index n = p.dim(0), c = p.dim(1);
  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> order(static_cast<std::size_t>(c));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return p.at(i, a) > p.at(i, b); });
    const auto end = order.begin() + k;
    hits += std::find(order.begin(), end, labels[static_cast<std::size_t>(i)]) != end ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

TransferMatrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, const std::vector<int>& ks) {
  TransferMatrix m;
  for (std::size_t r = 0; r < rows; ++r) m.datasets.push_back("D" + std::to_string(r));
  for (std::size_t c = 0; c < cols; ++c) m.models.push_back("M_" + std::to_string(c));
  m.ks = ks;
  m.seeds = {0, 1};
  m.cells.assign(rows, std::vector<TransferCell>(cols));
  std::uniform_int_distribution<int> level(0, 8);
  for (auto& row : m.cells)
    for (auto& cell : row) {
      for (int k : ks) {
        // coarse levels so ties are common
        const double a = level(rng) / 8.0, b = level(rng) / 8.0;
        cell.per_seed[k] = {a, b};
        cell.accuracy[k] = (a + b) / 2;
      }
      cell.annotation = static_cast<Annotation>(level(rng) % 4);
      cell.provenance = "dataset=original model=x.ckpt";
    }
  return m;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("styleshift_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

FlatConfig tiny_experiment(const fs::path& out) {
  return FlatConfig::parse(R"(
output_dir = )" + out.string() + R"(
seeds = 0
resolution = 16
synthetic.styles = A, B, C
synthetic.k = 4
synthetic.n_per_class = 3
gan.pairs = A:B
gan.epochs = 1
gan.checkpoint_epoch = 1
gan.generator_width = 4
gan.discriminator_width = 4
backbone.width_divisor = 16
clf.width = 4
clf.epochs = 1
clf.batch_size = 4
models = M_base, M_tune, M_ensemb
model.M_base.mode = base
model.M_base.source = A
model.M_tune.mode = tune
model.M_tune.source = A
model.M_tune.source_adapted = A@A:B
model.M_ensemb.mode = ensemble
model.M_ensemb.source = A
model.M_ensemb.source_adapted = A@A:B
model.M_ensemb.target = B
model.M_ensemb.target_adapted = B@A:B
eval.datasets = A, B, C
eval.topk = 1, 2
eval.full = true
)");
}

}  // namespace

TEST_CASE("top_k_accuracy hand values") {
  CHECK(top_k_accuracy(probs(2, 2, {0.9, 0.1, 0.2, 0.8}), {0, 0}, 1) == 0.5);
  CHECK(top_k_accuracy(probs(2, 2, {0.9, 0.1, 0.2, 0.8}), {0, 0}, 2) == 1.0);
  CHECK(top_k_accuracy(probs(3, 3, {0.1, 0.2, 0.7, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25}), {0, 1, 2}, 3) == 1.0);
  // uniform rows: only label 0 wins the tie at k = 1
  const auto uniform = probs(4, 4, {.25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25, .25});
  CHECK(top_k_accuracy(uniform, {0, 1, 2, 3}, 1) == 0.25);
  CHECK(top_k_accuracy(uniform, {0, 1, 2, 3}, 1) == brute_force_top_k(uniform, {0, 1, 2, 3}, 1));
  CHECK(top_k_accuracy(uniform, {3, 3, 3, 3}, 3) == 0.0);
  CHECK_THROWS(top_k_accuracy(uniform, {0, 1, 2, 3}, 0));
  CHECK_THROWS(top_k_accuracy(uniform, {0, 1, 2, 3}, 5));
  CHECK_THROWS(top_k_accuracy(uniform, {0, 1}, 1));
  CHECK_THROWS(top_k_accuracy(uniform, {0, 1, 2, 4}, 1));
}

TEST_CASE("top_k_accuracy equals the brute-force oracle and is monotone in k") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<Index> dim(1, 10);
  std::uniform_int_distribution<int> level(0, 4);
  int mismatches = 0, non_monotone = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = dim(rng), c = std::max<Index>(2, dim(rng));
    Tensor<double> p({n, c});
    for (Index i = 0; i < p.size(); ++i) p[i] = level(rng);  // many ties
    for (Index i = 0; i < n; ++i) p.matrix().row(i) /= p.matrix().row(i).sum() > 0 ? p.matrix().row(i).sum() : 1.0;
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(c)));
    double prev = 0;
    for (int k = 1; k <= c; ++k) {
      const double got = top_k_accuracy(p, labels, k);
      mismatches += got != brute_force_top_k(p, labels, k) ? 1 : 0;
      non_monotone += got < prev ? 1 : 0;
      prev = got;
    }
    CHECK(prev == 1.0);
  }
  CHECK(mismatches == 0);
  CHECK(non_monotone == 0);
}

TEST_CASE("annotations follow the roster") {
  ModelSpec m{"M", TrainMode::ensemble, "A", "A@A:B", "B", "B@A:B"};
  CHECK(annotate(m, "A") == Annotation::supervised_original);
  CHECK(annotate(m, "A@A:B") == Annotation::supervised_adapted);
  CHECK(annotate(m, "B") == Annotation::unsupervised);
  CHECK(annotate(m, "B@A:B") == Annotation::unsupervised);
  CHECK(annotate(m, "C") == Annotation::unseen);
  for (const auto& d : m.supervised()) CHECK(annotate(m, d) != Annotation::unseen);
  const ModelSpec base{"M0", TrainMode::base, "A", "", "", ""};
  CHECK(annotate(base, "A@A:B") == Annotation::unseen);
  CHECK(base.unsupervised().empty());
  for (auto a : {Annotation::supervised_original, Annotation::supervised_adapted, Annotation::unsupervised, Annotation::unseen})
    CHECK(parse_annotation(to_string(a)) == a);
}

TEST_CASE("adapted dataset names") {
  const auto a = parse_adapted_name("B@A:B");
  REQUIRE(a);
  CHECK(a->dataset == "B");
  CHECK(a->direction() == Direction::target_to_adapted);
  CHECK(parse_adapted_name("A@A:B")->direction() == Direction::source_to_adapted);
  CHECK_FALSE(parse_adapted_name("A"));
  CHECK_THROWS(parse_adapted_name("C@A:B"));
  CHECK_THROWS(parse_adapted_name("A@AB"));
}

TEST_CASE("reports: single cell, determinism and errors") {
  std::mt19937_64 rng(1);
  const auto one = random_matrix(rng, 1, 1, {1});
  const auto csv = render_report(one, ReportFormat::csv);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(render_report(one, "csv") == csv);
  CHECK(render_report(one, "markdown") == render_report(one, ReportFormat::markdown));
  CHECK_THROWS(render_report(one, "html"));
  CHECK_THROWS(render_report(TransferMatrix{}, ReportFormat::csv));
}

TEST_CASE("reports: markdown round-trips to the csv values and marks the leftmost best") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_matrix(rng, 1 + rng() % 4, 1 + rng() % 5, {1, 5});
    const auto from_csv = parse_report(render_report(m, ReportFormat::csv), ReportFormat::csv);
    const auto from_md = parse_report(render_report(m, ReportFormat::markdown), ReportFormat::markdown);
    CHECK(from_md == from_csv);
    REQUIRE(from_csv.rows.size() == m.datasets.size() * m.ks.size());
    for (const auto& row : from_csv.rows) {
      const auto r = static_cast<std::size_t>(std::find(m.datasets.begin(), m.datasets.end(), row.dataset) - m.datasets.begin());
      std::size_t argmax = 0;
      for (std::size_t c = 0; c < m.models.size(); ++c) {
        CHECK(row.values[c] == doctest::Approx(m.cells[r][c].accuracy.at(row.k)).epsilon(1e-9));
        if (m.cells[r][c].accuracy.at(row.k) > m.cells[r][argmax].accuracy.at(row.k)) argmax = c;
      }
      CHECK(row.best == m.models[argmax]);
    }
  }
}

TEST_CASE("transfer matrices round-trip through json") {
  std::mt19937_64 rng(3);
  const auto m = random_matrix(rng, 3, 2, {1, 5});
  const auto back = transfer_matrix_from_json(nlohmann::json::parse(to_json(m).dump()));
  CHECK(max_cell_difference(m, back) == 0.0);
  CHECK(render_report(back, ReportFormat::csv) == render_report(m, ReportFormat::csv));
  CHECK(back.at("D1", "M_0").provenance == m.cells[1][0].provenance);
  CHECK_THROWS(max_cell_difference(m, random_matrix(rng, 2, 2, {1, 5})));
}

TEST_CASE("experiment configuration parsing and validation") {
  const auto flat = tiny_experiment("/tmp/unused");
  const auto cfg = ExperimentConfig::from_flat(flat);
  CHECK(cfg.models.size() == 3);
  CHECK(cfg.gan_pairs == std::vector<std::pair<std::string, std::string>>{{"A", "B"}});
  CHECK(cfg.adapted_dataset_names() == std::vector<std::string>{"A@A:B", "B@A:B"});
  CHECK(cfg.topk == std::vector<int>{1, 2});
  CHECK(cfg.clf.evaluate_teacher);
  CHECK(cfg.gan.weights.lambda == std::array<double, 6>{1, 1, 1, 1, 1, 1});

  auto with = [&](const std::string& key, const std::string& value) {
    auto f = flat;
    f.set(key, value);
    return f;
  };
  CHECK_THROWS_WITH(ExperimentConfig::from_flat(with("gan.epoch", "3")), doctest::Contains("unknown config key"));
  CHECK_THROWS(ExperimentConfig::from_flat(with("model.M_tune.source_adapted", "")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("model.M_base.target", "B")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("eval.datasets", "A, D")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("eval.datasets", "C@A:C")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("eval.topk", "1, 5")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("gan.checkpoint_epoch", "2")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("model.M_x.mode", "base")));
  CHECK_THROWS(ExperimentConfig::from_flat(with("clf.eval_network", "both")));
  CHECK_THROWS(FlatConfig::parse("a = 1\na = 2\n"));
  CHECK_THROWS(FlatConfig::parse("no equals sign\n"));
}

TEST_CASE("run_experiment produces the roster matrix, resumes and names failing stages") {
  const auto out = scratch_dir("run");
  auto flat = tiny_experiment(out);
  const auto cfg = ExperimentConfig::from_flat(flat);
  const auto m = run_experiment(cfg);
  REQUIRE(m);
  CHECK(m->datasets == std::vector<std::string>{"A", "B", "C"});
  CHECK(m->models == std::vector<std::string>{"M_base", "M_tune", "M_ensemb"});
  CHECK(m->at("C", "M_ensemb").annotation == Annotation::unseen);
  CHECK(m->at("B", "M_ensemb").annotation == Annotation::unsupervised);
  CHECK(m->at("A", "M_tune").annotation == Annotation::supervised_original);
  for (const auto& row : m->cells)
    for (const auto& cell : row)
      for (const auto& [k, acc] : cell.accuracy) {
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
      }
  CHECK(m->at("A", "M_tune").provenance.find("seed_0/models/M_tune.ckpt") != std::string::npos);
  for (const char* f : {"matrix.json", "report.csv", "report.md"}) CHECK(fs::exists(out / f));

  const auto model_ckpt = out / "seed_0" / "models" / "M_ensemb.ckpt";
  const auto stamp = fs::last_write_time(model_ckpt);
  const auto csv = read_file(out / "report.csv");
  const auto again = run_experiment(cfg);
  CHECK(max_cell_difference(*m, *again) == 0.0);
  CHECK(fs::last_write_time(model_ckpt) == stamp);
  CHECK(read_file(out / "report.csv") == csv);

  // a single-model roster gives one column
  FlatConfig flat_single;
  for (const auto& [k, v] : flat.values())
    if (k.rfind("model.M_base", 0) == 0 || k.rfind("model.", 0) != 0) flat_single.set(k, v);
  flat_single.set("output_dir", (out / "single").string());
  flat_single.set("models", "M_base");
  flat_single.set("gan.pairs", "");
  flat_single.set("eval.datasets", "A, B");
  const auto m1 = run_experiment(ExperimentConfig::from_flat(flat_single));
  REQUIRE(m1);
  CHECK(m1->cells.size() == 2);
  CHECK(m1->cells[0].size() == 1);

  // a corrupted GAN checkpoint fails the generate stage and keeps earlier artifacts
  auto broken = flat;
  broken.set("output_dir", (out / "broken").string());
  const auto bcfg = ExperimentConfig::from_flat(broken);
  run_experiment(bcfg, {Stage::train_gan, false});
  const auto ckpt = out / "broken" / "seed_0" / "gan" / "A_B" / "epoch_0001.ckpt";
  REQUIRE(fs::exists(ckpt));
  atomic_write(ckpt, "garbage");
  try {
    run_experiment(bcfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::generate);
    CHECK(std::string(e.what()).rfind("generate: ", 0) == 0);
  }
  CHECK(fs::exists(out / "broken" / "data" / "A.tsv"));

  auto missing = flat;
  missing.set("output_dir", (out / "missing").string());
  missing.set("dataset.X.root", (out / "nowhere").string());
  try {
    run_experiment(ExperimentConfig::from_flat(missing));
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::data);
  }
}
