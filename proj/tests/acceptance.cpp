// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any failed.
//
// Usage: acceptance [desk.conf] [scratch_dir]
// Criteria 7 and 8 run the desk experiment twice from scratch, which takes most of an hour on
// one core.

#include "gradcheck.hpp"
#include "styleshift/adapted_data.hpp"
#include "styleshift/ensemble_da.hpp"
#include "styleshift/harness.hpp"
#include "styleshift/image_io.hpp"
#include "styleshift/stylegan.hpp"
#include "styleshift/synthetic.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace styleshift;
using styleshift::testing::grad_check;
using styleshift::testing::random_tensor;
using V = Var<double>;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kSuiteSeconds = 60;
constexpr double kDeskSeconds = 30 * 60;
constexpr double kDeterminismTol = 1e-6;
constexpr double kMinEnsembleGain = 0.05;

// Collects failed checks for one criterion; the first few are printed as the reason.
class Report {
 public:
  void check(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
  bool passed() const { return failures_.empty(); }
  std::string detail() const {
    std::string out = notes_;
    for (std::size_t i = 0; i < failures_.size() && i < 3; ++i) out += (out.empty() ? "" : "; ") + ("failed: " + failures_[i]);
    if (failures_.size() > 3) out += "; +" + std::to_string(failures_.size() - 3) + " more";
    return out;
  }

 private:
  std::vector<std::string> failures_;
  std::string notes_;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

StyleRepr<double> style_of(const V& features) {
  StyleRepr<double> s;
  const Index c = features.dim(1);
  s.grams.push_back(reshape(mean_batch(gram(features)), {c, c}));
  s.layer_ids = {"tap"};
  return s;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// ---------------------------------------------------------------- 1

void table_shape(Report& r, const fs::path& scratch) {
  const auto out = fresh_dir(scratch / "roster");
  const auto cfg = ExperimentConfig::from_flat(FlatConfig::parse(R"(
output_dir = )" + out.string() + R"(
seeds = 0, 1
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
models = M_1, M_2, M_3, M_4
model.M_1.mode = base
model.M_1.source = A
model.M_2.mode = base
model.M_2.source = B
model.M_3.mode = tune
model.M_3.source = A
model.M_3.source_adapted = A@A:B
model.M_4.mode = ensemble
model.M_4.source = A
model.M_4.source_adapted = A@A:B
model.M_4.target = B
model.M_4.target_adapted = B@A:B
eval.datasets = A, A@A:B, B, B@A:B, C
eval.topk = 1, 3
eval.full = true
)"));
  const auto m = run_experiment(cfg);
  r.check(m.has_value(), "matrix produced");
  if (!m) return;
  r.check(m->models == std::vector<std::string>{"M_1", "M_2", "M_3", "M_4"}, "columns follow the roster");
  r.check(m->datasets == cfg.eval_datasets, "rows follow the evaluation list");
  r.check(m->seeds == std::vector<std::uint64_t>{0, 1}, "seeds recorded");
  r.check(m->at("A", "M_1").annotation == Annotation::supervised_original, "A seen by M_1");
  r.check(m->at("B", "M_2").annotation == Annotation::supervised_original, "B seen by M_2");
  r.check(m->at("A@A:B", "M_3").annotation == Annotation::supervised_adapted, "A@A:B adapted-seen by M_3");
  r.check(m->at("B", "M_4").annotation == Annotation::unsupervised, "B unsupervised for M_4");
  r.check(m->at("C", "M_4").annotation == Annotation::unseen, "C unseen");
  for (const auto& row : m->cells)
    for (const auto& cell : row)
      for (int k : m->ks) {
        r.check(cell.accuracy.count(k) && cell.per_seed.at(k).size() == 2, "one value per seed");
        r.check(cell.accuracy.at(k) >= 0 && cell.accuracy.at(k) <= 1, "accuracy in [0, 1]");
        r.check(std::abs(cell.accuracy.at(k) - mean(cell.per_seed.at(k))) <= 1e-12, "cell is the seed mean");
        r.check(!cell.provenance.empty(), "provenance recorded");
      }

  const auto md = parse_report(render_report(*m, ReportFormat::markdown), ReportFormat::markdown);
  const auto csv = parse_report(render_report(*m, ReportFormat::csv), ReportFormat::csv);
  r.check(md == csv, "markdown and csv agree");
  r.check(md.models == m->models, "report header");
  r.check(md.rows.size() == m->datasets.size() * m->ks.size(), "one report row per (dataset, k)");
  for (std::size_t i = 0; i < md.rows.size() && i < m->datasets.size() * m->ks.size(); ++i) {
    const auto row = i / m->ks.size();
    const int k = m->ks[i % m->ks.size()];
    r.check(md.rows[i].dataset == m->datasets[row] && md.rows[i].k == k, "row order");
    r.check(md.rows[i].best == m->models[m->best_column(row, k)], "best marked");
    for (std::size_t c = 0; c < m->models.size(); ++c)
      r.check(std::abs(md.rows[i].values[c] - m->cells[row][c].accuracy.at(k)) <= 5e-7, "rendered value");
  }
  r.note(std::to_string(md.rows.size()) + " rows x " + std::to_string(md.models.size()) + " models");
}

// ---------------------------------------------------------------- 2

void loss_math(Report& r) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  double worst = 0;
  auto record = [&](const std::string& name, const testing::GradCheckResult& g) {
    r.check(g.relative_error <= kGradTol, name + " rel err " + fmt(g.relative_error));
    r.check(g.numeric_norm > 0, name + " has a nonzero gradient");
    worst = std::max(worst, g.relative_error);
  };

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor<double>> c, f, im;
    for (int i = 0; i < 4; ++i) {
      c.push_back(random_tensor({2, 3, 2, 2}, rng));
      f.push_back(random_tensor({2, 3, 2, 2}, rng));
      im.push_back(random_tensor({2, 3, 3, 3}, rng));
    }
    record("l_in", grad_check([](auto& v) { return loss_intra<double>({v[0]}, {v[1]}, {v[2]}, {v[3]}); }, c, 96));
    record("l_cross", grad_check([](auto& v) { return loss_cross(style_of(v[0]), style_of(v[1]), style_of(v[2]), style_of(v[3])); }, f, 96));
    record("l_rec", grad_check([](auto& v) { return loss_reconstruction(v[0], v[1], v[2], v[3]); }, im, 96));

    const auto logits = random_tensor({6, 5}, rng, -2, 2);
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng() % 5));
    record("supervised", grad_check([&](auto& v) { return supervised_loss(v[0], labels); }, {logits}));
    const auto s = random_tensor({4, 5}, rng, -2, 2), t = random_tensor({4, 5}, rng, -2, 2);
    record("consistency", grad_check([](auto& v) { return consistency_loss(softmax(v[0]), softmax(v[1])); }, {s, t}));
  }
  const double secs = seconds_since(t0);
  r.check(secs < kSuiteSeconds, "runtime " + fmt(secs) + " s");
  r.note("max rel err " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------- 3

void gram_suite(Report& r) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Index c = 1 + static_cast<Index>(rng() % 8), h = 1 + static_cast<Index>(rng() % 6), w = 1 + static_cast<Index>(rng() % 6);
    const auto f = random_tensor({c, h, w}, rng, -2, 2);
    const Eigen::MatrixXd m = gram_matrix(f).matrix();
    const double top = m.cwiseAbs().maxCoeff();
    r.check((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-6 * top, "symmetry");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    r.check(eig.eigenvalues().minCoeff() >= -1e-6 * std::max(eig.eigenvalues().maxCoeff(), 1e-300), "PSD");

    const double alpha = 0.25 + 0.5 * trial;
    Tensor<double> scaled = f;
    scaled.array() *= alpha;
    const Eigen::MatrixXd ms = gram_matrix(scaled).matrix();
    r.check((ms - alpha * alpha * m).cwiseAbs().maxCoeff() <= 1e-5 * alpha * alpha * top, "scale-quadratic");

    std::vector<Index> perm(static_cast<std::size_t>(h * w));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> shuffled({c, h, w});
    for (Index ch = 0; ch < c; ++ch)
      for (Index p = 0; p < h * w; ++p) shuffled[ch * h * w + p] = f[ch * h * w + perm[static_cast<std::size_t>(p)]];
    r.check((gram_matrix(shuffled).matrix() - m).cwiseAbs().maxCoeff() <= 1e-6 * top, "permutation invariance");
  }

  const Backbone<double> bb(scaled_vgg16_widths(16), 3);
  for (int trial = 0; trial < 4; ++trial) {
    const ImageBatch<double> a(random_tensor({2, 3, 32, 32}, rng), Domain::source);
    const ImageBatch<double> b(random_tensor({2, 3, 32, 32}, rng, -0.5, 1.0), Domain::target);
    const auto sa = extract_style(a, bb), sb = extract_style(b, bb);
    r.check(style_distance(sa, sa).item() == 0.0, "zero self-distance");
    const double dab = style_distance(sa, sb).item();
    r.check(dab >= 0.0, "non-negative");
    r.check(dab == style_distance(sb, sa).item(), "symmetric");
  }
  const double secs = seconds_since(t0);
  r.check(secs < kSuiteSeconds, "runtime " + fmt(secs) + " s");
  r.note(fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------- 4

ParameterSet<double> params(const Tensor<double>& t) {
  ParameterSet<double> p;
  p.add("w", t);
  return p;
}

void ema_suite(Report& r) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto t_init = random_tensor({5, 3}, rng), s_init = random_tensor({5, 3}, rng);
    const auto s = params(s_init);

    auto t = params(t_init);
    ema_update(t, s, 1.0);
    r.check(t.at("w").value() == t_init, "alpha 1 keeps the teacher");
    ema_update(t, s, 0.0);
    r.check(t.at("w").value() == s_init, "alpha 0 copies the student");

    t = params(t_init);
    ema_update(t, s, 0.5);
    Tensor<double> half = t_init;
    half.array() = 0.5 * t_init.array() + 0.5 * s_init.array();
    r.check(t.at("w").value() == half, "alpha 0.5 is the midpoint");
    r.check(s.at("w").value() == s_init, "student untouched");

    for (double alpha : {0.3, 0.9, 0.99, 0.999}) {
      auto tc = params(t_init);
      ema_update(tc, s, alpha);
      ema_update(tc, s, alpha);
      Tensor<double> expected = t_init;
      expected.array() = alpha * alpha * t_init.array() + (1 - alpha * alpha) * s_init.array();
      r.check((tc.at("w").value().array() - expected.array()).abs().maxCoeff() <= 1e-6 * expected.array().abs().maxCoeff(),
              "two-step composition");

      // |θ_T - θ_S| shrinks by alpha per step, so n = ceil(log(eps / δ0) / log(alpha)) steps reach eps
      auto tn = params(t_init);
      const double delta0 = (t_init.array() - s_init.array()).abs().maxCoeff(), eps = 1e-3;
      const int steps = static_cast<int>(std::ceil(std::log(eps / delta0) / std::log(alpha)));
      for (int i = 0; i < steps; ++i) ema_update(tn, s, alpha);
      r.check((tn.at("w").value().array() - s_init.array()).abs().maxCoeff() <= eps * (1 + 1e-9), "convergence bound");
    }
  }
  const double secs = seconds_since(t0);
  r.check(secs < kSuiteSeconds, "runtime " + fmt(secs) + " s");
  r.note(fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------- 5

void identity_generators(Report& r, const fs::path& scratch) {
  std::mt19937_64 rng(6);
  const Generator<double> id({"identity", 8, 3}, rng);
  const Backbone<double> bb(scaled_vgg16_widths(16), 2);
  double worst_in = 0;
  for (int trial = 0; trial < 3; ++trial) {
    const ImageBatch<double> is(random_tensor({2, 3, 32, 32}, rng), Domain::source), it(random_tensor({2, 3, 32, 32}, rng), Domain::target);
    const auto su = translate(id, is), tu = translate(id, it);
    r.check(loss_reconstruction(is, translate(id, su), it, translate(id, tu)).item() == 0.0, "l_rec == 0");
    const double l_in = loss_intra(extract_content(is, bb), extract_content(su, bb), extract_content(it, bb), extract_content(tu, bb)).item();
    r.check(l_in <= 1e-5, "l_in within noise");
    worst_in = std::max(worst_in, l_in);
  }

  const auto root = fresh_dir(scratch / "identity");
  const auto m = make_synthetic_domain(5, SyntheticSpec{4, 3, 32}, SyntheticStyle::A, root / "data");
  GanConfig cfg;
  cfg.generator.arch = "identity";
  cfg.generator.width = 4;
  cfg.discriminator.width = 4;
  cfg.resolution = 32;
  GanState(cfg).save(root / "id.ckpt");
  const auto original = load_images(m.paths(), 32);
  float worst_px = 0;
  for (auto dir : {Direction::source_to_adapted, Direction::target_to_adapted})
    for (auto out : {AdaptedOutput::translated, AdaptedOutput::reconstructed}) {
      AdaptedDatasetSpec spec;
      spec.checkpoints = {root / "id.ckpt"};
      spec.direction = dir;
      spec.output = out;
      spec.output_root = root / ("out_" + to_string(dir) + "_" + to_string(out));
      const auto a = materialize_adapted(m, spec);
      r.check(a.labels() == m.labels(), "labels kept");
      const float err = (load_images(a.paths(), 32).array() - original.array()).abs().maxCoeff();
      r.check(err <= 1.0f / 255.0f, "pixels within 1/255");
      worst_px = std::max(worst_px, err);
    }
  r.note("max l_in " + fmt(worst_in, 3) + ", max pixel error " + fmt(worst_px * 255, 3) + "/255");
}

// ---------------------------------------------------------------- 6

double brute_force_top_k(const Tensor<double>& p, const std::vector<int>& labels, int k) {
  Index hits = 0;
  for (Index i = 0; i < p.dim(0); ++i) {
    std::vector<Index> order(static_cast<std::size_t>(p.dim(1)));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return p.at(i, a) > p.at(i, b); });
    hits += std::find(order.begin(), order.begin() + k, labels[static_cast<std::size_t>(i)]) != order.begin() + k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(p.dim(0));
}

void top_k_oracle(Report& r) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<Index> dim(1, 10);
  std::uniform_int_distribution<int> level(0, 4);
  int compared = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = dim(rng), c = std::max<Index>(2, dim(rng));
    Tensor<double> p({n, c});
    // half the instances use coarse levels so ties are common
    for (Index i = 0; i < p.size(); ++i) p[i] = trial % 2 ? level(rng) : std::uniform_real_distribution<double>(0, 1)(rng);
    for (Index i = 0; i < n; ++i) {
      const double s = p.matrix().row(i).sum();
      if (s > 0) p.matrix().row(i) /= s;
    }
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(c)));
    for (int k = 1; k <= c; ++k, ++compared)
      r.check(top_k_accuracy(p, labels, k) == brute_force_top_k(p, labels, k), "instance " + std::to_string(trial) + " k=" + std::to_string(k));
  }
  r.note(std::to_string(compared) + " (instance, k) pairs");
}

// ---------------------------------------------------------------- 7 and 8

struct DeskRun {
  std::optional<TransferMatrix> matrix;
  double seconds = 0;
  std::string error;
};

DeskRun run_desk(const FlatConfig& base, const fs::path& out) {
  auto flat = base;
  flat.set("output_dir", fresh_dir(out).string());
  DeskRun run;
  const auto t0 = Clock::now();
  try {
    run.matrix = run_experiment(ExperimentConfig::from_flat(flat));
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  run.seconds = seconds_since(t0);
  return run;
}

std::vector<double> per_seed(const TransferMatrix& m, const std::string& dataset, const std::string& model) {
  return m.at(dataset, model).per_seed.at(1);
}

void desk_end_to_end(Report& r, const FlatConfig& flat, const DeskRun& run, const fs::path& out) {
  r.check(run.error.empty(), "run: " + run.error);
  const auto cfg = ExperimentConfig::from_flat(flat);
  // the setting itself is part of the criterion
  r.check(cfg.synthetic.k == 8 && cfg.synthetic.k * cfg.synthetic.n_per_class == 200, "k = 8, 200 images per domain");
  r.check(cfg.resolution == 64, "64x64");
  r.check(cfg.gan.batch_size == 8 && cfg.clf.batch_size == 8, "batch 8");
  r.check(cfg.gan.weights.lambda == std::array<double, 6>{1, 1, 1, 1, 1, 1}, "lambda = 1");
  r.check(cfg.gan.epochs <= 10, "at most 10 GAN epochs");
  r.check(cfg.seeds.size() == 3, "3 seeds");
  r.check(run.seconds <= kDeskSeconds, "runtime " + fmt(run.seconds) + " s");
  if (!run.matrix) return;
  const auto& m = *run.matrix;

  // (a) adapted source is closer in style to the target than the original source
  const auto bb = make_backbone(cfg);
  const auto A = load_images(load_manifest(out / "data" / "A.tsv").paths(), cfg.resolution);
  const auto B = load_images(load_manifest(out / "data" / "B.tsv").paths(), cfg.resolution);
  const double d_orig = dataset_style_distance(bb, A, B);
  std::vector<double> d_adapted;
  for (auto seed : cfg.seeds) {
    const auto adapted = out / ("seed_" + std::to_string(seed)) / "adapted" / "A_B" / "A.tsv";
    d_adapted.push_back(dataset_style_distance(bb, load_images(load_manifest(adapted).paths(), cfg.resolution), B));
    r.check(d_adapted.back() < d_orig, "(a) seed " + std::to_string(seed) + " style distance " + fmt(d_adapted.back()) + " vs " + fmt(d_orig));
  }
  r.check(mean(d_adapted) < d_orig, "(a) mean style distance");

  // (b) target ordering
  const double base_b = mean(per_seed(m, "B", "M_base")), tune_b = mean(per_seed(m, "B", "M_tune")),
               ens_b = mean(per_seed(m, "B", "M_ensemb"));
  r.check(ens_b > tune_b, "(b) ensemb " + fmt(ens_b) + " > tune " + fmt(tune_b));
  r.check(tune_b > base_b, "(b) tune " + fmt(tune_b) + " > base " + fmt(base_b));
  r.check(ens_b - base_b >= kMinEnsembleGain, "(b) ensemb - base " + fmt(ens_b - base_b) + " >= 0.05");

  // (c) held-out style
  const double base_c = mean(per_seed(m, "C", "M_base")), ens_c = mean(per_seed(m, "C", "M_ensemb"));
  r.check(ens_c >= base_c, "(c) ensemb " + fmt(ens_c) + " >= base " + fmt(base_c) + " on C");

  r.note("style A->B " + fmt(d_orig) + ", A@A:B->B " + fmt(mean(d_adapted)) + "; B top-1 base/tune/ensemb " + fmt(base_b, 3) + "/" +
         fmt(tune_b, 3) + "/" + fmt(ens_b, 3) + "; C base/ensemb " + fmt(base_c, 3) + "/" + fmt(ens_c, 3) + "; " +
         fmt(run.seconds, 4) + " s");
}

void determinism(Report& r, const DeskRun& first, const DeskRun& second) {
  r.check(first.matrix && second.matrix, "both runs produced matrices");
  if (!first.matrix || !second.matrix) return;
  double diff = 0;
  try {
    diff = max_cell_difference(*first.matrix, *second.matrix);
  } catch (const std::exception& e) {
    r.check(false, e.what());
    return;
  }
  r.check(diff <= kDeterminismTol, "max cell difference " + fmt(diff));
  r.note("max cell difference " + fmt(diff, 3) + ", second run " + fmt(second.seconds, 4) + " s");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(STYLESHIFT_DESK_CONFIG);
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "styleshift_acceptance";
  fs::create_directories(scratch);

  int failed = 0;
  auto criterion = [&](int id, const std::function<void(Report&)>& body) {
    Report r;
    try {
      body(r);
    } catch (const std::exception& e) {
      r.check(false, std::string("exception: ") + e.what());
    }
    failed += r.passed() ? 0 : 1;
    std::printf("criterion %d: %s  %s\n", id, r.passed() ? "PASS" : "FAIL", r.detail().c_str());
    std::fflush(stdout);
  };

  criterion(1, [&](Report& r) { table_shape(r, scratch); });
  criterion(2, loss_math);
  criterion(3, gram_suite);
  criterion(4, ema_suite);
  criterion(5, [&](Report& r) { identity_generators(r, scratch); });
  criterion(6, top_k_oracle);

  FlatConfig desk;
  DeskRun first, second;
  try {
    desk = FlatConfig::load(config);
    first = run_desk(desk, scratch / "desk_1");
    second = run_desk(desk, scratch / "desk_2");
  } catch (const std::exception& e) {
    first.error = e.what();
  }
  criterion(7, [&](Report& r) { desk_end_to_end(r, desk, first, scratch / "desk_1"); });
  criterion(8, [&](Report& r) { determinism(r, first, second); });
  return failed ? 1 : 0;
}
