#include "gradcheck.hpp"
#include "styleshift/ensemble_da.hpp"
#include "styleshift/image_io.hpp"
#include "styleshift/synthetic.hpp"

#include <doctest.h>

#include <cmath>

using namespace styleshift;
using styleshift::testing::grad_check;
using styleshift::testing::random_tensor;
using V = Var<double>;

namespace {

constexpr double kTol = 1e-4;

V rows(Index n, Index k, std::initializer_list<double> values) {
  Tensor<double> t({n, k});
  Index i = 0;
  for (double v : values) t[i++] = v;
  return V::constant(t);
}

ParameterSet<double> params(std::initializer_list<double> values) {
  ParameterSet<double> p;
  Tensor<double> t({static_cast<Index>(values.size())});
  Index i = 0;
  for (double v : values) t[i++] = v;
  p.add("w", t);
  return p;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("styleshift_test_ensemble_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ClassifierTrainConfig small_config(int epochs) {
  ClassifierTrainConfig c;
  c.net = {4, 4, 2};
  c.resolution = 16;
  c.epochs = epochs;
  c.batch_size = 4;
  return c;
}

Tensor<float> images(std::uint64_t seed, Index n) {
  std::mt19937_64 rng(seed);
  return random_tensor({n, 3, 16, 16}, rng).cast<float>();
}

}  // namespace

TEST_CASE("supervised_loss closed forms and errors") {
  CHECK(supervised_loss(rows(2, 4, {0, 0, 0, 0, 1, 1, 1, 1}), {0, 3}).item() == doctest::Approx(std::log(4.0)));
  CHECK(supervised_loss(rows(1, 3, {0, 50, 0}), {1}).item() <= 1e-10);
  CHECK(supervised_loss(rows(1, 3, {0, 50, 0}), {1}).item() >= 0.0);

  std::mt19937_64 rng(1);
  const auto logits = random_tensor({5, 4}, rng, -3, 3);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  const std::vector<Index> perm{3, 0, 4, 2, 1};
  Tensor<double> permuted({5, 4});
  std::vector<int> plabels;
  for (Index i = 0; i < 5; ++i) {
    permuted.matrix().row(i) = logits.matrix().row(perm[static_cast<std::size_t>(i)]);
    plabels.push_back(labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
  }
  CHECK(supervised_loss(V::constant(permuted), plabels).item() ==
        doctest::Approx(supervised_loss(V::constant(logits), labels).item()).epsilon(1e-14));

  CHECK_THROWS_WITH(supervised_loss(V::constant(logits), {0, 4, 1, 1, 2}), doctest::Contains("out of range"));
  CHECK_THROWS(supervised_loss(V::constant(logits), {0, -1, 1, 1, 2}));
  CHECK_THROWS(supervised_loss(V::constant(logits), {0, 1}));
  auto bad = logits;
  bad[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH(supervised_loss(V::constant(bad), labels), doctest::Contains("non-finite logits"));
}

TEST_CASE("consistency_loss closed forms, symmetry and errors") {
  const auto a = rows(2, 3, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8});
  CHECK(consistency_loss(a, a).item() == 0.0);
  CHECK(consistency_loss(rows(1, 2, {1, 0}), rows(1, 2, {0, 1})).item() == doctest::Approx(1.0));
  CHECK(consistency_loss(rows(1, 2, {0.5, 0.5}), rows(1, 2, {0.5, 0.5})).item() == 0.0);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = softmax(V::constant(random_tensor({4, 5}, rng, -2, 2))), q = softmax(V::constant(random_tensor({4, 5}, rng, -2, 2)));
    CHECK(consistency_loss(p, q).item() == consistency_loss(q, p).item());
    CHECK(consistency_loss(p, q).item() >= 0.0);
  }

  CHECK_THROWS(consistency_loss(rows(1, 2, {1, 0}), rows(1, 3, {1, 0, 0})));
  CHECK_THROWS_WITH(consistency_loss(rows(1, 2, {0.6, 0.6}), rows(1, 2, {0.5, 0.5})), doctest::Contains("not normalized"));
  CHECK_NOTHROW(consistency_loss(rows(1, 2, {0.50005, 0.49999}), rows(1, 2, {0.5, 0.5})));

  const std::vector<double> mask{1, 0};
  const auto b = rows(2, 3, {0.6, 0.2, 0.2, 0.9, 0.05, 0.05});
  const double masked = consistency_loss(a, b, &mask).item();
  const double first_row = (0.16 + 0.01 + 0.09) / 6.0;
  CHECK(masked == doctest::Approx(first_row));
}

TEST_CASE("supervised and consistency gradients match central differences") {
  std::mt19937_64 rng(3);
  const auto logits = random_tensor({4, 5}, rng, -2, 2);
  const std::vector<int> labels{4, 0, 2, 2};
  CHECK(grad_check([&](auto& v) { return supervised_loss(v[0], labels); }, {logits}).relative_error < kTol);

  const auto s = random_tensor({3, 4}, rng, -2, 2), t = random_tensor({3, 4}, rng, -2, 2);
  const auto r = grad_check([](auto& v) { return consistency_loss(softmax(v[0]), softmax(v[1])); }, {s, t});
  CHECK(r.relative_error < kTol);
  CHECK(r.numeric_norm > 0.0);
}

TEST_CASE("ema_update exact cases") {
  auto teacher = params({2, -1, 0.5});
  const auto student = params({4, 3, 0.5});
  ema_update(teacher, student, 1.0);
  CHECK(teacher.at("w").value() == params({2, -1, 0.5}).at("w").value());
  ema_update(teacher, student, 0.5);
  CHECK(teacher.at("w").value()[0] == 3.0);
  CHECK(teacher.at("w").value()[1] == 1.0);
  ema_update(teacher, student, 0.0);
  CHECK(teacher.at("w").value() == student.at("w").value());
  CHECK(student.at("w").value() == params({4, 3, 0.5}).at("w").value());

  CHECK_THROWS(ema_update(teacher, params({1, 2}), 0.5));
  auto renamed = ParameterSet<double>();
  renamed.add("v", Tensor<double>({3}));
  CHECK_THROWS(ema_update(teacher, renamed, 0.5));
  CHECK_THROWS(ema_update(teacher, student, 1.5));
}

TEST_CASE("ema_update two-step composition and convergence") {
  std::mt19937_64 rng(4);
  for (double alpha : {0.3, 0.9, 0.99}) {
    ParameterSet<double> t, s;
    t.add("a", random_tensor({4, 3}, rng));
    s.add("a", random_tensor({4, 3}, rng));
    const Tensor<double> t0 = t.at("a").value(), s0 = s.at("a").value();
    ema_update(t, s, alpha);
    ema_update(t, s, alpha);
    Tensor<double> expected = t0;
    expected.array() = alpha * alpha * t0.array() + (1 - alpha * alpha) * s0.array();
    const double rel = (t.at("a").value().array() - expected.array()).abs().maxCoeff() / expected.array().abs().maxCoeff();
    CHECK(rel <= 1e-6);

    ParameterSet<double> tc, sc;
    tc.add("a", t0);
    sc.add("a", s0);
    const double delta0 = (t0.array() - s0.array()).abs().maxCoeff();
    const int bound = static_cast<int>(std::ceil(std::log(1e-3 / delta0) / std::log(alpha)));
    for (int i = 0; i < bound; ++i) ema_update(tc, sc, alpha);
    CHECK((tc.at("a").value().array() - s0.array()).abs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("classifier outputs probability rows") {
  std::mt19937_64 rng(5);
  const Classifier<float> net({6, 4, 3}, rng);
  const auto p = net.probabilities(Var<float>::constant(images(1, 5))).value();
  CHECK(p.shape() == Shape{5, 6});
  CHECK((p.array() >= 0).all());
  for (Index i = 0; i < 5; ++i) CHECK(std::abs(p.matrix().row(i).sum() - 1.0f) <= 1e-5f);
  CHECK_THROWS(net.logits(Var<float>::constant(random_tensor({1, 3, 12, 12}, rng).cast<float>())));
  CHECK_THROWS(Classifier<float>({1, 4, 3}, rng));
}

TEST_CASE("train_step zero weight, frozen teacher and degenerate pairs") {
  const ClassifierConfig cfg{4, 4, 2};
  const AdamOptions adam{1e-3, 0.9, 0.999, 1e-8};
  const auto sup = images(1, 4), tgt = images(2, 4), mapped = images(3, 4);
  const std::vector<int> labels{0, 1, 2, 3};

  SUBCASE("w_u = 0 equals a supervised-only step") {
    EnsembleState a(cfg, 7, adam, 0.99), b(cfg, 7, adam, 0.99);
    train_step(a, sup, labels, std::make_pair(tgt, mapped), 0.0);
    train_step(b, sup, labels, std::nullopt, 0.0);
    CHECK(a.student.parameters().checksum() == b.student.parameters().checksum());
    CHECK(a.teacher.parameters().checksum() == b.teacher.parameters().checksum());
  }
  SUBCASE("alpha = 1 leaves the teacher untouched and gradient free") {
    EnsembleState s(cfg, 7, adam, 1.0);
    const auto before = s.teacher.parameters().checksum();
    for (int i = 0; i < 3; ++i) {
      const auto m = train_step(s, sup, labels, std::make_pair(tgt, mapped), 1.0);
      CHECK(m.unsupervised > 0.0);
      CHECK(s.teacher.parameters().checksum() == before);
      CHECK_FALSE(s.teacher.parameters().any_grad());
    }
    CHECK(s.step == 3);
    CHECK(s.student.parameters().checksum() != before);
  }
  SUBCASE("student == teacher on identical pair images reduces to supervised") {
    EnsembleState a(cfg, 7, adam, 0.99), b(cfg, 7, adam, 0.99);
    REQUIRE(a.student.parameters().checksum() == a.teacher.parameters().checksum());
    const auto m = train_step(a, sup, labels, std::make_pair(tgt, tgt), 1.0);
    train_step(b, sup, labels, std::nullopt, 1.0);
    CHECK(m.unsupervised == 0.0);
    CHECK(a.student.parameters().checksum() == b.student.parameters().checksum());
  }
  SUBCASE("errors") {
    EnsembleState s(cfg, 7, adam, 0.99);
    CHECK_THROWS_WITH(train_step(s, sup, labels, std::make_pair(tgt, images(3, 2)), 1.0), doctest::Contains("mismatched pair"));
    CHECK_THROWS(train_step(s, sup, labels, std::nullopt, -1.0));
  }
}

TEST_CASE("train_classifier dataset contracts") {
  const auto root = scratch_dir("contracts");
  const SyntheticSpec spec{4, 3, 16};
  const auto a = make_synthetic_domain(2, spec, SyntheticStyle::A, root);
  const auto b = make_synthetic_domain(2, spec, SyntheticStyle::B, root);
  auto a_mapped = a;  // stands in for an adapted copy; only pairing by relative path matters
  auto b_mapped = b;
  const auto cfg = small_config(1);

  CHECK_NOTHROW(train_classifier(TrainMode::base, {&a}, cfg));
  CHECK_THROWS(train_classifier(TrainMode::base, {&a, &a_mapped}, cfg));
  CHECK_THROWS(train_classifier(TrainMode::tune, {&a}, cfg));
  CHECK_THROWS_WITH(train_classifier(TrainMode::ensemble, {&a, &a_mapped}, cfg), doctest::Contains("missing manifest"));
  CHECK_NOTHROW(train_classifier(TrainMode::ensemble, {&a, &a_mapped, &b, &b_mapped}, cfg));

  auto other_k = b;
  other_k.k = 5;
  CHECK_THROWS_WITH(train_classifier(TrainMode::ensemble, {&a, &a_mapped, &other_k, &b_mapped}, cfg), doctest::Contains("k mismatch"));

  auto unpaired = b_mapped;
  unpaired.records.pop_back();
  CHECK_THROWS(train_classifier(TrainMode::ensemble, {&a, &a_mapped, &b, &unpaired}, cfg));

  const auto fresh = train_classifier(TrainMode::base, {&a}, small_config(0));
  const EnsembleState init(cfg.net, cfg.seed, cfg.adam, cfg.ema_decay);
  CHECK(fresh.state.step == 0);
  CHECK(fresh.state.student.parameters().checksum() == init.student.parameters().checksum());
}

TEST_CASE("classifier checkpoints reload the evaluation network") {
  const auto root = scratch_dir("ckpt");
  const SyntheticSpec spec{4, 3, 16};
  const auto a = make_synthetic_domain(2, spec, SyntheticStyle::A, root);
  const auto b = make_synthetic_domain(2, spec, SyntheticStyle::B, root);
  const auto cfg = small_config(2);
  const auto r = train_classifier(TrainMode::ensemble, {&a, &a, &b, &b}, cfg, {root / "m.ckpt", root / "m.jsonl"});
  CHECK(r.evaluate_teacher);
  CHECK(fs::exists(root / "m.jsonl"));

  const auto x = load_images(b.paths(), 16);
  const auto teacher = load_classifier(root / "m.ckpt");
  CHECK(teacher.network == "teacher");
  CHECK(teacher.mode == TrainMode::ensemble);
  CHECK(predict(teacher.net, x) == predict(r.state.teacher, x));
  const auto student = load_classifier(root / "m.ckpt", "student");
  CHECK(predict(student.net, x) == predict(r.state.student, x));
  CHECK_THROWS(load_classifier(root / "m.ckpt", "neither"));

  auto base_cfg = cfg;
  const auto base = train_classifier(TrainMode::base, {&a}, base_cfg, {root / "base.ckpt", {}});
  CHECK_FALSE(base.evaluate_teacher);
  CHECK(load_classifier(root / "base.ckpt").network == "student");
}
