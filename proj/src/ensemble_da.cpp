#include "styleshift/ensemble_da.hpp"

#include "styleshift/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace styleshift {

namespace {

using json = nlohmann::json;

Classifier<float> make_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Classifier<float>(cfg, rng);
}

Tensor<float> gather(const Tensor<float>& images, const std::vector<std::size_t>& idx) {
  const Index per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(idx.size());
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.array().segment(static_cast<Index>(i) * per, per) = images.array().segment(static_cast<Index>(idx[i]) * per, per);
  return out;
}

json classifier_config_json(const ClassifierConfig& c) { return {{"k", c.k}, {"width", c.width}, {"blocks", c.blocks}}; }

ClassifierConfig classifier_config_from_json(const json& j) {
  return {j.at("k").get<int>(), j.at("width").get<Index>(), j.at("blocks").get<int>()};
}

}  // namespace

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::base: return "base";
    case TrainMode::tune: return "tune";
    default: return "ensemble";
  }
}

TrainMode parse_train_mode(const std::string& text) {
  if (text == "base") return TrainMode::base;
  if (text == "tune") return TrainMode::tune;
  if (text == "ensemble") return TrainMode::ensemble;
  throw std::invalid_argument("unknown train mode " + text + " (expected base, tune or ensemble)");
}

EnsembleState::EnsembleState(const ClassifierConfig& cfg, std::uint64_t seed, AdamOptions adam, double decay)
    : config(cfg),
      student(make_classifier(cfg, seed)),
      teacher(make_classifier(cfg, seed)),
      optimizer(student.parameters(), adam),
      ema_decay(decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1]");
  teacher.parameters().copy_values_from(student.parameters());
  teacher.parameters().set_requires_grad(false);
}

StepMetrics train_step(EnsembleState& state, const Tensor<float>& sup_images, const std::vector<int>& sup_labels,
                       const std::optional<std::pair<Tensor<float>, Tensor<float>>>& unsup_pair, double w_u,
                       const ConsistencyOptions& consistency) {
  using V = Var<float>;
  if (!(w_u >= 0.0) || !std::isfinite(w_u)) throw std::invalid_argument("consistency weight must be finite and >= 0");
  StepMetrics m;
  m.weight = w_u;
  V loss = supervised_loss(state.student.logits(V::constant(sup_images)), sup_labels);
  m.supervised = loss.item();
  if (unsup_pair) {
    const auto& [original, mapped] = *unsup_pair;
    if (original.shape() != mapped.shape()) throw std::invalid_argument("mismatched pair lengths: target and mapped batches differ");
    auto consistency_term = [&](const Tensor<float>& student_in, const Tensor<float>& teacher_in) {
      Tensor<float> tp;
      {
        NoGradGuard guard;
        tp = state.teacher.probabilities(V::constant(teacher_in)).value();
      }
      const V sp = state.student.probabilities(V::constant(student_in));
      if (consistency.confidence_threshold <= 0.0) return consistency_loss(sp, V::constant(tp));
      std::vector<float> mask(static_cast<std::size_t>(tp.dim(0)));
      for (Index i = 0; i < tp.dim(0); ++i)
        mask[static_cast<std::size_t>(i)] = tp.matrix().row(i).maxCoeff() >= consistency.confidence_threshold ? 1.0f : 0.0f;
      return consistency_loss(sp, V::constant(tp), &mask);
    };
    V unsup = consistency_term(original, mapped);
    if (consistency.symmetric) unsup = scale(add(unsup, consistency_term(mapped, original)), 0.5f);
    m.unsupervised = unsup.item();
    loss = add(loss, scale(unsup, static_cast<float>(w_u)));
  }
  m.total = loss.item();
  state.student.parameters().zero_grad();
  loss.backward();
  state.optimizer.step();
  state.ema_update();
  ++state.step;
  return m;
}

std::vector<std::pair<std::size_t, std::size_t>> pair_records(const DatasetManifest& target, const DatasetManifest& adapted) {
  std::map<std::string, std::size_t> by_key;
  for (std::size_t j = 0; j < adapted.records.size(); ++j) by_key.emplace(pairing_key(adapted.records[j].rel_path), j);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < target.records.size(); ++i) {
    auto it = by_key.find(pairing_key(target.records[i].rel_path));
    if (it == by_key.end()) throw std::invalid_argument("no adapted counterpart for " + target.records[i].rel_path);
    if (adapted.records[it->second].label != target.records[i].label)
      throw std::invalid_argument("adapted counterpart of " + target.records[i].rel_path + " has a different label");
    pairs.emplace_back(i, it->second);
  }
  return pairs;
}

TrainResult train_classifier(TrainMode mode, const ClassifierData& data, const ClassifierTrainConfig& config,
                             const ClassifierOutputs& outputs) {
  const bool needs_adapted = mode != TrainMode::base, needs_target = mode == TrainMode::ensemble;
  if (!data.source) throw std::invalid_argument("missing manifest for mode " + to_string(mode) + ": source");
  if (needs_adapted && !data.source_adapted) throw std::invalid_argument("missing manifest for mode " + to_string(mode) + ": adapted source");
  if (needs_target && (!data.target || !data.target_adapted))
    throw std::invalid_argument("missing manifest for mode " + to_string(mode) + ": target and adapted target");
  if (!needs_adapted && data.source_adapted) throw std::invalid_argument("mode base takes only the original source");
  if (!needs_target && (data.target || data.target_adapted))
    throw std::invalid_argument("mode " + to_string(mode) + " takes no unsupervised manifests");
  for (const auto* m : {data.source, data.source_adapted, data.target, data.target_adapted})
    if (m && m->k != config.net.k)
      throw std::invalid_argument("manifest k mismatch: manifest has k=" + std::to_string(m->k) + ", classifier k=" + std::to_string(config.net.k));
  if (data.source->empty()) throw std::invalid_argument("empty source manifest");
  if (config.epochs < 0 || config.batch_size < 1) throw std::invalid_argument("classifier epochs must be >= 0 and batch size >= 1");

  TrainResult result{EnsembleState(config.net, config.seed, config.adam, config.ema_decay), mode,
                     mode == TrainMode::ensemble && config.evaluate_teacher, {}};
  auto& state = result.state;

  // supervised pool: original source, plus adapted source in tune/ensemble mode
  Tensor<float> sup_images = load_images(data.source->paths(), config.resolution);
  std::vector<int> sup_labels = data.source->labels();
  if (data.source_adapted) {
    sup_images = concat_rows<float>({sup_images, load_images(data.source_adapted->paths(), config.resolution)});
    const auto more = data.source_adapted->labels();
    sup_labels.insert(sup_labels.end(), more.begin(), more.end());
  }
  Tensor<float> tgt, tgt_mapped;
  if (needs_target) {
    const auto pairs = pair_records(*data.target, *data.target_adapted);
    if (pairs.empty()) throw std::invalid_argument("empty target manifest");
    std::vector<fs::path> a, b;
    for (auto [i, j] : pairs) {
      a.push_back(data.target->path_of(data.target->records[i]));
      b.push_back(data.target_adapted->path_of(data.target_adapted->records[j]));
    }
    tgt = load_images(a, config.resolution);
    tgt_mapped = load_images(b, config.resolution);
  }

  const std::size_t n_sup = sup_labels.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n_sup + bs - 1) / bs;
  const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;
  std::mt19937_64 rng(fnv1a("clf/" + std::to_string(config.seed)));
  std::vector<std::size_t> sup_order(n_sup), unsup_order(needs_target ? static_cast<std::size_t>(tgt.dim(0)) : 0);
  std::iota(sup_order.begin(), sup_order.end(), 0);
  std::iota(unsup_order.begin(), unsup_order.end(), 0);
  std::size_t unsup_pos = unsup_order.size();
  const std::size_t unsup_bs = std::min(bs, unsup_order.size());

  std::ostringstream records;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(sup_order.begin(), sup_order.end(), rng);
    StepMetrics sum;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * bs, hi = std::min(n_sup, lo + bs);
      std::vector<std::size_t> idx(sup_order.begin() + static_cast<std::ptrdiff_t>(lo), sup_order.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(sup_labels[i]);
      std::optional<std::pair<Tensor<float>, Tensor<float>>> unsup;
      if (needs_target) {
        if (unsup_pos + unsup_bs > unsup_order.size()) {
          std::shuffle(unsup_order.begin(), unsup_order.end(), rng);
          unsup_pos = 0;
        }
        std::vector<std::size_t> u(unsup_order.begin() + static_cast<std::ptrdiff_t>(unsup_pos),
                                   unsup_order.begin() + static_cast<std::ptrdiff_t>(unsup_pos + unsup_bs));
        unsup_pos += unsup_bs;
        unsup.emplace(gather(tgt, u), gather(tgt_mapped, u));
      }
      double w = config.w_u;
      if (config.rampup && config.rampup_fraction > 0)
        w *= std::min(1.0, static_cast<double>(state.step + 1) / std::max(1.0, config.rampup_fraction * total_steps));
      const auto m = train_step(state, gather(sup_images, idx), labels, unsup, w, config.consistency);
      sum.supervised += m.supervised;
      sum.unsupervised += m.unsupervised;
      sum.total += m.total;
      sum.weight += m.weight;
      if (!outputs.metrics.empty()) {
        records << json{{"epoch", epoch}, {"step", state.step}, {"term", "supervised"}, {"value", m.supervised}}.dump() << '\n';
        if (needs_target) {
          records << json{{"epoch", epoch}, {"step", state.step}, {"term", "unsupervised"}, {"value", m.unsupervised}}.dump() << '\n';
          records << json{{"epoch", epoch}, {"step", state.step}, {"term", "w_u"}, {"value", m.weight}}.dump() << '\n';
        }
      }
    }
    const double n = static_cast<double>(steps_per_epoch);
    result.epoch_means.push_back({sum.supervised / n, sum.unsupervised / n, sum.total / n, sum.weight / n});
    if (outputs.verbose)
      std::cerr << to_string(mode) << " epoch " << epoch << "/" << config.epochs << " sup " << sum.supervised / n << " unsup "
                << sum.unsupervised / n << '\n';
  }
  if (!outputs.metrics.empty()) atomic_write(outputs.metrics, records.str());
  if (!outputs.checkpoint.empty()) save_checkpoint(classifier_checkpoint(result, config), outputs.checkpoint);
  return result;
}

Checkpoint classifier_checkpoint(const TrainResult& r, const ClassifierTrainConfig& cfg) {
  Checkpoint ckpt;
  for (auto& [name, t] : r.state.student.parameters().export_values()) ckpt.tensors.emplace("student." + name, std::move(t));
  for (auto& [name, t] : r.state.teacher.parameters().export_values()) ckpt.tensors.emplace("teacher." + name, std::move(t));
  r.state.optimizer.export_state(ckpt.tensors, "opt.student.");
  ckpt.meta = {{"kind", "classifier"},
               {"mode", to_string(r.mode)},
               {"network", r.evaluate_teacher ? "teacher" : "student"},
               {"config", classifier_config_json(r.state.config)},
               {"resolution", cfg.resolution},
               {"step", r.state.step},
               {"ema_decay", r.state.ema_decay},
               {"seed", cfg.seed}};
  return ckpt;
}

LoadedClassifier load_classifier(const fs::path& path, std::optional<std::string> network) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "classifier") throw std::runtime_error(path.string() + " is not a classifier checkpoint");
  const std::string which = network.value_or(ckpt.meta.at("network").get<std::string>());
  if (which != "teacher" && which != "student") throw std::invalid_argument("network must be teacher or student");
  LoadedClassifier out{make_classifier(classifier_config_from_json(ckpt.meta.at("config")), 0),
                       parse_train_mode(ckpt.meta.at("mode").get<std::string>()), which};
  out.net.parameters().import_values(ckpt.tensors, which + ".");
  out.net.parameters().set_requires_grad(false);
  return out;
}

Tensor<float> predict(const Classifier<float>& net, const Tensor<float>& images, Index chunk) {
  NoGradGuard guard;
  std::vector<Tensor<float>> parts;
  for (Index lo = 0; lo < images.dim(0); lo += chunk)
    parts.push_back(net.probabilities(Var<float>::constant(images.slice(lo, std::min(images.dim(0), lo + chunk)))).value());
  return concat_rows(parts);
}

}  // namespace styleshift
