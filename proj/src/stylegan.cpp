#include "styleshift/stylegan.hpp"

#include "styleshift/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace styleshift {

namespace {

using json = nlohmann::json;

constexpr std::array<const char*, 5> kNetworkNames{"U_s", "U_t", "D_style_s", "D_style_t", "D_content"};

std::array<const ParameterSet<float>*, 5> networks(const GanState& s) {
  return {&s.U_s.parameters(), &s.U_t.parameters(), &s.discs.style_s.parameters(), &s.discs.style_t.parameters(),
          &s.discs.content.parameters()};
}

std::array<ParameterSet<float>*, 5> networks(GanState& s) {
  return {&s.U_s.parameters(), &s.U_t.parameters(), &s.discs.style_s.parameters(), &s.discs.style_t.parameters(),
          &s.discs.content.parameters()};
}

void set_discriminators_trainable(GanState& s, bool on) {
  s.discs.style_s.parameters().set_requires_grad(on);
  s.discs.style_t.parameters().set_requires_grad(on);
  s.discs.content.parameters().set_requires_grad(on);
}

Tensor<float> gather(const Tensor<float>& images, const std::vector<Index>& order, std::size_t begin, Index count) {
  const Index per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = count;
  Tensor<float> out(shape);
  for (Index i = 0; i < count; ++i)
    out.array().segment(i * per, per) = images.array().segment(order[begin + static_cast<std::size_t>(i)] * per, per);
  return out;
}

// Cycles through a shuffled index list, reshuffling whenever fewer than `count` indices remain.
class BatchSampler {
 public:
  BatchSampler(Index n, Index batch) : order_(static_cast<std::size_t>(n)), batch_(std::min(batch, n)) {
    std::iota(order_.begin(), order_.end(), Index{0});
    pos_ = order_.size();
  }
  Tensor<float> next(const Tensor<float>& images, std::mt19937_64& rng) {
    if (pos_ + static_cast<std::size_t>(batch_) > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng);
      pos_ = 0;
    }
    auto out = gather(images, order_, pos_, batch_);
    pos_ += static_cast<std::size_t>(batch_);
    return out;
  }

 private:
  std::vector<Index> order_;
  Index batch_;
  std::size_t pos_;
};

std::vector<std::string> read_lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

void GanConfig::validate() const {
  weights.validate();
  if (epochs < 0) throw std::invalid_argument("gan epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("gan batch size must be >= 1");
  if (!(adam.lr > 0)) throw std::invalid_argument("gan learning rate must be positive");
  if (resolution < Backbone<float>::kMinResolution || resolution % Backbone<float>::kMinResolution != 0)
    throw std::invalid_argument("gan resolution must be a positive multiple of 16");
  if (generator.arch != "identity" && resolution % (Index{1} << generator.depth) != 0)
    throw std::invalid_argument("gan resolution must be divisible by 2^generator depth");
}

json to_json(const GanConfig& c) {
  return {{"generator", {{"arch", c.generator.arch}, {"width", c.generator.width}, {"depth", c.generator.depth}}},
          {"discriminator", {{"width", c.discriminator.width}, {"layers", c.discriminator.layers}}},
          {"lambda", c.weights.lambda},
          {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"resolution", c.resolution},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

GanConfig gan_config_from_json(const json& j) {
  GanConfig c;
  c.generator.arch = j.at("generator").at("arch").get<std::string>();
  c.generator.width = j.at("generator").at("width").get<Index>();
  c.generator.depth = j.at("generator").at("depth").get<int>();
  c.discriminator.width = j.at("discriminator").at("width").get<Index>();
  c.discriminator.layers = j.at("discriminator").at("layers").get<int>();
  c.weights.lambda = j.at("lambda").get<std::array<double, 6>>();
  const auto& a = j.at("adam");
  c.adam = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("eps").get<double>()};
  c.resolution = j.at("resolution").get<Index>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::string config_hash(const GanConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("epochs");  // extending training keeps the same run identity
  return fnv1a_hex(j.dump());
}

GanState::GanState(const GanConfig& cfg) : config(cfg) {
  config.validate();
  std::mt19937_64 rng(cfg.seed);
  U_s = Generator<float>(cfg.generator, rng);
  U_t = Generator<float>(cfg.generator, rng);
  discs.style_s = PatchDiscriminator<float>(cfg.discriminator, rng);
  discs.style_t = PatchDiscriminator<float>(cfg.discriminator, rng);
  discs.content = PatchDiscriminator<float>(cfg.discriminator, rng);
  for (auto* net : networks(*this)) optimizers.emplace_back(*net, cfg.adam);
}

Checkpoint GanState::to_checkpoint() const {
  Checkpoint ckpt;
  std::vector<std::int64_t> steps;
  const auto nets = networks(*this);
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const std::string prefix = std::string(kNetworkNames[i]) + ".";
    for (auto& [name, t] : nets[i]->export_values()) ckpt.tensors.emplace(prefix + name, std::move(t));
    optimizers[i].export_state(ckpt.tensors, "opt." + prefix);
    steps.push_back(optimizers[i].steps());
  }
  ckpt.meta = {{"kind", "gan"},          {"epoch", epoch},
               {"seed", config.seed},    {"config", to_json(config)},
               {"config_hash", config_hash(config)}, {"optimizer_steps", steps},
               {"backbone", backbone_id}};
  return ckpt;
}

GanState GanState::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "gan") throw std::runtime_error("checkpoint is not a GAN checkpoint");
  GanState s(gan_config_from_json(ckpt.meta.at("config")));
  s.epoch = ckpt.meta.at("epoch").get<int>();
  s.backbone_id = ckpt.meta.value("backbone", "");
  const auto steps = ckpt.meta.at("optimizer_steps").get<std::vector<std::int64_t>>();
  auto nets = networks(s);
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const std::string prefix = std::string(kNetworkNames[i]) + ".";
    nets[i]->import_values(ckpt.tensors, prefix);
    s.optimizers[i].import_state(ckpt.tensors, "opt." + prefix, steps.at(i));
  }
  return s;
}

std::uint64_t GanState::generator_checksum() const { return U_s.parameters().checksum() ^ (U_t.parameters().checksum() * 31); }

std::uint64_t GanState::discriminator_checksum() const {
  return discs.style_s.parameters().checksum() ^ (discs.style_t.parameters().checksum() * 31) ^
         (discs.content.parameters().checksum() * 961);
}

GanStepMetrics gan_train_step(GanState& state, const Backbone<float>& backbone, const Tensor<float>& source,
                              const Tensor<float>& target) {
  using V = Var<float>;
  validate_images(source);
  validate_images(target);
  const V xs = V::constant(source), xt = V::constant(target);
  GanStepMetrics m;

  const V gs = state.U_s(xs);  // source content, target style
  const V gt = state.U_t(xt);  // target content, source style

  // discriminator step on detached generations
  set_discriminators_trainable(state, true);
  {
    const auto s = score_all(xs, xt, gs.detach(), gt.detach(), state.discs);
    const std::array<V, 3> d{discriminator_bce(s.style_s_real, s.style_s_fake), discriminator_bce(s.style_t_real, s.style_t_fake),
                             discriminator_bce(s.content_real, s.content_fake)};
    for (std::size_t i = 0; i < 3; ++i) m.discriminator[i] = d[i].item();
    for (std::size_t i = 2; i < 5; ++i) networks(state)[i]->zero_grad();
    add(add(d[0], d[1]), d[2]).backward();
    for (std::size_t i = 2; i < 5; ++i) state.optimizers[i].step();
  }

  // generator step against the updated discriminators
  set_discriminators_trainable(state, false);
  const V srec = state.U_t(gs), trec = state.U_s(gt);
  const auto taps_s = backbone.forward(xs), taps_t = backbone.forward(xt);
  const auto taps_su = backbone.forward(gs), taps_tu = backbone.forward(gt);
  const auto& h = backbone.handle();
  const V l_in = loss_intra(content_from_taps<float>(taps_s), content_from_taps<float>(taps_su), content_from_taps<float>(taps_t),
                            content_from_taps<float>(taps_tu));
  const V l_cross = loss_cross(style_from_taps<float>(taps_s, h), style_from_taps<float>(taps_t, h),
                               style_from_taps<float>(taps_su, h), style_from_taps<float>(taps_tu, h));
  const V l_rec = loss_reconstruction(xs, srec, xt, trec);
  const auto adv = adversarial_losses(xs, xt, gs, gt, state.discs);
  const std::array<V, 6> parts{l_in, l_cross, l_rec, adv.generator[0], adv.generator[1], adv.generator[2]};
  const V total = total_loss(parts, state.config.weights);
  for (std::size_t i = 0; i < 6; ++i) m.terms[i] = parts[i].item();
  m.total = total.item();
  state.U_s.parameters().zero_grad();
  state.U_t.parameters().zero_grad();
  total.backward();
  state.optimizers[0].step();
  state.optimizers[1].step();
  set_discriminators_trainable(state, true);
  return m;
}

fs::path gan_checkpoint_path(const fs::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
  return dir / name;
}

std::vector<fs::path> train_gan(const Tensor<float>& source, const Tensor<float>& target, const GanConfig& config,
                                const Backbone<float>& backbone, const GanTrainOptions& options) {
  config.validate();
  if (source.rank() == 0 || source.dim(0) == 0) throw std::invalid_argument("empty source manifest");
  if (target.rank() == 0 || target.dim(0) == 0) throw std::invalid_argument("empty target manifest");
  validate_images(source);
  validate_images(target);
  if (source.dim(2) != config.resolution || target.dim(2) != config.resolution)
    throw std::invalid_argument("training images do not match the configured resolution");
  if (options.output_dir.empty()) throw std::invalid_argument("gan output directory not set");
  fs::create_directories(options.output_dir);

  GanState state(config);
  state.backbone_id = backbone.handle().identifier;
  if (options.resume) {
    for (int e = config.epochs; e >= 1; --e) {
      const auto p = gan_checkpoint_path(options.output_dir, e);
      if (!fs::exists(p)) continue;
      auto loaded = GanState::load(p);
      if (config_hash(loaded.config) != config_hash(config)) break;  // different run; start over
      state = std::move(loaded);
      state.config.epochs = config.epochs;
      break;
    }
  }

  const fs::path metrics_path = options.output_dir / "metrics.jsonl";
  {
    // drop records of epochs that will be recomputed
    std::string kept;
    if (state.epoch > 0)
      for (const auto& line : read_lines(metrics_path))
        if (json::parse(line).at("epoch").get<int>() <= state.epoch) kept += line + "\n";
    atomic_write(metrics_path, kept);
  }

  std::vector<fs::path> written;
  for (int e = 1; e <= state.epoch; ++e) written.push_back(gan_checkpoint_path(options.output_dir, e));

  const Index n_max = std::max(source.dim(0), target.dim(0));
  const Index steps = std::max<Index>(1, (n_max + config.batch_size - 1) / config.batch_size);
  while (state.epoch < config.epochs) {
    const int epoch = state.epoch + 1;
    std::mt19937_64 rng(fnv1a("gan-epoch/" + std::to_string(config.seed) + "/" + std::to_string(epoch)));
    BatchSampler src(source.dim(0), config.batch_size), tgt(target.dim(0), config.batch_size);
    std::ostringstream records;
    std::array<double, 6> sums{};
    double total_sum = 0;
    for (Index step = 0; step < steps; ++step) {
      const auto bs = src.next(source, rng);
      const auto bt = tgt.next(target, rng);
      const auto m = gan_train_step(state, backbone, bs, bt);
      const Index global = (epoch - 1) * steps + step + 1;
      for (std::size_t i = 0; i < 6; ++i) {
        records << json{{"epoch", epoch}, {"step", global}, {"term", kLossTermNames[i]}, {"value", m.terms[i]}}.dump() << '\n';
        sums[i] += m.terms[i];
      }
      records << json{{"epoch", epoch}, {"step", global}, {"term", "total"}, {"value", m.total}}.dump() << '\n';
      const std::array<const char*, 3> dnames{"d_style_s", "d_style_t", "d_content"};
      for (std::size_t i = 0; i < 3; ++i)
        records << json{{"epoch", epoch}, {"step", global}, {"term", dnames[i]}, {"value", m.discriminator[i]}}.dump() << '\n';
      total_sum += m.total;
    }
    const Index last = epoch * steps;
    for (std::size_t i = 0; i < 6; ++i)
      records << json{{"epoch", epoch}, {"step", last}, {"term", std::string("epoch_mean.") + kLossTermNames[i]},
                      {"value", sums[i] / static_cast<double>(steps)}}.dump()
              << '\n';
    records << json{{"epoch", epoch}, {"step", last}, {"term", "epoch_mean.total"}, {"value", total_sum / static_cast<double>(steps)}}.dump()
            << '\n';
    state.epoch = epoch;
    const auto path = gan_checkpoint_path(options.output_dir, epoch);
    state.save(path);
    {
      std::ofstream os(metrics_path, std::ios::app);
      os << records.str();
      if (!os) throw std::runtime_error("cannot append to " + metrics_path.string());
    }
    written.push_back(path);
    if (options.verbose)
      std::cerr << "gan epoch " << epoch << "/" << config.epochs << " total " << total_sum / static_cast<double>(steps) << '\n';
  }
  return written;
}

std::vector<fs::path> train_gan(const DatasetManifest& source, const DatasetManifest& target, const GanConfig& config,
                                const Backbone<float>& backbone, const GanTrainOptions& options) {
  if (source.empty()) throw std::invalid_argument("empty source manifest");
  if (target.empty()) throw std::invalid_argument("empty target manifest");
  return train_gan(load_images(source.paths(), config.resolution), load_images(target.paths(), config.resolution), config,
                   backbone, options);
}

}  // namespace styleshift
