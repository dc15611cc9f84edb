#include "styleshift/adapted_data.hpp"

#include "styleshift/image_io.hpp"

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>

namespace styleshift {

Tensor<float> adapt_images(const GanState& state, const Tensor<float>& images, Direction direction, AdaptedOutput output) {
  NoGradGuard guard;
  const auto& first = direction == Direction::source_to_adapted ? state.U_s : state.U_t;
  const auto& second = direction == Direction::source_to_adapted ? state.U_t : state.U_s;
  auto y = first(Var<float>::constant(images));
  if (output == AdaptedOutput::reconstructed) y = second(y);
  return y.value();
}

namespace {

// Applies one state to the records at `indices`, `workers` threads over contiguous chunks.
void run_chunks(const DatasetManifest& in, const std::vector<std::size_t>& indices, const GanState& state,
                const AdaptedDatasetSpec& spec, const fs::path& out_root) {
  const Index res = state.config.resolution;
  const std::size_t batch = static_cast<std::size_t>(std::max<Index>(1, spec.batch_size));
  const std::size_t n_batches = (indices.size() + batch - 1) / batch;
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, spec.workers)), 1, std::max<std::size_t>(1, n_batches));

  std::mutex err_mutex;
  std::exception_ptr error;
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t b = w; b < n_batches; b += workers) {
        const std::size_t lo = b * batch, hi = std::min(indices.size(), lo + batch);
        std::vector<fs::path> paths;
        for (std::size_t i = lo; i < hi; ++i) paths.push_back(in.path_of(in.records[indices[i]]));
        const auto out = adapt_images(state, load_images(paths, res), spec.direction, spec.output);
        const Index per = 3 * res * res;
        for (std::size_t i = lo; i < hi; ++i) {
          Tensor<float> img({3, res, res}, out.array().segment(static_cast<Index>(i - lo) * per, per));
          write_png(out_root / (pairing_key(in.records[indices[i]].rel_path) + ".png"), img);
        }
      }
    } catch (...) {
      std::lock_guard lock(err_mutex);
      if (!error) error = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

DatasetManifest adapted_manifest(const DatasetManifest& in, const AdaptedDatasetSpec& spec, const fs::path& out_root,
                                 const std::vector<std::string>& checkpoint_ids, const std::vector<std::size_t>& choice) {
  DatasetManifest out;
  out.root = out_root;
  out.k = in.k;
  out.classes = in.classes;
  std::string joined;
  for (const auto& id : checkpoint_ids) joined += (joined.empty() ? "" : ";") + id;
  out.provenance = Provenance::from_checkpoint(joined, spec.direction, spec.output);
  for (std::size_t i = 0; i < in.records.size(); ++i) {
    const auto& r = in.records[i];
    out.records.push_back({pairing_key(r.rel_path) + ".png", r.label, r.class_name, r.domain,
                           Provenance::from_checkpoint(checkpoint_ids[choice[i]], spec.direction, spec.output)});
  }
  return out;
}

fs::path checked_root(const AdaptedDatasetSpec& spec, const DatasetManifest& manifest) {
  if (manifest.empty()) throw std::invalid_argument("cannot adapt an empty manifest");
  if (spec.output_root.empty()) throw std::invalid_argument("adapted output root not set");
  return fs::absolute(spec.output_root).lexically_normal();
}

}  // namespace

DatasetManifest materialize_adapted(const DatasetManifest& manifest, const GanState& state, const std::string& checkpoint_id,
                                    const AdaptedDatasetSpec& spec) {
  const auto root = checked_root(spec, manifest);
  std::vector<std::size_t> all(manifest.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  run_chunks(manifest, all, state, spec, root);
  return adapted_manifest(manifest, spec, root, {checkpoint_id}, std::vector<std::size_t>(manifest.size(), 0));
}

DatasetManifest materialize_adapted(const DatasetManifest& manifest, const AdaptedDatasetSpec& spec) {
  const auto root = checked_root(spec, manifest);
  if (spec.checkpoints.empty()) throw std::invalid_argument("no checkpoint given for adaptation");
  std::vector<std::string> ids;
  for (const auto& c : spec.checkpoints) {
    if (!fs::exists(c)) throw std::runtime_error("checkpoint " + c.string() + " does not exist");
    ids.push_back(fs::absolute(c).lexically_normal().string());
  }
  std::vector<std::size_t> choice(manifest.size(), 0);
  if (ids.size() > 1)
    for (std::size_t i = 0; i < manifest.size(); ++i)
      choice[i] = fnv1a("mix/" + pairing_key(manifest.records[i].rel_path)) % ids.size();
  for (std::size_t c = 0; c < ids.size(); ++c) {
    std::vector<std::size_t> mine;
    for (std::size_t i = 0; i < manifest.size(); ++i)
      if (choice[i] == c) mine.push_back(i);
    if (mine.empty()) continue;
    const auto state = GanState::load(spec.checkpoints[c]);
    run_chunks(manifest, mine, state, spec, root);
  }
  return adapted_manifest(manifest, spec, root, ids, choice);
}

}  // namespace styleshift
