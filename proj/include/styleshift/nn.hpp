#pragma once

#include "styleshift/ops.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace styleshift {

/// Ordered, named collection of trainable leaves.
template <typename Scalar>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Var<Scalar>>;

  Var<Scalar> add(const std::string& name, Tensor<Scalar> init) {
    for (const auto& e : entries_)
      if (e.first == name) throw std::invalid_argument("duplicate parameter " + name);
    entries_.emplace_back(name, Var<Scalar>::leaf(std::move(init), true));
    return entries_.back().second;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Var<Scalar>& at(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw std::out_of_range("no parameter " + name);
  }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.second.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.second.set_requires_grad(on);
  }

  bool any_grad() const {
    for (const auto& e : entries_)
      if (e.second.has_grad()) return true;
    return false;
  }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, v] : entries_) {
      mix(name.data(), name.size());
      for (Index d : v.shape()) mix(&d, sizeof d);
      mix(v.value().data(), static_cast<std::size_t>(v.value().size()) * sizeof(Scalar));
    }
    return h;
  }

  /// Deep copy of values from a structurally identical set.
  template <typename Other>
  void copy_values_from(const ParameterSet<Other>& src) {
    if (src.size() != size()) throw std::invalid_argument("parameter sets differ in length");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& [sname, sv] = src.entries()[i];
      auto& [name, v] = entries_[i];
      if (sname != name || sv.shape() != v.shape())
        throw std::invalid_argument("parameter mismatch at " + name + " vs " + sname);
      v.mutable_value().array() = sv.value().array().template cast<Scalar>();
    }
  }

  std::map<std::string, Tensor<float>> export_values() const {
    std::map<std::string, Tensor<float>> out;
    for (const auto& [name, v] : entries_) out.emplace(name, v.value().template cast<float>());
    return out;
  }

  void import_values(const std::map<std::string, Tensor<float>>& values, const std::string& prefix = "") {
    for (auto& [name, v] : entries_) {
      auto it = values.find(prefix + name);
      if (it == values.end()) throw std::runtime_error("checkpoint is missing tensor " + prefix + name);
      if (it->second.shape() != v.shape())
        throw std::runtime_error("architecture mismatch for " + prefix + name + ": checkpoint " +
                                 shape_string(it->second.shape()) + " vs model " + shape_string(v.shape()));
      v.mutable_value().array() = it->second.array().template cast<Scalar>();
    }
  }

 private:
  std::vector<Entry> entries_;
};

template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, std::mt19937_64& rng, double gain = std::sqrt(2.0)) {
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
struct Conv2d {
  Var<Scalar> weight;
  Var<Scalar> bias;
  ConvGeometry geo;

  Conv2d() = default;
  Conv2d(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, ConvGeometry g,
         std::mt19937_64& rng, double gain = std::sqrt(2.0))
      : geo(g) {
    weight = params.add(name + ".weight", he_normal<Scalar>({out, in, g.kernel, g.kernel}, in * g.kernel * g.kernel, rng, gain));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, geo); }
};

template <typename Scalar>
struct Linear {
  Var<Scalar> weight;
  Var<Scalar> bias;

  Linear() = default;
  Linear(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, std::mt19937_64& rng,
         double gain = 1.0) {
    weight = params.add(name + ".weight", he_normal<Scalar>({out, in}, in, rng, gain));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }
};

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation over a parameter set. Parameters without a gradient are left alone.
template <typename Scalar>
class Adam {
 public:
  Adam(const ParameterSet<Scalar>& params, AdamOptions opts) : entries_(params.entries()), opts_(opts) {
    for (const auto& [name, v] : params.entries()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(opts_.beta1), b2 = static_cast<Scalar>(opts_.beta2);
    const auto step_size = static_cast<Scalar>(opts_.lr / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto eps = static_cast<Scalar>(opts_.eps);
    auto& entries = entries_;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].second;
      if (!p.has_grad()) continue;
      const auto& g = p.grad().array();
      auto& m = m_[i].array();
      auto& v = v_[i].array();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.square();
      p.mutable_value().array() -= step_size * m / ((v * inv_c2).sqrt() + eps);
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

  void export_state(std::map<std::string, Tensor<float>>& out, const std::string& prefix) const {
    const auto& entries = entries_;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      out.emplace(prefix + entries[i].first + ".m", m_[i].template cast<float>());
      out.emplace(prefix + entries[i].first + ".v", v_[i].template cast<float>());
    }
  }

  void import_state(const std::map<std::string, Tensor<float>>& in, const std::string& prefix, std::int64_t t) {
    const auto& entries = entries_;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto mi = in.find(prefix + entries[i].first + ".m");
      auto vi = in.find(prefix + entries[i].first + ".v");
      if (mi == in.end() || vi == in.end()) throw std::runtime_error("checkpoint is missing optimizer state for " + entries[i].first);
      m_[i] = mi->second.template cast<Scalar>();
      v_[i] = vi->second.template cast<Scalar>();
    }
    t_ = t;
  }

 private:
  // shares nodes with the owning network, so the network may move
  std::vector<typename ParameterSet<Scalar>::Entry> entries_;
  AdamOptions opts_;
  std::vector<Tensor<Scalar>> m_;
  std::vector<Tensor<Scalar>> v_;
  std::int64_t t_ = 0;
};

}  // namespace styleshift
