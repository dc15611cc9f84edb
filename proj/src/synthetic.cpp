#include "styleshift/synthetic.hpp"

#include "styleshift/checkpoint.hpp"
#include "styleshift/image_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

namespace styleshift {

namespace {

const std::array<const char*, 8> kClassNames{"circle", "square", "triangle", "plus", "ring", "diamond", "bar", "cross"};

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
  Rgb rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

// Shape membership in local coordinates (roughly [-1, 1], y pointing down).
bool inside(int label, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  switch (label) {
    case 0: return x * x + y * y <= 1.0;
    case 1: return ax <= 0.8 && ay <= 0.8;
    case 2: {
      // apex (0, -0.9), base corners (+-0.95, 0.75)
      if (y > 0.75) return false;
      return ax <= 0.95 * (y + 0.9) / 1.65;
    }
    case 3: return (ax <= 0.3 && ay <= 0.95) || (ay <= 0.3 && ax <= 0.95);
    case 4: {
      const double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5: return ax + ay <= 1.0;
    case 6: return ax <= 1.0 && ay <= 0.33;
    default: {
      const double u = std::abs((x + y) * std::numbers::sqrt2 / 2), v = std::abs((x - y) * std::numbers::sqrt2 / 2);
      return (u <= 0.28 && v <= 1.0) || (v <= 0.28 && u <= 1.0);
    }
  }
}

std::uint64_t image_seed(std::uint64_t seed, SyntheticStyle style, int label, int index) {
  return fnv1a(std::to_string(seed) + "/" + to_string(style) + "/" + std::to_string(label) + "/" + std::to_string(index));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (k < 2 || k > static_cast<int>(kClassNames.size()))
    throw std::invalid_argument("synthetic k must be in [2, 8], got " + std::to_string(k));
  if (n_per_class < 1) throw std::invalid_argument("synthetic n_per_class must be >= 1");
  if (resolution < 8) throw std::invalid_argument("synthetic resolution must be >= 8");
}

std::string to_string(SyntheticStyle s) {
  switch (s) {
    case SyntheticStyle::A: return "A";
    case SyntheticStyle::B: return "B";
    default: return "C";
  }
}

SyntheticStyle parse_synthetic_style(const std::string& name) {
  if (name == "A") return SyntheticStyle::A;
  if (name == "B") return SyntheticStyle::B;
  if (name == "C") return SyntheticStyle::C;
  throw std::invalid_argument("unknown synthetic style " + name + " (expected A, B or C)");
}

std::vector<std::string> synthetic_class_names(int k) {
  SyntheticSpec{k, 1, 64}.validate();
  return {kClassNames.begin(), kClassNames.begin() + k};
}

Tensor<float> render_synthetic(std::uint64_t seed, const SyntheticSpec& spec, SyntheticStyle style, int label, int index) {
  spec.validate();
  if (label < 0 || label >= spec.k) throw std::invalid_argument("label out of range");
  std::mt19937_64 rng(image_seed(seed, style, label, index));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  // geometry, drawn first so it is independent of the style's colour draws
  const double cx = uni(0.35, 0.65), cy = uni(0.35, 0.65);
  const double size = uni(0.22, 0.32);
  const double angle = uni(-0.26, 0.26);

  Rgb fg, bg, bg2{};
  double stripe_freq = 0, stripe_angle = 0, stripe_phase = 0, noise = 0, dot_pitch = 0;
  switch (style) {
    case SyntheticStyle::A:
      fg = hsv(uni(-10, 45), uni(0.75, 1.0), uni(0.75, 0.95));
      bg = hsv(uni(30, 50), uni(0.05, 0.2), uni(0.88, 0.98));
      noise = 0.01;
      break;
    case SyntheticStyle::B:
      fg = hsv(uni(200, 250), uni(0.75, 1.0), uni(0.55, 0.8));
      bg = hsv(uni(170, 210), uni(0.15, 0.3), uni(0.85, 0.95));
      bg2 = hsv(uni(160, 200), uni(0.3, 0.5), uni(0.65, 0.8));
      stripe_freq = uni(5.0, 9.0);
      stripe_angle = uni(0.0, std::numbers::pi);
      stripe_phase = uni(0.0, 2 * std::numbers::pi);
      noise = 0.03;
      break;
    case SyntheticStyle::C:
      fg = hsv(uni(95, 140), uni(0.7, 1.0), uni(0.35, 0.6));
      bg = hsv(uni(40, 65), uni(0.25, 0.45), uni(0.82, 0.92));
      bg2 = hsv(uni(30, 60), uni(0.4, 0.6), uni(0.6, 0.72));
      dot_pitch = uni(0.09, 0.14);
      noise = 0.06;
      break;
  }

  const Index r = spec.resolution;
  Tensor<float> out({3, r, r});
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double ca = std::cos(angle), sa = std::sin(angle);
  constexpr int kSuper = 4;
  for (Index py = 0; py < r; ++py)
    for (Index px = 0; px < r; ++px) {
      const double x = (static_cast<double>(px) + 0.5) / static_cast<double>(r);
      const double y = (static_cast<double>(py) + 0.5) / static_cast<double>(r);
      Rgb back = bg;
      if (style == SyntheticStyle::B) {
        const double t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * stripe_freq * (x * std::cos(stripe_angle) + y * std::sin(stripe_angle)) + stripe_phase);
        for (int c = 0; c < 3; ++c) back[c] = bg[c] + t * (bg2[c] - bg[c]);
      } else if (style == SyntheticStyle::C) {
        const double dx = std::fmod(x, dot_pitch) / dot_pitch - 0.5, dy = std::fmod(y, dot_pitch) / dot_pitch - 0.5;
        if (dx * dx + dy * dy < 0.09) back = bg2;
      }
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double qx = (static_cast<double>(px) + (sx + 0.5) / kSuper) / static_cast<double>(r) - cx;
          const double qy = (static_cast<double>(py) + (sy + 0.5) / kSuper) / static_cast<double>(r) - cy;
          const double lx = (ca * qx + sa * qy) / size, ly = (-sa * qx + ca * qy) / size;
          hits += inside(label, lx, ly);
        }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) {
        double v = cover * fg[c] + (1 - cover) * back[c] + noise * gauss(rng);
        out[(c * r + py) * r + px] = static_cast<float>(std::clamp(v, 0.0, 1.0) * 2.0 - 1.0);
      }
    }
  return out;
}

DatasetManifest make_synthetic_domain(std::uint64_t seed, const SyntheticSpec& spec, SyntheticStyle style,
                                      const fs::path& root) {
  spec.validate();
  DatasetManifest m;
  m.root = fs::absolute(root).lexically_normal();
  m.k = spec.k;
  m.classes = synthetic_class_names(spec.k);
  const std::string domain = to_string(style);
  for (int label = 0; label < spec.k; ++label)
    for (int i = 0; i < spec.n_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "_%04d.png", i);
      const std::string rel = domain + "/" + m.classes[static_cast<std::size_t>(label)] + "/" + m.classes[static_cast<std::size_t>(label)] + name;
      auto img = render_synthetic(seed, spec, style, label, i);
      write_png(m.root / rel, img);
      m.records.push_back({rel, label, m.classes[static_cast<std::size_t>(label)], domain, Provenance::original()});
    }
  return m;
}

std::pair<DatasetManifest, DatasetManifest> make_synthetic_domains(std::uint64_t seed, const SyntheticSpec& spec,
                                                                   const fs::path& root) {
  return {make_synthetic_domain(seed, spec, SyntheticStyle::A, root), make_synthetic_domain(seed, spec, SyntheticStyle::B, root)};
}

}  // namespace styleshift
