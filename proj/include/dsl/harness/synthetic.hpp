#pragma once

// Synthetic multi-attribute images: one coloured shape blob on a textured
// background, labelled by colour, shape, or their product, with exact masks.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/core_model.hpp"
#include "dsl/dynamic_subspace.hpp"

namespace dsl::harness {

enum class LabelRule { color, shape, color_x_shape };

inline LabelRule parse_label_rule(const std::string& s) {
  if (s == "color") return LabelRule::color;
  if (s == "shape") return LabelRule::shape;
  if (s == "color×shape" || s == "color-x-shape" || s == "color_x_shape") return LabelRule::color_x_shape;
  throw ConfigError("unknown labeling rule '" + s + "'");
}

inline std::string to_string(LabelRule r) {
  switch (r) {
    case LabelRule::color: return "color";
    case LabelRule::shape: return "shape";
    default: return "color×shape";
  }
}

enum class Shape { circle, square, triangle, diamond, cross, ring };
inline constexpr int kShapeCount = 6;

inline const char* shape_name(int s) {
  static constexpr std::array<const char*, kShapeCount> names{"circle", "square", "triangle", "diamond", "cross", "ring"};
  return names.at(static_cast<std::size_t>(s));
}

inline constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.90f, 0.15f, 0.15f},  // red
    {0.15f, 0.35f, 0.90f},  // blue
    {0.15f, 0.80f, 0.20f},  // green
    {0.95f, 0.85f, 0.10f},  // yellow
    {0.85f, 0.20f, 0.85f},  // magenta
    {0.10f, 0.85f, 0.85f},  // cyan
    {0.95f, 0.55f, 0.10f},  // orange
    {0.50f, 0.20f, 0.70f},  // purple
}};

inline const char* color_name(int c) {
  static constexpr std::array<const char*, 8> names{"red", "blue", "green", "yellow", "magenta", "cyan", "orange", "purple"};
  return names.at(static_cast<std::size_t>(c));
}

struct SyntheticSpec {
  std::size_t n_samples = 1000;
  int image_size = 64;
  int n_colors = 2;
  int n_shapes = 2;
  double texture_noise = 0.08;
  LabelRule rule = LabelRule::color_x_shape;
  int blob_min = 20;  // blob diameter range, pixels
  int blob_max = 36;
  double color_jitter = 0.06;
  std::uint64_t background_seed = 7;

  int num_classes() const {
    switch (rule) {
      case LabelRule::color: return n_colors;
      case LabelRule::shape: return n_shapes;
      default: return n_colors * n_shapes;
    }
  }

  void validate() const {
    if (image_size < 8) throw ConfigError("synthetic: image_size must be >= 8");
    if (n_colors < 1 || n_colors > static_cast<int>(kPalette.size())) throw ConfigError("synthetic: n_colors out of range");
    if (n_shapes < 1 || n_shapes > kShapeCount) throw ConfigError("synthetic: n_shapes out of range");
    if (blob_min < 4 || blob_max < blob_min || blob_max > image_size) throw ConfigError("synthetic: bad blob size range");
    if (texture_noise < 0.0) throw ConfigError("synthetic: texture_noise must be >= 0");
    if (num_classes() < 1) throw ConfigError("synthetic: no classes");
  }
};

/// Pixel-centre membership test for a shape of diameter `size` centred at (cy, cx).
inline bool inside_shape(int shape, double cy, double cx, double size, int y, int x) {
  const double r = size / 2.0;
  const double dy = (y + 0.5 - cy) / r, dx = (x + 0.5 - cx) / r;
  switch (static_cast<Shape>(shape)) {
    case Shape::circle: return dx * dx + dy * dy <= 1.0;
    case Shape::square: return std::abs(dx) <= 0.8 && std::abs(dy) <= 0.8;
    case Shape::triangle: return dy <= 0.8 && dy >= -1.0 && std::abs(dx) <= (dy + 1.0) / 1.8 * 0.95;
    case Shape::diamond: return std::abs(dx) + std::abs(dy) <= 1.0;
    case Shape::cross: return (std::abs(dx) <= 0.3 && std::abs(dy) <= 1.0) || (std::abs(dy) <= 0.3 && std::abs(dx) <= 1.0);
    case Shape::ring: {
      const double q = dx * dx + dy * dy;
      return q <= 1.0 && q >= 0.3;
    }
  }
  return false;
}

/// Binary raster of a shape on an h x w grid.
inline Mask rasterize_shape(int shape, double cy, double cx, double size, int h, int w) {
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = inside_shape(shape, cy, cx, size, y, x) ? 1 : 0;
  return m;
}

struct BlobGeometry {
  int color = 0;
  int shape = 0;
  double cy = 0, cx = 0, size = 0;
};

/// Attributes and placement of sample i; a pure function of (spec, seed, i).
inline BlobGeometry synthetic_geometry(const SyntheticSpec& spec, std::uint64_t seed, std::size_t i) {
  std::mt19937_64 rng(derive_seed(seed, i, 0x5e17));
  BlobGeometry g;
  g.color = std::uniform_int_distribution<int>(0, spec.n_colors - 1)(rng);
  g.shape = std::uniform_int_distribution<int>(0, spec.n_shapes - 1)(rng);
  g.size = std::uniform_real_distribution<double>(spec.blob_min, spec.blob_max)(rng);
  const double lo = g.size / 2.0 + 1.0, hi = spec.image_size - g.size / 2.0 - 1.0;
  std::uniform_real_distribution<double> pos(lo, std::max(lo, hi));
  g.cy = pos(rng);
  g.cx = pos(rng);
  return g;
}

inline int synthetic_label(const SyntheticSpec& spec, const BlobGeometry& g) {
  switch (spec.rule) {
    case LabelRule::color: return g.color;
    case LabelRule::shape: return g.shape;
    default: return g.color * spec.n_shapes + g.shape;
  }
}

inline SampleRecord synthetic_sample(const SyntheticSpec& spec, std::uint64_t seed, std::size_t i) {
  const BlobGeometry g = synthetic_geometry(spec, seed, i);
  const int s = spec.image_size;
  std::mt19937_64 rng(derive_seed(seed, i, 0x7e47));
  std::normal_distribution<double> noise(0.0, spec.texture_noise);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Background: grey level plus a couple of low-frequency gratings (shared phase
  // family across the dataset via background_seed) plus white noise.
  std::mt19937_64 bg_rng(derive_seed(spec.background_seed, i % 16, 0xb6));
  const double base = 0.35 + 0.3 * u(rng);
  const double f1 = 0.1 + 0.3 * std::uniform_real_distribution<double>(0, 1)(bg_rng);
  const double f2 = 0.1 + 0.3 * std::uniform_real_distribution<double>(0, 1)(bg_rng);
  const double ph = 6.283 * u(rng);

  std::array<double, 3> col;
  for (int c = 0; c < 3; ++c) {
    col[c] = kPalette[static_cast<std::size_t>(g.color)][static_cast<std::size_t>(c)] +
             std::uniform_real_distribution<double>(-spec.color_jitter, spec.color_jitter)(rng);
  }

  SampleRecord rec;
  rec.id = "syn" + std::to_string(seed) + "_" + std::to_string(i);
  rec.label = synthetic_label(spec, g);
  rec.image = Image(3, s, s);
  rec.mask = rasterize_shape(g.shape, g.cy, g.cx, g.size, s, s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const bool fg = rec.mask->at(y, x) != 0;
      const double texture = 0.08 * std::sin(f1 * x + ph) * std::cos(f2 * y + 0.5 * ph);
      for (int c = 0; c < 3; ++c) {
        double v = fg ? col[static_cast<std::size_t>(c)] : base + texture;
        v += noise(rng);
        rec.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return rec;
}

/// n_samples images, deterministic in (spec, seed).
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset d;
  d.num_classes = spec.num_classes();
  for (int c = 0; c < d.num_classes; ++c) {
    switch (spec.rule) {
      case LabelRule::color: d.class_names.emplace_back(color_name(c)); break;
      case LabelRule::shape: d.class_names.emplace_back(shape_name(c)); break;
      default:
        d.class_names.emplace_back(std::string(color_name(c / spec.n_shapes)) + "_" + shape_name(c % spec.n_shapes));
    }
  }
  d.samples.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) d.samples.push_back(synthetic_sample(spec, seed, i));
  return d;
}

}  // namespace dsl::harness
