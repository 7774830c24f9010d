#pragma once

// Procedural two-frame video scenes with exact labels and flow.
//
// A scene is a smoothly textured background translated by a global camera
// motion plus a handful of rigid shapes, one shape kind per semantic class,
// each translated by its own displacement. Geometry depends only on the seed;
// a DomainStyle only changes appearance (palettes, texture, photometrics), so
// the same seed rendered under two styles has identical labels and flow.

#include <cnsg/core.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace cnsg::synth {

using Rgb = std::array<float, 3>;

struct ClassAppearance {
  Rgb base;
  Rgb accent;
  float stripe_period = 10.0f;  // pixels
  float stripe_angle = 0.0f;    // radians
  float stripe_amount = 0.3f;   // mix weight of the accent colour
};

struct DomainStyle {
  std::string name;
  Rgb background_a;
  Rgb background_b;
  float background_period = 24.0f;
  std::vector<ClassAppearance> classes;  // entry i styles class i + 1
  float colour_jitter = 0.06f;           // per-object colour variation
  float noise_level = 0.05f;             // smooth value-noise amplitude
  float brightness = 0.0f;
  float contrast = 1.0f;
  float hue_shift = 0.0f;  // radians around the grey axis
};

namespace render {

inline Rgb shift_colour(const Rgb& c, const Rgb& tint, float gain) {
  Rgb out{};
  for (size_t i = 0; i < 3; ++i) out[i] = std::clamp(c[i] * gain + tint[i], 0.0f, 1.0f);
  return out;
}

/// Class palette of another domain: the reference colours, tinted and rescaled,
/// with that domain's own stripe texture.
inline std::vector<ClassAppearance> derive_palette(const std::vector<ClassAppearance>& reference, const Rgb& tint,
                                                   float gain, float period_scale, float angle_offset,
                                                   float stripe_amount) {
  std::vector<ClassAppearance> out;
  for (const auto& c : reference)
    out.push_back({shift_colour(c.base, tint, gain), shift_colour(c.accent, tint, gain),
                   c.stripe_period * period_scale, c.stripe_angle + angle_offset, stripe_amount});
  return out;
}

}  // namespace render

/// The four built-in styles: one source domain and three unseen ones. Class
/// colours stay correlated across domains (as they do between real driving
/// datasets); backgrounds, textures and global photometrics differ.
inline std::vector<DomainStyle> builtin_styles() {
  const std::vector<ClassAppearance> reference{
      {{0.85f, 0.20f, 0.15f}, {0.95f, 0.55f, 0.30f}, 9.0f, 0.3f, 0.35f},
      {{0.15f, 0.30f, 0.85f}, {0.35f, 0.60f, 0.95f}, 11.0f, 1.2f, 0.35f},
      {{0.95f, 0.85f, 0.20f}, {0.80f, 0.60f, 0.10f}, 8.0f, 2.0f, 0.30f},
      {{0.20f, 0.75f, 0.30f}, {0.10f, 0.45f, 0.20f}, 12.0f, 0.8f, 0.30f},
      {{0.70f, 0.30f, 0.75f}, {0.45f, 0.15f, 0.55f}, 10.0f, 2.6f, 0.30f}};
  std::vector<DomainStyle> s;
  s.push_back({"daylight", {0.55f, 0.65f, 0.45f}, {0.45f, 0.55f, 0.60f}, 28.0f, reference,
               0.2f, 0.05f, 0.0f, 1.0f, 0.0f});
  s.push_back({"dusk", {0.30f, 0.22f, 0.35f}, {0.45f, 0.30f, 0.25f}, 20.0f,
               render::derive_palette(reference, {0.05f, -0.05f, 0.08f}, 0.75f, 1.4f, 1.1f, 0.45f),
               0.2f, 0.05f, -0.05f, 0.9f, 0.35f});
  s.push_back({"fog", {0.75f, 0.76f, 0.78f}, {0.68f, 0.70f, 0.72f}, 32.0f,
               render::derive_palette(reference, {0.25f, 0.25f, 0.27f}, 0.6f, 0.8f, 2.0f, 0.25f),
               0.2f, 0.04f, 0.05f, 0.75f, -0.2f});
  s.push_back({"neon", {0.08f, 0.08f, 0.12f}, {0.15f, 0.10f, 0.20f}, 16.0f,
               render::derive_palette(reference, {0.05f, 0.05f, 0.10f}, 1.05f, 1.2f, 0.6f, 0.45f),
               0.2f, 0.06f, 0.0f, 1.15f, 0.6f});
  return s;
}

inline const DomainStyle& find_style(const std::vector<DomainStyle>& styles, const std::string& name) {
  for (const auto& s : styles)
    if (s.name == name) return s;
  throw Error("unknown domain style '" + name + "'");
}

enum class ShapeKind { Disk, Square, Triangle, Cross, Ring };
inline constexpr int kShapeKinds = 5;

struct SceneOptions {
  int64_t height = 96;
  int64_t width = 96;
  int64_t num_classes = 5;  // background + shape classes
  int64_t num_objects = 3;
  double max_object_motion = 3.0;  // pixels per axis
  double max_camera_motion = 2.0;
  double min_radius = 14.0;
  double max_radius = 22.0;
};

struct VideoSample {
  torch::Tensor frame_prev;  // [3, H, W] float in [0, 1]
  torch::Tensor frame_curr;
  torch::Tensor label_prev;  // [H, W] int64
  torch::Tensor label_curr;
  torch::Tensor flow;        // [2, H, W] float, backward flow of frame_curr
  torch::Tensor instance_prev;  // [H, W] int64, 0 = background, depth order + 1
  torch::Tensor instance_curr;
  std::string domain;
  uint64_t seed = 0;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline uint64_t hash_string(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

namespace render {

inline float lattice_value(int64_t ix, int64_t iy, uint64_t salt) {
  const uint64_t h = splitmix64(salt ^ splitmix64(static_cast<uint64_t>(ix) * 73856093ull ^
                                                  static_cast<uint64_t>(iy) * 19349663ull));
  return static_cast<float>(h >> 11) * (1.0f / 9007199254740992.0f) * 2.0f - 1.0f;
}

/// Smooth value noise in [-1, 1] with the given cell size.
inline float value_noise(double x, double y, double cell, uint64_t salt) {
  const double gx = x / cell;
  const double gy = y / cell;
  const auto ix = static_cast<int64_t>(std::floor(gx));
  const auto iy = static_cast<int64_t>(std::floor(gy));
  const double fx = gx - static_cast<double>(ix);
  const double fy = gy - static_cast<double>(iy);
  const double sx = fx * fx * (3.0 - 2.0 * fx);
  const double sy = fy * fy * (3.0 - 2.0 * fy);
  const double a = lattice_value(ix, iy, salt), b = lattice_value(ix + 1, iy, salt);
  const double c = lattice_value(ix, iy + 1, salt), d = lattice_value(ix + 1, iy + 1, salt);
  return static_cast<float>((a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy);
}

inline Rgb lerp(const Rgb& a, const Rgb& b, float t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

/// Rotation about the grey axis (1, 1, 1) / sqrt(3).
inline std::array<float, 9> hue_matrix(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double k = 1.0 / std::sqrt(3.0);
  const double t = (1.0 - c) / 3.0;
  const double a = c + t, b = t - s * k, d = t + s * k;
  return {static_cast<float>(a), static_cast<float>(b), static_cast<float>(d),
          static_cast<float>(d), static_cast<float>(a), static_cast<float>(b),
          static_cast<float>(b), static_cast<float>(d), static_cast<float>(a)};
}

inline Rgb photometric(const Rgb& in, const DomainStyle& st, const std::array<float, 9>& hue) {
  Rgb out{};
  for (int ch = 0; ch < 3; ++ch) {
    float v = hue[ch * 3 + 0] * in[0] + hue[ch * 3 + 1] * in[1] + hue[ch * 3 + 2] * in[2];
    v = (v - 0.5f) * st.contrast + 0.5f + st.brightness;
    out[static_cast<size_t>(ch)] = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

struct ObjectGeometry {
  int64_t class_id;
  ShapeKind kind;
  double cx, cy;    // centre in frame t-1
  double dx, dy;    // displacement t-1 -> t
  double radius;
  double angle;
};

/// Inside test in the object's local (unrotated) frame.
inline bool shape_contains(const ObjectGeometry& o, double lx, double ly) {
  const double c = std::cos(o.angle), s = std::sin(o.angle);
  const double u = c * lx + s * ly;
  const double v = -s * lx + c * ly;
  const double r = o.radius;
  switch (o.kind) {
    case ShapeKind::Disk:
      return u * u + v * v <= r * r;
    case ShapeKind::Square: {
      const double h = r * 0.85;
      return std::abs(u) <= h && std::abs(v) <= h;
    }
    case ShapeKind::Triangle: {
      // Equilateral, apex up in the local frame, circumradius r.
      const double y0 = r * 0.5;
      if (v > y0) return false;
      const double half = (v + r) / std::sqrt(3.0);
      return v >= -r && std::abs(u) <= half;
    }
    case ShapeKind::Cross: {
      const double arm = r * 0.35;
      return (std::abs(u) <= r && std::abs(v) <= arm) || (std::abs(v) <= r && std::abs(u) <= arm);
    }
    case ShapeKind::Ring: {
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r);
    }
  }
  return false;
}

inline ShapeKind shape_for_class(int64_t class_id) {
  return static_cast<ShapeKind>((class_id - 1) % kShapeKinds);
}

}  // namespace render

/// Geometry for a seed; independent of any style.
inline std::vector<render::ObjectGeometry> scene_geometry(uint64_t seed, const SceneOptions& opt, double& cam_dx,
                                                          double& cam_dy) {
  std::mt19937_64 rng(mix_seed(seed, 0x5CE7E));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto motion = [&](double limit) {
    if (limit <= 0.0) return 0.0;
    // Half the motions are whole pixels, half subpixel.
    const double v = (unit(rng) * 2.0 - 1.0) * limit;
    return unit(rng) < 0.5 ? std::round(v) : v;
  };
  cam_dx = motion(opt.max_camera_motion);
  cam_dy = motion(opt.max_camera_motion);

  const int64_t shape_classes = opt.num_classes - 1;
  std::vector<int64_t> classes(static_cast<size_t>(shape_classes));
  for (int64_t i = 0; i < shape_classes; ++i) classes[static_cast<size_t>(i)] = i + 1;
  std::shuffle(classes.begin(), classes.end(), rng);

  std::vector<render::ObjectGeometry> objects;
  const double w = static_cast<double>(opt.width), h = static_cast<double>(opt.height);
  for (int64_t i = 0; i < opt.num_objects; ++i) {
    render::ObjectGeometry o{};
    o.class_id = classes[static_cast<size_t>(i % shape_classes)];
    o.kind = render::shape_for_class(o.class_id);
    o.radius = opt.min_radius + unit(rng) * (opt.max_radius - opt.min_radius);
    o.angle = unit(rng) * 2.0 * std::numbers::pi;
    o.dx = motion(opt.max_object_motion);
    o.dy = motion(opt.max_object_motion);
    const double margin = std::min(o.radius * 0.6, std::min(w, h) * 0.3);
    // Rejection sampling keeps objects from burying each other.
    for (int attempt = 0; attempt < 64; ++attempt) {
      o.cx = margin + unit(rng) * std::max(1.0, w - 2 * margin);
      o.cy = margin + unit(rng) * std::max(1.0, h - 2 * margin);
      bool ok = true;
      for (const auto& p : objects)
        if (std::hypot(p.cx - o.cx, p.cy - o.cy) < 0.9 * (p.radius + o.radius)) ok = false;
      if (ok) break;
    }
    objects.push_back(o);
  }
  return objects;
}

/// Render one frame pair. Deterministic in (seed, style, options).
inline VideoSample generate_scene(uint64_t seed, const DomainStyle& style, const SceneOptions& opt) {
  cnsg::detail::require(opt.num_objects >= 1, "generate_scene: need at least one object");
  cnsg::detail::require(opt.num_classes >= 3 && opt.num_classes <= 1 + kShapeKinds,
                  "generate_scene: num_classes must lie in [3, 6]");
  cnsg::detail::require(static_cast<int64_t>(style.classes.size()) >= opt.num_classes - 1,
                  "generate_scene: style '" + style.name + "' lacks class palettes");
  double cam_dx = 0, cam_dy = 0;
  const auto objects = scene_geometry(seed, opt, cam_dx, cam_dy);

  // Appearance randomness is keyed on (seed, style) and never touches geometry.
  std::mt19937_64 rng(mix_seed(seed, hash_string(style.name)));
  std::uniform_real_distribution<float> jitter(-style.colour_jitter, style.colour_jitter);
  std::vector<Rgb> tint;
  for (size_t i = 0; i < objects.size(); ++i) tint.push_back({jitter(rng), jitter(rng), jitter(rng)});
  const uint64_t bg_salt = mix_seed(seed, 0xB6);
  const double bg_phase = std::uniform_real_distribution<double>(0.0, 6.28)(rng);
  const auto hue = render::hue_matrix(style.hue_shift);

  const int64_t H = opt.height, W = opt.width;
  auto background = [&](double x, double y) {
    const double t = 0.5 + 0.5 * std::sin((x * 0.8 + y * 0.6) * 2.0 * std::numbers::pi / style.background_period +
                                          bg_phase);
    Rgb c = render::lerp(style.background_a, style.background_b, static_cast<float>(t));
    const float n = style.noise_level * render::value_noise(x, y, 12.0, bg_salt);
    for (auto& v : c) v += n;
    return c;
  };
  auto object_colour = [&](size_t idx, double u, double v) {
    const auto& o = objects[idx];
    const auto& ap = style.classes[static_cast<size_t>(o.class_id - 1)];
    const double proj = u * std::cos(ap.stripe_angle) + v * std::sin(ap.stripe_angle);
    const double t = 0.5 + 0.5 * std::sin(proj * 2.0 * std::numbers::pi / ap.stripe_period);
    Rgb c = render::lerp(ap.base, ap.accent, static_cast<float>(t) * ap.stripe_amount * 2.0f);
    const float n = style.noise_level * render::value_noise(u, v, 8.0, mix_seed(seed, idx + 17));
    for (int ch = 0; ch < 3; ++ch) c[static_cast<size_t>(ch)] += tint[idx][static_cast<size_t>(ch)] + n;
    return c;
  };

  VideoSample sample;
  sample.domain = style.name;
  sample.seed = seed;
  auto fopts = torch::TensorOptions().dtype(torch::kFloat);
  auto lopts = torch::TensorOptions().dtype(torch::kLong);
  sample.flow = torch::zeros({2, H, W}, fopts);
  auto flow_a = sample.flow.accessor<float, 3>();

  for (int frame = 0; frame < 2; ++frame) {
    auto image = torch::empty({3, H, W}, fopts);
    auto label = torch::zeros({H, W}, lopts);
    auto inst = torch::zeros({H, W}, lopts);
    auto img_a = image.accessor<float, 3>();
    auto lab_a = label.accessor<int64_t, 2>();
    auto ins_a = inst.accessor<int64_t, 2>();
    const double shift_x = frame == 0 ? 0.0 : cam_dx;
    const double shift_y = frame == 0 ? 0.0 : cam_dy;
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        const double px = static_cast<double>(x), py = static_cast<double>(y);
        Rgb c = background(px - shift_x, py - shift_y);
        int64_t cls = 0, id = 0;
        double fdx = cam_dx, fdy = cam_dy;
        for (size_t i = 0; i < objects.size(); ++i) {
          const auto& o = objects[i];
          const double ox = o.cx + (frame == 0 ? 0.0 : o.dx);
          const double oy = o.cy + (frame == 0 ? 0.0 : o.dy);
          const double lx = px - ox, ly = py - oy;
          if (render::shape_contains(o, lx, ly)) {
            c = object_colour(i, lx, ly);
            cls = o.class_id;
            id = static_cast<int64_t>(i) + 1;
            fdx = o.dx;
            fdy = o.dy;
          }
        }
        const Rgb out = render::photometric(c, style, hue);
        for (int ch = 0; ch < 3; ++ch) img_a[ch][y][x] = out[static_cast<size_t>(ch)];
        lab_a[y][x] = cls;
        ins_a[y][x] = id;
        if (frame == 1) {
          flow_a[0][y][x] = static_cast<float>(fdx);
          flow_a[1][y][x] = static_cast<float>(fdy);
        }
      }
    }
    if (frame == 0) {
      sample.frame_prev = image;
      sample.label_prev = label;
      sample.instance_prev = inst;
    } else {
      sample.frame_curr = image;
      sample.label_curr = label;
      sample.instance_curr = inst;
    }
  }
  return sample;
}

/// Pixels of frame t whose bilinear source in frame t-1 lies inside the image
/// and touches only the same surface (no occlusion, dis-occlusion, or border).
inline BinaryMask consistency_mask(const VideoSample& s) {
  const int64_t H = s.flow.size(1), W = s.flow.size(2);
  auto mask = torch::zeros({H, W}, torch::TensorOptions().dtype(torch::kBool));
  auto m = mask.accessor<bool, 2>();
  auto f = s.flow.accessor<float, 3>();
  auto ip = s.instance_prev.accessor<int64_t, 2>();
  auto ic = s.instance_curr.accessor<int64_t, 2>();
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      const double sx = static_cast<double>(x) - f[0][y][x];
      const double sy = static_cast<double>(y) - f[1][y][x];
      if (sx < 0 || sy < 0 || sx > static_cast<double>(W - 1) || sy > static_cast<double>(H - 1)) continue;
      const auto x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const int64_t id = ic[y][x];
      m[y][x] = ip[y0][x0] == id && ip[y0][x1] == id && ip[y1][x0] == id && ip[y1][x1] == id;
    }
  }
  return mask;
}

struct AugmentParams {
  double blur_sigma = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
};

inline AugmentParams draw_augment(uint64_t seed, double strength) {
  AugmentParams p;
  if (strength <= 0.0) return p;
  std::mt19937_64 rng(mix_seed(seed, 0xA06));
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < 0.5) p.blur_sigma = 0.3 + unit(rng) * 1.2 * strength;
  p.brightness = 0.2 * strength * sym(rng);
  p.contrast = 1.0 + 0.4 * strength * sym(rng);
  p.saturation = 1.0 + 0.5 * strength * sym(rng);
  p.hue = 0.5 * std::numbers::pi * strength * sym(rng);
  return p;
}

/// Gaussian blur, then brightness/contrast/saturation/hue jitter, clamped to [0, 1].
inline torch::Tensor apply_augment(const torch::Tensor& frame, const AugmentParams& p) {
  torch::NoGradGuard no_grad;
  auto x = frame.to(torch::kFloat);
  if (p.blur_sigma > 0.0) {
    const auto radius = static_cast<int64_t>(std::ceil(3.0 * p.blur_sigma));
    auto t = torch::arange(-radius, radius + 1, torch::kFloat);
    auto k = torch::exp(-(t * t) / (2.0 * p.blur_sigma * p.blur_sigma));
    k = k / k.sum();
    namespace F = torch::nn::functional;
    auto img = F::pad(x.unsqueeze(0), F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    auto kx = k.view({1, 1, 1, -1}).repeat({3, 1, 1, 1});
    auto ky = k.view({1, 1, -1, 1}).repeat({3, 1, 1, 1});
    img = F::conv2d(img, kx, F::Conv2dFuncOptions().groups(3));
    img = F::conv2d(img, ky, F::Conv2dFuncOptions().groups(3));
    x = img.squeeze(0);
  }
  auto grey = x.mean(0, true);
  x = grey + (x - grey) * p.saturation;
  auto rot = render::hue_matrix(p.hue);
  auto m = torch::from_blob(rot.data(), {3, 3}, torch::kFloat).clone();
  x = torch::einsum("ij,jhw->ihw", {m, x});
  x = (x - 0.5) * p.contrast + 0.5 + p.brightness;
  return x.clamp(0.0, 1.0);
}

inline torch::Tensor photometric_augment(const torch::Tensor& frame, uint64_t seed, double strength) {
  if (strength <= 0.0) return frame;
  return apply_augment(frame, draw_augment(seed, strength));
}

/// Same augmentation parameters for both frames of a pair.
inline std::pair<torch::Tensor, torch::Tensor> augment_pair(const torch::Tensor& prev, const torch::Tensor& curr,
                                                            uint64_t seed, double strength) {
  if (strength <= 0.0) return {prev, curr};
  const auto p = draw_augment(seed, strength);
  return {apply_augment(prev, p), apply_augment(curr, p)};
}

}  // namespace cnsg::synth
