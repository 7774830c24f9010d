#pragma once

// Shared tensor types and differentiable resampling utilities.
//
// Every spatial tensor in this library is channel-first: feature maps are
// [K, H, W], flow fields are [2, H, W] (dx plane then dy plane) and label
// maps are [H, W] int64. Resampling uses the align-corners convention, so
// pixel centre 0 and pixel centre W-1 map exactly onto each other between
// resolutions.

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cnsg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// A reduction was asked to average over zero pixels.
struct EmptyMask : Error {
  EmptyMask() : Error("mask has no active pixels") {}
  using Error::Error;
};

inline constexpr int64_t kIgnoreIndex = 255;

struct FeatureMap {
  torch::Tensor data;  // [K, H, W]
  int64_t stride = 1;

  int64_t channels() const { return data.size(0); }
  int64_t height() const { return data.size(1); }
  int64_t width() const { return data.size(2); }
};

struct LabelMap {
  torch::Tensor data;  // [H, W] int64
  int64_t num_classes = 0;
  int64_t ignore_index = kIgnoreIndex;

  int64_t height() const { return data.size(0); }
  int64_t width() const { return data.size(1); }
};

/// Backward flow: pixel (x, y) of frame t came from (x - dx, y - dy) of frame t-1.
struct FlowField {
  torch::Tensor data;  // [2, H, W]

  int64_t height() const { return data.size(1); }
  int64_t width() const { return data.size(2); }
};

using BinaryMask = torch::Tensor;  // [H, W] bool

namespace detail {

inline std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void check_feature(const torch::Tensor& t, const char* name) {
  require(t.defined() && t.dim() == 3 && t.size(0) >= 1 && t.size(1) >= 1 && t.size(2) >= 1,
          std::string(name) + ": expected [K, H, W] with positive extents, got " +
              (t.defined() ? shape_str(t) : "undefined"));
}

inline void check_mask(const torch::Tensor& mask, int64_t h, int64_t w, const char* name) {
  require(mask.defined() && mask.dim() == 2 && mask.size(0) == h && mask.size(1) == w,
          std::string(name) + ": mask shape " + (mask.defined() ? shape_str(mask) : "undefined") +
              " does not match spatial size [" + std::to_string(h) + ", " + std::to_string(w) + "]");
}

}  // namespace detail

/// Bilinear resize of [K, H, W] (or [B, K, H, W]) to the target spatial size, align-corners.
inline torch::Tensor bilinear_resize(const torch::Tensor& map, int64_t target_h, int64_t target_w) {
  detail::require(target_h >= 1 && target_w >= 1, "bilinear_resize: target size must be positive");
  detail::require(map.dim() == 3 || map.dim() == 4, "bilinear_resize: expected 3-D or 4-D input");
  const bool batched = map.dim() == 4;
  auto input = batched ? map : map.unsqueeze(0);
  if (input.size(2) == target_h && input.size(3) == target_w) return map;
  namespace F = torch::nn::functional;
  auto out = F::interpolate(input, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{target_h, target_w})
                                       .mode(torch::kBilinear)
                                       .align_corners(true));
  return batched ? out : out.squeeze(0);
}

inline FeatureMap bilinear_resize(const FeatureMap& map, int64_t target_h, int64_t target_w) {
  detail::check_feature(map.data, "bilinear_resize");
  auto out = bilinear_resize(map.data, target_h, target_w);
  // Stride is only meaningful for integer rescales; keep the nearest equivalent.
  const int64_t stride = std::max<int64_t>(1, map.stride * map.height() / target_h);
  return {out, stride};
}

/// Backward warp: out[.., y, x] = map sampled at (x - dx, y - dy), border-clamped.
///
/// Accepts [K, H, W] with flow [2, H, W], or [B, K, H, W] with flow [B, 2, H, W].
inline torch::Tensor bilinear_warp(const torch::Tensor& map, const torch::Tensor& flow) {
  const bool batched = map.dim() == 4;
  auto m = batched ? map : map.unsqueeze(0);
  auto f = batched ? flow : flow.unsqueeze(0);
  detail::require(m.dim() == 4 && f.dim() == 4 && f.size(1) == 2 && f.size(0) == m.size(0) &&
                      f.size(2) == m.size(2) && f.size(3) == m.size(3),
                  "bilinear_warp: flow " + detail::shape_str(flow) + " does not match map " +
                      detail::shape_str(map));
  const int64_t h = m.size(2);
  const int64_t w = m.size(3);
  auto opts = f.options();
  auto xs = torch::arange(w, opts).view({1, 1, w}).expand({1, h, w});
  auto ys = torch::arange(h, opts).view({1, h, 1}).expand({1, h, w});
  auto sx = xs - f.select(1, 0);
  auto sy = ys - f.select(1, 1);
  // Normalise to [-1, 1] under align_corners; a singleton axis pins to 0.
  auto nx = w > 1 ? sx * (2.0 / static_cast<double>(w - 1)) - 1.0 : torch::zeros_like(sx);
  auto ny = h > 1 ? sy * (2.0 / static_cast<double>(h - 1)) - 1.0 : torch::zeros_like(sy);
  auto grid = torch::stack({nx, ny}, -1).to(m.scalar_type());
  namespace F = torch::nn::functional;
  auto out = F::grid_sample(m, grid, F::GridSampleFuncOptions()
                                         .mode(torch::kBilinear)
                                         .padding_mode(torch::kBorder)
                                         .align_corners(true));
  return batched ? out : out.squeeze(0);
}

inline FeatureMap bilinear_warp(const FeatureMap& map, const FlowField& flow) {
  detail::check_feature(map.data, "bilinear_warp");
  return {bilinear_warp(map.data, flow.data), map.stride};
}

/// Resize a flow field to a new resolution, rescaling displacements to the new pixel grid.
inline torch::Tensor resize_flow(const torch::Tensor& flow, int64_t target_h, int64_t target_w) {
  const bool batched = flow.dim() == 4;
  auto f = batched ? flow : flow.unsqueeze(0);
  const int64_t h = f.size(2);
  const int64_t w = f.size(3);
  if (h == target_h && w == target_w) return flow;
  auto resized = bilinear_resize(f, target_h, target_w);
  const double sx = w > 1 ? static_cast<double>(target_w - 1) / static_cast<double>(w - 1) : 1.0;
  const double sy = h > 1 ? static_cast<double>(target_h - 1) / static_cast<double>(h - 1) : 1.0;
  auto scale = torch::tensor({sx, sy}, resized.options()).view({1, 2, 1, 1});
  auto out = resized * scale;
  return batched ? out : out.squeeze(0);
}

/// Mean feature vector over the active pixels of `mask`. Throws EmptyMask when none are active.
inline torch::Tensor masked_mean(const torch::Tensor& map, const BinaryMask& mask) {
  detail::check_feature(map, "masked_mean");
  detail::check_mask(mask, map.size(1), map.size(2), "masked_mean");
  const auto weights = mask.to(map.scalar_type());
  const double count = weights.sum().item<double>();
  if (count <= 0.0) throw EmptyMask();
  return (map * weights.unsqueeze(0)).sum({1, 2}) / count;
}

inline torch::Tensor masked_mean(const FeatureMap& map, const BinaryMask& mask) {
  return masked_mean(map.data, mask);
}

inline int64_t count_active(const BinaryMask& mask) { return mask.sum().item<int64_t>(); }

}  // namespace cnsg
