#pragma once

// Shared helpers for the unit, integration and acceptance suites: scalar
// reference implementations, a finite-difference gradient checker, and
// small configurations that train in seconds.

#include <cnsg/config.hpp>
#include <cnsg/dataset.hpp>
#include <cnsg/engine.hpp>

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace cnsg::testing {

/// Align-corners bilinear resize, one sample at a time.
inline torch::Tensor oracle_resize(const torch::Tensor& map, int64_t oh, int64_t ow) {
  auto src = map.to(torch::kDouble).contiguous();
  const int64_t k = src.size(0), h = src.size(1), w = src.size(2);
  auto out = torch::zeros({k, oh, ow}, torch::kDouble);
  auto s = src.accessor<double, 3>();
  auto o = out.accessor<double, 3>();
  for (int64_t y = 0; y < oh; ++y) {
    const double sy = oh > 1 ? static_cast<double>(y) * static_cast<double>(h - 1) / static_cast<double>(oh - 1) : 0.0;
    for (int64_t x = 0; x < ow; ++x) {
      const double sx =
          ow > 1 ? static_cast<double>(x) * static_cast<double>(w - 1) / static_cast<double>(ow - 1) : 0.0;
      const auto x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (int64_t c = 0; c < k; ++c)
        o[c][y][x] = (1 - fy) * ((1 - fx) * s[c][y0][x0] + fx * s[c][y0][x1]) +
                     fy * ((1 - fx) * s[c][y1][x0] + fx * s[c][y1][x1]);
    }
  }
  return out;
}

/// Backward warp with border clamping: out(x, y) = map(x - dx, y - dy).
inline torch::Tensor oracle_warp(const torch::Tensor& map, const torch::Tensor& flow) {
  auto src = map.to(torch::kDouble).contiguous();
  auto fl = flow.to(torch::kDouble).contiguous();
  const int64_t k = src.size(0), h = src.size(1), w = src.size(2);
  auto out = torch::zeros_like(src);
  auto s = src.accessor<double, 3>();
  auto f = fl.accessor<double, 3>();
  auto o = out.accessor<double, 3>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double sx = std::clamp(static_cast<double>(x) - f[0][y][x], 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(static_cast<double>(y) - f[1][y][x], 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (int64_t c = 0; c < k; ++c)
        o[c][y][x] = (1 - fy) * ((1 - fx) * s[c][y0][x0] + fx * s[c][y0][x1]) +
                     fy * ((1 - fx) * s[c][y1][x0] + fx * s[c][y1][x1]);
    }
  return out;
}

/// Non-salient mask by full sort: tau is the J-th largest value, J = clamp(floor(HW * alpha), 1, HW).
inline torch::Tensor oracle_nonsalient_mask(const torch::Tensor& cam, double alpha) {
  auto flat = cam.to(torch::kDouble).contiguous().reshape({-1});
  std::vector<double> v(flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel());
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto n = static_cast<int64_t>(v.size());
  double tau = sorted.front();
  if (alpha > 0.0) {
    // floor(n * alpha) with alpha given as a decimal: round n * alpha to 9 places first.
    const double prod = std::round(static_cast<double>(n) * alpha * 1e9) / 1e9;
    const int64_t j = std::clamp<int64_t>(static_cast<int64_t>(std::floor(prod)), 1, n);
    tau = sorted[static_cast<size_t>(j - 1)];
  }
  auto out = torch::zeros({n}, torch::kBool);
  auto o = out.accessor<bool, 1>();
  for (int64_t i = 0; i < n; ++i) o[i] = v[static_cast<size_t>(i)] > 0.0 && v[static_cast<size_t>(i)] <= tau;
  return out.view(cam.sizes());
}

struct GradcheckResult {
  double max_rel = 0.0;  // max sampled abs error / largest gradient entry of that input, worst input
  int64_t checked = 0;
};

/// Central differences in double precision. Each input must be a double
/// leaf tensor with requires_grad. At most `max_entries` entries per input
/// are probed, chosen deterministically.
inline GradcheckResult gradcheck(const std::function<torch::Tensor()>& fn, std::vector<torch::Tensor> inputs,
                                 double eps = 1e-6, int64_t max_entries = 48) {
  for (auto& x : inputs)
    if (x.grad().defined()) x.mutable_grad().zero_();
  auto y = fn();
  auto grads = torch::autograd::grad({y}, inputs, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                     /*allow_unused=*/true);
  GradcheckResult res;
  std::mt19937_64 rng(1234);
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto& x = inputs[i];
    auto g = grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros({x.numel()}, torch::kDouble);
    std::vector<int64_t> idx(static_cast<size_t>(x.numel()));
    for (int64_t j = 0; j < x.numel(); ++j) idx[static_cast<size_t>(j)] = j;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int64_t>(idx.size()) > max_entries) idx.resize(static_cast<size_t>(max_entries));
    double max_diff = 0.0, max_num = g.numel() ? g.abs().max().item<double>() : 0.0;
    for (auto j : idx) {
      auto flat = x.detach().view({-1});
      const double orig = flat[j].item<double>();
      double plus, minus;
      {
        torch::NoGradGuard ng;
        flat[j] = orig + eps;
        plus = fn().item<double>();
        flat[j] = orig - eps;
        minus = fn().item<double>();
        flat[j] = orig;
      }
      const double num = (plus - minus) / (2 * eps);
      max_diff = std::max(max_diff, std::abs(num - g[j].item<double>()));
      max_num = std::max(max_num, std::abs(num));
      ++res.checked;
    }
    const double rel = max_diff / std::max(max_num, 1e-8);
    res.max_rel = std::max(res.max_rel, rel);
  }
  return res;
}

inline torch::Tensor leaf(torch::Tensor t) { return t.to(torch::kDouble).detach().clone().requires_grad_(true); }

/// A 16x16, 3-class configuration used for end-to-end gradient checks.
inline config::RunConfig toy_config() {
  config::RunConfig c;
  c.model.num_classes = 3;
  c.model.image_h = 16;
  c.model.image_w = 16;
  c.model.stage_channels = {4, 6};
  c.model.strides = {2, 2};
  c.model.aspp_channels = 4;
  c.model.aspp_rates = {1, 2};
  c.model.head_channels = 4;
  c.model.reason_dim = 4;
  c.model.batch_norm = false;
  c.data.spec.scene.num_classes = 3;
  c.data.spec.scene.height = 16;
  c.data.spec.scene.width = 16;
  c.data.spec.scene.num_objects = 2;
  c.data.spec.scene.min_radius = 3.0;
  c.data.spec.scene.max_radius = 5.0;
  c.data.spec.scene.max_object_motion = 1.0;
  c.data.spec.scene.max_camera_motion = 1.0;
  return c;
}

/// 32x32 configuration that trains a few iterations in well under a second.
inline config::RunConfig small_config() {
  config::RunConfig c;
  c.model.image_h = 32;
  c.model.image_w = 32;
  c.model.stage_channels = {8, 16, 16};
  c.model.strides = {2, 2, 1};
  c.model.aspp_channels = 8;
  c.model.aspp_rates = {1, 2};
  c.model.head_channels = 8;
  c.model.reason_dim = 8;
  c.train.iterations = 6;
  c.train.batch_size = 2;
  c.data.spec.train_samples = 8;
  c.data.spec.eval_samples = 4;
  c.data.spec.scene.height = 32;
  c.data.spec.scene.width = 32;
  c.data.spec.scene.num_objects = 2;
  c.data.spec.scene.min_radius = 5.0;
  c.data.spec.scene.max_radius = 8.0;
  c.experiment.seeds = {0};
  return c;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

/// Largest absolute difference over all parameters and buffers of two models.
inline double model_distance(segnet::SegModel& a, segnet::SegModel& b) {
  double d = 0.0;
  auto pa = a->named_parameters(), pb = b->named_parameters();
  for (const auto& item : pa) d = std::max(d, max_abs_diff(item.value(), pb[item.key()]));
  auto ba = a->named_buffers(), bb = b->named_buffers();
  for (const auto& item : ba) d = std::max(d, max_abs_diff(item.value(), bb[item.key()]));
  d = std::max(d, max_abs_diff(a->bank.prototypes, b->bank.prototypes));
  return d;
}

}  // namespace cnsg::testing
