#pragma once

// Non-salient region selection and the class prototype bank.
//
// For a class activation map, the non-salient mask keeps the positive pixels
// at or below the J-th largest activation, dropping the most salient part of
// the class region. The per-frame mean feature under that mask (the
// non-salient centroid) feeds an exponential moving average per class; the
// resulting prototype, concatenated with the flattened CAM, forms the graph
// node for that class.

#include <cnsg/core.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace cnsg::nonsalient {

struct UninitializedClass : Error {
  explicit UninitializedClass(int64_t class_id)
      : Error("prototype for class " + std::to_string(class_id) + " has not been initialised") {}
};

inline constexpr double kDefaultAlpha = 0.3;
inline constexpr double kDefaultEmaLambda = 0.9;

/// Rank J of the threshold activation for a map with `pixels` entries.
/// Only meaningful for alpha > 0.
inline int64_t threshold_rank(int64_t pixels, double alpha) {
  // The epsilon absorbs representation error such as 10 * 0.3 = 2.9999999999999996.
  const auto j = static_cast<int64_t>(std::floor(static_cast<double>(pixels) * alpha + 1e-9));
  return std::clamp<int64_t>(j, 1, pixels);
}

/// The activation threshold tau. alpha == 0 disables filtering (tau = max).
inline double nonsalient_threshold(const torch::Tensor& cam, double alpha) {
  auto flat = cam.detach().reshape({-1}).to(torch::kDouble);
  if (alpha <= 0.0) return flat.max().item<double>();
  const int64_t j = threshold_rank(flat.numel(), alpha);
  return std::get<0>(flat.topk(j)).index({j - 1}).item<double>();
}

/// 1 where 0 < cam <= tau. Ties at tau are retained.
inline BinaryMask nonsalient_mask(const torch::Tensor& cam, double alpha) {
  detail::require(cam.dim() == 2, "nonsalient_mask: expected a [H, W] activation map");
  detail::require(alpha >= 0.0 && alpha <= 1.0, "nonsalient_mask: alpha must lie in [0, 1]");
  auto values = cam.detach().to(torch::kDouble);
  const double tau = nonsalient_threshold(values, alpha);
  return (values > 0.0).logical_and(values <= tau);
}

/// Mean feature over class_mask AND ns_mask. Throws EmptyMask when they do not intersect.
inline torch::Tensor nonsalient_centroid(const FeatureMap& feature, const BinaryMask& class_mask,
                                         const BinaryMask& ns_mask) {
  detail::check_mask(class_mask, feature.height(), feature.width(), "nonsalient_centroid");
  detail::check_mask(ns_mask, feature.height(), feature.width(), "nonsalient_centroid");
  return masked_mean(feature, class_mask.logical_and(ns_mask));
}

/// Per-class EMA prototypes, outside the autograd graph.
struct PrototypeBank {
  torch::Tensor prototypes;  // [N, K]
  std::vector<bool> initialized;
  double ema_lambda = kDefaultEmaLambda;

  PrototypeBank() = default;
  PrototypeBank(int64_t num_classes, int64_t channels, double lambda = kDefaultEmaLambda,
                torch::Dtype dtype = torch::kFloat)
      : prototypes(torch::zeros({num_classes, channels}, torch::TensorOptions().dtype(dtype))),
        initialized(static_cast<size_t>(num_classes), false),
        ema_lambda(lambda) {}

  int64_t num_classes() const { return prototypes.size(0); }
  int64_t channels() const { return prototypes.size(1); }
  bool is_initialized(int64_t class_id) const { return initialized.at(static_cast<size_t>(class_id)); }

  torch::Tensor row(int64_t class_id) const {
    if (!is_initialized(class_id)) throw UninitializedClass(class_id);
    return prototypes[class_id];
  }

  void reset() {
    prototypes.zero_();
    std::fill(initialized.begin(), initialized.end(), false);
  }
};

/// p <- lambda * p + (1 - lambda) * p'; the first observation initialises p.
inline PrototypeBank& ema_update(PrototypeBank& bank, int64_t class_id, const torch::Tensor& p_prime) {
  detail::require(class_id >= 0 && class_id < bank.num_classes(), "ema_update: class id out of range");
  torch::NoGradGuard no_grad;
  auto value = p_prime.detach().to(bank.prototypes.scalar_type()).reshape({-1});
  detail::require(value.numel() == bank.channels(), "ema_update: centroid length does not match bank");
  detail::require(torch::isfinite(value).all().item<bool>(), "ema_update: non-finite centroid");
  auto row = bank.prototypes[class_id];
  if (!bank.initialized[static_cast<size_t>(class_id)]) {
    row.copy_(value);
    bank.initialized[static_cast<size_t>(class_id)] = true;
  } else {
    row.mul_(bank.ema_lambda).add_(value, 1.0 - bank.ema_lambda);
  }
  return bank;
}

/// Min-max normalisation over the strictly positive support; everything else maps to 0.
/// A support with a single distinct value maps to 1.
inline torch::Tensor normalize_cam(const torch::Tensor& cam) {
  auto support = cam > 0;
  if (!support.any().item<bool>()) return torch::zeros_like(cam);
  auto positives = cam.masked_select(support);
  auto lo = positives.min();
  auto hi = positives.max();
  const double span = (hi - lo).item<double>();
  auto scaled = span > 0.0 ? (cam - lo) / (hi - lo) : torch::ones_like(cam);
  return torch::where(support, scaled, torch::zeros_like(cam));
}

/// Node = [prototype, flatten(normalize(cam))], row-major flattening.
inline torch::Tensor assemble_cnsf(const torch::Tensor& bank_row, const torch::Tensor& cam) {
  detail::require(bank_row.dim() == 1, "assemble_cnsf: prototype must be a vector");
  detail::require(cam.dim() == 2, "assemble_cnsf: CAM must be [H, W]");
  auto tail = normalize_cam(cam).reshape({-1}).to(bank_row.scalar_type());
  return torch::cat({bank_row, tail});
}

inline torch::Tensor assemble_cnsf(const PrototypeBank& bank, int64_t class_id, const torch::Tensor& cam) {
  return assemble_cnsf(bank.row(class_id).to(cam.scalar_type()), cam);
}

inline int64_t node_length(int64_t channels, int64_t cam_h, int64_t cam_w) { return channels + cam_h * cam_w; }

}  // namespace cnsg::nonsalient
