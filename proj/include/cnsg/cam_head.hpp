#pragma once

// Auxiliary centroid classifier and class activation maps.
//
// Each present class contributes one centroid (mean backbone feature over the
// class region). A linear classifier is trained to recognise the centroids,
// and its weight rows then act as channel importances for the class
// activation map of that class.

#include <cnsg/core.hpp>

#include <utility>
#include <vector>

namespace cnsg::cam {

struct NoPresentClasses : Error {
  NoPresentClasses() : Error("classification loss needs at least one present class") {}
};

/// Linear classifier over K-dim centroid vectors: logits = W c + b.
class CentroidClassifierImpl : public torch::nn::Module {
 public:
  CentroidClassifierImpl(int64_t num_classes, int64_t channels, double init_std = 0.01)
      : num_classes_(num_classes), channels_(channels) {
    weight = register_parameter("weight", torch::randn({num_classes, channels}) * init_std);
    bias = register_parameter("bias", torch::zeros({num_classes}));
  }

  torch::Tensor forward(const torch::Tensor& centroids) const {
    return torch::nn::functional::linear(centroids, weight, bias);
  }

  /// Per-pixel logits for a [K, H, W] or [B, K, H, W] feature map.
  torch::Tensor dense_logits(const torch::Tensor& feature) const {
    const bool batched = feature.dim() == 4;
    auto f = batched ? feature : feature.unsqueeze(0);
    auto logits = torch::einsum("nk,bkhw->bnhw", {weight, f}) + bias.view({1, -1, 1, 1});
    return batched ? logits : logits.squeeze(0);
  }

  int64_t num_classes() const { return num_classes_; }
  int64_t channels() const { return channels_; }

  torch::Tensor weight;  // [N, K]
  torch::Tensor bias;    // [N]

 private:
  int64_t num_classes_;
  int64_t channels_;
};
TORCH_MODULE(CentroidClassifier);

struct CamStack {
  torch::Tensor data;       // [N, H', W']
  std::vector<bool> valid;  // class present in the frame
};

/// Nearest-neighbour downsample of the label (top-left sample of each
/// stride x stride cell) followed by class selection. Ignore pixels never match.
inline BinaryMask class_feature_mask(const LabelMap& label, int64_t class_id, int64_t feature_stride) {
  detail::require(class_id >= 0 && class_id < label.num_classes,
                  "class_feature_mask: class id " + std::to_string(class_id) + " out of range");
  detail::require(feature_stride >= 1, "class_feature_mask: stride must be positive");
  using torch::indexing::None;
  using torch::indexing::Slice;
  auto sampled = label.data.index({Slice(None, None, feature_stride), Slice(None, None, feature_stride)});
  return sampled == class_id;
}

inline torch::Tensor class_centroid(const FeatureMap& feature, const BinaryMask& mask) {
  return masked_mean(feature, mask);
}

/// Mean cross-entropy of the classifier over the supplied (class, centroid) pairs.
inline torch::Tensor classification_loss(const std::vector<std::pair<int64_t, torch::Tensor>>& centroids,
                                         const CentroidClassifier& classifier) {
  if (centroids.empty()) throw NoPresentClasses();
  std::vector<torch::Tensor> rows;
  std::vector<int64_t> targets;
  rows.reserve(centroids.size());
  targets.reserve(centroids.size());
  for (const auto& [class_id, c] : centroids) {
    detail::require(class_id >= 0 && class_id < classifier->num_classes(),
                    "classification_loss: class id out of range");
    rows.push_back(c);
    targets.push_back(class_id);
  }
  auto logits = classifier->forward(torch::stack(rows));
  auto target = torch::tensor(targets, torch::TensorOptions().dtype(torch::kLong).device(logits.device()));
  return torch::nn::functional::cross_entropy(logits, target);
}

/// M(h, w) = sum_k w[class_id, k] * feature[k, h, w] * mask(h, w). The bias is not used.
inline torch::Tensor compute_cam(const FeatureMap& feature, const CentroidClassifier& classifier, int64_t class_id,
                                 const BinaryMask& class_mask) {
  detail::check_feature(feature.data, "compute_cam");
  detail::check_mask(class_mask, feature.height(), feature.width(), "compute_cam");
  detail::require(feature.channels() == classifier->channels(), "compute_cam: channel mismatch with classifier");
  auto w = classifier->weight[class_id].to(feature.data.scalar_type());
  auto masked = feature.data * class_mask.to(feature.data.scalar_type()).unsqueeze(0);
  return torch::einsum("k,khw->hw", {w, masked});
}

/// CAMs for every class given one mask per class. Absent classes get zero maps.
inline CamStack compute_cam_stack(const FeatureMap& feature, const CentroidClassifier& classifier,
                                  const std::vector<BinaryMask>& class_masks) {
  CamStack stack;
  std::vector<torch::Tensor> maps;
  maps.reserve(class_masks.size());
  for (int64_t n = 0; n < static_cast<int64_t>(class_masks.size()); ++n) {
    const bool present = count_active(class_masks[n]) > 0;
    stack.valid.push_back(present);
    maps.push_back(present ? compute_cam(feature, classifier, n, class_masks[n])
                           : torch::zeros({feature.height(), feature.width()}, feature.data.options()));
  }
  stack.data = torch::stack(maps);
  return stack;
}

}  // namespace cnsg::cam
