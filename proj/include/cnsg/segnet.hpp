#pragma once

// Desk-scale video segmentation network.
//
// Backbone (stage 1 -> low-level feature, last stage -> f_o), a dilated
// context block on f_o, the class-wise non-salient feature path on f_o, and
// a two-frame fused classifier. Frame t-1 goes through the same backbone and
// per-frame classifier but skips the reasoning pass; its logits are warped
// into frame t with the supplied flow before fusion.

#include <cnsg/cam_head.hpp>
#include <cnsg/core.hpp>
#include <cnsg/nonsalient.hpp>
#include <cnsg/reasoning.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace cnsg::segnet {

struct AllIgnored : Error {
  AllIgnored() : Error("segmentation loss: every pixel is ignore_index") {}
};

struct ModelConfig {
  int64_t num_classes = 5;
  int64_t image_h = 96;
  int64_t image_w = 96;
  std::vector<int64_t> stage_channels{16, 32, 64, 64};
  std::vector<int64_t> strides{2, 2, 2, 1};
  int64_t stage_depth = 1;  // 3x3 convolutions per backbone stage
  bool conv_bias = true;
  bool batch_norm = true;
  int64_t aspp_channels = 32;
  std::vector<int64_t> aspp_rates{1, 2, 4};
  int64_t head_channels = 32;
  int64_t reason_dim = 32;

  int64_t feature_stride() const {
    int64_t s = 1;
    for (auto v : strides) s *= v;
    return s;
  }
  int64_t low_stride() const { return strides.empty() ? 1 : strides.front(); }
  int64_t feature_channels() const { return stage_channels.back(); }
  int64_t low_channels() const { return stage_channels.front(); }

  /// Spatial size after a chain of stride-s, pad-1, 3x3 convolutions.
  static int64_t downsampled(int64_t size, int64_t stride) { return (size - 1) / stride + 1; }
  std::pair<int64_t, int64_t> feature_size() const {
    int64_t h = image_h, w = image_w;
    for (auto s : strides) {
      h = downsampled(h, s);
      w = downsampled(w, s);
    }
    return {h, w};
  }
  std::pair<int64_t, int64_t> low_size() const {
    return {downsampled(image_h, low_stride()), downsampled(image_w, low_stride())};
  }
  int64_t node_dim() const {
    auto [h, w] = feature_size();
    return nonsalient::node_length(feature_channels(), h, w);
  }
  int64_t fused_channels() const { return aspp_channels + low_channels() + feature_channels(); }

  void validate() const {
    detail::require(num_classes >= 2, "model: num_classes must be at least 2");
    detail::require(!stage_channels.empty() && stage_channels.size() == strides.size(),
                    "model: stage_channels and strides must be non-empty and of equal length");
    for (auto c : stage_channels) detail::require(c >= 1, "model: stage channels must be positive");
    for (auto s : strides) detail::require(s >= 1, "model: strides must be positive");
    detail::require(stage_depth >= 1, "model: stage_depth must be positive");
    detail::require(image_h >= 1 && image_w >= 1, "model: image size must be positive");
    detail::require(aspp_channels >= 1 && head_channels >= 1 && reason_dim >= 1,
                    "model: head widths must be positive");
    detail::require(!aspp_rates.empty(), "model: at least one context rate is required");
  }
};

namespace nnf = torch::nn::functional;

inline torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride, int64_t dilation, bool bias) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(dilation).dilation(dilation).bias(bias));
}

inline torch::nn::Conv2d conv1x1(int64_t in, int64_t out, bool bias = true) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(bias));
}

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const ModelConfig& cfg) {
    int64_t in = 3;
    for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
      torch::nn::Sequential stage;
      const int64_t out = cfg.stage_channels[s];
      for (int64_t d = 0; d < cfg.stage_depth; ++d) {
        stage->push_back(conv3x3(d == 0 ? in : out, out, d == 0 ? cfg.strides[s] : 1, 1, cfg.conv_bias));
        if (cfg.batch_norm) stage->push_back(torch::nn::BatchNorm2d(out));
        stage->push_back(torch::nn::ReLU());
      }
      stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
      in = out;
    }
  }

  /// Returns (f_o, f_low) for a [B, 3, H, W] batch.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& images) {
    torch::Tensor x = images;
    torch::Tensor low;
    for (size_t s = 0; s < stages_.size(); ++s) {
      x = stages_[s]->forward(x);
      if (s == 0) low = x;
    }
    return {x, low};
  }

 private:
  std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(Backbone);

/// Parallel dilated 3x3 branches plus a global-pooling branch, concatenated and projected.
class ContextBlockImpl : public torch::nn::Module {
 public:
  explicit ContextBlockImpl(const ModelConfig& cfg) {
    const int64_t in = cfg.feature_channels();
    for (auto rate : cfg.aspp_rates) {
      torch::nn::Sequential branch;
      branch->push_back(conv3x3(in, cfg.aspp_channels, 1, rate, !cfg.batch_norm));
      if (cfg.batch_norm) branch->push_back(torch::nn::BatchNorm2d(cfg.aspp_channels));
      branch->push_back(torch::nn::ReLU());
      branches_.push_back(register_module("branch_r" + std::to_string(rate), branch));
    }
    pool_conv_ = register_module("pool_conv", conv1x1(in, cfg.aspp_channels));
    torch::nn::Sequential project;
    project->push_back(conv1x1(branch_count() * cfg.aspp_channels, cfg.aspp_channels, !cfg.batch_norm));
    if (cfg.batch_norm) project->push_back(torch::nn::BatchNorm2d(cfg.aspp_channels));
    project->push_back(torch::nn::ReLU());
    project_ = register_module("project", project);
  }

  int64_t branch_count() const { return static_cast<int64_t>(branches_.size()) + 1; }

  /// Global average of each channel, broadcast back to the input size. [B, K, h, w]
  static torch::Tensor pooled(const torch::Tensor& x) {
    return x.mean({2, 3}, /*keepdim=*/true).expand_as(x);
  }

  /// Concatenated branch outputs before the projection. [B, branches * C, h, w]
  torch::Tensor pre_projection(const torch::Tensor& x) {
    std::vector<torch::Tensor> outs;
    for (auto& b : branches_) outs.push_back(b->forward(x));
    auto pool = torch::relu(pool_conv_->forward(x.mean({2, 3}, true)));
    outs.push_back(pool.expand({x.size(0), pool.size(1), x.size(2), x.size(3)}));
    return torch::cat(outs, 1);
  }

  torch::Tensor forward(const torch::Tensor& x) { return project_->forward(pre_projection(x)); }

 private:
  std::vector<torch::nn::Sequential> branches_;
  torch::nn::Conv2d pool_conv_{nullptr};
  torch::nn::Sequential project_{nullptr};
};
TORCH_MODULE(ContextBlock);

/// Per-frame classifier C: two 1x1 convolutions.
class FrameClassifierImpl : public torch::nn::Module {
 public:
  FrameClassifierImpl(int64_t in, int64_t hidden, int64_t num_classes) {
    hidden_ = register_module("hidden", conv1x1(in, hidden));
    out_ = register_module("out", conv1x1(hidden, num_classes));
    torch::NoGradGuard no_grad;
    out_->weight.normal_(0.0, 0.01);
    out_->bias.zero_();
  }

  torch::Tensor forward(const torch::Tensor& f) { return out_->forward(torch::relu(hidden_->forward(f))); }

 private:
  torch::nn::Conv2d hidden_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(FrameClassifier);

/// Per-frame outputs of the class-wise non-salient feature path.
struct FrameAnalysis {
  std::vector<BinaryMask> class_masks;          // [N] at feature resolution
  std::vector<torch::Tensor> class_centroids;   // undefined for absent classes
  cam::CamStack cams;
  std::vector<torch::Tensor> ns_centroids;      // undefined when the non-salient mask is empty
};

struct PairForward {
  torch::Tensor logits;  // [B, N, H, W] fused logits at input resolution
  torch::Tensor probs;   // softmax of logits
  std::vector<FrameAnalysis> prev;
  std::vector<FrameAnalysis> curr;
  torch::Tensor f_bar;   // [B, K, h, w] refined current-frame feature
};

struct ForwardOptions {
  bool use_nsfr = true;
  double alpha = nonsalient::kDefaultAlpha;
  bool update_bank = false;  // training: fold this batch's non-salient centroids into the bank
  bool analyse_prev = false; // compute FrameAnalysis for frame t-1 as well
};

class SegModelImpl : public torch::nn::Module {
 public:
  explicit SegModelImpl(const ModelConfig& cfg, double ema_lambda = nonsalient::kDefaultEmaLambda)
      : cfg_(cfg) {
    cfg_.validate();
    const int64_t n = cfg.num_classes;
    backbone = register_module("backbone", Backbone(cfg));
    context = register_module("context", ContextBlock(cfg));
    classifier = register_module("classifier", FrameClassifier(cfg.fused_channels(), cfg.head_channels, n));
    fuse = register_module("fuse", conv1x1(2 * n, n));
    cam_classifier = register_module("cam_classifier", cam::CentroidClassifier(n, cfg.feature_channels()));
    reasoning::ReasonerShape shape{n, cfg.node_dim(), cfg.reason_dim, cfg.feature_channels()};
    reasoner = register_module("reasoner", reasoning::GraphReasoner(shape));
    bank = nonsalient::PrototypeBank(n, cfg.feature_channels(), ema_lambda);
    {
      // Fusion starts as "copy the current-frame logits".
      torch::NoGradGuard no_grad;
      fuse->weight.zero_();
      fuse->bias.zero_();
      for (int64_t c = 0; c < n; ++c) fuse->weight.index_put_({c, c, 0, 0}, 1.0);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  /// (f_o, f_low) for [3, H, W] or [B, 3, H, W] images in [0, 1].
  std::pair<torch::Tensor, torch::Tensor> extract_features(const torch::Tensor& images) {
    const bool batched = images.dim() == 4;
    auto x = batched ? images : images.unsqueeze(0);
    detail::require(x.dim() == 4 && x.size(1) == 3, "extract_features: expected [B, 3, H, W] images");
    auto [f_o, f_low] = backbone->forward(x);
    if (!batched) return {f_o.squeeze(0), f_low.squeeze(0)};
    return {f_o, f_low};
  }

  torch::Tensor aspp(const torch::Tensor& f_o) {
    const bool batched = f_o.dim() == 4;
    auto out = context->forward(batched ? f_o : f_o.unsqueeze(0));
    return batched ? out : out.squeeze(0);
  }

  /// f_t = [U(f_h), f_low, U(f_bar)] at the low-level resolution. Batched [B, C, h, w].
  static torch::Tensor fuse_frame_feature(const torch::Tensor& f_h, const torch::Tensor& f_low,
                                          const torch::Tensor& f_bar) {
    const int64_t h = f_low.size(-2);
    const int64_t w = f_low.size(-1);
    const int64_t dim = f_low.dim() - 3;  // channel axis
    return torch::cat({bilinear_resize(f_h, h, w), f_low, bilinear_resize(f_bar, h, w)}, dim);
  }

  /// Fused logits at input resolution from per-frame features and the input-resolution flow.
  torch::Tensor temporal_fuse_logits(const torch::Tensor& f_t, const torch::Tensor& f_prev, const torch::Tensor& flow,
                                     int64_t out_h, int64_t out_w) {
    auto curr_logits = classifier->forward(f_t);
    auto prev_logits = classifier->forward(f_prev);
    auto small_flow = resize_flow(flow, curr_logits.size(2), curr_logits.size(3));
    auto warped = bilinear_warp(prev_logits, small_flow);
    auto fused = fuse->forward(torch::cat({curr_logits, warped}, 1));
    return bilinear_resize(fused, out_h, out_w);
  }

  torch::Tensor temporal_fuse_predict(const torch::Tensor& f_t, const torch::Tensor& f_prev, const torch::Tensor& flow,
                                      int64_t out_h, int64_t out_w) {
    return torch::softmax(temporal_fuse_logits(f_t, f_prev, flow, out_h, out_w), 1);
  }

  /// Class masks at feature resolution from labels. labels: [H, W] int64.
  std::vector<BinaryMask> label_masks(const torch::Tensor& labels) const {
    LabelMap map{labels, cfg_.num_classes, kIgnoreIndex};
    std::vector<BinaryMask> masks;
    for (int64_t n = 0; n < cfg_.num_classes; ++n)
      masks.push_back(cam::class_feature_mask(map, n, cfg_.feature_stride()));
    return masks;
  }

  /// Class masks without labels: argmax of the centroid classifier applied per pixel.
  std::vector<BinaryMask> pseudo_masks(const torch::Tensor& f_o) const {
    torch::NoGradGuard no_grad;
    auto pred = cam_classifier->dense_logits(f_o).argmax(0);
    std::vector<BinaryMask> masks;
    for (int64_t n = 0; n < cfg_.num_classes; ++n) masks.push_back(pred == n);
    return masks;
  }

  /// Class centroids, CAMs, non-salient masks and centroids for one [K, h, w] feature.
  FrameAnalysis analyse_frame(const torch::Tensor& f_o, std::vector<BinaryMask> class_masks, double alpha) const {
    FrameAnalysis a;
    FeatureMap feature{f_o, cfg_.feature_stride()};
    a.cams = cam::compute_cam_stack(feature, cam_classifier, class_masks);
    for (int64_t n = 0; n < cfg_.num_classes; ++n) {
      torch::Tensor centroid;
      torch::Tensor ns_centroid;
      if (a.cams.valid[static_cast<size_t>(n)]) {
        centroid = cam::class_centroid(feature, class_masks[static_cast<size_t>(n)]);
        auto ns = nonsalient::nonsalient_mask(a.cams.data[n], alpha);
        auto both = class_masks[static_cast<size_t>(n)].logical_and(ns);
        if (count_active(both) > 0) ns_centroid = masked_mean(feature, both);
      }
      a.class_centroids.push_back(centroid);
      a.ns_centroids.push_back(ns_centroid);
    }
    a.class_masks = std::move(class_masks);
    return a;
  }

  /// Fold a frame's non-salient centroids into the prototype bank.
  void update_bank(const FrameAnalysis& a) {
    for (int64_t n = 0; n < cfg_.num_classes; ++n)
      if (a.ns_centroids[static_cast<size_t>(n)].defined())
        nonsalient::ema_update(bank, n, a.ns_centroids[static_cast<size_t>(n)]);
  }

  /// Graph nodes [N, D] for a frame; a class is valid when present and its prototype exists.
  std::pair<torch::Tensor, std::vector<bool>> frame_nodes(const FrameAnalysis& a, const torch::Tensor& like) const {
    std::vector<torch::Tensor> rows;
    std::vector<bool> valid;
    const int64_t d = cfg_.node_dim();
    for (int64_t n = 0; n < cfg_.num_classes; ++n) {
      const bool ok = a.cams.valid[static_cast<size_t>(n)] && bank.is_initialized(n);
      valid.push_back(ok);
      rows.push_back(ok ? nonsalient::assemble_cnsf(bank.row(n).to(like.scalar_type()), a.cams.data[n])
                        : torch::zeros({d}, like.options()));
    }
    return {torch::stack(rows), valid};
  }

  /// Full two-frame forward pass.
  ///
  /// labels_prev / labels_curr ([B, H, W]) select the class regions for the
  /// non-salient path; without them the centroid classifier's own per-pixel
  /// prediction is used.
  PairForward forward_pair(const torch::Tensor& frames_prev, const torch::Tensor& frames_curr, const torch::Tensor& flow,
                           const std::optional<torch::Tensor>& labels_prev,
                           const std::optional<torch::Tensor>& labels_curr, const ForwardOptions& opt) {
    const int64_t b = frames_curr.size(0);
    auto [f_o_all, f_low_all] = backbone->forward(torch::cat({frames_prev, frames_curr}, 0));
    auto f_h_all = context->forward(f_o_all);
    auto f_o_prev = f_o_all.narrow(0, 0, b);
    auto f_o_curr = f_o_all.narrow(0, b, b);

    PairForward out;
    const bool need_curr = opt.use_nsfr || labels_curr.has_value();
    const bool need_prev = opt.analyse_prev || opt.update_bank;
    for (int64_t i = 0; i < b; ++i) {
      if (need_prev) {
        auto masks = labels_prev ? label_masks((*labels_prev)[i]) : pseudo_masks(f_o_prev[i]);
        out.prev.push_back(analyse_frame(f_o_prev[i], std::move(masks), opt.alpha));
      }
      if (need_curr) {
        auto masks = labels_curr ? label_masks((*labels_curr)[i]) : pseudo_masks(f_o_curr[i]);
        out.curr.push_back(analyse_frame(f_o_curr[i], std::move(masks), opt.alpha));
      }
    }
    if (opt.update_bank) {
      for (int64_t i = 0; i < b; ++i) {
        update_bank(out.prev[static_cast<size_t>(i)]);
        if (need_curr) update_bank(out.curr[static_cast<size_t>(i)]);
      }
    }

    torch::Tensor f_bar = f_o_curr;
    if (opt.use_nsfr) {
      std::vector<torch::Tensor> refined;
      for (int64_t i = 0; i < b; ++i) {
        auto [nodes, valid] = frame_nodes(out.curr[static_cast<size_t>(i)], f_o_curr);
        refined.push_back(reasoner->forward(FeatureMap{f_o_curr[i], cfg_.feature_stride()}, nodes, valid).data);
      }
      f_bar = torch::stack(refined);
    }
    out.f_bar = f_bar;

    auto f_low_prev = f_low_all.narrow(0, 0, b);
    auto f_low_curr = f_low_all.narrow(0, b, b);
    auto f_h_prev = f_h_all.narrow(0, 0, b);
    auto f_h_curr = f_h_all.narrow(0, b, b);
    auto f_t = fuse_frame_feature(f_h_curr, f_low_curr, f_bar);
    auto f_prev = fuse_frame_feature(f_h_prev, f_low_prev, f_o_prev);
    out.logits = temporal_fuse_logits(f_t, f_prev, flow, frames_curr.size(2), frames_curr.size(3));
    out.probs = torch::softmax(out.logits, 1);
    return out;
  }

  Backbone backbone{nullptr};
  ContextBlock context{nullptr};
  FrameClassifier classifier{nullptr};
  torch::nn::Conv2d fuse{nullptr};
  cam::CentroidClassifier cam_classifier{nullptr};
  reasoning::GraphReasoner reasoner{nullptr};
  nonsalient::PrototypeBank bank;

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(SegModel);

/// Mean over labelled pixels of -log p(true class). probs: [B, N, H, W] or [N, H, W].
inline torch::Tensor segmentation_loss(const torch::Tensor& probs, const torch::Tensor& labels,
                                       int64_t ignore_index = kIgnoreIndex) {
  auto p = probs.dim() == 3 ? probs.unsqueeze(0) : probs;
  auto y = labels.dim() == 2 ? labels.unsqueeze(0) : labels;
  detail::require(p.dim() == 4 && y.dim() == 3 && p.size(0) == y.size(0) && p.size(2) == y.size(1) &&
                      p.size(3) == y.size(2),
                  "segmentation_loss: prediction " + detail::shape_str(probs) + " and label " +
                      detail::shape_str(labels) + " disagree");
  auto keep = y != ignore_index;
  if (!keep.any().item<bool>()) throw AllIgnored();
  auto safe = torch::where(keep, y, torch::zeros_like(y));
  auto picked = p.gather(1, safe.unsqueeze(1)).squeeze(1);
  auto nll = -torch::log(picked.clamp_min(1e-30));
  return nll.masked_select(keep).mean();
}

/// Same quantity computed from logits via log-softmax.
inline torch::Tensor segmentation_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels,
                                                   int64_t ignore_index = kIgnoreIndex) {
  auto y = labels.dim() == 2 ? labels.unsqueeze(0) : labels;
  if (!(y != ignore_index).any().item<bool>()) throw AllIgnored();
  auto l = logits.dim() == 3 ? logits.unsqueeze(0) : logits;
  return nnf::cross_entropy(l, y, nnf::CrossEntropyFuncOptions().ignore_index(ignore_index));
}

}  // namespace cnsg::segnet
