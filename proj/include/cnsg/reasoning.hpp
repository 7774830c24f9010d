#pragma once

// Class-graph reasoning over the per-class non-salient nodes and the
// channel gate it produces for the backbone feature.
//
//   A   = nodes * P                         [N, N], no normalisation
//   O   = relu(W_r * nodes^T * (I - A))^T   [N, D_r]
//   g   = sigmoid(W_a * mean_valid(O) + b_a) [K]
//   out = (1 + g) * f_o                     per channel

#include <cnsg/core.hpp>

#include <cmath>
#include <vector>

namespace cnsg::reasoning {

struct ReasonerShape {
  int64_t num_classes = 5;    // N
  int64_t node_dim = 0;       // D = K + H' * W'
  int64_t reason_dim = 32;    // D_r
  int64_t channels = 64;      // K
};

/// O = relu(W_r * X^T * (I - A))^T with X the [N, D] node matrix and W_r [D_r, D].
inline torch::Tensor laplacian_reason(const torch::Tensor& nodes, const torch::Tensor& adjacency,
                                      const torch::Tensor& node_transform) {
  detail::require(nodes.dim() == 2, "graph_reason: nodes must be [N, D]");
  const int64_t n = nodes.size(0);
  detail::require(adjacency.dim() == 2 && adjacency.size(0) == n && adjacency.size(1) == n,
                  "graph_reason: adjacency must be [N, N]");
  detail::require(node_transform.dim() == 2 && node_transform.size(1) == nodes.size(1),
                  "graph_reason: node transform must be [D_r, D]");
  auto smoothing = torch::eye(n, adjacency.options()) - adjacency;
  auto propagated = nodes.transpose(0, 1).matmul(smoothing);  // [D, N]
  return torch::relu(node_transform.matmul(propagated)).transpose(0, 1);
}

/// Mean of the valid rows of O; zeros when no row is valid.
inline torch::Tensor aggregate_valid(const torch::Tensor& reasoned, const std::vector<bool>& valid) {
  detail::require(reasoned.dim() == 2 && reasoned.size(0) == static_cast<int64_t>(valid.size()),
                  "channel_gate_refine: validity flags do not match node count");
  std::vector<int64_t> rows;
  for (int64_t i = 0; i < static_cast<int64_t>(valid.size()); ++i)
    if (valid[static_cast<size_t>(i)]) rows.push_back(i);
  if (rows.empty()) return torch::zeros({reasoned.size(1)}, reasoned.options());
  auto index = torch::tensor(rows, torch::TensorOptions().dtype(torch::kLong).device(reasoned.device()));
  return reasoned.index_select(0, index).mean(0);
}

/// f_bar = (1 + gate) * f_o for a [K, H, W] or [B, K, H, W] map with gate [K] or [B, K].
inline torch::Tensor apply_gate(const torch::Tensor& f_o, const torch::Tensor& gate) {
  if (f_o.dim() == 3) return f_o * (1.0 + gate).view({-1, 1, 1});
  return f_o * (1.0 + gate).view({gate.size(0), gate.size(1), 1, 1});
}

class GraphReasonerImpl : public torch::nn::Module {
 public:
  explicit GraphReasonerImpl(const ReasonerShape& shape) : shape_(shape) {
    detail::require(shape.node_dim >= 1 && shape.reason_dim >= 1 && shape.channels >= 1 && shape.num_classes >= 1,
                    "GraphReasoner: all dimensions must be positive");
    const auto d = static_cast<double>(shape.node_dim);
    adjacency_proj =
        register_parameter("adjacency_proj", torch::randn({shape.node_dim, shape.num_classes}) * (0.1 / std::sqrt(d)));
    node_transform =
        register_parameter("node_transform", torch::randn({shape.reason_dim, shape.node_dim}) * std::sqrt(2.0 / d));
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape.reason_dim));
    gate_proj = register_parameter("gate_proj", torch::rand({shape.channels, shape.reason_dim}) * (2 * bound) - bound);
    gate_bias = register_parameter("gate_bias", torch::zeros({shape.channels}));
  }

  /// A_r = nodes * P.
  torch::Tensor adjacency(const torch::Tensor& nodes) const {
    detail::require(nodes.dim() == 2 && nodes.size(1) == shape_.node_dim && nodes.size(0) == shape_.num_classes,
                    "adjacency: nodes must be [N, D] = [" + std::to_string(shape_.num_classes) + ", " +
                        std::to_string(shape_.node_dim) + "], got " + detail::shape_str(nodes));
    return nodes.matmul(adjacency_proj);
  }

  torch::Tensor graph_reason(const torch::Tensor& nodes) const {
    return laplacian_reason(nodes, adjacency(nodes), node_transform);
  }

  /// Channel gate in (0, 1)^K from the reasoned nodes.
  torch::Tensor gate(const torch::Tensor& reasoned, const std::vector<bool>& valid) const {
    auto pooled = aggregate_valid(reasoned, valid);
    return torch::sigmoid(torch::nn::functional::linear(pooled, gate_proj, gate_bias));
  }

  FeatureMap channel_gate_refine(const FeatureMap& f_o, const torch::Tensor& reasoned,
                                 const std::vector<bool>& valid) const {
    detail::check_feature(f_o.data, "channel_gate_refine");
    detail::require(f_o.channels() == shape_.channels, "channel_gate_refine: feature channel mismatch");
    return {apply_gate(f_o.data, gate(reasoned, valid)), f_o.stride};
  }

  /// Full path for one frame: nodes -> reasoning -> gated feature.
  FeatureMap forward(const FeatureMap& f_o, const torch::Tensor& nodes, const std::vector<bool>& valid) const {
    return channel_gate_refine(f_o, graph_reason(nodes), valid);
  }

  const ReasonerShape& shape() const { return shape_; }

  torch::Tensor adjacency_proj;  // P   [D, N]
  torch::Tensor node_transform;  // W_r [D_r, D]
  torch::Tensor gate_proj;       // W_a [K, D_r]
  torch::Tensor gate_bias;       // b_a [K]

 private:
  ReasonerShape shape_;
};
TORCH_MODULE(GraphReasoner);

}  // namespace cnsg::reasoning
