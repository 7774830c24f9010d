#pragma once

#include <cnsg/core.hpp>

#include <vector>

namespace cnsg::alignment {

struct NoSharedClasses : Error {
  NoSharedClasses() : Error("no class is present in both frames") {}
};

/// Per-frame non-salient centroids. Rows of absent classes are never read.
struct FrameCentroids {
  torch::Tensor centroids;  // [N, K]
  std::vector<bool> present;

  int64_t num_classes() const { return static_cast<int64_t>(present.size()); }
};

/// Build from optional per-class rows; an undefined tensor marks the class absent.
inline FrameCentroids make_frame_centroids(const std::vector<torch::Tensor>& rows, int64_t channels,
                                           const torch::TensorOptions& options) {
  FrameCentroids out;
  std::vector<torch::Tensor> filled;
  filled.reserve(rows.size());
  for (const auto& r : rows) {
    out.present.push_back(r.defined());
    filled.push_back(r.defined() ? r : torch::zeros({channels}, options));
  }
  out.centroids = torch::stack(filled);
  return out;
}

inline std::vector<int64_t> shared_classes(const FrameCentroids& prev, const FrameCentroids& curr) {
  detail::require(prev.num_classes() == curr.num_classes(), "nsca_loss: class counts differ between frames");
  std::vector<int64_t> shared;
  for (int64_t n = 0; n < prev.num_classes(); ++n)
    if (prev.present[static_cast<size_t>(n)] && curr.present[static_cast<size_t>(n)]) shared.push_back(n);
  return shared;
}

/// Mean over shared classes of the per-channel mean absolute centroid difference.
inline torch::Tensor nsca_loss(const FrameCentroids& prev, const FrameCentroids& curr) {
  const auto shared = shared_classes(prev, curr);
  if (shared.empty()) throw NoSharedClasses();
  auto index = torch::tensor(shared, torch::TensorOptions().dtype(torch::kLong).device(prev.centroids.device()));
  auto diff = prev.centroids.index_select(0, index) - curr.centroids.index_select(0, index);
  return diff.abs().mean(1).mean();
}

}  // namespace cnsg::alignment
