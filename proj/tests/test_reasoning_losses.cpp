#include "support.hpp"

#include <cnsg/alignment.hpp>
#include <cnsg/reasoning.hpp>
#include <cnsg/segnet.hpp>

#include <gtest/gtest.h>

using namespace cnsg;
using cnsg::testing::gradcheck;
using cnsg::testing::leaf;
using cnsg::testing::max_abs_diff;

TEST(Reasoning, LaplacianMatchesLoops) {
  torch::manual_seed(0);
  const int64_t n = 3, d = 5, r = 4;
  auto x = torch::randn({n, d}, torch::kDouble);
  auto a = torch::randn({n, n}, torch::kDouble) * 0.3;
  auto wr = torch::randn({r, d}, torch::kDouble);
  auto o = reasoning::laplacian_reason(x, a, wr);
  ASSERT_EQ(o.sizes(), (std::vector<int64_t>{n, r}));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q < r; ++q) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double prop = 0.0;  // (X^T (I - A))[k, i]
        for (int64_t j = 0; j < n; ++j)
          prop += x[j][k].item<double>() * ((i == j ? 1.0 : 0.0) - a[j][i].item<double>());
        s += wr[q][k].item<double>() * prop;
      }
      EXPECT_NEAR(o[i][q].item<double>(), std::max(s, 0.0), 1e-10);
    }
}

TEST(Reasoning, ZeroAdjacencyReducesToProjection) {
  torch::manual_seed(1);
  auto x = torch::randn({4, 6}, torch::kDouble);
  auto wr = torch::randn({3, 6}, torch::kDouble);
  auto o = reasoning::laplacian_reason(x, torch::zeros({4, 4}, torch::kDouble), wr);
  EXPECT_LT(max_abs_diff(o, torch::relu(x.matmul(wr.t()))), 1e-12);
}

TEST(Reasoning, ShapeChecks) {
  EXPECT_THROW(reasoning::laplacian_reason(torch::zeros({3, 4}), torch::zeros({2, 2}), torch::zeros({2, 4})),
               ShapeError);
  EXPECT_THROW(reasoning::laplacian_reason(torch::zeros({3, 4}), torch::zeros({3, 3}), torch::zeros({2, 5})),
               ShapeError);
  reasoning::GraphReasoner g(reasoning::ReasonerShape{3, 7, 4, 5});
  EXPECT_THROW(g->adjacency(torch::zeros({3, 6})), ShapeError);
  EXPECT_THROW(g->adjacency(torch::zeros({2, 7})), ShapeError);
}

TEST(Reasoning, AggregateValidRows) {
  auto o = torch::tensor({1.0, 2.0, 10.0, 20.0, 3.0, 4.0}).view({3, 2});
  auto m = reasoning::aggregate_valid(o, {true, false, true});
  EXPECT_NEAR(m[0].item<double>(), 2.0, 1e-6);
  EXPECT_NEAR(m[1].item<double>(), 3.0, 1e-6);
  EXPECT_EQ(reasoning::aggregate_valid(o, {false, false, false}).abs().sum().item<double>(), 0.0);
  EXPECT_THROW(reasoning::aggregate_valid(o, {true}), ShapeError);
}

TEST(Reasoning, GateScalesChannelsWithinOneToTwo) {
  torch::manual_seed(2);
  reasoning::GraphReasoner g(reasoning::ReasonerShape{3, 4 + 6, 5, 4});
  {
    torch::NoGradGuard ng;
    g->gate_proj.normal_(0.0, 3.0);  // push the gate towards its limits
  }
  FeatureMap f{torch::rand({4, 2, 3}) + 0.1, 8};
  auto nodes = torch::randn({3, 10});
  auto out = g->forward(f, nodes, {true, true, false});
  auto ratio = out.data / f.data;
  EXPECT_TRUE((ratio >= 1.0).all().item<bool>());
  EXPECT_TRUE((ratio <= 2.0).all().item<bool>());
  // Constant per channel.
  for (int64_t k = 0; k < 4; ++k) EXPECT_LT((ratio[k] - ratio[k][0][0]).abs().max().item<double>(), 1e-5);
  EXPECT_EQ(out.stride, 8);
}

TEST(Reasoning, NoValidNodesGivesBiasGate) {
  reasoning::GraphReasoner g(reasoning::ReasonerShape{2, 5, 3, 4});
  FeatureMap f{torch::ones({4, 2, 2}), 1};
  auto out = g->forward(f, torch::randn({2, 5}), {false, false});
  EXPECT_LT((out.data - 1.5).abs().max().item<double>(), 1e-6);  // sigmoid(0) = 0.5
}

TEST(Reasoning, ApplyGateBatched) {
  auto f = torch::ones({2, 3, 2, 2});
  auto g = torch::tensor({0.0, 0.5, 1.0, 1.0, 0.0, 0.25}).view({2, 3});
  auto out = reasoning::apply_gate(f, g);
  EXPECT_NEAR(out[0][1][0][0].item<double>(), 1.5, 1e-7);
  EXPECT_NEAR(out[1][2][1][1].item<double>(), 1.25, 1e-7);
}

TEST(Reasoning, GradientMatchesFiniteDifferences) {
  torch::manual_seed(3);
  reasoning::GraphReasoner g(reasoning::ReasonerShape{3, 8, 4, 5});
  g->to(torch::kDouble);
  auto nodes = leaf(torch::randn({3, 8}));
  auto f = leaf(torch::randn({5, 3, 3}));
  auto w = torch::randn({5, 3, 3}, torch::kDouble);
  std::vector<torch::Tensor> inputs{nodes, f, g->adjacency_proj, g->node_transform, g->gate_proj, g->gate_bias};
  auto res = gradcheck(
      [&] { return (g->forward(FeatureMap{f, 1}, nodes, {true, false, true}).data * w).sum(); }, inputs);
  EXPECT_LE(res.max_rel, 1e-4);
}

TEST(Alignment, AnalyticAnchor) {
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto prev = alignment::make_frame_centroids({torch::tensor({1.0, 2.0}, opts), torch::tensor({3.0, 4.0}, opts)}, 2, opts);
  auto curr = alignment::make_frame_centroids({torch::tensor({0.0, 2.0}, opts), torch::tensor({3.0, 0.0}, opts)}, 2, opts);
  EXPECT_DOUBLE_EQ(alignment::nsca_loss(prev, curr).item<double>(), 1.25);
}

TEST(Alignment, OnlySharedClassesCount) {
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto prev = alignment::make_frame_centroids({torch::tensor({1.0, 1.0}, opts), {}, torch::tensor({5.0, 5.0}, opts)}, 2, opts);
  auto curr = alignment::make_frame_centroids({torch::tensor({0.0, 0.0}, opts), torch::tensor({9.0, 9.0}, opts), {}}, 2, opts);
  EXPECT_EQ(alignment::shared_classes(prev, curr), (std::vector<int64_t>{0}));
  EXPECT_DOUBLE_EQ(alignment::nsca_loss(prev, curr).item<double>(), 1.0);
  auto none = alignment::make_frame_centroids({{}, {}, {}}, 2, opts);
  EXPECT_THROW(alignment::nsca_loss(prev, none), alignment::NoSharedClasses);
}

TEST(Alignment, ZeroForIdenticalFramesAndSymmetric) {
  torch::manual_seed(4);
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto a = alignment::make_frame_centroids({torch::randn({4}, opts), torch::randn({4}, opts)}, 4, opts);
  auto b = alignment::make_frame_centroids({torch::randn({4}, opts), torch::randn({4}, opts)}, 4, opts);
  EXPECT_EQ(alignment::nsca_loss(a, a).item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(alignment::nsca_loss(a, b).item<double>(), alignment::nsca_loss(b, a).item<double>());
}

TEST(Alignment, GradientMatchesFiniteDifferences) {
  torch::manual_seed(5);
  auto p0 = leaf(torch::randn({3})), p1 = leaf(torch::randn({3})), c0 = leaf(torch::randn({3})),
       c1 = leaf(torch::randn({3}));
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto res = gradcheck(
      [&] {
        return alignment::nsca_loss(alignment::make_frame_centroids({p0, p1}, 3, opts),
                                    alignment::make_frame_centroids({c0, c1}, 3, opts));
      },
      {p0, p1, c0, c1});
  EXPECT_LE(res.max_rel, 1e-4);
}

TEST(SegLoss, UniformPredictionGivesLogN) {
  auto probs = torch::full({2, 4, 3, 3}, 0.25, torch::kDouble);
  auto labels = torch::randint(0, 4, {2, 3, 3}, torch::kLong);
  EXPECT_NEAR(segnet::segmentation_loss(probs, labels).item<double>(), std::log(4.0), 1e-12);
}

TEST(SegLoss, IgnoredPixelsAreExcluded) {
  auto probs = torch::zeros({1, 2, 1, 2}, torch::kDouble);
  probs[0][0][0][0] = 0.5;
  probs[0][1][0][0] = 0.5;
  probs[0][0][0][1] = 1e-9;  // would dominate if counted
  probs[0][1][0][1] = 1.0 - 1e-9;
  auto labels = torch::tensor({0, 0}, torch::kLong).view({1, 1, 2});
  labels[0][0][1] = kIgnoreIndex;
  EXPECT_NEAR(segnet::segmentation_loss(probs, labels).item<double>(), std::log(2.0), 1e-12);
  EXPECT_THROW(segnet::segmentation_loss(probs, torch::full({1, 1, 2}, kIgnoreIndex, torch::kLong)),
               segnet::AllIgnored);
  EXPECT_THROW(segnet::segmentation_loss_from_logits(probs, torch::full({1, 1, 2}, kIgnoreIndex, torch::kLong)),
               segnet::AllIgnored);
}

TEST(SegLoss, LogitAndProbabilityFormsAgree) {
  torch::manual_seed(6);
  auto logits = torch::randn({2, 5, 4, 4}, torch::kDouble);
  auto labels = torch::randint(0, 5, {2, 4, 4}, torch::kLong);
  labels[0][1][1] = kIgnoreIndex;
  EXPECT_NEAR(segnet::segmentation_loss(torch::softmax(logits, 1), labels).item<double>(),
              segnet::segmentation_loss_from_logits(logits, labels).item<double>(), 1e-12);
}

TEST(SegLoss, ShapeMismatchThrows) {
  EXPECT_THROW(segnet::segmentation_loss(torch::ones({1, 2, 3, 3}), torch::zeros({1, 3, 4}, torch::kLong)), ShapeError);
}

TEST(SegLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(7);
  auto logits = leaf(torch::randn({1, 3, 3, 3}));
  auto labels = torch::randint(0, 3, {1, 3, 3}, torch::kLong);
  auto res = gradcheck([&] { return segnet::segmentation_loss(torch::softmax(logits, 1), labels); }, {logits});
  EXPECT_LE(res.max_rel, 1e-4);
}

TEST(ClsLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(8);
  cam::CentroidClassifier clf(4, 3);
  clf->to(torch::kDouble);
  auto c0 = leaf(torch::randn({3})), c1 = leaf(torch::randn({3}));
  auto res = gradcheck([&] { return cam::classification_loss({{0, c0}, {3, c1}}, clf); },
                       {c0, c1, clf->weight, clf->bias});
  EXPECT_LE(res.max_rel, 1e-4);
}
