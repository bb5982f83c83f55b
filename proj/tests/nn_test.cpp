/*
 * Copyright 2026 The fedmoe Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include <gtest/gtest.h>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/nn.hpp"
#include "oracles.hpp"

namespace fedmoe {
namespace {

DenseNet single_layer(Matrix w, Vector b, Activation a = Activation::identity) {
  return DenseNet({Layer{std::move(w), std::move(b), a}});
}

DenseNet random_net(Rng& rng, std::size_t max_dim, std::size_t layers) {
  std::vector<std::size_t> dims;
  for (std::size_t l = 0; l <= layers; ++l) dims.push_back(1 + rng.below(max_dim));
  DenseNet net = make_dense_net(dims, Activation::relu, Activation::identity, rng);
  for (auto& l : net.layers()) {
    for (double& b : l.bias) b = rng.uniform(-0.5, 0.5);
  }
  return net;
}

TEST(Forward, IdentityLayerPassesInputThrough) {
  const auto net = single_layer(Matrix(2, 2, {1, 0, 0, 1}), {0, 0});
  EXPECT_EQ(forward(net, Vector{3, -1}), (Vector{3, -1}));
}

TEST(Forward, ZeroWeightsReturnBias) {
  const auto net = single_layer(Matrix(2, 3), {0.5, -2.0});
  EXPECT_EQ(forward(net, Vector{7, 8, 9}), (Vector{0.5, -2.0}));
  EXPECT_EQ(forward(net, Vector{0, 0, 0}), (Vector{0.5, -2.0}));
}

TEST(Forward, TwoLayerMatchesHandEvaluation) {
  // 2 -> 2 (relu) -> 1.
  DenseNet net({Layer{Matrix(2, 2, {0.5, -1.0, 2.0, 0.25}), {0.1, -0.2}, Activation::relu},
                Layer{Matrix(1, 2, {1.5, -0.5}), {0.3}, Activation::identity}});
  const Vector x{1.0, 2.0};
  // hidden pre-activations: 0.5 - 2.0 + 0.1 = -1.4 -> 0 ; 2.0 + 0.5 - 0.2 = 2.3
  // output: 1.5 * 0 - 0.5 * 2.3 + 0.3 = -0.85
  const Vector y = forward(net, x);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_NEAR(y[0], -0.85, 1e-15);
}

TEST(Forward, RejectsWrongInputLength) {
  const auto net = single_layer(Matrix(2, 2), {0, 0});
  EXPECT_THROW(forward(net, Vector{1.0}), DimensionError);
}

TEST(DenseNet, RejectsLayersThatDoNotCompose) {
  EXPECT_THROW(DenseNet({Layer{Matrix(3, 2), Vector(3), Activation::relu},
                         Layer{Matrix(1, 2), Vector(1), Activation::identity}}),
               DimensionError);
}

TEST(Softmax, Examples) {
  for (double v : softmax(Vector{0, 0, 0, 0})) EXPECT_DOUBLE_EQ(v, 0.25);
  for (double c : {-1e3, -3.0, 0.0, 42.0, 1e3}) {
    const Vector p = softmax(Vector{c, c});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
  }
  const Vector p = softmax(Vector{1.0, 0.5});
  // 1 / (1 + e^-0.5)
  EXPECT_NEAR(p[0], 0.62245933120185459, 1e-15);
  EXPECT_NEAR(p[1], 0.37754066879814541, 1e-15);
}

TEST(Softmax, PositiveUnitSumShiftInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    Vector v(1 + rng.below(10));
    for (double& x : v) x = rng.uniform(-30, 30);
    const Vector p = softmax(v);
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GT(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    const double c = rng.uniform(-100, 100);
    Vector shifted = v;
    for (double& x : shifted) x += c;
    const Vector q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(3);
  const DenseNet net = random_net(rng, 6, 3);
  Vector x(net.input_dim(), 0.3);
  const auto [g, dx] = backward(net, x, Vector(net.output_dim(), 0.0));
  EXPECT_TRUE(g.is_zero());
  for (double v : dx) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearLayerWeightGradientIsOuterProduct) {
  const auto net = single_layer(Matrix(2, 3, {1, 2, 3, 4, 5, 6}), {0.5, 0.5});
  const Vector x{1.0, -2.0, 0.5};
  const Vector g{0.3, -0.7};
  const auto [grads, dx] = backward(net, x, g);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(grads.layers[0].weight(r, c), g[r] * x[c]);
    }
    EXPECT_DOUBLE_EQ(grads.layers[0].bias[r], g[r]);
  }
  // W^T g
  EXPECT_DOUBLE_EQ(dx[0], 1 * 0.3 + 4 * -0.7);
  EXPECT_DOUBLE_EQ(dx[1], 2 * 0.3 + 5 * -0.7);
  EXPECT_DOUBLE_EQ(dx[2], 3 * 0.3 + 6 * -0.7);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  const auto net = single_layer(Matrix(1, 1, {1.0}), {0.0}, Activation::relu);
  const auto [g, dx] = backward(net, Vector{0.0}, Vector{1.0});
  EXPECT_EQ(g.layers[0].bias[0], 0.0);
  EXPECT_EQ(dx[0], 0.0);
}

// Scalar loss L = upstream . net(x); its gradient at the output is upstream.
TEST(Backward, MatchesCentralFiniteDifferencesOnRandomNets) {
  constexpr double kStep = 1e-5;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    Rng rng(seed);
    DenseNet net = random_net(rng, 16, 1 + rng.below(3));
    Vector x(net.input_dim());
    for (double& v : x) v = rng.uniform(-1, 1);
    Vector up(net.output_dim());
    for (double& v : up) v = rng.uniform(-1, 1);
    const auto [grads, dx] = backward(net, x, up);

    auto loss = [&] { return oracle::dot(forward(net, x), up); };
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      auto w = net.layers()[l].weight.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double fd = oracle::central_difference(w, i, loss, kStep);
        worst = std::max(worst, oracle::rel_error(grads.layers[l].weight.data()[i], fd));
      }
      auto& b = net.layers()[l].bias;
      for (std::size_t i = 0; i < b.size(); ++i) {
        const double fd = oracle::central_difference(b, i, loss, kStep);
        worst = std::max(worst, oracle::rel_error(grads.layers[l].bias[i], fd));
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double fd = oracle::central_difference(x, i, loss, kStep);
      worst = std::max(worst, oracle::rel_error(dx[i], fd));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, PureAndBitReproducible) {
  Rng rng(11);
  const DenseNet net = random_net(rng, 8, 2);
  Vector x(net.input_dim(), 0.25);
  Vector up(net.output_dim(), -0.5);
  const auto a = backward(net, x, up);
  const auto b = backward(net, x, up);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(forward(net, x), forward(net, x));
}

TEST(Backward, RejectsWrongUpstreamLength) {
  const auto net = single_layer(Matrix(2, 2), {0, 0});
  EXPECT_THROW(backward(net, Vector{1, 1}, Vector{1}), DimensionError);
}

TEST(SgdStep, Examples) {
  Rng rng(5);
  const DenseNet net = random_net(rng, 5, 2);
  EXPECT_EQ(sgd_step(net, GradientSet::zeros_like(net), 0.1), net);

  GradientSet g = GradientSet::zeros_like(net);
  for (auto& l : g.layers) for (double& v : l.weight.data()) v = 1.0;
  EXPECT_EQ(sgd_step(net, g, 0.0), net);

  const auto one = single_layer(Matrix(1, 1, {1.0}), {0.0});
  GradientSet half = GradientSet::zeros_like(one);
  half.layers[0].weight(0, 0) = 0.5;
  EXPECT_DOUBLE_EQ(sgd_step(one, half, 0.01).layers()[0].weight(0, 0), 0.995);
}

TEST(SgdStep, NonFiniteGradientAborts) {
  const auto net = single_layer(Matrix(1, 1, {1.0}), {0.0});
  GradientSet g = GradientSet::zeros_like(net);
  g.layers[0].bias[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(sgd_step(net, g, 0.1), NonFiniteError);
}

TEST(Init, GlorotBoundsAndZeroBias) {
  Rng rng(9);
  const std::vector<std::size_t> dims{6, 10, 3};
  const DenseNet net = make_dense_net(dims, Activation::relu, Activation::identity, rng);
  for (std::size_t l = 0; l < 2; ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    for (double w : net.layers()[l].weight.data()) EXPECT_LE(std::abs(w), limit);
    for (double b : net.layers()[l].bias) EXPECT_EQ(b, 0.0);
  }
  EXPECT_EQ(net.layers()[0].activation, Activation::relu);
  EXPECT_EQ(net.layers()[1].activation, Activation::identity);
  EXPECT_EQ(net.parameter_count(), 6u * 10 + 10 + 10 * 3 + 3);
}

TEST(Flatten, AssignFlatInvertsFlatten) {
  Rng rng(13);
  DenseNet net = random_net(rng, 7, 3);
  const Vector flat = flatten(net);
  DenseNet other = net;
  Vector zeros(flat.size(), 0.0);
  assign_flat(other, zeros);
  assign_flat(other, flat);
  EXPECT_EQ(other, net);
  EXPECT_THROW(assign_flat(other, Vector(flat.size() + 1)), DimensionError);
}

TEST(Checkpoint, RoundTripsAndValidatesShapes) {
  Rng rng(17);
  const DenseNet net = random_net(rng, 6, 2);
  TensorMap t;
  add_tensors(t, "embedding", net);
  const auto path = (std::filesystem::temp_directory_path() / "fedmoe_nn_ckpt.json").string();
  write_checkpoint(path, t);
  const TensorMap back = read_checkpoint(path);
  DenseNet restored = net;
  assign_flat(restored, Vector(net.parameter_count(), 0.0));
  load_tensors(back, "embedding", restored);
  EXPECT_EQ(restored, net);

  TensorMap reshaped = back;
  const auto& w0 = back.at("embedding.0.weight");
  reshaped["embedding.0.weight"] = Matrix(w0.rows() + 1, w0.cols());
  EXPECT_THROW(load_tensors(reshaped, "embedding", restored), FormatError);
  EXPECT_THROW(load_tensors(back, "missing", restored), FormatError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsMalformedDocuments) {
  EXPECT_THROW(checkpoint_from_json(nlohmann::json{{"format", "other"}}), FormatError);
  nlohmann::json doc = checkpoint_to_json({});
  doc["tensors"]["w"] = {{"rows", 2}, {"cols", 2}, {"values", {1.0, 2.0, 3.0}}};
  EXPECT_THROW(checkpoint_from_json(doc), FormatError);
}

}  // namespace
}  // namespace fedmoe
