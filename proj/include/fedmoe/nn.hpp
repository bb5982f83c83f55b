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

#pragma once

// Dense linear algebra and small feed-forward networks with exact analytic
// gradients. Everything is double precision and evaluated one sample at a
// time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmoe/errors.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

using Vector = std::vector<double>;

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " +
                           std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const Vector& values() const { return data_; }

  /// Copy of column c.
  Vector column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

enum class Activation { identity, relu };

inline const char* to_string(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

/// One affine map followed by an activation. weight is (out x in).
struct Layer {
  Matrix weight;
  Vector bias;
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].bias.size() != layers_[l].out_dim()) {
        throw DimensionError("layer " + std::to_string(l) +
                             ": bias length does not match output dim");
      }
      if (l > 0 && layers_[l].in_dim() != layers_[l - 1].out_dim()) {
        throw DimensionError("layer " + std::to_string(l) +
                             ": input dim does not match previous output dim");
      }
    }
  }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  bool empty() const { return layers_.empty(); }

  std::size_t input_dim() const {
    return layers_.empty() ? 0 : layers_.front().in_dim();
  }
  std::size_t output_dim() const {
    return layers_.empty() ? 0 : layers_.back().out_dim();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

  /// True when both nets have identical layer shapes and activations.
  bool same_architecture(const DenseNet& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& a = layers_[l];
      const auto& b = other.layers_[l];
      if (a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim() ||
          a.activation != b.activation) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const DenseNet&, const DenseNet&) = default;

 private:
  std::vector<Layer> layers_;
};

struct LayerGradient {
  Matrix weight;
  Vector bias;

  friend bool operator==(const LayerGradient&, const LayerGradient&) = default;
};

/// One gradient tensor per parameter tensor of a DenseNet.
struct GradientSet {
  std::vector<LayerGradient> layers;

  static GradientSet zeros_like(const DenseNet& net) {
    GradientSet g;
    g.layers.reserve(net.layers().size());
    for (const auto& l : net.layers()) {
      g.layers.push_back({Matrix(l.out_dim(), l.in_dim()), Vector(l.out_dim())});
    }
    return g;
  }

  bool is_zero() const {
    for (const auto& l : layers) {
      for (double v : l.weight.data()) if (v != 0.0) return false;
      for (double v : l.bias) if (v != 0.0) return false;
    }
    return true;
  }

  bool finite() const {
    for (const auto& l : layers) {
      if (!all_finite(l.weight.data()) || !all_finite(l.bias)) return false;
    }
    return true;
  }

  /// this += scale * other
  void add_scaled(const GradientSet& other, double scale) {
    if (other.layers.size() != layers.size()) {
      throw DimensionError("gradient sets have different layer counts");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto dst = layers[l].weight.data();
      auto src = other.layers[l].weight.data();
      if (dst.size() != src.size() ||
          layers[l].bias.size() != other.layers[l].bias.size()) {
        throw DimensionError("gradient tensor shapes differ");
      }
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
      for (std::size_t i = 0; i < layers[l].bias.size(); ++i) {
        layers[l].bias[i] += scale * other.layers[l].bias[i];
      }
    }
  }

  void scale(double s) {
    for (auto& l : layers) {
      for (double& v : l.weight.data()) v *= s;
      for (double& v : l.bias) v *= s;
    }
  }

  friend bool operator==(const GradientSet&, const GradientSet&) = default;
};

namespace detail {

inline double activate(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : z;
}

// ReLU subgradient at exactly 0 is 0.
inline double activate_derivative(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

inline void check_input(const DenseNet& net, std::size_t n) {
  if (net.empty()) throw DimensionError("network has no layers");
  if (n != net.input_dim()) {
    throw DimensionError("input length " + std::to_string(n) +
                         " != network input dim " +
                         std::to_string(net.input_dim()));
  }
}

}  // namespace detail

/// Pre-activations and layer inputs recorded by a forward pass.
struct ForwardTrace {
  std::vector<Vector> inputs;       // input to layer l
  std::vector<Vector> preactivations;
  Vector output;
};

inline ForwardTrace forward_trace(const DenseNet& net, std::span<const double> x) {
  detail::check_input(net, x.size());
  ForwardTrace trace;
  trace.inputs.reserve(net.layers().size());
  trace.preactivations.reserve(net.layers().size());
  Vector current(x.begin(), x.end());
  for (const auto& layer : net.layers()) {
    Vector z(layer.bias);
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
      double acc = z[r];
      for (std::size_t c = 0; c < layer.in_dim(); ++c) {
        acc += layer.weight(r, c) * current[c];
      }
      z[r] = acc;
    }
    Vector a(z.size());
    for (std::size_t r = 0; r < z.size(); ++r) {
      a[r] = detail::activate(layer.activation, z[r]);
    }
    trace.inputs.push_back(std::move(current));
    trace.preactivations.push_back(std::move(z));
    current = std::move(a);
  }
  trace.output = std::move(current);
  return trace;
}

inline Vector forward(const DenseNet& net, std::span<const double> x) {
  return forward_trace(net, x).output;
}

/// Numerically stable exp-normalize.
inline Vector softmax(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  if (out.empty()) return out;
  const double shift = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (double& e : out) {
    e = std::exp(e - shift);
    total += e;
  }
  for (double& e : out) e /= total;
  return out;
}

/// log(sum(exp(v))), stable.
inline double log_sum_exp(std::span<const double> v) {
  const double shift = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double e : v) total += std::exp(e - shift);
  return shift + std::log(total);
}

/// Backpropagates from a trace already computed for `net`.
inline std::pair<GradientSet, Vector> backward(const DenseNet& net,
                                               const ForwardTrace& trace,
                                               std::span<const double> upstream) {
  if (upstream.size() != net.output_dim()) {
    throw DimensionError("upstream length " + std::to_string(upstream.size()) +
                         " != network output dim " +
                         std::to_string(net.output_dim()));
  }
  GradientSet grads = GradientSet::zeros_like(net);
  Vector delta(upstream.begin(), upstream.end());
  for (std::size_t l = net.layers().size(); l-- > 0;) {
    const auto& layer = net.layers()[l];
    const auto& z = trace.preactivations[l];
    const auto& in = trace.inputs[l];
    for (std::size_t r = 0; r < delta.size(); ++r) {
      delta[r] *= detail::activate_derivative(layer.activation, z[r]);
    }
    auto& g = grads.layers[l];
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
      g.bias[r] = delta[r];
      for (std::size_t c = 0; c < layer.in_dim(); ++c) {
        g.weight(r, c) = delta[r] * in[c];
      }
    }
    Vector next(layer.in_dim(), 0.0);
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
      for (std::size_t c = 0; c < layer.in_dim(); ++c) {
        next[c] += layer.weight(r, c) * delta[r];
      }
    }
    delta = std::move(next);
  }
  return {std::move(grads), std::move(delta)};
}

/// Gradients of the scalar loss whose gradient at the net output is
/// `upstream`, plus the gradient with respect to the input x.
inline std::pair<GradientSet, Vector> backward(const DenseNet& net,
                                               std::span<const double> x,
                                               std::span<const double> upstream) {
  return backward(net, forward_trace(net, x), upstream);
}

/// p <- p - eta * g, in place.
inline void apply_sgd(DenseNet& net, const GradientSet& grads, double eta) {
  if (grads.layers.size() != net.layers().size()) {
    throw DimensionError("gradient set does not match network");
  }
  if (!grads.finite()) {
    throw NonFiniteError("non-finite gradient entry in SGD step");
  }
  for (std::size_t l = 0; l < grads.layers.size(); ++l) {
    auto& layer = net.layers()[l];
    const auto& g = grads.layers[l];
    if (g.weight.rows() != layer.weight.rows() ||
        g.weight.cols() != layer.weight.cols() ||
        g.bias.size() != layer.bias.size()) {
      throw DimensionError("gradient shape mismatch at layer " +
                           std::to_string(l));
    }
    auto w = layer.weight.data();
    auto gw = g.weight.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * gw[i];
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      layer.bias[i] -= eta * g.bias[i];
    }
  }
}

inline DenseNet sgd_step(DenseNet net, const GradientSet& grads, double eta) {
  apply_sgd(net, grads, eta);
  return net;
}

/// Builds a net with layer sizes dims[0] -> dims[1] -> ... -> dims.back().
/// Hidden layers use `hidden`, the last layer uses `output`. Weights are
/// Glorot-uniform, biases zero.
inline DenseNet make_dense_net(std::span<const std::size_t> dims, Activation hidden,
                               Activation output, Rng& rng) {
  if (dims.size() < 2) throw DimensionError("a net needs at least two sizes");
  std::vector<Layer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l];
    const std::size_t out = dims[l + 1];
    if (in == 0 || out == 0) throw DimensionError("zero-width layer");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(out, in);
    for (double& v : w.data()) v = rng.uniform(-limit, limit);
    layers.push_back({std::move(w), Vector(out, 0.0),
                      l + 2 == dims.size() ? output : hidden});
  }
  return DenseNet(std::move(layers));
}

/// All parameters concatenated: per layer, weight row-major then bias.
inline Vector flatten(const DenseNet& net) {
  Vector out;
  out.reserve(net.parameter_count());
  for (const auto& l : net.layers()) {
    out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

inline Vector flatten(const GradientSet& grads) {
  Vector out;
  for (const auto& l : grads.layers) {
    out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

/// Inverse of flatten(net): overwrites every parameter from `flat`.
inline void assign_flat(DenseNet& net, std::span<const double> flat) {
  if (flat.size() != net.parameter_count()) {
    throw DimensionError("flat parameter length " + std::to_string(flat.size()) +
                         " != " + std::to_string(net.parameter_count()));
  }
  std::size_t pos = 0;
  for (auto& l : net.layers()) {
    for (double& v : l.weight.data()) v = flat[pos++];
    for (double& v : l.bias) v = flat[pos++];
  }
}

}  // namespace fedmoe
