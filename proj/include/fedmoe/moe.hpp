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

// Client model: embedding net -> linear softmax gate -> K expert nets, with
// sparse top-k expert activation and cross-entropy training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/errors.hpp"
#include "fedmoe/nn.hpp"
#include "fedmoe/rng.hpp"
#include "fedmoe/sample.hpp"

namespace fedmoe {

struct MoEArchitecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> embedding_hidden{16};
  std::size_t representation_dim = 8;
  std::vector<std::size_t> expert_hidden{16};
  std::size_t classes = 4;
  std::size_t experts = 4;
};

/// Embedding (d -> n), gating matrix (n x K, column j is the proxy of expert
/// j) and K experts (n -> C logits) sharing one architecture.
struct MoEModel {
  DenseNet embedding;
  Matrix gating;
  std::vector<DenseNet> experts;

  std::size_t expert_count() const { return experts.size(); }
  std::size_t representation_dim() const { return gating.rows(); }
  std::size_t input_dim() const { return embedding.input_dim(); }
  std::size_t classes() const {
    return experts.empty() ? 0 : experts.front().output_dim();
  }
  std::size_t expert_parameter_count() const {
    return experts.empty() ? 0 : experts.front().parameter_count();
  }

  void validate() const {
    if (experts.empty()) throw DimensionError("model needs at least one expert");
    if (gating.cols() != experts.size()) {
      throw DimensionError("gating has " + std::to_string(gating.cols()) +
                           " proxies for " + std::to_string(experts.size()) +
                           " experts");
    }
    if (gating.rows() != embedding.output_dim()) {
      throw DimensionError("gating rows != embedding output dim");
    }
    for (const auto& e : experts) {
      if (!e.same_architecture(experts.front())) {
        throw DimensionError("experts must share one architecture");
      }
      if (e.input_dim() != gating.rows()) {
        throw DimensionError("expert input dim != representation dim");
      }
    }
  }

  friend bool operator==(const MoEModel&, const MoEModel&) = default;
};

inline DenseNet make_embedding(const MoEArchitecture& arch, Rng& rng) {
  std::vector<std::size_t> dims{arch.input_dim};
  dims.insert(dims.end(), arch.embedding_hidden.begin(), arch.embedding_hidden.end());
  dims.push_back(arch.representation_dim);
  return make_dense_net(dims, Activation::relu, Activation::identity, rng);
}

inline MoEModel make_moe_model(const MoEArchitecture& arch, Rng& rng) {
  if (arch.experts == 0) throw DimensionError("model needs at least one expert");
  MoEModel model;
  Rng emb_rng = rng.split(0);
  Rng gate_rng = rng.split(1);
  model.embedding = make_embedding(arch, emb_rng);

  const std::size_t n = arch.representation_dim;
  const std::size_t k = arch.experts;
  const double limit = std::sqrt(6.0 / static_cast<double>(n + k));
  model.gating = Matrix(n, k);
  for (double& v : model.gating.data()) v = gate_rng.uniform(-limit, limit);

  std::vector<std::size_t> dims{n};
  dims.insert(dims.end(), arch.expert_hidden.begin(), arch.expert_hidden.end());
  dims.push_back(arch.classes);
  for (std::size_t j = 0; j < k; ++j) {
    Rng expert_rng = rng.split(2 + j);
    model.experts.push_back(
        make_dense_net(dims, Activation::relu, Activation::identity, expert_rng));
  }
  return model;
}

struct GateDecision {
  Vector scores;                      // softmax(h . gating), length K
  std::vector<std::size_t> selected;  // top-k, highest score first
};

/// Raw gate logits h . gating (one per proxy).
inline Vector gate_logits(std::span<const double> h, const Matrix& gating) {
  if (h.size() != gating.rows()) {
    throw DimensionError("representation length " + std::to_string(h.size()) +
                         " != gating rows " + std::to_string(gating.rows()));
  }
  Vector s(gating.cols(), 0.0);
  for (std::size_t r = 0; r < gating.rows(); ++r) {
    for (std::size_t j = 0; j < gating.cols(); ++j) s[j] += h[r] * gating(r, j);
  }
  return s;
}

/// Indices of the top_k largest values; ties go to the lower index.
inline std::vector<std::size_t> top_indices(std::span<const double> values,
                                            std::size_t top_k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b];
  });
  order.resize(std::min(top_k, order.size()));
  return order;
}

inline GateDecision gate_scores(std::span<const double> h, const Matrix& gating,
                                std::size_t top_k = 1) {
  GateDecision d;
  d.scores = softmax(gate_logits(h, gating));
  d.selected = top_indices(d.scores, top_k);
  return d;
}

struct MoEOutput {
  Vector logits;
  GateDecision gate;
};

inline void check_top_k(const MoEModel& model, std::size_t top_k) {
  if (top_k < 1 || top_k > model.expert_count()) {
    throw DimensionError("top_k must be in [1, " +
                         std::to_string(model.expert_count()) + "]");
  }
}

/// Only the selected experts are evaluated. Their outputs are weighted by the
/// raw gate scores; with top_k < K the weights are not renormalized.
inline MoEOutput moe_forward(const MoEModel& model, std::span<const double> x,
                             std::size_t top_k) {
  check_top_k(model, top_k);
  const Vector h = forward(model.embedding, x);
  MoEOutput out;
  out.gate = gate_scores(h, model.gating, top_k);
  out.logits.assign(model.classes(), 0.0);
  for (std::size_t k : out.gate.selected) {
    const Vector e = forward(model.experts[k], h);
    for (std::size_t c = 0; c < e.size(); ++c) {
      out.logits[c] += out.gate.scores[k] * e[c];
    }
  }
  return out;
}

/// Index of the largest logit, lowest index on ties.
inline std::size_t predict_label(std::span<const double> logits) {
  return top_indices(logits, 1).front();
}

/// Gradients of the batch-mean cross-entropy loss.
struct MoEGradients {
  GradientSet embedding;            // zero when the embedding is frozen
  Matrix gating;
  std::vector<GradientSet> experts;  // zero for experts never selected
  double loss = 0.0;
};

/// Per-sample cross entropy and its gradient, accumulated into `acc` with
/// weight `scale`. Returns the sample loss.
inline double accumulate_sample_gradients(const MoEModel& model, const Sample& sample,
                                          std::size_t top_k, bool freeze_embedding,
                                          double scale, MoEGradients& acc) {
  const std::size_t K = model.expert_count();
  const std::size_t C = model.classes();
  if (sample.label >= C) {
    throw DimensionError("label " + std::to_string(sample.label) +
                         " out of range for " + std::to_string(C) + " classes");
  }

  const ForwardTrace emb = forward_trace(model.embedding, sample.features);
  const Vector& h = emb.output;
  const GateDecision gate = gate_scores(h, model.gating, top_k);
  const Vector& g = gate.scores;

  std::vector<ForwardTrace> expert_traces;
  expert_traces.reserve(gate.selected.size());
  Vector logits(C, 0.0);
  for (std::size_t k : gate.selected) {
    expert_traces.push_back(forward_trace(model.experts[k], h));
    const Vector& e = expert_traces.back().output;
    for (std::size_t c = 0; c < C; ++c) logits[c] += g[k] * e[c];
  }

  const double loss = log_sum_exp(logits) - logits[sample.label];
  Vector dlogits = softmax(logits);
  dlogits[sample.label] -= 1.0;

  Vector dh(h.size(), 0.0);
  Vector dscore(K, 0.0);  // dL/dG_k, zero for experts that were not evaluated
  for (std::size_t s = 0; s < gate.selected.size(); ++s) {
    const std::size_t k = gate.selected[s];
    const Vector& e = expert_traces[s].output;
    Vector upstream(C);
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      upstream[c] = g[k] * dlogits[c];
      dot += dlogits[c] * e[c];
    }
    dscore[k] = dot;
    auto [expert_grads, dh_k] = backward(model.experts[k], expert_traces[s], upstream);
    acc.experts[k].add_scaled(expert_grads, scale);
    for (std::size_t r = 0; r < dh.size(); ++r) dh[r] += dh_k[r];
  }

  // Softmax Jacobian: every proxy receives gradient through the denominator.
  double mean_dscore = 0.0;
  for (std::size_t j = 0; j < K; ++j) mean_dscore += g[j] * dscore[j];
  Vector dlogit_gate(K);
  for (std::size_t j = 0; j < K; ++j) dlogit_gate[j] = g[j] * (dscore[j] - mean_dscore);

  for (std::size_t r = 0; r < h.size(); ++r) {
    double back = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      acc.gating(r, j) += scale * h[r] * dlogit_gate[j];
      back += model.gating(r, j) * dlogit_gate[j];
    }
    dh[r] += back;
  }

  if (!freeze_embedding) {
    auto [emb_grads, dx] = backward(model.embedding, emb, dh);
    acc.embedding.add_scaled(emb_grads, scale);
  }
  return loss;
}

inline MoEGradients compute_gradients(const MoEModel& model,
                                      std::span<const Sample> batch,
                                      std::size_t top_k, bool freeze_embedding) {
  check_top_k(model, top_k);
  if (batch.empty()) throw DimensionError("empty training batch");
  MoEGradients acc;
  acc.embedding = GradientSet::zeros_like(model.embedding);
  acc.gating = Matrix(model.gating.rows(), model.gating.cols());
  for (const auto& e : model.experts) acc.experts.push_back(GradientSet::zeros_like(e));

  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& sample : batch) {
    total += accumulate_sample_gradients(model, sample, top_k, freeze_embedding,
                                         scale, acc);
  }
  acc.loss = total * scale;
  return acc;
}

/// Batch-mean cross entropy without gradients.
inline double batch_loss(const MoEModel& model, std::span<const Sample> batch,
                         std::size_t top_k) {
  double total = 0.0;
  for (const auto& s : batch) {
    const auto out = moe_forward(model, s.features, top_k);
    total += log_sum_exp(out.logits) - out.logits[s.label];
  }
  return total / static_cast<double>(batch.size());
}

/// One SGD step on the batch-mean cross entropy, applied in place. Returns
/// the pre-step loss. `context` names the client/round in diagnostics.
inline double train_step_in_place(MoEModel& model, std::span<const Sample> batch,
                                  double eta, std::size_t top_k,
                                  bool freeze_embedding,
                                  const std::string& context = "") {
  MoEGradients grads = compute_gradients(model, batch, top_k, freeze_embedding);
  if (!std::isfinite(grads.loss)) {
    throw NonFiniteError("non-finite training loss" +
                         (context.empty() ? std::string() : " (" + context + ")"));
  }
  bool finite = grads.embedding.finite() && all_finite(grads.gating.data());
  for (const auto& e : grads.experts) finite = finite && e.finite();
  if (!finite) {
    throw NonFiniteError("non-finite gradient" +
                         (context.empty() ? std::string() : " (" + context + ")"));
  }
  if (!freeze_embedding) apply_sgd(model.embedding, grads.embedding, eta);
  auto w = model.gating.data();
  auto gw = grads.gating.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * gw[i];
  for (std::size_t k = 0; k < model.experts.size(); ++k) {
    apply_sgd(model.experts[k], grads.experts[k], eta);
  }
  return grads.loss;
}

struct TrainStepResult {
  MoEModel model;
  double loss = 0.0;
};

inline TrainStepResult train_step(MoEModel model, std::span<const Sample> batch,
                                  double eta, std::size_t top_k,
                                  bool freeze_embedding,
                                  const std::string& context = "") {
  const double loss =
      train_step_in_place(model, batch, eta, top_k, freeze_embedding, context);
  return {std::move(model), loss};
}

// Checkpoint layout: embedding.*, gating, expert.<j>.*

inline TensorMap model_tensors(const MoEModel& model) {
  TensorMap t;
  add_tensors(t, "embedding", model.embedding);
  t["gating"] = model.gating;
  for (std::size_t j = 0; j < model.experts.size(); ++j) {
    add_tensors(t, "expert." + std::to_string(j), model.experts[j]);
  }
  return t;
}

/// Loads parameters into a model of the expected architecture.
inline void load_model_tensors(const TensorMap& tensors, MoEModel& model) {
  load_tensors(tensors, "embedding", model.embedding);
  auto it = tensors.find("gating");
  if (it == tensors.end()) throw FormatError("checkpoint missing tensor gating");
  if (it->second.rows() != model.gating.rows() ||
      it->second.cols() != model.gating.cols()) {
    throw FormatError("tensor gating has the wrong shape");
  }
  model.gating = it->second;
  for (std::size_t j = 0; j < model.experts.size(); ++j) {
    load_tensors(tensors, "expert." + std::to_string(j), model.experts[j]);
  }
}

}  // namespace fedmoe
