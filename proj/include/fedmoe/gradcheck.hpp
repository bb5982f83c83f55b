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

// Central finite-difference check of the MoE training gradients on random
// small instances. Used by the grad-check CLI subcommand.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedmoe/moe.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

struct GradCheckResult {
  std::size_t instances = 0;
  std::size_t entries = 0;
  std::size_t failures = 0;
  double max_relative_error = 0.0;
  bool sparsity_ok = true;  // experts never selected got exactly zero gradient
};

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries that are zero up to
/// finite-difference noise from dominating the statistic.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline GradCheckResult grad_check_moe(std::size_t instances, std::uint64_t seed,
                                      double step = 1e-5, double tolerance = 1e-4) {
  GradCheckResult result;
  const Rng root(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng rng = root.split(inst);
    MoEArchitecture arch;
    arch.input_dim = 2 + rng.below(5);
    arch.embedding_hidden = {2 + static_cast<std::size_t>(rng.below(5))};
    arch.representation_dim = 2 + rng.below(4);
    arch.expert_hidden = {2 + static_cast<std::size_t>(rng.below(5))};
    arch.classes = 2 + rng.below(3);
    arch.experts = 2 + rng.below(2);
    const std::size_t top_k = 1;
    MoEModel model = make_moe_model(arch, rng);
    // Non-zero biases so ReLU kinks are not aligned with zero inputs.
    for (auto* net : {&model.embedding}) {
      for (auto& l : net->layers()) for (double& b : l.bias) b = rng.uniform(-0.5, 0.5);
    }
    for (auto& e : model.experts) {
      for (auto& l : e.layers()) for (double& b : l.bias) b = rng.uniform(-0.5, 0.5);
    }
    std::vector<Sample> batch(1 + rng.below(3));
    for (auto& s : batch) {
      s.features.resize(arch.input_dim);
      for (double& v : s.features) v = rng.uniform(-1.0, 1.0);
      s.label = static_cast<std::size_t>(rng.below(arch.classes));
    }

    const MoEGradients g = compute_gradients(model, batch, top_k, false);

    std::vector<bool> selected(arch.experts, false);
    for (const auto& s : batch) {
      selected[moe_forward(model, s.features, top_k).gate.selected.front()] = true;
    }
    for (std::size_t k = 0; k < arch.experts; ++k) {
      if (!selected[k] && !g.experts[k].is_zero()) result.sparsity_ok = false;
    }

    auto check = [&](std::span<double> params, std::span<const double> analytic) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + step;
        const double up = batch_loss(model, batch, top_k);
        params[i] = saved - step;
        const double down = batch_loss(model, batch, top_k);
        params[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double err = relative_error(analytic[i], numeric);
        result.max_relative_error = std::max(result.max_relative_error, err);
        ++result.entries;
        if (err > tolerance) ++result.failures;
      }
    };
    for (std::size_t l = 0; l < model.embedding.layers().size(); ++l) {
      check(model.embedding.layers()[l].weight.data(), g.embedding.layers[l].weight.data());
      check(model.embedding.layers()[l].bias, g.embedding.layers[l].bias);
    }
    check(model.gating.data(), g.gating.data());
    for (std::size_t k = 0; k < arch.experts; ++k) {
      for (std::size_t l = 0; l < model.experts[k].layers().size(); ++l) {
        check(model.experts[k].layers()[l].weight.data(), g.experts[k].layers[l].weight.data());
        check(model.experts[k].layers()[l].bias, g.experts[k].layers[l].bias);
      }
    }
    ++result.instances;
  }
  return result;
}

}  // namespace fedmoe
