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

// Diagnostics for how well proxy similarity tracks what experts actually
// handle. Measured, not enforced.

#include <cstddef>
#include <span>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/dom_agg.hpp"
#include "fedmoe/protocol.hpp"

namespace fedmoe {

/// Per global expert: label counts of the owning client's training samples
/// routed to it (top-ranked selection).
inline std::vector<std::vector<std::size_t>> routed_label_counts(
    std::span<const ClientState> clients, std::size_t classes, std::size_t top_k) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& c : clients) {
    std::vector<std::vector<std::size_t>> local(c.model.expert_count(),
                                                std::vector<std::size_t>(classes, 0));
    for (const auto& s : c.shard.train) {
      const auto r = moe_forward(c.model, s.features, top_k);
      ++local[r.gate.selected.front()][s.label];
    }
    for (auto& l : local) out.push_back(std::move(l));
  }
  return out;
}

struct RelevanceDiagnostic {
  double support_tv = 0.0;  // mean TV between an expert and its requested peers
  double all_pairs_tv = 0.0;  // mean TV over all pairs of used experts
  std::size_t used_experts = 0;
};

/// Compares the routed-label distributions of each used expert with those of
/// the peers in its support. Experts that receive no samples are skipped.
inline RelevanceDiagnostic relevance_diagnostic(
    const std::vector<std::vector<std::size_t>>& routed, const AggregationMatrix& a) {
  auto used = [&](std::size_t i) {
    for (auto v : routed[i]) if (v > 0) return true;
    return false;
  };
  RelevanceDiagnostic d;
  double support_sum = 0.0;
  std::size_t support_n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!used(i)) continue;
    ++d.used_experts;
    for (std::size_t j : a.rows[i].support) {
      if (j == i || !used(j)) continue;
      support_sum += total_variation(routed[i], routed[j]);
      ++support_n;
    }
  }
  double all_sum = 0.0;
  std::size_t all_n = 0;
  for (std::size_t i = 0; i < routed.size(); ++i) {
    if (!used(i)) continue;
    for (std::size_t j = i + 1; j < routed.size(); ++j) {
      if (!used(j)) continue;
      all_sum += total_variation(routed[i], routed[j]);
      ++all_n;
    }
  }
  d.support_tv = support_n ? support_sum / static_cast<double>(support_n) : 0.0;
  d.all_pairs_tv = all_n ? all_sum / static_cast<double>(all_n) : 0.0;
  return d;
}

}  // namespace fedmoe
