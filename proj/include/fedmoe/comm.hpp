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

// Scalar-exact communication metering and the closed-form per-round costs it
// is audited against.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmoe/errors.hpp"

namespace fedmoe {

enum class CommMode { fedavg, fedmoe, fedmoe_frozen };

inline const char* to_string(CommMode m) {
  switch (m) {
    case CommMode::fedavg: return "fedavg";
    case CommMode::fedmoe: return "fedmoe";
    case CommMode::fedmoe_frozen: return "fedmoe_frozen";
  }
  return "?";
}

/// Scalar parameter counts |Theta|, |Pi|, |Phi| of one client.
struct ModelSizes {
  std::uint64_t embedding = 0;
  std::uint64_t gating = 0;
  std::uint64_t expert = 0;
};

/// Rounds are 1-based. The aggregation matrix is refreshed in rounds
/// 1, 1 + I, 1 + 2I, ...
inline bool is_matrix_round(std::size_t round, std::size_t interval) {
  return round >= 1 && (round - 1) % interval == 0;
}

/// Averaged per-client, per-round scalar counts.
struct CommPrediction {
  double server_total = 0.0;   // upload + download with the server
  double p2p_per_client = 0.0;  // expert parameters fetched from peers
};

/// Closed-form per-client averages. The aggregation-matrix download is
/// K (P + 1) (index, weight) pairs, i.e. 2K(P + 1) scalars.
inline CommPrediction expected_comm(const ModelSizes& sizes, std::size_t K,
                                    std::size_t P, std::size_t I, CommMode mode) {
  if (I == 0) throw ConfigError("matrix_interval: must be >= 1");
  const double theta = static_cast<double>(sizes.embedding);
  const double pi = static_cast<double>(sizes.gating);
  const double phi = static_cast<double>(sizes.expert);
  const double k = static_cast<double>(K);
  const double p = static_cast<double>(P);
  const double matrix = 2.0 * k * (p + 1.0);
  CommPrediction out;
  switch (mode) {
    case CommMode::fedavg:
      out.server_total = 2.0 * (theta + pi + k * phi);
      break;
    case CommMode::fedmoe:
      out.server_total = 2.0 * theta + (pi + matrix) / static_cast<double>(I);
      out.p2p_per_client = p * k * phi;
      break;
    case CommMode::fedmoe_frozen:
      out.server_total = (pi + matrix) / static_cast<double>(I);
      out.p2p_per_client = p * k * phi;
      break;
  }
  return out;
}

/// Exact counts for one round, summed over all clients.
struct RoundComm {
  std::size_t round = 0;
  std::uint64_t server_up = 0;
  std::uint64_t server_down = 0;
  std::uint64_t p2p = 0;

  friend bool operator==(const RoundComm&, const RoundComm&) = default;
};

/// Exact per-round prediction for a population of clients with identical
/// sizes except for their expert counts. `matrix_active` says whether a
/// computed (non-bootstrap) aggregation matrix drives this round's P2P phase.
inline RoundComm expected_round_comm(const ModelSizes& sizes,
                                     std::span<const std::size_t> experts_per_client,
                                     std::size_t representation_dim, std::size_t P,
                                     std::size_t I, CommMode mode, std::size_t round,
                                     bool matrix_active) {
  RoundComm rc;
  rc.round = round;
  std::uint64_t total_experts = 0;
  for (auto k : experts_per_client) total_experts += k;
  const std::uint64_t support =
      std::min<std::uint64_t>(P + 1, std::max<std::uint64_t>(total_experts, 1));
  const std::uint64_t theta = sizes.embedding;
  const std::uint64_t phi = sizes.expert;
  for (auto k : experts_per_client) {
    const std::uint64_t pi = representation_dim * k;
    switch (mode) {
      case CommMode::fedavg:
        rc.server_up += theta + pi + k * phi;
        rc.server_down += theta + pi + k * phi;
        break;
      case CommMode::fedmoe:
      case CommMode::fedmoe_frozen:
        if (mode == CommMode::fedmoe) {
          rc.server_up += theta;
          rc.server_down += theta;
        }
        if (is_matrix_round(round, I)) {
          rc.server_up += pi;
          rc.server_down += 2 * k * support;
        }
        if (matrix_active) rc.p2p += k * (support - 1) * phi;
        break;
    }
  }
  return rc;
}

/// Append-only record of metered transfers. record() may be called from any
/// thread.
class CommLedger {
 public:
  void open_round(std::size_t round) {
    std::lock_guard lock(mutex_);
    rounds_.push_back({round, 0, 0, 0});
  }
  void record_up(std::uint64_t scalars) {
    std::lock_guard lock(mutex_);
    current().server_up += scalars;
  }
  void record_down(std::uint64_t scalars) {
    std::lock_guard lock(mutex_);
    current().server_down += scalars;
  }
  void record_p2p(std::uint64_t scalars) {
    std::lock_guard lock(mutex_);
    current().p2p += scalars;
  }

  const std::vector<RoundComm>& rounds() const { return rounds_; }
  const RoundComm& last() const { return rounds_.back(); }

 private:
  RoundComm& current() {
    if (rounds_.empty()) throw std::logic_error("ledger has no open round");
    return rounds_.back();
  }

  std::mutex mutex_;
  std::vector<RoundComm> rounds_;
};

}  // namespace fedmoe
