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

// Builds clients and server from an ExperimentConfig and drives whole runs:
// the federated protocol, the FedAvg baseline, the communication audit, the
// partition report, and the embedding pretraining recipe.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedmoe/checkpoint.hpp"
#include "fedmoe/comm.hpp"
#include "fedmoe/config.hpp"
#include "fedmoe/data.hpp"
#include "fedmoe/moe.hpp"
#include "fedmoe/protocol.hpp"
#include "json.hpp"

namespace fedmoe {

/// RNG stream ids under the experiment seed.
namespace streams {
inline constexpr std::uint64_t kEmbedding = 10;
inline constexpr std::uint64_t kFedAvgModel = 11;
inline constexpr std::uint64_t kPretrain = 12;
inline constexpr std::uint64_t kClientModel = 1000;
inline constexpr std::uint64_t kClientTraining = 2000;
}  // namespace streams

inline std::size_t synthetic_sample_count(const ExperimentConfig& c) {
  if (c.data.samples > 0) return c.data.samples;
  const auto part = c.resolved_partition();
  // Each class alone can cover every client's full shard.
  return c.clients * (part.per_client + test_size_for(part.per_client)) * c.data.classes;
}

inline Dataset load_dataset(const ExperimentConfig& c) {
  if (c.data.source == DataSource::idx) return load_idx(c.data.images, c.data.labels);
  return make_synthetic(c.data.classes, c.data.dim, synthetic_sample_count(c),
                        c.data.spread, c.data_seed());
}

inline MoEArchitecture architecture(const ExperimentConfig& c, const Dataset& ds,
                                    std::size_t experts) {
  MoEArchitecture a;
  a.input_dim = ds.dim;
  a.classes = ds.classes;
  a.embedding_hidden = c.embedding_hidden;
  a.representation_dim = c.representation_dim;
  a.expert_hidden = c.expert_hidden;
  a.experts = experts;
  return a;
}

/// Centralized pretraining on a held-out draw from the same synthetic mixture:
/// a single-expert model is trained and its embedding kept.
inline DenseNet pretrain_embedding(const ExperimentConfig& c) {
  if (c.data.source != DataSource::synthetic) {
    throw ConfigError("pretrain: only synthetic data sources provide a held-out draw");
  }
  const auto mixture = make_mixture(c.data.classes, c.data.dim, c.data.spread, c.data_seed());
  const Dataset held_out =
      mixture.sample(c.pretrain.samples, Rng(c.data_seed()).split(streams::kPretrain));
  Rng rng = Rng(c.seed).split(streams::kPretrain);
  MoEModel model = make_moe_model(architecture(c, held_out, 1), rng);
  std::vector<std::size_t> order(held_out.size());
  std::vector<Sample> batch;
  for (std::size_t e = 0; e < c.pretrain.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t s = 0; s < order.size(); s += c.pretrain.batch_size) {
      batch.clear();
      for (std::size_t i = s; i < std::min(order.size(), s + c.pretrain.batch_size); ++i) {
        batch.push_back(held_out.samples[order[i]]);
      }
      train_step_in_place(model, batch, c.pretrain.learning_rate, 1, false, "pretrain");
    }
  }
  return model.embedding;
}

struct World {
  Dataset dataset;
  std::vector<ClientState> clients;
  DenseNet initial_embedding;
  MoEModel fedavg_initial;
  ProtocolConfig protocol;
};

/// Override for build_world: a pretrained embedding already in memory.
struct EmbeddingOverride {
  DenseNet embedding;
  bool frozen = false;
};

inline World build_world(const ExperimentConfig& c,
                         const std::optional<EmbeddingOverride>& override_embedding = {}) {
  World w;
  w.dataset = load_dataset(c);
  w.protocol = c.protocol;
  auto shards = partition(w.dataset, c.clients, c.resolved_partition());

  const Rng root(c.seed);
  Rng emb_rng = root.split(streams::kEmbedding);
  w.initial_embedding = make_embedding(architecture(c, w.dataset, 1), emb_rng);
  if (override_embedding) {
    if (!override_embedding->embedding.same_architecture(w.initial_embedding)) {
      throw DimensionError("pretrained embedding does not match the model architecture");
    }
    w.initial_embedding = override_embedding->embedding;
    w.protocol.freeze_embedding = override_embedding->frozen;
  } else if (c.embedding != EmbeddingInit::fresh) {
    load_tensors(read_checkpoint(c.embedding_path), "embedding", w.initial_embedding);
    w.protocol.freeze_embedding = c.embedding == EmbeddingInit::frozen_pretrained;
  }

  for (std::size_t i = 0; i < c.clients; ++i) {
    ClientState client;
    client.id = i;
    Rng model_rng = root.split(streams::kClientModel + i);
    client.model = make_moe_model(architecture(c, w.dataset, c.experts_for(i)), model_rng);
    client.model.embedding = w.initial_embedding;
    client.shard = std::move(shards[i]);
    client.rng = root.split(streams::kClientTraining + i);
    w.clients.push_back(std::move(client));
  }

  Rng avg_rng = root.split(streams::kFedAvgModel);
  w.fedavg_initial = make_moe_model(architecture(c, w.dataset, c.experts_for(0)), avg_rng);
  w.fedavg_initial.embedding = w.initial_embedding;
  return w;
}

struct RunResult {
  std::vector<RoundReport> reports;
  std::vector<ClientState> clients;
  ServerState server;
  std::vector<RoundComm> ledger;
};

using RoundCallback = std::function<void(const RoundReport&)>;

/// Runs c.rounds rounds in the configured mode.
inline RunResult run_world(World world, std::size_t rounds, const RoundCallback& on_round = {}) {
  RunResult r;
  CommLedger ledger;
  auto& clients = world.clients;
  ServerState server = init_federation(clients, world.initial_embedding);
  if (world.protocol.mode == Mode::fedavg) {
    server.global_model = world.fedavg_initial;
    for (auto& cl : clients) cl.model = world.fedavg_initial;
  }
  for (std::size_t t = 1; t <= rounds; ++t) {
    RoundReport rep = world.protocol.mode == Mode::fedavg
                          ? run_fedavg_round(t, clients, server, world.protocol, ledger)
                          : run_round(t, clients, server, world.protocol, ledger);
    if (on_round) on_round(rep);
    r.reports.push_back(std::move(rep));
  }
  r.clients = std::move(clients);
  r.server = std::move(server);
  r.ledger = ledger.rounds();
  return r;
}

inline RunResult run_experiment(const ExperimentConfig& c, const RoundCallback& on_round = {}) {
  return run_world(build_world(c), c.rounds, on_round);
}

/// Runs the experiment and writes metrics.csv, clients.csv,
/// checkpoints/client_<i>.json, aggregation_matrix.csv (fedmoe) and
/// config_resolved.json to c.output_dir. On failure the metrics written so
/// far stay on disk and error.json records the failure before rethrowing.
inline RunResult run_to_directory(const ExperimentConfig& c) {
  namespace fs = std::filesystem;
  const fs::path dir(c.output_dir);
  fs::create_directories(dir / "checkpoints");
  {
    std::ofstream cfg(dir / "config_resolved.json");
    cfg << to_json(c).dump(2) << '\n';
  }
  std::ofstream metrics(dir / "metrics.csv");
  metrics << kMetricsHeader << '\n';
  RunResult result;
  try {
    result = run_experiment(c, [&](const RoundReport& r) {
      write_metrics_row(metrics, r);
      metrics.flush();
    });
  } catch (const std::exception& e) {
    metrics.flush();
    std::ofstream err(dir / "error.json");
    err << nlohmann::json{{"error", e.what()}}.dump(2) << '\n';
    throw;
  }
  {
    std::ofstream out(dir / "clients.csv");
    write_client_report(out, result.reports.back().evaluation);
  }
  for (const auto& cl : result.clients) {
    write_checkpoint((dir / "checkpoints" / ("client_" + std::to_string(cl.id) + ".json")).string(),
                     model_tensors(cl.model));
  }
  if (c.protocol.mode == Mode::fedmoe) {
    std::ofstream out(dir / "aggregation_matrix.csv");
    write_aggregation_csv(out, result.server.matrix);
  }
  return result;
}

struct AuditRound {
  RoundComm metered;
  RoundComm predicted;
  bool match() const { return metered == predicted; }
};

struct ModeAudit {
  CommMode mode = CommMode::fedmoe;
  std::vector<AuditRound> rounds;
  ModelSizes sizes;
  CommPrediction closed_form;
  // Closed-form checks need a uniform expert count.
  bool closed_form_applicable = false;
  double metered_server_per_client = 0.0;  // window average
  double metered_p2p_per_client = 0.0;     // average over rounds with a computed matrix
  bool server_average_match = false;
  bool p2p_match = false;

  bool ok() const {
    for (const auto& r : rounds) if (!r.match()) return false;
    return !closed_form_applicable || (server_average_match && p2p_match);
  }
};

/// Runs 2I rounds in `mode` and checks the ledger against the exact per-round
/// prediction and (for uniform K) the averaged closed forms.
inline ModeAudit audit_mode(const ExperimentConfig& base, CommMode mode) {
  ExperimentConfig c = base;
  const std::size_t I = c.protocol.matrix_interval;
  c.rounds = 2 * I;
  std::optional<EmbeddingOverride> override_embedding;
  switch (mode) {
    case CommMode::fedavg:
      c.protocol.mode = Mode::fedavg;
      if (c.embedding == EmbeddingInit::frozen_pretrained) {
        c.embedding = EmbeddingInit::pretrained;
      }
      break;
    case CommMode::fedmoe:
      c.protocol.mode = Mode::fedmoe;
      if (c.embedding == EmbeddingInit::frozen_pretrained) {
        c.embedding = EmbeddingInit::pretrained;
      }
      break;
    case CommMode::fedmoe_frozen: {
      c.protocol.mode = Mode::fedmoe;
      if (c.embedding == EmbeddingInit::fresh) {
        // No checkpoint given: freeze the fresh initial embedding.
        World probe = build_world(c);
        override_embedding = EmbeddingOverride{probe.initial_embedding, true};
      } else {
        c.embedding = EmbeddingInit::frozen_pretrained;
      }
      break;
    }
  }

  World world = build_world(c, override_embedding);
  std::vector<std::size_t> experts_per_client;
  for (const auto& cl : world.clients) experts_per_client.push_back(cl.model.expert_count());
  ModeAudit audit;
  audit.mode = mode;
  audit.sizes = model_sizes(world.clients.front().model);
  const std::size_t n = c.representation_dim;
  const std::size_t P = c.protocol.requested_experts;

  const RunResult run = run_world(std::move(world), c.rounds);
  for (const auto& metered : run.ledger) {
    AuditRound ar;
    ar.metered = metered;
    ar.predicted = expected_round_comm(audit.sizes, experts_per_client, n, P, I, mode,
                                       metered.round, metered.round > 1);
    audit.rounds.push_back(ar);
  }

  bool uniform = true;
  for (auto k : experts_per_client) uniform = uniform && k == experts_per_client.front();
  audit.closed_form_applicable = uniform;
  const std::uint64_t K = experts_per_client.front();
  audit.closed_form = expected_comm(audit.sizes, K, P, I, mode);
  const std::uint64_t N = c.clients;
  std::uint64_t server = 0, p2p = 0;
  std::size_t p2p_rounds = 0;
  for (const auto& r : run.ledger) {
    server += r.server_up + r.server_down;
    if (r.round > 1) {
      p2p += r.p2p;
      ++p2p_rounds;
    }
  }
  audit.metered_server_per_client =
      static_cast<double>(server) / static_cast<double>(N * c.rounds);
  audit.metered_p2p_per_client =
      p2p_rounds == 0 ? 0.0 : static_cast<double>(p2p) / static_cast<double>(N * p2p_rounds);
  if (uniform) {
    // Integer form of the closed-form comparison (no rounding involved).
    const std::uint64_t theta = audit.sizes.embedding;
    const std::uint64_t pi = audit.sizes.gating;
    const std::uint64_t phi = audit.sizes.expert;
    const std::uint64_t matrix = 2 * K * (P + 1);
    const std::uint64_t T = c.rounds;
    switch (mode) {
      case CommMode::fedavg:
        audit.server_average_match = server == N * T * 2 * (theta + pi + K * phi);
        audit.p2p_match = p2p == 0;
        break;
      case CommMode::fedmoe:
        audit.server_average_match = server * I == N * T * (2 * theta * I + pi + matrix);
        audit.p2p_match = p2p == N * p2p_rounds * P * K * phi;
        break;
      case CommMode::fedmoe_frozen:
        audit.server_average_match = server * I == N * T * (pi + matrix);
        audit.p2p_match = p2p == N * p2p_rounds * P * K * phi;
        break;
    }
  }
  return audit;
}

inline std::vector<ModeAudit> comm_audit(const ExperimentConfig& c) {
  return {audit_mode(c, CommMode::fedavg), audit_mode(c, CommMode::fedmoe),
          audit_mode(c, CommMode::fedmoe_frozen)};
}

struct PartitionReport {
  std::vector<std::vector<std::size_t>> counts;  // client x class, training labels
  double mean_tv = 0.0;
};

inline PartitionReport partition_report(const ExperimentConfig& c) {
  const Dataset ds = load_dataset(c);
  const auto shards = partition(ds, c.clients, c.resolved_partition());
  PartitionReport r;
  r.counts = shard_label_counts(shards, ds.classes);
  r.mean_tv = mean_pairwise_tv(r.counts);
  return r;
}

/// Mean pairwise TV averaged over partition seeds seed, seed + 1, ...
inline double mean_tv_over_seeds(const ExperimentConfig& c, std::size_t seeds) {
  const Dataset ds = load_dataset(c);
  double total = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    PartitionSpec spec = c.resolved_partition();
    spec.seed += s;
    total += mean_pairwise_tv(shard_label_counts(partition(ds, c.clients, spec), ds.classes));
  }
  return total / static_cast<double>(seeds);
}

}  // namespace fedmoe
