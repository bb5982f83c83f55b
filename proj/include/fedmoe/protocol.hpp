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

// Round orchestration: local training, embedding averaging, stale
// aggregation-matrix lifecycle, simulated peer-to-peer expert exchange,
// communication metering, the FedAvg baseline, and evaluation.

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fedmoe/comm.hpp"
#include "fedmoe/data.hpp"
#include "fedmoe/dom_agg.hpp"
#include "fedmoe/errors.hpp"
#include "fedmoe/moe.hpp"
#include "fedmoe/rng.hpp"

namespace fedmoe {

enum class Mode { fedmoe, fedavg, local_only };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::fedmoe: return "fedmoe";
    case Mode::fedavg: return "fedavg";
    case Mode::local_only: return "local_only";
  }
  return "?";
}

struct ProtocolConfig {
  Mode mode = Mode::fedmoe;
  std::size_t local_epochs = 5;       // E
  double learning_rate = 0.01;        // eta
  std::size_t batch_size = 100;
  std::size_t top_k = 1;
  std::size_t requested_experts = 5;  // P
  std::size_t matrix_interval = 5;    // I
  double temperature = 1.0;           // tau
  bool freeze_embedding = false;
  bool p2p_enabled = true;  // false skips the expert exchange entirely
  std::size_t threads = 1;
};

struct ClientState {
  std::size_t id = 0;
  MoEModel model;
  ClientShard shard;
  std::size_t expert_offset = 0;  // global index of expert 0
  // Rows of the latest received aggregation matrix for this client's experts.
  std::vector<AggregationMatrix::Row> cached_rows;
  std::size_t cached_round = 0;
  Rng rng;
};

struct ServerState {
  DenseNet global_embedding;
  MoEModel global_model;  // FedAvg baseline only
  AggregationMatrix matrix;
  std::vector<Matrix> uploaded_gatings;
  std::size_t round = 0;
};

struct ClientEvaluation {
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::vector<std::size_t> activations;  // per expert, top-ranked selection
};

struct Evaluation {
  double mean_accuracy = 0.0;
  double min_accuracy = 0.0;
  double max_accuracy = 0.0;
  std::vector<ClientEvaluation> clients;
  std::vector<std::size_t> histogram;  // summed over clients by expert index
};

struct RoundReport {
  std::size_t round = 0;
  Evaluation evaluation;
  double mean_train_loss = 0.0;
  RoundComm comm;
  std::size_t matrix_age = 0;
};

/// Runs fn(i) for i in [0, n) on up to `threads` threads. Rethrows the
/// exception of the lowest failing index, so failures are reproducible
/// regardless of scheduling.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += threads) guarded(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct LocalUpdateResult {
  std::size_t steps = 0;
  double mean_loss = 0.0;
};

/// E passes over the shard in shuffled mini-batches (the last one may be
/// short). The shuffle stream is client.rng split by round, so the result
/// depends only on (state, round).
inline LocalUpdateResult local_update(ClientState& client, std::size_t round,
                                      const ProtocolConfig& cfg) {
  if (cfg.local_epochs < 1) throw ConfigError("local_epochs: must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  const auto& train = client.shard.train;
  if (train.empty()) {
    throw DimensionError("client " + std::to_string(client.id) + " has no training data");
  }
  Rng rng = client.rng.split(round);
  const std::string context =
      "client " + std::to_string(client.id) + ", round " + std::to_string(round);

  std::vector<std::size_t> order(train.size());
  std::vector<Sample> batch;
  batch.reserve(cfg.batch_size);
  LocalUpdateResult result;
  double loss_sum = 0.0;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train[order[i]]);
      loss_sum += train_step_in_place(client.model, batch, cfg.learning_rate, cfg.top_k,
                                      cfg.freeze_embedding, context);
      ++result.steps;
    }
  }
  result.mean_loss = loss_sum / static_cast<double>(result.steps);
  return result;
}

/// Uniform parameter-wise mean, summed in input order.
inline DenseNet aggregate_embeddings(std::span<const DenseNet> nets) {
  if (nets.empty()) throw DimensionError("no embeddings to aggregate");
  for (const auto& n : nets) {
    if (!n.same_architecture(nets.front())) {
      throw DimensionError("embedding shapes differ across clients");
    }
  }
  Vector sum = flatten(nets.front());
  for (std::size_t i = 1; i < nets.size(); ++i) {
    const Vector p = flatten(nets[i]);
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += p[k];
  }
  const double n = static_cast<double>(nets.size());
  for (double& v : sum) v /= n;
  DenseNet out = nets.front();
  assign_flat(out, sum);
  return out;
}

/// Parameter-wise mean of full models (FedAvg). Requires one architecture.
inline MoEModel average_models(std::span<const MoEModel> models) {
  if (models.empty()) throw DimensionError("no models to average");
  const MoEModel& ref = models.front();
  std::vector<DenseNet> nets;
  MoEModel out = ref;
  for (const auto& m : models) {
    if (m.expert_count() != ref.expert_count() ||
        m.gating.rows() != ref.gating.rows()) {
      throw DimensionError("FedAvg needs every client to share one architecture");
    }
    nets.push_back(m.embedding);
  }
  out.embedding = aggregate_embeddings(nets);
  Vector gate(ref.gating.size(), 0.0);
  for (const auto& m : models) {
    auto g = m.gating.data();
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] += g[i];
  }
  const double n = static_cast<double>(models.size());
  for (double& v : gate) v /= n;
  out.gating = Matrix(ref.gating.rows(), ref.gating.cols(), std::move(gate));
  for (std::size_t j = 0; j < ref.expert_count(); ++j) {
    nets.clear();
    for (const auto& m : models) nets.push_back(m.experts[j]);
    out.experts[j] = aggregate_embeddings(nets);
  }
  return out;
}

inline ClientEvaluation evaluate_client(const ClientState& client, std::size_t top_k) {
  const auto& test = client.shard.test;
  if (test.empty()) {
    throw DimensionError("client " + std::to_string(client.id) + " has an empty test shard");
  }
  ClientEvaluation ev;
  ev.samples = test.size();
  ev.activations.assign(client.model.expert_count(), 0);
  std::size_t correct = 0;
  for (const auto& s : test) {
    const auto out = moe_forward(client.model, s.features, top_k);
    if (predict_label(out.logits) == s.label) ++correct;
    ++ev.activations[out.gate.selected.front()];
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return ev;
}

/// Each client's current model on its own held-out shard.
inline Evaluation evaluate(std::span<const ClientState> clients, std::size_t top_k) {
  Evaluation ev;
  if (clients.empty()) return ev;
  ev.min_accuracy = std::numeric_limits<double>::infinity();
  ev.max_accuracy = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (const auto& c : clients) {
    ev.clients.push_back(evaluate_client(c, top_k));
    const auto& ce = ev.clients.back();
    sum += ce.accuracy;
    ev.min_accuracy = std::min(ev.min_accuracy, ce.accuracy);
    ev.max_accuracy = std::max(ev.max_accuracy, ce.accuracy);
    if (ev.histogram.size() < ce.activations.size()) {
      ev.histogram.resize(ce.activations.size(), 0);
    }
    for (std::size_t k = 0; k < ce.activations.size(); ++k) {
      ev.histogram[k] += ce.activations[k];
    }
  }
  ev.mean_accuracy = sum / static_cast<double>(clients.size());
  return ev;
}

inline ModelSizes model_sizes(const MoEModel& model) {
  return {model.embedding.parameter_count(), model.gating.size(),
          model.expert_parameter_count()};
}

/// Initial server state and bootstrap identity matrix. Every client receives
/// the shared initial embedding and its identity rows.
inline ServerState init_federation(std::vector<ClientState>& clients,
                                   const DenseNet& initial_embedding) {
  ServerState server;
  server.global_embedding = initial_embedding;
  std::size_t offset = 0;
  for (auto& c : clients) {
    c.model.validate();
    c.expert_offset = offset;
    c.cached_rows.clear();
    for (std::size_t j = 0; j < c.model.expert_count(); ++j) {
      c.cached_rows.push_back({{offset + j}, {1.0}});
    }
    c.cached_round = 0;
    c.model.embedding = initial_embedding;
    offset += c.model.expert_count();
  }
  server.matrix = AggregationMatrix::identity(offset, 0);
  return server;
}

namespace detail {

inline double mean_loss(const std::vector<LocalUpdateResult>& results) {
  double s = 0.0;
  for (const auto& r : results) s += r.mean_loss;
  return results.empty() ? 0.0 : s / static_cast<double>(results.size());
}

inline std::vector<LocalUpdateResult> train_all(std::vector<ClientState>& clients,
                                                std::size_t round,
                                                const ProtocolConfig& cfg) {
  std::vector<LocalUpdateResult> results(clients.size());
  parallel_for(clients.size(), cfg.threads, [&](std::size_t i) {
    results[i] = local_update(clients[i], round, cfg);
  });
  return results;
}

}  // namespace detail

/// One round of the federated MoE protocol (or plain local training when
/// cfg.mode is local_only):
///   1. clients adopt the global embedding
///   2. local update
///   3. embeddings uploaded
///   4. gatings uploaded on matrix rounds
///   5. experts mixed with peers using the cached (stale) matrix rows
///   6. server averages and broadcasts the embedding
///   7. on matrix rounds the server computes and broadcasts a new matrix,
///      used from the next round on
inline RoundReport run_round(std::size_t t, std::vector<ClientState>& clients,
                             ServerState& server, const ProtocolConfig& cfg,
                             CommLedger& ledger) {
  if (t < 1) throw ConfigError("rounds are numbered from 1");
  if (cfg.mode == Mode::fedavg) throw ConfigError("use run_fedavg_round for fedavg");
  if (cfg.matrix_interval < 1) throw ConfigError("matrix_interval: must be >= 1");
  ledger.open_round(t);
  server.round = t;
  RoundReport report;
  report.round = t;

  const bool federated = cfg.mode == Mode::fedmoe;
  const bool share_embedding = federated && !cfg.freeze_embedding;
  const bool matrix_round = federated && is_matrix_round(t, cfg.matrix_interval);

  if (share_embedding) {
    for (auto& c : clients) c.model.embedding = server.global_embedding;
  }

  const auto results = detail::train_all(clients, t, cfg);
  report.mean_train_loss = detail::mean_loss(results);

  if (federated) {
    std::vector<DenseNet> uploads;
    if (share_embedding) {
      for (const auto& c : clients) {
        uploads.push_back(c.model.embedding);
        ledger.record_up(c.model.embedding.parameter_count());
      }
    }
    if (matrix_round) {
      server.uploaded_gatings.clear();
      for (const auto& c : clients) {
        server.uploaded_gatings.push_back(c.model.gating);
        ledger.record_up(c.model.gating.size());
      }
    }

    // Peers serve their post-local-update, pre-aggregation experts.
    std::vector<Vector> served;
    for (const auto& c : clients) {
      for (const auto& e : c.model.experts) served.push_back(flatten(e));
    }
    report.matrix_age = t - clients.front().cached_round;
    if (cfg.p2p_enabled) {
      for (auto& c : clients) {
        for (std::size_t j = 0; j < c.model.expert_count(); ++j) {
          const auto& row = c.cached_rows.at(j);
          const std::size_t self = c.expert_offset + j;
          for (std::size_t s : row.support) {
            if (s >= served.size()) throw DimensionError("stale row references unknown expert");
            if (s != self) ledger.record_p2p(served[s].size());
          }
          assign_flat(c.model.experts[j], aggregate_row(served, row));
        }
      }
    }

    if (share_embedding) {
      server.global_embedding = aggregate_embeddings(uploads);
      for (auto& c : clients) {
        ledger.record_down(server.global_embedding.parameter_count());
        c.model.embedding = server.global_embedding;
      }
    }

    if (matrix_round) {
      std::vector<std::size_t> zero_norm;
      server.matrix = build_aggregation_matrix(server.uploaded_gatings,
                                               cfg.requested_experts, cfg.temperature,
                                               t, &zero_norm);
      for (std::size_t z : zero_norm) {
        std::fprintf(stderr, "warning: round %zu: proxy %zu has zero norm; using self-only similarity\n",
                     t, z);
      }
      for (auto& c : clients) {
        for (std::size_t j = 0; j < c.model.expert_count(); ++j) {
          c.cached_rows[j] = server.matrix.rows.at(c.expert_offset + j);
          // (index, weight) per support entry
          ledger.record_down(2 * c.cached_rows[j].support.size());
        }
        c.cached_round = t;
      }
    }
  }

  report.evaluation = evaluate(clients, cfg.top_k);
  report.comm = ledger.last();
  return report;
}

/// FedAvg baseline round: the whole model is uploaded, averaged, and
/// broadcast back.
inline RoundReport run_fedavg_round(std::size_t t, std::vector<ClientState>& clients,
                                    ServerState& server, const ProtocolConfig& cfg,
                                    CommLedger& ledger) {
  if (t < 1) throw ConfigError("rounds are numbered from 1");
  ledger.open_round(t);
  server.round = t;
  RoundReport report;
  report.round = t;

  for (auto& c : clients) c.model = server.global_model;
  const auto results = detail::train_all(clients, t, cfg);
  report.mean_train_loss = detail::mean_loss(results);

  std::vector<MoEModel> uploads;
  for (const auto& c : clients) {
    const auto s = model_sizes(c.model);
    ledger.record_up(s.embedding + s.gating + c.model.expert_count() * s.expert);
    uploads.push_back(c.model);
  }
  server.global_model = average_models(uploads);
  server.global_embedding = server.global_model.embedding;
  const auto s = model_sizes(server.global_model);
  for (auto& c : clients) {
    ledger.record_down(s.embedding + s.gating + server.global_model.expert_count() * s.expert);
    c.model = server.global_model;
  }

  report.evaluation = evaluate(clients, cfg.top_k);
  report.comm = ledger.last();
  return report;
}

/// Sets every client to `initial` and runs `rounds` FedAvg rounds.
inline std::vector<RoundReport> run_fedavg_baseline(std::vector<ClientState>& clients,
                                                    const MoEModel& initial,
                                                    const ProtocolConfig& cfg,
                                                    std::size_t rounds,
                                                    CommLedger& ledger) {
  ServerState server = init_federation(clients, initial.embedding);
  server.global_model = initial;
  for (auto& c : clients) c.model = initial;
  std::vector<RoundReport> reports;
  for (std::size_t t = 1; t <= rounds; ++t) {
    reports.push_back(run_fedavg_round(t, clients, server, cfg, ledger));
  }
  return reports;
}

/// CSV header for the per-round metrics stream.
inline constexpr const char* kMetricsHeader =
    "round,mean_test_acc,min_test_acc,max_test_acc,mean_train_loss,"
    "server_up_scalars,server_down_scalars,p2p_scalars,matrix_age";

inline void write_metrics_row(std::ostream& out, const RoundReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.10g,%llu,%llu,%llu,%zu", r.round,
                r.evaluation.mean_accuracy, r.evaluation.min_accuracy,
                r.evaluation.max_accuracy, r.mean_train_loss,
                static_cast<unsigned long long>(r.comm.server_up),
                static_cast<unsigned long long>(r.comm.server_down),
                static_cast<unsigned long long>(r.comm.p2p), r.matrix_age);
  out << buf << '\n';
}

/// client_id,test_acc,expert_0,...,expert_{Kmax-1}; cells past a client's
/// own expert count are left empty.
inline void write_client_report(std::ostream& out, const Evaluation& ev) {
  std::size_t kmax = 0;
  for (const auto& c : ev.clients) kmax = std::max(kmax, c.activations.size());
  out << "client_id,test_acc";
  for (std::size_t k = 0; k < kmax; ++k) out << ",expert_" << k;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < ev.clients.size(); ++i) {
    const auto& c = ev.clients[i];
    std::snprintf(buf, sizeof buf, "%.6f", c.accuracy);
    out << i << ',' << buf;
    for (std::size_t k = 0; k < kmax; ++k) {
      out << ',';
      if (k < c.activations.size()) out << c.activations[k];
    }
    out << '\n';
  }
}

}  // namespace fedmoe
