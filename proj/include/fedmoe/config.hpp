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

// Experiment configuration: a single JSON document. Every key is optional
// and defaults are materialized by to_json(); unknown keys are rejected.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/errors.hpp"
#include "fedmoe/protocol.hpp"
#include "json.hpp"

namespace fedmoe {

inline constexpr int kConfigVersion = 1;

enum class EmbeddingInit { fresh, frozen_pretrained, pretrained };

inline const char* to_string(EmbeddingInit e) {
  switch (e) {
    case EmbeddingInit::fresh: return "fresh";
    case EmbeddingInit::frozen_pretrained: return "frozen_pretrained";
    case EmbeddingInit::pretrained: return "pretrained";
  }
  return "?";
}

enum class DataSource { synthetic, idx };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  // synthetic
  std::size_t classes = 4;
  std::size_t dim = 8;
  double spread = 3.0;
  std::size_t samples = 0;  // 0: clients * (per_client + test) * classes
  std::optional<std::uint64_t> seed;  // defaults to the experiment seed
  // idx
  std::string images;
  std::string labels;
};

/// Centralized training recipe for a pretrained embedding.
struct PretrainConfig {
  std::size_t samples = 4000;
  std::size_t epochs = 20;
  double learning_rate = 0.05;
  std::size_t batch_size = 50;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 1;
  std::size_t clients = 50;   // N
  std::size_t rounds = 1000;  // T
  // One entry applies to every client; otherwise one entry per client.
  std::vector<std::size_t> experts{4};
  ProtocolConfig protocol;
  EmbeddingInit embedding = EmbeddingInit::fresh;
  std::string embedding_path;
  std::vector<std::size_t> embedding_hidden{16};
  std::size_t representation_dim = 8;
  std::vector<std::size_t> expert_hidden{16};
  PartitionSpec partition;
  bool partition_seed_set = false;  // false: partition.seed follows seed
  DataConfig data;
  PretrainConfig pretrain;
  std::string output_dir = "out";

  std::size_t experts_for(std::size_t client) const {
    return experts.size() == 1 ? experts.front() : experts.at(client);
  }
  std::size_t total_experts() const {
    std::size_t m = 0;
    for (std::size_t i = 0; i < clients; ++i) m += experts_for(i);
    return m;
  }
  std::uint64_t data_seed() const { return data.seed.value_or(seed); }
  PartitionSpec resolved_partition() const {
    PartitionSpec p = partition;
    if (!partition_seed_set) p.seed = seed;
    return p;
  }
};

namespace detail {

template <typename E>
std::optional<E> parse_enum(const std::string& s,
                            std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  return std::nullopt;
}

/// Reads typed fields out of a JSON object, recording one error per bad
/// field and flagging keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string path,
              std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) error("", "must be an object");
  }

  ~FieldReader() = default;

  template <typename T>
  void read(const char* key, T& into) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return;
    try {
      into = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      error(key, "has the wrong type");
    }
  }

  bool has(const char* key) const { return obj_.is_object() && obj_.contains(key); }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    if (!has(key)) return nullptr;
    return &obj_.at(key);
  }

  void error(const std::string& key, const std::string& message) {
    errors_.push_back(qualified(key) + ": " + message);
  }

  std::string qualified(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  void reject_unknown() {
    if (!obj_.is_object()) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) error(key, "unknown key");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void validate(const ExperimentConfig& c, std::vector<std::string>& errors) {
  auto fail = [&](const std::string& field, const std::string& msg) {
    errors.push_back(field + ": " + msg);
  };
  const auto& p = c.protocol;
  if (c.version != kConfigVersion) fail("version", "unsupported version");
  if (c.clients < 1) fail("clients", "must be >= 1");
  if (c.rounds < 1) fail("rounds", "must be >= 1");
  if (p.local_epochs < 1) fail("local_epochs", "must be >= 1");
  if (!(p.learning_rate > 0.0)) fail("learning_rate", "must be > 0");
  if (p.batch_size < 1) fail("batch_size", "must be >= 1");
  if (p.matrix_interval < 1) fail("matrix_interval", "must be >= 1");
  if (!(p.temperature > 0.0)) fail("temperature", "must be > 0");
  if (p.threads < 1) fail("threads", "must be >= 1");
  if (c.experts.empty()) {
    fail("experts", "must not be empty");
  } else {
    if (c.experts.size() != 1 && c.experts.size() != c.clients) {
      fail("experts", "give one count or one per client");
    }
    std::size_t kmin = c.experts.front();
    for (auto k : c.experts) {
      if (k < 1) fail("experts", "every client needs >= 1 expert");
      kmin = std::min(kmin, k);
    }
    if (p.top_k < 1 || p.top_k > kmin) fail("top_k", "must be in [1, min experts]");
    const bool counts_ok = c.experts.size() == 1 || c.experts.size() == c.clients;
    if (c.clients >= 1 && counts_ok && p.requested_experts + 1 > c.total_experts()) {
      fail("requested_experts", "must be <= total experts - 1");
    }
    if (p.mode == Mode::fedavg) {
      for (auto k : c.experts) {
        if (k != c.experts.front()) fail("experts", "fedavg needs one expert count for all clients");
      }
    }
  }
  if (c.representation_dim < 1) fail("model.representation_dim", "must be >= 1");
  for (auto h : c.embedding_hidden) if (h < 1) fail("model.embedding_hidden", "zero-width layer");
  for (auto h : c.expert_hidden) if (h < 1) fail("model.expert_hidden", "zero-width layer");
  if (c.embedding != EmbeddingInit::fresh && c.embedding_path.empty()) {
    fail("embedding.path", "required for pretrained embeddings");
  }
  if (c.embedding == EmbeddingInit::fresh && !c.embedding_path.empty()) {
    fail("embedding.path", "only valid with a pretrained embedding");
  }
  if (p.mode == Mode::fedavg && c.embedding == EmbeddingInit::frozen_pretrained) {
    fail("embedding.init", "frozen_pretrained is not supported with fedavg");
  }
  try {
    fedmoe::validate(c.partition);
  } catch (const ConfigError& e) {
    for (const auto& m : e.field_errors()) errors.push_back(m);
  }
  if (c.data.source == DataSource::synthetic) {
    if (c.data.classes < 2) fail("data.classes", "must be >= 2");
    if (c.data.dim < 2) fail("data.dim", "must be >= 2");
    if (!(c.data.spread >= 0.0)) fail("data.spread", "must be >= 0");
  } else {
    if (c.data.images.empty()) fail("data.images", "required for idx data");
    if (c.data.labels.empty()) fail("data.labels", "required for idx data");
  }
  if (c.pretrain.samples < 1) fail("pretrain.samples", "must be >= 1");
  if (c.pretrain.epochs < 1) fail("pretrain.epochs", "must be >= 1");
  if (!(c.pretrain.learning_rate > 0.0)) fail("pretrain.learning_rate", "must be > 0");
  if (c.pretrain.batch_size < 1) fail("pretrain.batch_size", "must be >= 1");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");
}

inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  using detail::FieldReader;
  using detail::parse_enum;
  std::vector<std::string> errors;
  ExperimentConfig c;
  FieldReader top(doc, "", errors);
  if (!doc.is_object()) throw ConfigError(errors);

  top.read("version", c.version);
  top.read("seed", c.seed);
  top.read("clients", c.clients);
  top.read("rounds", c.rounds);
  top.read("local_epochs", c.protocol.local_epochs);
  top.read("learning_rate", c.protocol.learning_rate);
  top.read("batch_size", c.protocol.batch_size);
  top.read("top_k", c.protocol.top_k);
  top.read("requested_experts", c.protocol.requested_experts);
  top.read("matrix_interval", c.protocol.matrix_interval);
  top.read("temperature", c.protocol.temperature);
  top.read("threads", c.protocol.threads);
  top.read("output_dir", c.output_dir);

  if (const auto* e = top.child("experts")) {
    try {
      if (e->is_array()) {
        c.experts = e->get<std::vector<std::size_t>>();
      } else {
        c.experts = {e->get<std::size_t>()};
      }
    } catch (const nlohmann::json::exception&) {
      top.error("experts", "must be a count or an array of counts");
    }
  }

  std::string mode = to_string(c.protocol.mode);
  top.read("mode", mode);
  if (auto m = parse_enum<Mode>(mode, {{"fedmoe", Mode::fedmoe},
                                       {"fedavg", Mode::fedavg},
                                       {"local_only", Mode::local_only}})) {
    c.protocol.mode = *m;
  } else {
    top.error("mode", "expected fedmoe, fedavg or local_only");
  }

  if (const auto* e = top.child("embedding")) {
    FieldReader r(*e, "embedding", errors);
    std::string init = to_string(c.embedding);
    r.read("init", init);
    r.read("path", c.embedding_path);
    if (auto v = parse_enum<EmbeddingInit>(
            init, {{"fresh", EmbeddingInit::fresh},
                   {"frozen_pretrained", EmbeddingInit::frozen_pretrained},
                   {"pretrained", EmbeddingInit::pretrained}})) {
      c.embedding = *v;
    } else {
      r.error("init", "expected fresh, frozen_pretrained or pretrained");
    }
    r.reject_unknown();
  }

  if (const auto* m = top.child("model")) {
    FieldReader r(*m, "model", errors);
    r.read("embedding_hidden", c.embedding_hidden);
    r.read("representation_dim", c.representation_dim);
    r.read("expert_hidden", c.expert_hidden);
    r.reject_unknown();
  }

  if (const auto* p = top.child("partition")) {
    FieldReader r(*p, "partition", errors);
    std::string scheme = to_string(c.partition.scheme);
    r.read("scheme", scheme);
    if (auto s = parse_enum<PartitionScheme>(
            scheme, {{"homogeneous", PartitionScheme::homogeneous},
                     {"pathological_balanced", PartitionScheme::pathological_balanced},
                     {"pathological_unbalanced", PartitionScheme::pathological_unbalanced},
                     {"dirichlet", PartitionScheme::dirichlet}})) {
      c.partition.scheme = *s;
    } else {
      r.error("scheme", "unknown partition scheme");
    }
    r.read("alpha", c.partition.alpha);
    r.read("per_client", c.partition.per_client);
    r.read("unbalanced_min", c.partition.unbalanced_min);
    r.read("unbalanced_max", c.partition.unbalanced_max);
    if (r.has("seed")) {
      r.read("seed", c.partition.seed);
      c.partition_seed_set = true;
    } else {
      r.read("seed", c.partition.seed);
    }
    r.reject_unknown();
  }

  if (const auto* d = top.child("data")) {
    FieldReader r(*d, "data", errors);
    std::string source = "synthetic";
    r.read("source", source);
    if (auto s = parse_enum<DataSource>(source, {{"synthetic", DataSource::synthetic},
                                                 {"idx", DataSource::idx}})) {
      c.data.source = *s;
    } else {
      r.error("source", "expected synthetic or idx");
    }
    r.read("classes", c.data.classes);
    r.read("dim", c.data.dim);
    r.read("spread", c.data.spread);
    r.read("samples", c.data.samples);
    if (r.has("seed")) {
      std::uint64_t s = 0;
      r.read("seed", s);
      c.data.seed = s;
    } else {
      std::uint64_t unused = 0;
      r.read("seed", unused);
    }
    r.read("images", c.data.images);
    r.read("labels", c.data.labels);
    r.reject_unknown();
  }

  if (const auto* p = top.child("pretrain")) {
    FieldReader r(*p, "pretrain", errors);
    r.read("samples", c.pretrain.samples);
    r.read("epochs", c.pretrain.epochs);
    r.read("learning_rate", c.pretrain.learning_rate);
    r.read("batch_size", c.pretrain.batch_size);
    r.reject_unknown();
  }

  top.reject_unknown();
  // Fields that failed to parse keep their defaults, so range checks still
  // report everything else in the same pass.
  validate(c, errors);
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

/// Every field with defaults materialized; config_from_json(to_json(c))
/// reproduces c.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json doc;
  doc["version"] = c.version;
  doc["seed"] = c.seed;
  doc["mode"] = to_string(c.protocol.mode);
  doc["clients"] = c.clients;
  doc["rounds"] = c.rounds;
  doc["local_epochs"] = c.protocol.local_epochs;
  doc["learning_rate"] = c.protocol.learning_rate;
  doc["batch_size"] = c.protocol.batch_size;
  if (c.experts.size() == 1) {
    doc["experts"] = c.experts.front();
  } else {
    doc["experts"] = c.experts;
  }
  doc["top_k"] = c.protocol.top_k;
  doc["requested_experts"] = c.protocol.requested_experts;
  doc["matrix_interval"] = c.protocol.matrix_interval;
  doc["temperature"] = c.protocol.temperature;
  doc["threads"] = c.protocol.threads;
  doc["embedding"] = {{"init", to_string(c.embedding)}, {"path", c.embedding_path}};
  doc["model"] = {{"embedding_hidden", c.embedding_hidden},
                  {"representation_dim", c.representation_dim},
                  {"expert_hidden", c.expert_hidden}};
  const auto part = c.resolved_partition();
  doc["partition"] = {{"scheme", to_string(part.scheme)},
                      {"alpha", part.alpha},
                      {"per_client", part.per_client},
                      {"seed", part.seed},
                      {"unbalanced_min", part.unbalanced_min},
                      {"unbalanced_max", part.unbalanced_max}};
  if (c.data.source == DataSource::synthetic) {
    doc["data"] = {{"source", "synthetic"},   {"classes", c.data.classes},
                   {"dim", c.data.dim},       {"spread", c.data.spread},
                   {"samples", c.data.samples}, {"seed", c.data_seed()}};
  } else {
    doc["data"] = {{"source", "idx"}, {"images", c.data.images}, {"labels", c.data.labels}};
  }
  doc["pretrain"] = {{"samples", c.pretrain.samples},
                     {"epochs", c.pretrain.epochs},
                     {"learning_rate", c.pretrain.learning_rate},
                     {"batch_size", c.pretrain.batch_size}};
  doc["output_dir"] = c.output_dir;
  return doc;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(doc);
}

}  // namespace fedmoe
