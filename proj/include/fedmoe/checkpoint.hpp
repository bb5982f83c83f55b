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

// JSON parameter checkpoints: {"format": "fedmoe-checkpoint", "version": 1,
// "tensors": {name: {"rows": r, "cols": c, "values": [row-major]}}}.

#include <cmath>
#include <fstream>
#include <map>
#include <string>

#include "fedmoe/errors.hpp"
#include "fedmoe/nn.hpp"
#include "json.hpp"

namespace fedmoe {

using TensorMap = std::map<std::string, Matrix>;

inline constexpr const char* kCheckpointFormat = "fedmoe-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Adds `<prefix>.<l>.weight` and `<prefix>.<l>.bias` (out x 1) per layer.
inline void add_tensors(TensorMap& tensors, const std::string& prefix,
                        const DenseNet& net) {
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& layer = net.layers()[l];
    const std::string base = prefix + "." + std::to_string(l);
    tensors[base + ".weight"] = layer.weight;
    tensors[base + ".bias"] = Matrix(layer.bias.size(), 1, layer.bias);
  }
}

/// Overwrites the parameters of `net` from `<prefix>.*` tensors. Shapes must
/// match the existing architecture exactly.
inline void load_tensors(const TensorMap& tensors, const std::string& prefix,
                         DenseNet& net) {
  auto fetch = [&](const std::string& name, std::size_t rows,
                   std::size_t cols) -> const Matrix& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint missing tensor " + name);
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw FormatError("tensor " + name + " has shape " +
                        std::to_string(it->second.rows()) + "x" +
                        std::to_string(it->second.cols()) + ", expected " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    return it->second;
  };
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    const std::string base = prefix + "." + std::to_string(l);
    layer.weight = fetch(base + ".weight", layer.out_dim(), layer.in_dim());
    const auto& b = fetch(base + ".bias", layer.out_dim(), 1);
    layer.bias.assign(b.values().begin(), b.values().end());
  }
}

inline nlohmann::json checkpoint_to_json(const TensorMap& tensors) {
  nlohmann::json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  auto& t = doc["tensors"];
  t = nlohmann::json::object();
  for (const auto& [name, m] : tensors) {
    t[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
  }
  return doc;
}

inline TensorMap checkpoint_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat) {
    throw FormatError("not a fedmoe checkpoint");
  }
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version");
  }
  if (!doc.contains("tensors") || !doc["tensors"].is_object()) {
    throw FormatError("checkpoint has no tensors object");
  }
  TensorMap out;
  for (const auto& [name, entry] : doc["tensors"].items()) {
    try {
      const auto rows = entry.at("rows").get<std::size_t>();
      const auto cols = entry.at("cols").get<std::size_t>();
      auto values = entry.at("values").get<Vector>();
      if (values.size() != rows * cols) {
        throw FormatError("tensor " + name + ": value count does not match shape");
      }
      if (!all_finite(values)) {
        throw FormatError("tensor " + name + ": non-finite value");
      }
      out.emplace(name, Matrix(rows, cols, std::move(values)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("tensor " + name + ": " + e.what());
    }
  }
  return out;
}

inline void write_checkpoint(const std::string& path, const TensorMap& tensors) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << checkpoint_to_json(tensors).dump(1) << '\n';
}

inline TensorMap read_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

}  // namespace fedmoe
