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

// Domain-aware expert aggregation. Gating proxies from all clients are stacked
// into one bank, their pairwise cosine similarity selects each expert's
// request set, and a temperature softmax over that set gives the mixing
// weights applied to the (flattened) experts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedmoe/errors.hpp"
#include "fedmoe/nn.hpp"

namespace fedmoe {

struct ExpertRef {
  std::size_t client = 0;
  std::size_t expert = 0;

  friend bool operator==(const ExpertRef&, const ExpertRef&) = default;
};

/// Every proxy of every client, client-major then expert-minor.
class ProxyBank {
 public:
  std::size_t size() const { return proxies_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t client_count() const { return offsets_.size(); }

  const Vector& proxy(std::size_t global) const { return proxies_.at(global); }
  const ExpertRef& locate(std::size_t global) const { return refs_.at(global); }

  std::size_t global_index(std::size_t client, std::size_t expert) const {
    if (client >= offsets_.size() || expert >= counts_[client]) {
      throw DimensionError("no expert " + std::to_string(expert) + " on client " +
                           std::to_string(client));
    }
    return offsets_[client] + expert;
  }

  /// First global index owned by `client`.
  std::size_t offset(std::size_t client) const { return offsets_.at(client); }
  std::size_t expert_count(std::size_t client) const { return counts_.at(client); }

  friend ProxyBank stack_proxies(std::span<const Matrix> gatings);

 private:
  std::size_t dim_ = 0;
  std::vector<Vector> proxies_;
  std::vector<ExpertRef> refs_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> counts_;
};

/// Columns of each client's gating matrix, concatenated in client order.
inline ProxyBank stack_proxies(std::span<const Matrix> gatings) {
  ProxyBank bank;
  if (gatings.empty()) return bank;
  bank.dim_ = gatings.front().rows();
  for (std::size_t i = 0; i < gatings.size(); ++i) {
    const Matrix& g = gatings[i];
    if (g.rows() != bank.dim_) {
      throw DimensionError("client " + std::to_string(i) + " gating has " +
                           std::to_string(g.rows()) + " rows, expected " +
                           std::to_string(bank.dim_));
    }
    bank.offsets_.push_back(bank.proxies_.size());
    bank.counts_.push_back(g.cols());
    for (std::size_t j = 0; j < g.cols(); ++j) {
      bank.proxies_.push_back(g.column(j));
      bank.refs_.push_back({i, j});
    }
  }
  return bank;
}

struct SimilarityMatrix {
  Matrix r;                           // M x M cosine similarities
  std::vector<std::size_t> zero_norm;  // proxies treated as self-only

  std::size_t size() const { return r.rows(); }
};

/// Pairwise cosine similarity. A zero-norm proxy gets similarity 1 with
/// itself and 0 with everything else; its index is reported in zero_norm.
inline SimilarityMatrix similarity(const ProxyBank& bank) {
  const std::size_t m = bank.size();
  SimilarityMatrix out;
  out.r = Matrix(m, m);
  Vector norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (double v : bank.proxy(i)) s += v * v;
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) out.zero_norm.push_back(i);
  }
  for (std::size_t i = 0; i < m; ++i) {
    out.r(i, i) = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      double v = 0.0;
      if (norms[i] > 0.0 && norms[j] > 0.0) {
        const auto& a = bank.proxy(i);
        const auto& b = bank.proxy(j);
        double dot = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
        v = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      }
      out.r(i, j) = v;
      out.r(j, i) = v;
    }
  }
  return out;
}

/// S_i = {i} plus the P other indices with the largest r_ij, smaller index
/// first on ties. Always exactly min(P + 1, M) entries, self first and the
/// rest in rank order.
inline std::vector<std::vector<std::size_t>> request_sets(const SimilarityMatrix& sim,
                                                          std::size_t P) {
  const std::size_t m = sim.size();
  std::vector<std::vector<std::size_t>> supports(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<std::size_t> others;
    others.reserve(m);
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i) others.push_back(j);
    }
    const std::size_t take = std::min(P, others.size());
    std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(take),
                      others.end(), [&](std::size_t a, std::size_t b) {
                        const double ra = sim.r(i, a);
                        const double rb = sim.r(i, b);
                        return ra > rb || (ra == rb && a < b);
                      });
    supports[i].push_back(i);
    supports[i].insert(supports[i].end(), others.begin(),
                       others.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return supports;
}

/// Sparse row-stochastic mixing matrix over global expert indices.
struct AggregationMatrix {
  struct Row {
    std::vector<std::size_t> support;
    std::vector<double> weights;

    friend bool operator==(const Row&, const Row&) = default;
  };

  std::vector<Row> rows;
  // Round whose gating uploads produced this matrix; 0 for the bootstrap
  // identity.
  std::size_t computed_at_round = 0;

  std::size_t size() const { return rows.size(); }

  static AggregationMatrix identity(std::size_t m, std::size_t round = 0) {
    AggregationMatrix a;
    a.computed_at_round = round;
    a.rows.resize(m);
    for (std::size_t i = 0; i < m; ++i) a.rows[i] = {{i}, {1.0}};
    return a;
  }

  bool is_identity() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].support.size() != 1 || rows[i].support[0] != i ||
          rows[i].weights[0] != 1.0) {
        return false;
      }
    }
    return true;
  }

  Matrix dense() const {
    Matrix out(rows.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t k = 0; k < rows[i].support.size(); ++k) {
        out(i, rows[i].support[k]) = rows[i].weights[k];
      }
    }
    return out;
  }

  friend bool operator==(const AggregationMatrix&, const AggregationMatrix&) = default;
};

/// Row i is softmax(r_ij / tau) over j in S_i.
inline AggregationMatrix weights(const SimilarityMatrix& sim,
                                 const std::vector<std::vector<std::size_t>>& supports,
                                 double tau, std::size_t computed_at_round = 0) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ConfigError("temperature: must be a finite value > 0");
  }
  if (supports.size() != sim.size()) {
    throw DimensionError("one support set per expert required");
  }
  AggregationMatrix a;
  a.computed_at_round = computed_at_round;
  a.rows.resize(supports.size());
  for (std::size_t i = 0; i < supports.size(); ++i) {
    const auto& s = supports[i];
    if (s.empty()) throw DimensionError("empty support set");
    Vector logits(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (s[k] >= sim.size()) throw DimensionError("support index out of range");
      logits[k] = sim.r(i, s[k]) / tau;
    }
    a.rows[i] = {s, softmax(logits)};
  }
  return a;
}

/// sum_k w_k * experts[support_k]. The accumulator starts from the first
/// term so a singleton support with weight 1 reproduces the input bit-exactly.
inline Vector aggregate_row(std::span<const Vector> experts,
                            const AggregationMatrix::Row& row) {
  if (row.support.empty()) throw DimensionError("empty support set");
  const Vector& first = experts[row.support[0]];
  Vector out(first.size());
  for (std::size_t p = 0; p < first.size(); ++p) out[p] = row.weights[0] * first[p];
  for (std::size_t k = 1; k < row.support.size(); ++k) {
    const Vector& e = experts[row.support[k]];
    if (e.size() != out.size()) throw DimensionError("expert length mismatch");
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += row.weights[k] * e[p];
  }
  return out;
}

/// Simultaneous update: every output reads only the pre-aggregation inputs.
inline std::vector<Vector> aggregate_experts(std::span<const Vector> experts,
                                             const AggregationMatrix& a) {
  if (a.size() != experts.size()) {
    throw DimensionError("aggregation matrix has " + std::to_string(a.size()) +
                         " rows for " + std::to_string(experts.size()) + " experts");
  }
  for (const auto& e : experts) {
    if (e.size() != experts.front().size()) {
      throw DimensionError("experts must have identical parameter counts");
    }
  }
  std::vector<Vector> out;
  out.reserve(experts.size());
  for (const auto& row : a.rows) {
    for (std::size_t j : row.support) {
      if (j >= experts.size()) throw DimensionError("support index out of range");
    }
    out.push_back(aggregate_row(experts, row));
  }
  return out;
}

/// Full server-side computation from gating matrices.
inline AggregationMatrix build_aggregation_matrix(std::span<const Matrix> gatings,
                                                  std::size_t P, double tau,
                                                  std::size_t round,
                                                  std::vector<std::size_t>* zero_norm = nullptr) {
  const ProxyBank bank = stack_proxies(gatings);
  const SimilarityMatrix sim = similarity(bank);
  if (zero_norm) *zero_norm = sim.zero_norm;
  return weights(sim, request_sets(sim, P), tau, round);
}

/// CSV with header i,j,a_ij,computed_at_round; one row per support entry.
inline void write_aggregation_csv(std::ostream& out, const AggregationMatrix& a) {
  out << "i,j,a_ij,computed_at_round\n";
  char buf[64];
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    for (std::size_t k = 0; k < a.rows[i].support.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", a.rows[i].weights[k]);
      out << i << ',' << a.rows[i].support[k] << ',' << buf << ','
          << a.computed_at_round << '\n';
    }
  }
}

inline AggregationMatrix read_aggregation_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "i,j,a_ij,computed_at_round") {
    throw FormatError("aggregation CSV: bad header");
  }
  AggregationMatrix a;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string fi, fj, fw, fr;
    if (!std::getline(fields, fi, ',') || !std::getline(fields, fj, ',') ||
        !std::getline(fields, fw, ',') || !std::getline(fields, fr)) {
      throw FormatError("aggregation CSV: malformed row '" + line + "'");
    }
    try {
      const auto i = static_cast<std::size_t>(std::stoull(fi));
      const auto j = static_cast<std::size_t>(std::stoull(fj));
      const double w = std::stod(fw);
      const auto round = static_cast<std::size_t>(std::stoull(fr));
      if (first) {
        a.computed_at_round = round;
        first = false;
      } else if (round != a.computed_at_round) {
        throw FormatError("aggregation CSV: mixed computed_at_round values");
      }
      if (i >= a.rows.size()) a.rows.resize(i + 1);
      a.rows[i].support.push_back(j);
      a.rows[i].weights.push_back(w);
    } catch (const std::logic_error&) {
      throw FormatError("aggregation CSV: bad number in '" + line + "'");
    }
  }
  return a;
}

}  // namespace fedmoe
