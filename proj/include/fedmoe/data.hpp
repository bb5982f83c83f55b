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

// Synthetic Gaussian-mixture data, label-skew partitioners, and an IDX
// (MNIST container) reader.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/errors.hpp"
#include "fedmoe/rng.hpp"
#include "fedmoe/sample.hpp"

namespace fedmoe {

struct Dataset {
  std::vector<Sample> samples;
  std::size_t classes = 0;
  std::size_t dim = 0;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (samples.empty()) throw DimensionError("dataset is empty");
    for (const auto& s : samples) {
      if (s.features.size() != dim) throw DimensionError("inconsistent feature length");
      if (s.label >= classes) throw DimensionError("label out of range");
    }
  }
};

inline std::vector<std::size_t> label_counts(std::span<const Sample> samples,
                                             std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& s : samples) ++counts.at(s.label);
  return counts;
}

/// Class-conditional isotropic Gaussians with unit covariance. Class means are
/// random unit vectors scaled by `spread`.
class GaussianMixture {
 public:
  GaussianMixture(std::size_t classes, std::size_t dim, double spread, Rng rng)
      : classes_(classes), dim_(dim) {
    if (classes < 2) throw DimensionError("mixture needs at least 2 classes");
    if (dim < 2) throw DimensionError("mixture needs dimension >= 2");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < classes; ++c) {
      Vector mean(dim);
      double norm = 0.0;
      do {
        norm = 0.0;
        for (double& v : mean) {
          v = normal(rng);
          norm += v * v;
        }
      } while (norm == 0.0);
      norm = std::sqrt(norm);
      for (double& v : mean) v = spread * v / norm;
      means_.push_back(std::move(mean));
    }
  }

  std::size_t classes() const { return classes_; }
  std::size_t dim() const { return dim_; }
  const std::vector<Vector>& means() const { return means_; }

  /// n samples with labels balanced within one (label i mod C), shuffled.
  Dataset sample(std::size_t n, Rng rng) const {
    Dataset ds;
    ds.classes = classes_;
    ds.dim = dim_;
    ds.samples.reserve(n);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      Sample s;
      s.label = i % classes_;
      s.features = means_[s.label];
      for (double& v : s.features) v += normal(rng);
      ds.samples.push_back(std::move(s));
    }
    Rng order = rng.split(1);
    shuffle(ds.samples, order);
    return ds;
  }

 private:
  std::size_t classes_;
  std::size_t dim_;
  std::vector<Vector> means_;
};

/// Class means come from seed stream 0 and samples from stream 1, so two
/// datasets with the same (C, d, spread, seed) share a mixture.
inline GaussianMixture make_mixture(std::size_t classes, std::size_t dim,
                                    double spread, std::uint64_t seed) {
  return GaussianMixture(classes, dim, spread, Rng(seed).split(0));
}

inline Dataset make_synthetic(std::size_t classes, std::size_t dim, std::size_t n,
                              double spread, std::uint64_t seed) {
  if (n < classes) throw DimensionError("need at least one sample per class");
  return make_mixture(classes, dim, spread, seed).sample(n, Rng(seed).split(1));
}

enum class PartitionScheme {
  homogeneous,
  pathological_balanced,
  pathological_unbalanced,
  dirichlet,
};

inline const char* to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::homogeneous: return "homogeneous";
    case PartitionScheme::pathological_balanced: return "pathological_balanced";
    case PartitionScheme::pathological_unbalanced: return "pathological_unbalanced";
    case PartitionScheme::dirichlet: return "dirichlet";
  }
  return "?";
}

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::homogeneous;
  double alpha = 1.0;  // dirichlet concentration
  std::size_t per_client = 500;
  std::uint64_t seed = 0;
  // Unbalanced pathological split: the first label's share is uniform here.
  double unbalanced_min = 0.1;
  double unbalanced_max = 0.9;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Held-out test set size for a shard with `per_client` training samples.
inline std::size_t test_size_for(std::size_t per_client) {
  return std::max<std::size_t>(1, per_client / 5);
}

/// Integer counts summing to `total`, proportional to `weights`. Floors first,
/// then hands out the remainder by largest fractional part (lower index wins
/// ties).
inline std::vector<std::size_t> largest_remainder(std::span<const double> weights,
                                                  std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size(), 0);
  if (weights.empty()) return counts;
  if (!(sum > 0.0)) throw DimensionError("largest_remainder: weights sum to zero");
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = weights[i] / sum * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Floating error can overshoot by one in pathological cases.
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

/// Draw from Dir(alpha * 1_C). Gamma variates are formed in log space so tiny
/// alpha does not underflow every component to zero.
inline std::vector<double> sample_dirichlet(std::size_t classes, double alpha,
                                            Rng& rng) {
  std::vector<double> logs(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (alpha < 1.0) {
      // Gamma(a) = Gamma(a + 1) * U^(1/a)
      std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
      double u;
      do {
        u = rng.uniform();
      } while (u == 0.0);
      logs[c] = std::log(gamma(rng)) + std::log(u) / alpha;
    } else {
      std::gamma_distribution<double> gamma(alpha, 1.0);
      double g;
      do {
        g = gamma(rng);
      } while (g == 0.0);
      logs[c] = std::log(g);
    }
  }
  const double shift = *std::max_element(logs.begin(), logs.end());
  double total = 0.0;
  for (double& v : logs) {
    v = std::exp(v - shift);
    total += v;
  }
  for (double& v : logs) v /= total;
  return logs;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> train_label_counts(
    const Dataset& ds, std::size_t clients, const PartitionSpec& spec, Rng rng) {
  const std::size_t C = ds.classes;
  const std::size_t pc = spec.per_client;
  std::vector<std::vector<std::size_t>> counts(clients);
  switch (spec.scheme) {
    case PartitionScheme::homogeneous: {
      const auto global = label_counts(ds.samples, C);
      std::vector<double> w(global.begin(), global.end());
      const auto shard = largest_remainder(w, pc);
      for (auto& c : counts) c = shard;
      break;
    }
    case PartitionScheme::pathological_balanced:
    case PartitionScheme::pathological_unbalanced: {
      std::vector<std::size_t> perm(C);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng perm_rng = rng.split(0);
      shuffle(perm, perm_rng);
      for (std::size_t i = 0; i < clients; ++i) {
        const std::size_t a = perm[(2 * i) % C];
        const std::size_t b = perm[(2 * i + 1) % C];
        std::size_t first = (pc + 1) / 2;
        if (spec.scheme == PartitionScheme::pathological_unbalanced) {
          Rng split_rng = rng.split(1 + i);
          const double ratio = split_rng.uniform(spec.unbalanced_min, spec.unbalanced_max);
          first = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pc)));
          first = std::clamp<std::size_t>(first, 1, pc - 1);
        }
        counts[i].assign(C, 0);
        counts[i][a] = first;
        counts[i][b] = pc - first;
      }
      break;
    }
    case PartitionScheme::dirichlet: {
      for (std::size_t i = 0; i < clients; ++i) {
        Rng client_rng = rng.split(1 + i);
        const auto p = sample_dirichlet(C, spec.alpha, client_rng);
        counts[i] = largest_remainder(p, pc);
      }
      break;
    }
  }
  return counts;
}

}  // namespace detail

inline void validate(const PartitionSpec& spec) {
  if (spec.per_client < 1) throw ConfigError("partition.per_client: must be >= 1");
  if (spec.scheme == PartitionScheme::dirichlet && !(spec.alpha > 0.0)) {
    throw ConfigError("partition.alpha: must be > 0 for the dirichlet scheme");
  }
  if ((spec.scheme == PartitionScheme::pathological_balanced ||
       spec.scheme == PartitionScheme::pathological_unbalanced) &&
      spec.per_client < 2) {
    throw ConfigError("partition.per_client: pathological shards need >= 2 samples");
  }
  if (!(spec.unbalanced_min > 0.0 && spec.unbalanced_min <= spec.unbalanced_max &&
        spec.unbalanced_max < 1.0)) {
    throw ConfigError("partition.unbalanced range must satisfy 0 < min <= max < 1");
  }
}

/// Splits `ds` into `clients` disjoint shards of exactly per_client training
/// samples plus a test set (per_client / 5, at least 1) whose label counts are
/// the training counts scaled down. Samples are drawn without replacement;
/// for each client the test set is drawn before its training set.
inline std::vector<ClientShard> partition(const Dataset& ds, std::size_t clients,
                                          const PartitionSpec& spec) {
  validate(spec);
  if (clients == 0) throw ConfigError("partition: need at least one client");
  ds.validate();
  const std::size_t C = ds.classes;
  if (spec.scheme != PartitionScheme::homogeneous && C < 2) {
    throw ConfigError("partition: label-skew schemes need >= 2 classes");
  }
  Rng rng(spec.seed);

  std::vector<std::vector<std::size_t>> pools(C);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    pools[ds.samples[i].label].push_back(i);
  }
  for (std::size_t c = 0; c < C; ++c) {
    Rng pool_rng = rng.split(1000 + c);
    shuffle(pools[c], pool_rng);
  }
  std::vector<std::size_t> next(C, 0);

  const auto train_counts = detail::train_label_counts(ds, clients, spec, rng.split(1));
  const std::size_t test_total = test_size_for(spec.per_client);

  std::vector<ClientShard> shards(clients);
  for (std::size_t i = 0; i < clients; ++i) {
    std::vector<double> w(train_counts[i].begin(), train_counts[i].end());
    const auto test_counts = largest_remainder(w, test_total);
    auto draw = [&](const std::vector<std::size_t>& counts,
                    std::vector<Sample>& into) {
      for (std::size_t c = 0; c < C; ++c) {
        if (next[c] + counts[c] > pools[c].size()) {
          throw ConfigError("partition: class " + std::to_string(c) +
                            " exhausted at client " + std::to_string(i) +
                            " (needs " + std::to_string(counts[c]) + ", " +
                            std::to_string(pools[c].size() - next[c]) +
                            " left); use a larger dataset");
        }
        for (std::size_t k = 0; k < counts[c]; ++k) {
          into.push_back(ds.samples[pools[c][next[c]++]]);
        }
      }
    };
    shards[i].client_id = i;
    draw(test_counts, shards[i].test);
    draw(train_counts[i], shards[i].train);
    Rng order = rng.split(2000 + i);
    shuffle(shards[i].train, order);
  }
  return shards;
}

/// 0.5 * L1 distance between two label distributions given as counts.
inline double total_variation(std::span<const std::size_t> a,
                              std::span<const std::size_t> b) {
  const double na = static_cast<double>(std::accumulate(a.begin(), a.end(), std::size_t{0}));
  const double nb = static_cast<double>(std::accumulate(b.begin(), b.end(), std::size_t{0}));
  double tv = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    tv += std::abs(static_cast<double>(a[c]) / na - static_cast<double>(b[c]) / nb);
  }
  return 0.5 * tv;
}

/// Client x class training-label counts.
inline std::vector<std::vector<std::size_t>> shard_label_counts(
    std::span<const ClientShard> shards, std::size_t classes) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& s : shards) out.push_back(label_counts(s.train, classes));
  return out;
}

/// Mean total-variation distance over all unordered client pairs.
inline double mean_pairwise_tv(const std::vector<std::vector<std::size_t>>& counts) {
  if (counts.size() < 2) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t j = i + 1; j < counts.size(); ++j) {
      total += total_variation(counts[i], counts[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

/// CSV: client_id,class_id,count (one row per client and class).
inline void write_partition_csv(std::ostream& out,
                                const std::vector<std::vector<std::size_t>>& counts) {
  out << "client_id,class_id,count\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t c = 0; c < counts[i].size(); ++c) {
      out << i << ',' << c << ',' << counts[i][c] << '\n';
    }
  }
}

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t pos,
                               const std::string& path) {
  if (pos + 4 > buf.size()) throw FormatError(path + ": truncated header");
  return (std::uint32_t{buf[pos]} << 24) | (std::uint32_t{buf[pos + 1]} << 16) |
         (std::uint32_t{buf[pos + 2]} << 8) | std::uint32_t{buf[pos + 3]};
}

}  // namespace detail

/// Big-endian IDX pair: images (magic 0x803, dims n x rows x cols, unsigned
/// bytes) and labels (magic 0x801, n bytes). Pixels are scaled to [0, 1].
/// The class count is max label + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);

  const auto image_magic = detail::read_be32(images, 0, images_path);
  if (image_magic != kIdxImageMagic) {
    throw FormatError(images_path + ": bad magic for an image file");
  }
  const std::size_t n = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);

  const auto label_magic = detail::read_be32(labels, 0, labels_path);
  if (label_magic != kIdxLabelMagic) {
    throw FormatError(labels_path + ": bad magic for a label file");
  }
  const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);
  if (n_labels != n) {
    throw FormatError("image count " + std::to_string(n) + " != label count " +
                      std::to_string(n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (n == 0 || pixels == 0) throw FormatError(images_path + ": empty dataset");
  if (images.size() < 16 + n * pixels) throw FormatError(images_path + ": truncated pixel data");
  if (labels.size() < 8 + n) throw FormatError(labels_path + ": truncated label data");

  Dataset ds;
  ds.dim = pixels;
  ds.samples.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    s.features.resize(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
      s.features[p] = static_cast<double>(images[16 + i * pixels + p]) / 255.0;
    }
    s.label = labels[8 + i];
    max_label = std::max(max_label, s.label);
  }
  ds.classes = max_label + 1;
  return ds;
}

}  // namespace fedmoe
