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

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "fedmoe/data.hpp"
#include "oracles.hpp"

namespace fedmoe {
namespace {

namespace fs = std::filesystem;

std::size_t distinct_labels(const std::vector<std::size_t>& counts) {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(),
                                                [](std::size_t c) { return c > 0; }));
}

TEST(Synthetic, LabelsBalancedAndShaped) {
  const Dataset ds = make_synthetic(4, 8, 4000, 3.0, 7);
  EXPECT_EQ(ds.size(), 4000u);
  EXPECT_EQ(ds.dim, 8u);
  EXPECT_EQ(label_counts(ds.samples, 4), (std::vector<std::size_t>{1000, 1000, 1000, 1000}));
  const Dataset odd = make_synthetic(3, 2, 10, 1.0, 7);
  for (std::size_t c : label_counts(odd.samples, 3)) EXPECT_TRUE(c == 3 || c == 4);
}

TEST(Synthetic, MeansHaveRequestedNorm) {
  const auto mix = make_mixture(5, 6, 2.5, 3);
  for (const auto& m : mix.means()) EXPECT_NEAR(std::sqrt(oracle::dot(m, m)), 2.5, 1e-12);
}

TEST(Synthetic, ZeroSpreadIsIndistinguishable) {
  const Dataset train = make_synthetic(2, 2, 2000, 0.0, 11);
  const Dataset test = make_synthetic(2, 2, 2000, 0.0, 12);
  const double acc = oracle::logistic_accuracy(train.samples, test.samples, 2, 200, 0.5);
  EXPECT_NEAR(acc, 0.5, 0.05);
}

TEST(Synthetic, WideSpreadIsLinearlySeparable) {
  // Same seed shares the mixture; fresh samples come from a different stream.
  const auto mix = make_mixture(2, 2, 6.0, 13);
  const Dataset train = mix.sample(2000, Rng(1));
  const Dataset test = mix.sample(2000, Rng(2));
  EXPECT_GT(oracle::logistic_accuracy(train.samples, test.samples, 2, 300, 0.5), 0.99);
}

TEST(Synthetic, Deterministic) {
  const Dataset a = make_synthetic(4, 8, 100, 3.0, 5);
  const Dataset b = make_synthetic(4, 8, 100, 3.0, 5);
  const Dataset c = make_synthetic(4, 8, 100, 3.0, 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].features, b.samples[i].features);
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
  }
  EXPECT_NE(a.samples[0].features, c.samples[0].features);
}

class PartitionTest : public ::testing::Test {
 protected:
  static Dataset data(std::size_t n = 24000) { return make_synthetic(4, 8, n, 3.0, 1); }
};

TEST_F(PartitionTest, HomogeneousWithinOneOfEvenShare) {
  PartitionSpec spec;
  spec.per_client = 500;
  const auto shards = partition(data(), 4, spec);
  for (const auto& s : shards) {
    ASSERT_EQ(s.train.size(), 500u);
    EXPECT_EQ(s.test.size(), 100u);
    for (std::size_t c : label_counts(s.train, 4)) {
      EXPECT_LE(std::abs(static_cast<double>(c) - 125.0), 1.0);
    }
  }
  EXPECT_NEAR(mean_pairwise_tv(shard_label_counts(shards, 4)), 0.0, 1e-12);
}

TEST_F(PartitionTest, PathologicalBalancedTwoLabels250Each) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::pathological_balanced;
  spec.per_client = 500;
  spec.seed = 3;
  const auto shards = partition(data(), 8, spec);
  std::set<std::size_t> used;
  for (const auto& s : shards) {
    const auto counts = label_counts(s.train, 4);
    EXPECT_EQ(distinct_labels(counts), 2u);
    for (std::size_t c = 0; c < 4; ++c) {
      if (counts[c] > 0) {
        EXPECT_EQ(counts[c], 250u);
        used.insert(c);
      }
    }
    EXPECT_EQ(distinct_labels(label_counts(s.test, 4)), 2u);
  }
  EXPECT_EQ(used.size(), 4u);
}

TEST_F(PartitionTest, PathologicalBalancedOddSize) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::pathological_balanced;
  spec.per_client = 7;
  const auto shards = partition(data(400), 3, spec);
  for (const auto& s : shards) {
    auto counts = label_counts(s.train, 4);
    std::sort(counts.rbegin(), counts.rend());
    EXPECT_EQ(counts[0], 4u);
    EXPECT_EQ(counts[1], 3u);
  }
}

TEST_F(PartitionTest, PathologicalUnbalancedRatioInRange) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::pathological_unbalanced;
  spec.per_client = 500;
  spec.seed = 9;
  const auto shards = partition(data(), 8, spec);
  std::set<std::size_t> sizes;
  for (const auto& s : shards) {
    const auto counts = label_counts(s.train, 4);
    EXPECT_EQ(distinct_labels(counts), 2u);
    for (std::size_t c : counts) {
      if (c == 0) continue;
      EXPECT_GE(c, 50u);
      EXPECT_LE(c, 450u);
      sizes.insert(c);
    }
  }
  EXPECT_GT(sizes.size(), 2u);  // not all 250/250
}

TEST_F(PartitionTest, DirichletHugeAlphaIsNearlyHomogeneous) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.alpha = 1e6;
  spec.per_client = 500;
  spec.seed = 4;
  const auto shards = partition(data(), 8, spec);
  const std::vector<std::size_t> uniform{1, 1, 1, 1};
  for (const auto& s : shards) {
    const auto counts = label_counts(s.train, 4);
    EXPECT_LT(total_variation(counts, uniform), 0.02);
  }
}

TEST_F(PartitionTest, DirichletSmallAlphaIsSkewed) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.alpha = 0.1;
  spec.per_client = 200;
  const auto shards = partition(data(), 8, spec);
  EXPECT_GT(mean_pairwise_tv(shard_label_counts(shards, 4)), 0.4);
}

TEST_F(PartitionTest, ShardsAreDisjointExactSizes) {
  const Dataset ds = data(6000);
  for (auto scheme : {PartitionScheme::homogeneous, PartitionScheme::pathological_balanced,
                      PartitionScheme::pathological_unbalanced, PartitionScheme::dirichlet}) {
    PartitionSpec spec;
    spec.scheme = scheme;
    spec.alpha = 0.5;
    spec.per_client = 100;
    spec.seed = 2;
    const auto shards = partition(ds, 6, spec);
    std::set<Vector> seen;
    std::size_t total = 0;
    for (const auto& s : shards) {
      EXPECT_EQ(s.train.size(), 100u) << to_string(scheme);
      EXPECT_EQ(s.test.size(), 20u);
      for (const auto* part : {&s.train, &s.test}) {
        for (const auto& x : *part) {
          seen.insert(x.features);
          ++total;
        }
      }
    }
    EXPECT_EQ(seen.size(), total) << to_string(scheme) << ": a sample was reused";
  }
}

TEST_F(PartitionTest, TestLabelsFollowTrainLabels) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.alpha = 0.3;
  spec.per_client = 500;
  const auto shards = partition(data(), 5, spec);
  for (const auto& s : shards) {
    const auto tr = label_counts(s.train, 4);
    const auto te = label_counts(s.test, 4);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_LE(std::abs(static_cast<double>(te[c]) - tr[c] / 5.0), 1.0);
    }
  }
}

TEST_F(PartitionTest, DeterministicPerSeed) {
  const Dataset ds = data(6000);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.alpha = 1.0;
  spec.per_client = 100;
  spec.seed = 17;
  const auto a = partition(ds, 4, spec);
  const auto b = partition(ds, 4, spec);
  spec.seed = 18;
  const auto c = partition(ds, 4, spec);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < a[i].train.size(); ++k) {
      EXPECT_EQ(a[i].train[k].features, b[i].train[k].features);
    }
  }
  EXPECT_NE(shard_label_counts(a, 4), shard_label_counts(c, 4));
}

TEST_F(PartitionTest, ExhaustionAndBadSpecsRejected) {
  PartitionSpec spec;
  spec.per_client = 500;
  EXPECT_THROW(partition(data(1000), 4, spec), ConfigError);
  spec.scheme = PartitionScheme::dirichlet;
  spec.alpha = 0.0;
  EXPECT_THROW(partition(data(), 2, spec), ConfigError);
  spec.alpha = 1.0;
  spec.per_client = 0;
  EXPECT_THROW(partition(data(), 2, spec), ConfigError);
}

TEST(Heterogeneity, MeanTvDecreasesWithAlpha) {
  const Dataset ds = make_synthetic(4, 8, 8 * 240 * 4, 3.0, 1);
  double prev = 2.0;
  for (double alpha : {0.1, 1.0, 10.0}) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      PartitionSpec spec;
      spec.scheme = PartitionScheme::dirichlet;
      spec.alpha = alpha;
      spec.per_client = 100;
      spec.seed = seed;
      sum += mean_pairwise_tv(shard_label_counts(partition(ds, 8, spec), 4));
    }
    EXPECT_LT(sum / 20.0, prev) << "alpha " << alpha;
    prev = sum / 20.0;
  }
}

TEST(Heterogeneity, TotalVariationExamples) {
  const std::vector<std::size_t> a{10, 0}, b{0, 5}, c{2, 2}, d{1, 1};
  EXPECT_DOUBLE_EQ(total_variation(a, b), 1.0);
  EXPECT_DOUBLE_EQ(total_variation(c, d), 0.0);
  EXPECT_DOUBLE_EQ(total_variation(a, c), 0.5);
}

TEST(Heterogeneity, LargestRemainderSumsExactly) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> w(5);
    for (double& v : w) v = rng.uniform();
    const std::size_t total = rng.below(1000);
    const auto q = largest_remainder(w, total);
    EXPECT_EQ(std::accumulate(q.begin(), q.end(), std::size_t{0}), total);
    const double sw = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_LT(std::abs(static_cast<double>(q[i]) - w[i] / sw * total), 1.0);
    }
  }
}

TEST(Heterogeneity, PartitionCsv) {
  std::ostringstream out;
  write_partition_csv(out, {{3, 0}, {1, 2}});
  EXPECT_EQ(out.str(), "client_id,class_id,count\n0,0,3\n0,1,0\n1,0,1\n1,1,2\n");
}

// --- IDX -------------------------------------------------------------------

void put_be32(std::string& s, std::uint32_t v) {
  for (int shift : {24, 16, 8, 0}) s.push_back(static_cast<char>((v >> shift) & 0xff));
}

class IdxTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fedmoe_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& bytes) {
    const auto path = (dir_ / name).string();
    std::ofstream(path, std::ios::binary) << bytes;
    return path;
  }
  static std::string images(std::uint32_t magic, std::uint32_t n, std::uint32_t rows,
                            std::uint32_t cols, const std::string& pixels) {
    std::string s;
    put_be32(s, magic);
    put_be32(s, n);
    put_be32(s, rows);
    put_be32(s, cols);
    return s + pixels;
  }
  static std::string labels(std::uint32_t magic, std::uint32_t n, const std::string& body) {
    std::string s;
    put_be32(s, magic);
    put_be32(s, n);
    return s + body;
  }

  fs::path dir_;
};

TEST_F(IdxTest, TwoByTwoFixture) {
  const std::string px{'\x00', '\xff', '\x33', '\x66', '\x01', '\x02', '\x03', '\x04'};
  const auto ip = write("img", images(0x803, 2, 2, 2, px));
  const auto lp = write("lbl", labels(0x801, 2, std::string{'\x02', '\x00'}));
  const Dataset ds = load_idx(ip, lp);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim, 4u);
  EXPECT_EQ(ds.classes, 3u);
  EXPECT_EQ(ds.samples[0].label, 2u);
  EXPECT_EQ(ds.samples[1].label, 0u);
  EXPECT_EQ(ds.samples[0].features, (Vector{0.0, 1.0, 0.2, 0.4}));
  EXPECT_DOUBLE_EQ(ds.samples[1].features[3], 4.0 / 255.0);
}

TEST_F(IdxTest, MalformedFilesRejected) {
  const std::string px(8, '\x10');
  const auto good_img = write("img", images(0x803, 2, 2, 2, px));
  const auto good_lbl = write("lbl", labels(0x801, 2, std::string(2, '\x01')));
  EXPECT_THROW(load_idx(write("a", images(0x801, 2, 2, 2, px)), good_lbl), FormatError);
  EXPECT_THROW(load_idx(good_img, write("b", labels(0x803, 2, std::string(2, '\x01')))),
               FormatError);
  EXPECT_THROW(load_idx(good_img, write("c", labels(0x801, 3, std::string(3, '\x01')))),
               FormatError);
  EXPECT_THROW(load_idx(write("d", images(0x803, 2, 2, 2, px.substr(0, 7))), good_lbl),
               FormatError);
  EXPECT_THROW(load_idx(good_img, write("e", labels(0x801, 2, std::string(1, '\x01')))),
               FormatError);
  EXPECT_THROW(load_idx(write("f", "\x00\x00"), good_lbl), FormatError);
  EXPECT_THROW(load_idx((dir_ / "missing").string(), good_lbl), FormatError);
}

TEST_F(IdxTest, MnistShapedFixture) {
  // Header-faithful 10000 x 28 x 28 file with labels 0..9.
  constexpr std::uint32_t n = 10000;
  std::string px(std::size_t{n} * 784, '\0');
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<char>((i * 31) & 0xff);
  std::string lb(n, '\0');
  for (std::uint32_t i = 0; i < n; ++i) lb[i] = static_cast<char>(i % 10);
  const Dataset ds = load_idx(write("img", images(0x803, n, 28, 28, px)),
                              write("lbl", labels(0x801, n, lb)));
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_EQ(ds.dim, 784u);
  EXPECT_EQ(ds.classes, 10u);
  for (std::size_t c : label_counts(ds.samples, 10)) EXPECT_EQ(c, 1000u);
  for (const auto& s : ds.samples) {
    for (double v : s.features) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(IdxReal, OptionalMnistTestSet) {
  const char* dir = std::getenv("FEDMOE_MNIST_DIR");
  if (dir == nullptr) GTEST_SKIP() << "set FEDMOE_MNIST_DIR to check a real MNIST test set";
  const fs::path d(dir);
  const Dataset ds = load_idx((d / "t10k-images-idx3-ubyte").string(),
                              (d / "t10k-labels-idx1-ubyte").string());
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_EQ(ds.dim, 784u);
  EXPECT_EQ(ds.classes, 10u);
}

}  // namespace
}  // namespace fedmoe
