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

#include <thread>

#include <gtest/gtest.h>

#include "fedmoe/comm.hpp"

namespace fedmoe {
namespace {

constexpr ModelSizes kSizes{100, 40, 200};

TEST(ExpectedComm, FedAvgExample) {
  const auto c = expected_comm(kSizes, 4, 5, 5, CommMode::fedavg);
  EXPECT_EQ(c.server_total, 1880.0);
  EXPECT_EQ(c.p2p_per_client, 0.0);
}

TEST(ExpectedComm, FedMoEExample) {
  const auto c = expected_comm(kSizes, 4, 5, 5, CommMode::fedmoe);
  EXPECT_NEAR(c.server_total, 217.6, 1e-12);
  EXPECT_EQ(c.p2p_per_client, 4000.0);
}

TEST(ExpectedComm, FrozenDropsEmbeddingTerm) {
  const auto c = expected_comm(kSizes, 4, 5, 5, CommMode::fedmoe_frozen);
  EXPECT_NEAR(c.server_total, 17.6, 1e-12);
  EXPECT_EQ(c.p2p_per_client, 4000.0);
}

TEST(ExpectedComm, NoRequestsNoPeerTraffic) {
  EXPECT_EQ(expected_comm(kSizes, 4, 0, 5, CommMode::fedmoe).p2p_per_client, 0.0);
  EXPECT_THROW(expected_comm(kSizes, 4, 0, 0, CommMode::fedmoe), ConfigError);
}

TEST(MatrixRounds, RefreshScheduleIsOneBased) {
  std::vector<std::size_t> hits;
  for (std::size_t t = 1; t <= 12; ++t) {
    if (is_matrix_round(t, 5)) hits.push_back(t);
  }
  EXPECT_EQ(hits, (std::vector<std::size_t>{1, 6, 11}));
  for (std::size_t t = 1; t <= 5; ++t) EXPECT_TRUE(is_matrix_round(t, 1));
  EXPECT_FALSE(is_matrix_round(0, 1));
}

TEST(RoundComm, WindowAverageEqualsClosedForm) {
  // |Π| = n K with n = 10; uniform K = 4 over N = 3 clients, M = 12 >= P + 1.
  const std::vector<std::size_t> K(3, 4);
  for (auto mode : {CommMode::fedavg, CommMode::fedmoe, CommMode::fedmoe_frozen}) {
    for (std::size_t I : {1u, 2u, 5u}) {
      std::uint64_t server = 0;
      for (std::size_t t = 1; t <= 2 * I; ++t) {
        const auto rc = expected_round_comm(kSizes, K, 10, 5, I, mode, t, true);
        server += rc.server_up + rc.server_down;
        EXPECT_EQ(rc.p2p, mode == CommMode::fedavg ? 0u : 3u * 4000u);
      }
      const auto closed = expected_comm(kSizes, 4, 5, I, mode);
      EXPECT_DOUBLE_EQ(static_cast<double>(server), closed.server_total * 3.0 * 2.0 * I)
          << to_string(mode) << " I=" << I;
    }
  }
}

TEST(RoundComm, BootstrapRoundHasNoPeerTraffic) {
  const std::vector<std::size_t> K{2, 3};
  const auto rc = expected_round_comm(kSizes, K, 10, 2, 5, CommMode::fedmoe, 1, false);
  EXPECT_EQ(rc.p2p, 0u);
  EXPECT_EQ(rc.server_up, 2 * 100u + 20u + 30u);
  EXPECT_EQ(rc.server_down, 2 * 100u + 2 * 2 * 3u + 2 * 3 * 3u);
}

TEST(RoundComm, SupportCappedByExpertCount) {
  // M = 2 experts: P = 5 can request only the one other expert.
  const std::vector<std::size_t> K{1, 1};
  const auto rc = expected_round_comm(kSizes, K, 10, 5, 1, CommMode::fedmoe, 2, true);
  EXPECT_EQ(rc.p2p, 2 * 200u);
  EXPECT_EQ(rc.server_down, 2 * 100u + 2 * 2 * 2u);
}

TEST(Ledger, AccumulatesPerRoundAcrossThreads) {
  CommLedger ledger;
  EXPECT_THROW(ledger.record_up(1), std::logic_error);
  ledger.open_round(1);
  std::vector<std::thread> workers;
  for (int w = 0; w < 4; ++w) {
    workers.emplace_back([&] {
      for (int i = 0; i < 1000; ++i) {
        ledger.record_up(1);
        ledger.record_down(2);
        ledger.record_p2p(3);
      }
    });
  }
  for (auto& w : workers) w.join();
  ledger.open_round(2);
  ledger.record_up(7);
  ASSERT_EQ(ledger.rounds().size(), 2u);
  EXPECT_EQ(ledger.rounds()[0], (RoundComm{1, 4000, 8000, 12000}));
  EXPECT_EQ(ledger.last(), (RoundComm{2, 7, 0, 0}));
}

}  // namespace
}  // namespace fedmoe
