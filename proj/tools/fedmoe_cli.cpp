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

// Command-line runner: run, comm-audit, partition-report, grad-check,
// pretrain.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fedmoe/checkpoint.hpp"
#include "fedmoe/config.hpp"
#include "fedmoe/diagnostics.hpp"
#include "fedmoe/experiment.hpp"
#include "fedmoe/gradcheck.hpp"

namespace {

constexpr int kExitMismatch = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int cmd_run(const std::string& path) {
  const auto cfg = fedmoe::load_config(path);
  const auto result = fedmoe::run_to_directory(cfg);
  const auto& last = result.reports.back();
  std::printf("rounds=%zu mean_test_acc=%.4f min=%.4f max=%.4f output=%s\n",
              last.round, last.evaluation.mean_accuracy, last.evaluation.min_accuracy,
              last.evaluation.max_accuracy, cfg.output_dir.c_str());
  if (cfg.protocol.mode == fedmoe::Mode::fedmoe) {
    // How close requested peers are in what they actually route, compared
    // with an arbitrary pair of experts. Lower support_tv is better.
    std::size_t classes = 0;
    for (const auto& c : result.clients) {
      for (const auto& s : c.shard.train) classes = std::max(classes, s.label + 1);
    }
    const auto d = fedmoe::relevance_diagnostic(
        fedmoe::routed_label_counts(result.clients, classes, cfg.protocol.top_k),
        result.server.matrix);
    std::printf("routing: used_experts=%zu support_tv=%.4f all_pairs_tv=%.4f\n",
                d.used_experts, d.support_tv, d.all_pairs_tv);
  }
  return 0;
}

int cmd_comm_audit(const std::string& path) {
  const auto cfg = fedmoe::load_config(path);
  bool all_ok = true;
  std::printf("%-14s %5s %12s %12s %12s %12s %12s %12s %s\n", "mode", "round", "up",
              "up_pred", "down", "down_pred", "p2p", "p2p_pred", "verdict");
  for (const auto& audit : fedmoe::comm_audit(cfg)) {
    for (const auto& r : audit.rounds) {
      std::printf("%-14s %5zu %12llu %12llu %12llu %12llu %12llu %12llu %s\n",
                  fedmoe::to_string(audit.mode), r.metered.round,
                  static_cast<unsigned long long>(r.metered.server_up),
                  static_cast<unsigned long long>(r.predicted.server_up),
                  static_cast<unsigned long long>(r.metered.server_down),
                  static_cast<unsigned long long>(r.predicted.server_down),
                  static_cast<unsigned long long>(r.metered.p2p),
                  static_cast<unsigned long long>(r.predicted.p2p),
                  r.match() ? "match" : "MISMATCH");
    }
    if (audit.closed_form_applicable) {
      std::printf(
          "%-14s closed form: server/client/round metered=%.4f predicted=%.4f %s; "
          "p2p/client/round metered=%.4f predicted=%.4f %s\n",
          fedmoe::to_string(audit.mode), audit.metered_server_per_client,
          audit.closed_form.server_total, audit.server_average_match ? "match" : "MISMATCH",
          audit.metered_p2p_per_client, audit.closed_form.p2p_per_client,
          audit.p2p_match ? "match" : "MISMATCH");
    } else {
      std::printf("%-14s closed form: n/a (expert counts differ across clients)\n",
                  fedmoe::to_string(audit.mode));
    }
    all_ok = all_ok && audit.ok();
  }
  std::printf("verdict: %s\n", all_ok ? "all rounds match" : "MISMATCH");
  return all_ok ? 0 : kExitMismatch;
}

int cmd_partition_report(const std::string& path, const std::string& out_path,
                         std::size_t seeds) {
  const auto cfg = fedmoe::load_config(path);
  const auto report = fedmoe::partition_report(cfg);
  if (out_path.empty()) {
    fedmoe::write_partition_csv(std::cout, report.counts);
  } else {
    std::ofstream out(out_path);
    if (!out) throw fedmoe::FormatError("cannot open " + out_path);
    fedmoe::write_partition_csv(out, report.counts);
  }
  std::fprintf(stderr, "scheme=%s clients=%zu mean_pairwise_tv=%.6f\n",
               fedmoe::to_string(cfg.resolved_partition().scheme), cfg.clients,
               report.mean_tv);
  if (seeds > 1) {
    std::fprintf(stderr, "mean_pairwise_tv over %zu seeds=%.6f\n", seeds,
                 fedmoe::mean_tv_over_seeds(cfg, seeds));
  }
  return 0;
}

int cmd_grad_check(std::size_t instances, std::uint64_t seed) {
  const auto r = fedmoe::grad_check_moe(instances, seed);
  std::printf("instances=%zu entries=%zu failures=%zu max_relative_error=%.3e sparsity=%s\n",
              r.instances, r.entries, r.failures, r.max_relative_error,
              r.sparsity_ok ? "ok" : "VIOLATED");
  return (r.failures == 0 && r.sparsity_ok) ? 0 : kExitMismatch;
}

int cmd_pretrain(const std::string& path, const std::string& out_path) {
  const auto cfg = fedmoe::load_config(path);
  fedmoe::TensorMap tensors;
  fedmoe::add_tensors(tensors, "embedding", fedmoe::pretrain_embedding(cfg));
  fedmoe::write_checkpoint(out_path, tensors);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated mixture-of-experts simulator"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run an experiment described by a config file");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();

  auto* audit = app.add_subcommand("comm-audit",
                                   "Compare metered communication with the closed forms");
  audit->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::string out_path;
  std::size_t seeds = 1;
  auto* part = app.add_subcommand("partition-report",
                                  "Client x class counts and heterogeneity summary");
  part->add_option("config", config_path, "Experiment config (JSON)")->required();
  part->add_option("-o,--out", out_path, "CSV output path (default stdout)");
  part->add_option("--seeds", seeds, "Also report the mean TV over this many seeds");

  std::size_t instances = 100;
  std::uint64_t seed = 1;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check");
  grad->add_option("--instances", instances, "Random instances to check");
  grad->add_option("--seed", seed, "Seed for the random instances");

  auto* pre = app.add_subcommand("pretrain", "Pretrain an embedding checkpoint");
  pre->add_option("config", config_path, "Experiment config (JSON)")->required();
  pre->add_option("-o,--out", out_path, "Checkpoint output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path);
    if (*audit) return cmd_comm_audit(config_path);
    if (*part) return cmd_partition_report(config_path, out_path, seeds);
    if (*grad) return cmd_grad_check(instances, seed);
    if (*pre) return cmd_pretrain(config_path, out_path);
  } catch (const fedmoe::ConfigError& e) {
    std::fprintf(stderr, "invalid config:\n");
    for (const auto& f : e.field_errors()) std::fprintf(stderr, "  %s\n", f.c_str());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
