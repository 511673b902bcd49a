// Command-line front end: run experiments, inspect MAC costs, and dump
// client partition statistics.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fednas/runner.hpp"

namespace {

using namespace fednas;

void print_mac_table(const MacBreakdown& detail) {
  std::printf("%-24s %15s\n", "layer", "MACs");
  for (const MacEntry& e : detail.entries) {
    std::printf("%-24s %15lld\n", e.name.c_str(), e.macs);
  }
  std::printf("%-24s %15lld  (%.4f G)\n", "total", detail.total,
              static_cast<double>(detail.total) / 1e9);
}

int cmd_run(const std::string& config_path, long seed_override,
            const std::string& out_override, int threads_override) {
  ExperimentConfig cfg = load_config_file(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (threads_override > 0) cfg.threads = threads_override;

  const int generations = cfg.evolution.generations;
  const RunResult result = run_experiment(cfg, [&](const MetricsRecord& rec) {
    const IndividualLog& best =
        rec.individuals[static_cast<std::size_t>(rec.best_index)];
    const IndividualLog& knee =
        rec.individuals[static_cast<std::size_t>(rec.knee_index)];
    long front = 0;
    for (const IndividualLog& ind : rec.individuals) {
      if (ind.rank == 0) ++front;
    }
    std::printf(
        "gen %3lld/%d  best err=%.4f macs=%lld  knee err=%.4f macs=%lld  "
        "front=%ld  up=%ld down=%ld  %.2fs\n",
        static_cast<long long>(rec.generation), generations, best.test_error,
        best.macs, knee.test_error, knee.macs, front, rec.uploads,
        rec.master_downloads, rec.wall_seconds);
    std::fflush(stdout);
  });
  std::printf("wrote %s\n", result.metrics_path.c_str());
  std::printf("wrote %s\n", result.front_path.c_str());
  std::printf("wrote %s\n", result.checkpoint_path.c_str());
  std::printf("wrote %s\n", result.timings_path.c_str());
  return 0;
}

int cmd_macs(const std::string& config_path, const std::string& key_string,
             bool resnet18) {
  if (resnet18) {
    print_mac_table(count_macs_resnet18_detail());
    return 0;
  }
  if (key_string.empty()) {
    throw ConfigError("macs needs either --key or --resnet18");
  }
  SupernetSpec spec = SupernetSpec::cifar10();
  if (!config_path.empty()) spec = load_config_file(config_path).supernet;
  spec.validate();
  const ChoiceKey key = key_from_string(key_string);
  print_mac_table(count_macs_detail(spec, key));
  return 0;
}

int cmd_partition(const std::string& config_path) {
  const ExperimentConfig cfg = load_config_file(config_path);
  cfg.validate();
  const auto shards = make_client_shards(cfg);
  const int classes = shards.empty() ? 0 : shards.front().train.class_count;
  std::printf("%-8s %8s %8s  train class histogram\n", "client", "n_train",
              "n_test");
  for (const ClientShard& shard : shards) {
    std::printf("%-8d %8ld %8ld  [", shard.client_id, shard.n_train(),
                shard.n_test());
    const auto hist = shard.train.label_histogram();
    for (int c = 0; c < classes; ++c) {
      std::printf("%s%ld", c ? " " : "", hist[static_cast<std::size_t>(c)]);
    }
    std::printf("]\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated evolutionary architecture search simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, key_string;
  long seed_override = -1;
  int threads = 0;
  bool resnet18 = false;

  CLI::App* run = app.add_subcommand("run", "Run an experiment from a config file");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed_override, "Override the config seed");
  run->add_option("--out", out_dir, "Override the output directory");
  run->add_option("--threads", threads, "Worker threads (0 = auto)");

  CLI::App* macs = app.add_subcommand("macs", "Print the MAC table for a choice key");
  macs->add_option("--config", config_path,
                   "Config supplying the supernet (defaults to the CIFAR-10 master)");
  macs->add_option("--key", key_string, "Choice key, e.g. 1,0,2,2,1,3,2,1,3,0,3,0");
  macs->add_flag("--resnet18", resnet18, "Print the ResNet18 baseline instead");

  CLI::App* partition = app.add_subcommand("partition", "Dump client shard statistics");
  partition->add_option("--config", config_path, "Experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, seed_override, out_dir, threads);
    if (macs->parsed()) return cmd_macs(config_path, key_string, resnet18);
    if (partition->parsed()) return cmd_partition(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
