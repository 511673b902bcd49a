#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fednas/codec.hpp"
#include "fednas/dataset.hpp"
#include "fednas/engine.hpp"
#include "fednas/errors.hpp"
#include "fednas/federated.hpp"
#include "fednas/metrics.hpp"
#include "fednas/nsga2.hpp"
#include "fednas/parallel.hpp"
#include "fednas/rng.hpp"
#include "fednas/supernet.hpp"

namespace fednas {

struct EvoConfig {
  int population = 10;
  int generations = 500;
  double crossover_prob = 0.9;
  double mutation_prob = 0.1;
  int bits_per_choice = 2;

  void validate() const {
    if (population < 1) throw ConfigError("population must be >= 1");
    if (generations < 1) throw ConfigError("generations must be >= 1");
    if (crossover_prob < 0.0 || crossover_prob > 1.0 || mutation_prob < 0.0 ||
        mutation_prob > 1.0) {
      throw ConfigError("probabilities must lie in [0, 1]");
    }
    if (bits_per_choice != kBitsPerChoice) {
      throw ConfigError("bits_per_choice must be 2 (four branches per block)");
    }
  }
};

struct FederatedConfig {
  int clients = 10;            // K
  double participation = 1.0;  // C
  int local_epochs = 1;        // E
  int train_batch = 50;
  int test_batch = 100;
  double learning_rate = 0.1;  // eta_0
  double momentum = 0.5;
  double lr_decay = 0.995;     // gamma, applied per communication round

  void validate() const {
    if (clients < 1) throw ConfigError("clients must be >= 1");
    if (participation <= 0.0 || participation > 1.0) {
      throw ConfigError("participation must lie in (0, 1]");
    }
    if (local_epochs < 0) throw ConfigError("local_epochs must be >= 0");
    if (train_batch < 1 || test_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (lr_decay <= 0.0 || lr_decay > 1.0) throw ConfigError("lr_decay must lie in (0, 1]");
  }
};

struct SyntheticDataConfig {
  int classes = 4;
  long train_samples = 480;
  long test_samples = 240;
  int channels = 1;
  int height = 8;
  int width = 8;
  double noise = 0.0;
};

struct DataConfig {
  enum class Kind { synthetic, cifar10 };
  Kind kind = Kind::synthetic;
  std::string path;  // CIFAR-10 batch directory
  PartitionSpec partition;
  SyntheticDataConfig synthetic;
};

enum class RunMode { realtime, reinit_offspring };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  RunMode mode = RunMode::realtime;
  std::string output_dir = "out";
  int threads = 0;  // 0 = hardware concurrency
  SupernetSpec supernet = SupernetSpec::cifar10();
  EvoConfig evolution;
  FederatedConfig federated;
  DataConfig data;

  void validate() const {
    supernet.validate();
    evolution.validate();
    federated.validate();
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (data.kind == DataConfig::Kind::synthetic) {
      if (data.synthetic.classes != supernet.class_count) {
        throw ConfigError("synthetic classes must match the supernet class_count");
      }
      if (data.synthetic.channels != supernet.in_channels ||
          data.synthetic.height != supernet.in_height ||
          data.synthetic.width != supernet.in_width) {
        throw ConfigError("synthetic image shape must match the supernet input shape");
      }
    } else {
      if (data.path.empty()) throw ConfigError("cifar10 data requires a path");
      if (supernet.in_channels != 3 || supernet.in_height != 32 ||
          supernet.in_width != 32 || supernet.class_count != 10) {
        throw ConfigError("cifar10 requires input shape (3,32,32) and 10 classes");
      }
    }
    if (data.partition.mode == PartitionSpec::Mode::noniid &&
        data.partition.classes_per_client > supernet.class_count) {
      throw ConfigError("classes_per_client exceeds class_count");
    }
  }

  int participating_clients() const {
    const long m = std::llround(federated.participation * federated.clients);
    return static_cast<int>(std::clamp(m, 1L, static_cast<long>(federated.clients)));
  }
};

// ---------------------------------------------------------------------------
// Config file parsing (JSON). Missing fields keep their defaults; the seed is
// mandatory.
// ---------------------------------------------------------------------------

namespace cfgdetail {

using nlohmann::json;

template <class T>
void maybe(const json& j, const char* field, T& out) {
  if (j.contains(field)) out = j.at(field).get<T>();
}

inline void parse_supernet(const json& j, SupernetSpec& spec) {
  if (j.contains("input_shape")) {
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw ConfigError("input_shape must be [C, H, W]");
    spec.in_channels = shape[0];
    spec.in_height = shape[1];
    spec.in_width = shape[2];
  }
  maybe(j, "stem_channels", spec.stem_channels);
  if (j.contains("stage_channels")) {
    spec.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  }
  if (j.contains("reduction_positions")) {
    const auto red = j.at("reduction_positions").get<std::vector<int>>();
    spec.reduction_positions = std::set<int>(red.begin(), red.end());
  }
  maybe(j, "class_count", spec.class_count);
  maybe(j, "expansion_factor", spec.expansion_factor);
}

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  if (!j.contains("seed")) throw ConfigError("config is missing the mandatory seed");
  cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("mode")) {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "realtime") {
      cfg.mode = RunMode::realtime;
    } else if (mode == "reinit_offspring") {
      cfg.mode = RunMode::reinit_offspring;
    } else {
      throw ConfigError("mode must be 'realtime' or 'reinit_offspring'");
    }
  }
  maybe(j, "output_dir", cfg.output_dir);
  maybe(j, "threads", cfg.threads);
  if (j.contains("supernet")) parse_supernet(j.at("supernet"), cfg.supernet);
  if (j.contains("evolution")) {
    const json& e = j.at("evolution");
    maybe(e, "population", cfg.evolution.population);
    maybe(e, "generations", cfg.evolution.generations);
    maybe(e, "crossover_prob", cfg.evolution.crossover_prob);
    maybe(e, "mutation_prob", cfg.evolution.mutation_prob);
    maybe(e, "bits_per_choice", cfg.evolution.bits_per_choice);
  }
  if (j.contains("federated")) {
    const json& f = j.at("federated");
    maybe(f, "clients", cfg.federated.clients);
    maybe(f, "participation", cfg.federated.participation);
    maybe(f, "local_epochs", cfg.federated.local_epochs);
    maybe(f, "train_batch", cfg.federated.train_batch);
    maybe(f, "test_batch", cfg.federated.test_batch);
    maybe(f, "learning_rate", cfg.federated.learning_rate);
    maybe(f, "momentum", cfg.federated.momentum);
    maybe(f, "lr_decay", cfg.federated.lr_decay);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    if (d.contains("kind")) {
      const auto kind = d.at("kind").get<std::string>();
      if (kind == "synthetic") {
        cfg.data.kind = DataConfig::Kind::synthetic;
      } else if (kind == "cifar10") {
        cfg.data.kind = DataConfig::Kind::cifar10;
      } else {
        throw ConfigError("data kind must be 'synthetic' or 'cifar10'");
      }
    }
    maybe(d, "path", cfg.data.path);
    if (d.contains("partition")) {
      const auto mode = d.at("partition").get<std::string>();
      if (mode == "iid") {
        cfg.data.partition.mode = PartitionSpec::Mode::iid;
      } else if (mode == "noniid") {
        cfg.data.partition.mode = PartitionSpec::Mode::noniid;
      } else {
        throw ConfigError("partition must be 'iid' or 'noniid'");
      }
    }
    maybe(d, "classes_per_client", cfg.data.partition.classes_per_client);
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      maybe(s, "classes", cfg.data.synthetic.classes);
      maybe(s, "train_samples", cfg.data.synthetic.train_samples);
      maybe(s, "test_samples", cfg.data.synthetic.test_samples);
      if (s.contains("shape")) {
        const auto shape = s.at("shape").get<std::vector<int>>();
        if (shape.size() != 3) throw ConfigError("synthetic shape must be [C, H, W]");
        cfg.data.synthetic.channels = shape[0];
        cfg.data.synthetic.height = shape[1];
        cfg.data.synthetic.width = shape[2];
      }
      maybe(s, "noise", cfg.data.synthetic.noise);
    }
  }
  cfg.data.partition.client_count = cfg.federated.clients;
  return cfg;
}

}  // namespace cfgdetail

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid JSON in " + path + ": " + e.what());
  }
  try {
    return cfgdetail::parse_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config value in " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Data preparation. For the non-IID mode, train and test sets share one class
// assignment so that a client's evaluation weights mirror its training data.
// ---------------------------------------------------------------------------

inline std::vector<ClientShard> make_client_shards(const ExperimentConfig& cfg) {
  Dataset train, test;
  if (cfg.data.kind == DataConfig::Kind::synthetic) {
    SyntheticSpec spec;
    spec.class_count = cfg.data.synthetic.classes;
    spec.channels = cfg.data.synthetic.channels;
    spec.height = cfg.data.synthetic.height;
    spec.width = cfg.data.synthetic.width;
    spec.noise = cfg.data.synthetic.noise;
    spec.samples = cfg.data.synthetic.train_samples;
    Rng train_rng = substream(cfg.seed, "data/train");
    train = synthetic_dataset(spec, train_rng);
    spec.samples = cfg.data.synthetic.test_samples;
    Rng test_rng = substream(cfg.seed, "data/test");
    test = synthetic_dataset(spec, test_rng);
  } else {
    std::tie(train, test) = load_cifar10(cfg.data.path);
  }

  const int clients = cfg.federated.clients;
  std::vector<std::vector<int>> train_idx, test_idx;
  Rng train_rng = substream(cfg.seed, "partition/train");
  Rng test_rng = substream(cfg.seed, "partition/test");
  if (cfg.data.partition.mode == PartitionSpec::Mode::iid) {
    train_idx = partition_iid_indices(train.size(), clients, train_rng);
    test_idx = partition_iid_indices(test.size(), clients, test_rng);
  } else {
    Rng assign_rng = substream(cfg.seed, "partition/assign");
    const auto assignment = draw_noniid_assignment(
        clients, cfg.data.partition.classes_per_client, train.class_count, assign_rng);
    train_idx = partition_noniid_indices(train, assignment, train_rng);
    test_idx = partition_noniid_indices(test, assignment, test_rng);
  }

  std::vector<ClientShard> shards;
  shards.reserve(static_cast<std::size_t>(clients));
  for (int k = 0; k < clients; ++k) {
    ClientShard shard;
    shard.client_id = k;
    shard.train = train.subset(train_idx[static_cast<std::size_t>(k)]);
    shard.test = test.subset(test_idx[static_cast<std::size_t>(k)]);
    shards.push_back(std::move(shard));
  }
  return shards;
}

// Stream names used by the generation loop. Kept in helpers so that tests can
// reproduce the exact schedule.
namespace streams {

inline std::string variation(std::int64_t t) {
  return "variation/t" + std::to_string(t);
}
inline std::string participants(std::int64_t t) {
  return "participants/t" + std::to_string(t);
}
inline std::string groups(std::int64_t t, const char* phase) {
  return "groups/t" + std::to_string(t) + "/" + phase;
}
inline std::string batching(std::int64_t t, const char* phase, int client) {
  return "batch/t" + std::to_string(t) + "/" + phase + "/client" +
         std::to_string(client);
}
inline std::string reinit(std::int64_t t, int individual) {
  return "reinit/t" + std::to_string(t) + "/ind" + std::to_string(individual);
}

}  // namespace streams

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<IndividualLog> final_front;
  ParameterStore master;
  std::vector<Genome> final_parents;
  std::string metrics_path;
  std::string front_path;
  std::string checkpoint_path;
  std::string timings_path;
};

namespace rundetail {

inline nlohmann::json individual_to_json(const IndividualLog& ind) {
  nlohmann::json j;
  j["key"] = key_to_string(ind.key);
  j["genome"] = genome_to_string(ind.genome);
  j["error"] = ind.test_error;
  j["macs"] = ind.macs;
  j["rank"] = ind.rank;
  if (std::isinf(ind.crowding)) {
    j["crowding"] = "inf";
  } else {
    j["crowding"] = ind.crowding;
  }
  return j;
}

inline std::string record_to_json_line(const MetricsRecord& rec) {
  nlohmann::json j;
  j["generation"] = rec.generation;
  nlohmann::json inds = nlohmann::json::array();
  for (const IndividualLog& ind : rec.individuals) {
    inds.push_back(individual_to_json(ind));
  }
  j["individuals"] = std::move(inds);
  j["best"] = individual_to_json(rec.individuals[static_cast<std::size_t>(rec.best_index)]);
  j["knee"] = individual_to_json(rec.individuals[static_cast<std::size_t>(rec.knee_index)]);
  j["aggregations"] = rec.aggregations;
  j["uploads"] = rec.uploads;
  j["master_downloads"] = rec.master_downloads;
  j["bytes_uploaded"] = rec.bytes_uploaded;
  j["bytes_downloaded"] = rec.bytes_downloaded;
  return j.dump();
}

}  // namespace rundetail

// The per-generation loop: variation, double sampling (sub-model per
// individual, disjoint client group per individual), local training, fill-in
// aggregation, population evaluation and environmental selection. Parents are
// trained only at the first generation; afterwards each generation performs
// exactly one aggregation of the offspring uploads.
inline RunResult run_experiment(
    const ExperimentConfig& cfg,
    const std::function<void(const MetricsRecord&)>& on_generation = {}) {
  cfg.validate();
  const SupernetSpec& spec = cfg.supernet;
  const int population = cfg.evolution.population;
  const int m = cfg.participating_clients();
  if (m < population) {
    throw ConfigError("participating clients (" + std::to_string(m) +
                      ") must be >= population (" + std::to_string(population) + ")");
  }

  const std::vector<ClientShard> shards = make_client_shards(cfg);
  Rng init_rng = substream(cfg.seed, "init");
  ParameterStore master = build_master(spec, init_rng);
  const long long master_bytes =
      static_cast<long long>(master.param_count()) * static_cast<long long>(sizeof(double));
  const long long key_bytes = spec.block_count();  // one byte per branch index

  Rng key_rng = substream(cfg.seed, "keys");
  std::vector<Genome> parents;
  parents.reserve(static_cast<std::size_t>(population));
  for (int j = 0; j < population; ++j) {
    parents.push_back(encode(random_key(spec.block_count(), key_rng)));
  }

  std::filesystem::create_directories(cfg.output_dir);
  const auto out_path = [&](const char* name) {
    return (std::filesystem::path(cfg.output_dir) / name).string();
  };
  RunResult result;
  result.metrics_path = out_path("metrics.jsonl");
  result.front_path = out_path("front.csv");
  result.checkpoint_path = out_path("checkpoint.bin");
  result.timings_path = out_path("timings.txt");
  std::ofstream metrics_out(result.metrics_path);
  std::ofstream timings_out(result.timings_path);
  if (!metrics_out || !timings_out) {
    throw IoError("cannot open output files under " + cfg.output_dir);
  }

  std::vector<int> all_clients(static_cast<std::size_t>(cfg.federated.clients));
  std::iota(all_clients.begin(), all_clients.end(), 0);

  for (std::int64_t t = 1; t <= cfg.evolution.generations; ++t) {
    const auto t_start = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.generation = t;
    try {

      Rng var_rng = substream(cfg.seed, streams::variation(t));
      const std::vector<Genome> offspring = variation(
          parents, cfg.evolution.crossover_prob, cfg.evolution.mutation_prob, var_rng);

      std::vector<ChoiceKey> combined_keys;
      combined_keys.reserve(2 * static_cast<std::size_t>(population));
      for (const Genome& g : parents) combined_keys.push_back(decode(g));
      for (const Genome& g : offspring) combined_keys.push_back(decode(g));

      // Participant selection for this round (all clients when C = 1).
      std::vector<int> participant_ids = all_clients;
      if (m < cfg.federated.clients) {
        Rng part_rng = substream(cfg.seed, streams::participants(t));
        part_rng.shuffle(participant_ids);
        participant_ids.resize(static_cast<std::size_t>(m));
      }

      const auto train_phase = [&](const std::vector<Genome>& genomes,
                                   const char* phase, bool reinit) {
        Rng group_rng = substream(cfg.seed, streams::groups(t, phase));
        RoundPlan plan;
        plan.generation = t;
        for (const Genome& g : genomes) plan.keys.push_back(decode(g));
        plan.clients = sample_clients(m, population, group_rng);
        struct Task {
          int individual;
          int client;
        };
        std::vector<Task> tasks;
        for (int g = 0; g < population; ++g) {
          for (const int member : plan.clients.groups[static_cast<std::size_t>(g)]) {
            tasks.push_back({g, participant_ids[static_cast<std::size_t>(member)]});
          }
        }
        std::vector<Upload> uploads(tasks.size());
        parallel_for(tasks.size(), cfg.threads, [&](std::size_t i) {
          const Task& task = tasks[i];
          const ChoiceKey& key = plan.keys[static_cast<std::size_t>(task.individual)];
          SubModel model;
          if (reinit) {
            Rng reinit_rng = substream(cfg.seed, streams::reinit(t, task.individual));
            model = fresh_submodel(spec, key, reinit_rng);
          } else {
            model = extract_submodel(master, key);
          }
          OptimizerState opt;
          opt.eta0 = cfg.federated.learning_rate;
          opt.mu = cfg.federated.momentum;
          opt.gamma = cfg.federated.lr_decay;
          opt.round = t;
          Rng batch_rng = substream(cfg.seed, streams::batching(t, phase, task.client));
          uploads[i] = local_update(shards[static_cast<std::size_t>(task.client)], model,
                                    cfg.federated.local_epochs, cfg.federated.train_batch,
                                    std::move(opt), batch_rng);
        });

        rec.uploads += static_cast<long>(uploads.size());
        for (const Upload& up : uploads) {
          rec.bytes_uploaded +=
              static_cast<long long>(up.param_count()) * static_cast<long long>(sizeof(double));
        }
        // Training downloads: sub-model parameters only at the first round
        // (afterwards clients sample the master they already hold for
        // evaluation), plus the offspring choice key.
        for (const Task& task : tasks) {
          const ChoiceKey& key = plan.keys[static_cast<std::size_t>(task.individual)];
          long long down = 0;
          if (t == 1) {
            std::size_t params = 0;
            for (const ParamDef& def : submodel_param_defs(spec, key)) {
              params += Tensor::numel_of(def.shape);
            }
            down += static_cast<long long>(params) * static_cast<long long>(sizeof(double));
          }
          if (std::string(phase) == "offspring") down += key_bytes;
          rec.bytes_downloaded += down;
        }

        master = aggregate_fillin(master, uploads);
        rec.aggregations += 1;
      };

      if (t == 1) train_phase(parents, "parents", false);
      train_phase(offspring, "offspring", cfg.mode == RunMode::reinit_offspring);

      // Fitness evaluation: every participating client downloads the master
      // once, plus the 2N choice keys, and evaluates every sub-model locally.
      std::vector<const ClientShard*> participants;
      participants.reserve(participant_ids.size());
      for (const int id : participant_ids) {
        participants.push_back(&shards[static_cast<std::size_t>(id)]);
      }
      const std::vector<EvalResult> eval = evaluate_population(
          master, combined_keys, participants, cfg.federated.test_batch, cfg.threads);
      rec.master_downloads = static_cast<long>(participants.size());
      rec.bytes_downloaded += static_cast<long long>(participants.size()) *
                              (master_bytes + 2 * population * key_bytes);

      std::vector<Individual> combined(2 * static_cast<std::size_t>(population));
      for (std::size_t i = 0; i < combined.size(); ++i) {
        combined[i].genome = i < static_cast<std::size_t>(population)
                                 ? parents[i]
                                 : offspring[i - static_cast<std::size_t>(population)];
        combined[i].objectives = {eval[i].test_error, static_cast<double>(eval[i].macs)};
      }
      const std::vector<int> selected = environmental_select(combined, population);

      rec.individuals.reserve(combined.size());
      for (std::size_t i = 0; i < combined.size(); ++i) {
        IndividualLog log;
        log.key = combined_keys[i];
        log.genome = combined[i].genome;
        log.test_error = eval[i].test_error;
        log.macs = eval[i].macs;
        log.rank = combined[i].rank;
        log.crowding = combined[i].crowding;
        rec.individuals.push_back(std::move(log));
      }

      rec.best_index = 0;
      for (std::size_t i = 1; i < rec.individuals.size(); ++i) {
        const IndividualLog& a = rec.individuals[i];
        const IndividualLog& b = rec.individuals[static_cast<std::size_t>(rec.best_index)];
        if (a.test_error < b.test_error ||
            (a.test_error == b.test_error &&
             (a.macs < b.macs || (a.macs == b.macs && a.genome < b.genome)))) {
          rec.best_index = static_cast<int>(i);
        }
      }

      std::vector<std::size_t> front0;
      std::vector<Objectives> front0_objs;
      for (std::size_t i = 0; i < combined.size(); ++i) {
        if (combined[i].rank == 0) {
          front0.push_back(i);
          front0_objs.push_back(combined[i].objectives);
        }
      }
      rec.knee_index = static_cast<int>(front0[select_knee(front0_objs)]);

      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

      metrics_out << rundetail::record_to_json_line(rec) << "\n";
      metrics_out.flush();
      timings_out << "generation " << t << " seconds "
                  << detail::format_double(rec.wall_seconds) << "\n";
      timings_out.flush();
      if (on_generation) on_generation(rec);

      if (t == cfg.evolution.generations) {
        for (const std::size_t i : front0) {
          result.final_front.push_back(rec.individuals[i]);
        }
      }

      std::vector<Genome> next_parents;
      next_parents.reserve(static_cast<std::size_t>(population));
      for (const int idx : selected) {
        next_parents.push_back(combined[static_cast<std::size_t>(idx)].genome);
      }
      parents = std::move(next_parents);
      master.round = t;
      result.records.push_back(std::move(rec));

    } catch (const std::exception& e) {
      // Record the failing generation before aborting the run.
      nlohmann::json j;
      j["generation"] = t;
      j["aborted"] = e.what();
      metrics_out << j.dump() << "\n";
      metrics_out.flush();
      throw;
    }
  }

  export_front(result.final_front, result.front_path);
  save_checkpoint(master, result.checkpoint_path);
  result.master = std::move(master);
  result.final_parents = std::move(parents);
  return result;
}

}  // namespace fednas
