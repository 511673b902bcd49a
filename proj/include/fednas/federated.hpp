#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fednas/codec.hpp"
#include "fednas/dataset.hpp"
#include "fednas/engine.hpp"
#include "fednas/errors.hpp"
#include "fednas/parallel.hpp"
#include "fednas/rng.hpp"
#include "fednas/supernet.hpp"

namespace fednas {

// One client's private data. Shards across clients are pairwise disjoint.
struct ClientShard {
  int client_id = 0;
  Dataset train;
  Dataset test;

  long n_train() const { return train.size(); }
  long n_test() const { return test.size(); }
};

// A trained sub-model coming back from a client.
struct Upload {
  int client_id = 0;
  ChoiceKey key;
  std::map<std::string, Tensor> params;
  long n_k = 0;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [path, tensor] : params) n += tensor.numel();
    return n;
  }
};

// Disjoint client groups for one generation: group g trains individual g's
// sub-model. Every group has exactly floor(m/N) members; the remaining
// clients train nothing this round but still participate in evaluation.
struct ClientGroups {
  std::vector<std::vector<int>> groups;
  std::vector<int> leftover;
  int group_size = 0;
};

inline ClientGroups sample_clients(int m, int population, Rng& rng) {
  if (population < 1) throw ConfigError("population must be >= 1");
  if (m < population) {
    throw ConfigError("need at least as many participating clients (" +
                      std::to_string(m) + ") as individuals (" +
                      std::to_string(population) + ")");
  }
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  ClientGroups plan;
  plan.group_size = m / population;
  plan.groups.resize(static_cast<std::size_t>(population));
  std::size_t pos = 0;
  for (int g = 0; g < population; ++g) {
    plan.groups[static_cast<std::size_t>(g)].assign(
        perm.begin() + static_cast<std::ptrdiff_t>(pos),
        perm.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(plan.group_size)));
    pos += static_cast<std::size_t>(plan.group_size);
  }
  plan.leftover.assign(perm.begin() + static_cast<std::ptrdiff_t>(pos), perm.end());
  return plan;
}

// Per-generation assignment of a sub-model and a client group per individual.
struct RoundPlan {
  std::int64_t generation = 0;
  std::vector<ChoiceKey> keys;
  ClientGroups clients;
};

// E passes of mini-batch SGD over the shard's training set. The sub-model is
// updated in place and its final parameters are returned as the upload; the
// master store is never touched.
inline Upload local_update(const ClientShard& shard, SubModel& model, int epochs,
                           int batch_size, OptimizerState optimizer, Rng& rng) {
  if (shard.n_train() == 0) throw DataError("client shard has no training data");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(shard.n_train()));
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(batch_size)) {
      const std::size_t count =
          std::min(static_cast<std::size_t>(batch_size), order.size() - start);
      const std::vector<int> indices(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(start + count));
      const Batch batch = gather_batch(shard.train.images, shard.train.labels, indices);
      loss_and_grads(model, batch);
      sgd_step(model.params, optimizer);
    }
  }
  Upload up;
  up.client_id = shard.client_id;
  up.key = model.key;
  up.params = model.param_values();
  up.n_k = shard.n_train();
  return up;
}

namespace detail {

// "block{i}/b{b}/..." -> (block, branch); anything else is a shared layer.
inline std::optional<std::pair<int, int>> parse_choice_path(const std::string& path) {
  if (path.rfind("block", 0) != 0) return std::nullopt;
  std::size_t pos = 5;
  int block = 0;
  bool any = false;
  while (pos < path.size() && path[pos] >= '0' && path[pos] <= '9') {
    block = block * 10 + (path[pos] - '0');
    ++pos;
    any = true;
  }
  if (!any || pos + 2 >= path.size() || path[pos] != '/' || path[pos + 1] != 'b') {
    return std::nullopt;
  }
  pos += 2;
  int branch = 0;
  any = false;
  while (pos < path.size() && path[pos] >= '0' && path[pos] <= '9') {
    branch = branch * 10 + (path[pos] - '0');
    ++pos;
    any = true;
  }
  if (!any || pos >= path.size() || path[pos] != '/') return std::nullopt;
  return std::make_pair(block, branch);
}

// An upload must carry exactly the master paths its key selects: every shared
// layer plus the chosen branch of each choice block.
inline void validate_upload(const ParameterStore& master, const Upload& up) {
  std::size_t expected = 0;
  for (const auto& [path, tensor] : master.params) {
    const auto choice = parse_choice_path(path);
    if (choice) {
      const auto [block, branch] = *choice;
      if (block >= static_cast<int>(up.key.size())) {
        throw StructuralError("upload key is too short for " + path);
      }
      if (up.key[static_cast<std::size_t>(block)] != branch) continue;
    }
    ++expected;
    const auto it = up.params.find(path);
    if (it == up.params.end()) {
      throw StructuralError("upload from client " + std::to_string(up.client_id) +
                            " is missing parameter " + path);
    }
    if (it->second.shape != tensor.shape) {
      throw StructuralError("upload shape mismatch at " + path);
    }
  }
  if (expected != up.params.size()) {
    throw StructuralError("upload from client " + std::to_string(up.client_id) +
                          " carries parameters outside its choice key");
  }
}

}  // namespace detail

// Fill-in aggregation: every upload is conceptually reconstructed into a full
// master by substituting branches it did not train with the previous round's
// weights, then all reconstructions are averaged with weights n_k/n. Branches
// trained by no upload stay bitwise identical to the previous round.
inline ParameterStore aggregate_fillin(const ParameterStore& prev,
                                       const std::vector<Upload>& uploads) {
  if (uploads.empty()) throw StructuralError("aggregate_fillin needs at least one upload");
  long n = 0;
  for (const Upload& up : uploads) {
    detail::validate_upload(prev, up);
    n += up.n_k;
  }
  if (n <= 0) throw DataError("total sample count across uploads must be positive");

  std::vector<double> weight;
  weight.reserve(uploads.size());
  for (const Upload& up : uploads) {
    weight.push_back(static_cast<double>(up.n_k) / static_cast<double>(n));
  }

  ParameterStore next;
  next.spec = prev.spec;
  next.round = prev.round;
  for (const auto& [path, prev_tensor] : prev.params) {
    const auto choice = detail::parse_choice_path(path);
    if (!choice) {
      // Shared layer: every upload carries it.
      Tensor acc = Tensor::zeros(prev_tensor.shape);
      for (std::size_t k = 0; k < uploads.size(); ++k) {
        acc.axpy(weight[k], uploads[k].params.at(path));
      }
      next.params.emplace(path, std::move(acc));
      continue;
    }
    const auto [block, branch] = *choice;
    double trained_weight = 0.0;
    Tensor acc = Tensor::zeros(prev_tensor.shape);
    for (std::size_t k = 0; k < uploads.size(); ++k) {
      if (uploads[k].key[static_cast<std::size_t>(block)] == branch) {
        acc.axpy(weight[k], uploads[k].params.at(path));
        trained_weight += weight[k];
      }
    }
    if (trained_weight == 0.0) {
      next.params.emplace(path, prev_tensor);  // untouched branch
    } else {
      // Fill-in coefficient: the weights of the non-training uploads sum to
      // exactly 1 - trained_weight.
      if (trained_weight < 1.0) acc.axpy(1.0 - trained_weight, prev_tensor);
      next.params.emplace(path, std::move(acc));
    }
  }
  return next;
}

// Plain FedAvg over structurally identical uploads: a weighted average by
// n_k/n of every uploaded tensor; parameters not covered by the uploads keep
// their previous values.
inline ParameterStore aggregate_fedavg(const ParameterStore& prev,
                                       const std::vector<Upload>& uploads) {
  if (uploads.empty()) throw StructuralError("aggregate_fedavg needs at least one upload");
  const Upload& first = uploads.front();
  long n = 0;
  for (const Upload& up : uploads) {
    if (up.params.size() != first.params.size()) {
      throw StructuralError("uploads are not structurally identical");
    }
    for (const auto& [path, tensor] : up.params) {
      const auto it = first.params.find(path);
      if (it == first.params.end() || it->second.shape != tensor.shape) {
        throw StructuralError("uploads are not structurally identical at " + path);
      }
    }
    n += up.n_k;
  }
  if (n <= 0) throw DataError("total sample count across uploads must be positive");

  ParameterStore next = prev;
  for (const auto& [path, tensor] : first.params) {
    const auto it = next.params.find(path);
    if (it == next.params.end() || it->second.shape != tensor.shape) {
      throw StructuralError("upload does not match the store at " + path);
    }
    Tensor acc = Tensor::zeros(tensor.shape);
    for (std::size_t k = 0; k < uploads.size(); ++k) {
      acc.axpy(static_cast<double>(uploads[k].n_k) / static_cast<double>(n),
               uploads[k].params.at(path));
    }
    it->second = std::move(acc);
  }
  return next;
}

struct EvalResult {
  double test_error = 0.0;
  long long macs = 0;
};

// Every client evaluates every sub-model on its local test shard; the server
// combines the errors weighted by local test counts. Clients with empty test
// shards contribute weight zero.
inline std::vector<EvalResult> evaluate_population(
    const ParameterStore& master, const std::vector<ChoiceKey>& keys,
    const std::vector<const ClientShard*>& clients, int test_batch,
    int threads = 1) {
  long n_test = 0;
  for (const ClientShard* shard : clients) n_test += shard->n_test();
  if (n_test <= 0) throw DataError("no test data across participating clients");

  std::vector<EvalResult> results(keys.size());
  parallel_for(keys.size(), threads, [&](std::size_t i) {
    SubModel model = extract_submodel(master, keys[i]);
    double err = 0.0;
    for (const ClientShard* shard : clients) {
      if (shard->n_test() == 0) continue;
      const double local = classification_error(model, shard->test.images,
                                                shard->test.labels, test_batch);
      err += local * static_cast<double>(shard->n_test()) / static_cast<double>(n_test);
    }
    results[i].test_error = err;
    results[i].macs = count_macs(master.spec, keys[i]);
  });
  return results;
}

}  // namespace fednas
