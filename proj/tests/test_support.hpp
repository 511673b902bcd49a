#pragma once

// Shared fixtures and independent oracles for the test suite. Oracles here
// deliberately re-derive expected values by brute force instead of reusing
// the library's implementation paths.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fednas/codec.hpp"
#include "fednas/engine.hpp"
#include "fednas/federated.hpp"
#include "fednas/nsga2.hpp"
#include "fednas/supernet.hpp"

namespace testsupport {

// Small 4-block supernet for desk-scale runs: channels [8,8,16,16],
// reduction at block 2, single-channel 8x8 inputs, 4 classes.
inline fednas::SupernetSpec desk_spec(int expansion = 6) {
  fednas::SupernetSpec spec;
  spec.in_channels = 1;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.stem_channels = 8;
  spec.stage_channels = {8, 8, 16, 16};
  spec.reduction_positions = {2};
  spec.class_count = 4;
  spec.expansion_factor = expansion;
  return spec;
}

// Two-block supernet (one normal, one reduction) kept tiny for gradient
// checks: channels [3,6], 6x6 single-channel inputs.
inline fednas::SupernetSpec tiny_spec(int expansion = 2) {
  fednas::SupernetSpec spec;
  spec.in_channels = 1;
  spec.in_height = 6;
  spec.in_width = 6;
  spec.stem_channels = 3;
  spec.stage_channels = {3, 6};
  spec.reduction_positions = {1};
  spec.class_count = 3;
  spec.expansion_factor = expansion;
  return spec;
}

// Fresh temporary directory under the build tree.
inline std::string temp_dir(const std::string& tag) {
  static int counter = 0;
  const auto dir = std::filesystem::path("test_tmp") /
                   (tag + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

// --------------------------------------------------------------------------
// Central finite differences for every trainable parameter of a sub-model.
// --------------------------------------------------------------------------

struct GradCheckResult {
  double worst_abs = 0.0;
  double worst_rel = 0.0;
  std::string worst_path;
  bool ok = true;
};

inline GradCheckResult finite_difference_check(fednas::SubModel& model,
                                               const fednas::Batch& batch,
                                               double rel_tol = 1e-4,
                                               double abs_tol = 1e-7) {
  using namespace fednas;
  GradCheckResult result;
  loss_and_grads(model, batch);
  std::map<std::string, Tensor> analytic;
  for (const ParamRef& p : model.params) analytic.emplace(p.path, *p.grad);

  for (const ParamRef& p : model.params) {
    const Tensor& ga = analytic.at(p.path);
    for (std::size_t i = 0; i < p.value->numel(); ++i) {
      const double saved = p.value->data[i];
      const double h = 1e-6 * std::max(1.0, std::abs(saved));
      p.value->data[i] = saved + h;
      Tensor logits_p = forward(model, batch, Mode::train);
      const double loss_p = softmax_cross_entropy(logits_p, batch.labels).first;
      p.value->data[i] = saved - h;
      Tensor logits_m = forward(model, batch, Mode::train);
      const double loss_m = softmax_cross_entropy(logits_m, batch.labels).first;
      p.value->data[i] = saved;
      const double fd = (loss_p - loss_m) / (2.0 * h);
      const double diff = std::abs(ga.data[i] - fd);
      const double scale = std::max(std::abs(ga.data[i]), std::abs(fd));
      if (diff > std::max(abs_tol, rel_tol * scale)) {
        result.ok = false;
        if (diff > result.worst_abs) {
          result.worst_abs = diff;
          result.worst_rel = scale > 0 ? diff / scale : diff;
          result.worst_path = p.path;
        }
      }
    }
  }
  return result;
}

// --------------------------------------------------------------------------
// Brute-force dominance peeling: repeatedly remove the non-dominated set.
// --------------------------------------------------------------------------

inline std::vector<std::vector<int>> peel_fronts(
    const std::vector<fednas::Objectives>& objs) {
  std::vector<int> remaining(objs.size());
  for (std::size_t i = 0; i < objs.size(); ++i) remaining[i] = static_cast<int>(i);
  std::vector<std::vector<int>> fronts;
  while (!remaining.empty()) {
    std::vector<int> front, rest;
    for (const int p : remaining) {
      bool dominated = false;
      for (const int q : remaining) {
        if (p != q && fednas::dominates(objs[static_cast<std::size_t>(q)],
                                        objs[static_cast<std::size_t>(p)])) {
          dominated = true;
          break;
        }
      }
      (dominated ? rest : front).push_back(p);
    }
    fronts.push_back(std::move(front));
    remaining = std::move(rest);
  }
  return fronts;
}

// --------------------------------------------------------------------------
// Literal reconstruct-then-average aggregation oracle: every upload is
// expanded to a full master (missing pieces taken from the previous round),
// then the reconstructions are averaged with weights n_k/n.
// --------------------------------------------------------------------------

inline fednas::ParameterStore fillin_oracle(const fednas::ParameterStore& prev,
                                            const std::vector<fednas::Upload>& uploads) {
  using namespace fednas;
  long n = 0;
  for (const Upload& up : uploads) n += up.n_k;
  ParameterStore next;
  next.spec = prev.spec;
  next.round = prev.round;
  for (const auto& [path, prev_tensor] : prev.params) {
    Tensor acc = Tensor::zeros(prev_tensor.shape);
    for (const Upload& up : uploads) {
      const double w = static_cast<double>(up.n_k) / static_cast<double>(n);
      const auto it = up.params.find(path);
      const Tensor& source = it != up.params.end() ? it->second : prev_tensor;
      for (std::size_t i = 0; i < acc.data.size(); ++i) {
        acc.data[i] += w * source.data[i];
      }
    }
    next.params.emplace(path, std::move(acc));
  }
  return next;
}

inline double max_abs_diff(const fednas::ParameterStore& a,
                           const fednas::ParameterStore& b) {
  double worst = 0.0;
  for (const auto& [path, ta] : a.params) {
    const fednas::Tensor& tb = b.params.at(path);
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      worst = std::max(worst, std::abs(ta.data[i] - tb.data[i]));
    }
  }
  return worst;
}

inline bool bitwise_equal(const fednas::Tensor& a, const fednas::Tensor& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i] != b.data[i]) return false;
  }
  return true;
}

}  // namespace testsupport
