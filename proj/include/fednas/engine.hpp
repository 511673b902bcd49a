#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fednas/errors.hpp"
#include "fednas/nn.hpp"
#include "fednas/supernet.hpp"

namespace fednas {

// Forward pass over a batch. Batch statistics drive the normalization layers
// in both modes, so train and eval are numerically identical.
inline Tensor forward(SubModel& model, const Batch& batch, Mode mode) {
  if (batch.inputs.shape.size() != 4 ||
      batch.inputs.dim(1) != model.spec.in_channels ||
      batch.inputs.dim(2) != model.spec.in_height ||
      batch.inputs.dim(3) != model.spec.in_width) {
    throw StructuralError("batch input shape does not match the model input shape");
  }
  if (static_cast<std::size_t>(batch.inputs.dim(0)) != batch.labels.size()) {
    throw StructuralError("batch label count does not match input count");
  }
  Tensor logits = model.run(batch.inputs, mode);
  if (!logits.all_finite()) throw NumericError("non-finite activation in forward pass");
  return logits;
}

// Mean softmax cross-entropy and its gradients for every trainable parameter
// of the sub-model. Gradients are left in the model's grad buffers.
inline double loss_and_grads(SubModel& model, const Batch& batch) {
  model.zero_grads();
  Tensor logits = forward(model, batch, Mode::train);
  auto [loss, dlogits] = softmax_cross_entropy(logits, batch.labels);
  model.net->backward(dlogits);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  return loss;
}

// SGD with classical momentum. The learning rate decays per communication
// round: eta_t = eta0 * gamma^t.
struct OptimizerState {
  double eta0 = 0.1;
  double mu = 0.5;
  double gamma = 0.995;
  std::int64_t round = 0;
  std::map<std::string, Tensor> velocity;

  double learning_rate() const {
    return eta0 * std::pow(gamma, static_cast<double>(round));
  }
};

// v <- mu*v + g; theta <- theta - eta_t*v
inline void sgd_step(const std::vector<ParamRef>& params, OptimizerState& state) {
  const double eta = state.learning_rate();
  for (const ParamRef& p : params) {
    if (!p.grad->all_finite()) {
      throw NumericError("non-finite gradient for " + p.path);
    }
    auto [it, inserted] = state.velocity.try_emplace(p.path, Tensor::zeros(p.value->shape));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      v.data[i] = state.mu * v.data[i] + p.grad->data[i];
      p.value->data[i] -= eta * v.data[i];
    }
  }
}

// Copy rows [start, start+count) into a batch.
inline Batch slice_batch(const Tensor& images, const std::vector<int>& labels,
                         std::size_t start, std::size_t count) {
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t row = static_cast<std::size_t>(c) * h * w;
  Batch batch;
  batch.inputs = Tensor({static_cast<int>(count), c, h, w});
  std::copy_n(&images.data[start * row], count * row, batch.inputs.data.data());
  batch.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(start),
                      labels.begin() + static_cast<std::ptrdiff_t>(start + count));
  return batch;
}

// Copy an arbitrary index selection into a batch.
inline Batch gather_batch(const Tensor& images, const std::vector<int>& labels,
                          const std::vector<int>& indices) {
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t row = static_cast<std::size_t>(c) * h * w;
  Batch batch;
  batch.inputs = Tensor({static_cast<int>(indices.size()), c, h, w});
  batch.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = static_cast<std::size_t>(indices[i]);
    std::copy_n(&images.data[src * row], row, &batch.inputs.data[i * row]);
    batch.labels.push_back(labels[src]);
  }
  return batch;
}

// Fraction of misclassified samples, evaluated in fixed order with the given
// batch size (the last batch may be smaller). Ties in the argmax resolve to
// the lowest class index.
inline double classification_error(SubModel& model, const Tensor& images,
                                   const std::vector<int>& labels, int batch_size) {
  const std::size_t total = labels.size();
  if (total == 0) throw DataError("cannot evaluate on an empty set");
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < total; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count =
        std::min(static_cast<std::size_t>(batch_size), total - start);
    Batch batch = slice_batch(images, labels, start, count);
    const Tensor logits = forward(model, batch, Mode::eval);
    const int classes = logits.dim(1);
    for (std::size_t n = 0; n < count; ++n) {
      const double* zp = &logits.data[n * static_cast<std::size_t>(classes)];
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (zp[c] > zp[best]) best = c;
      }
      if (best != batch.labels[n]) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

}  // namespace fednas
