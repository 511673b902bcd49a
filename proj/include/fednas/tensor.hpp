#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fednas/errors.hpp"

namespace fednas {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s)
      : shape(std::move(s)), data(numel_of(shape), 0.0) {}

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (const int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (const double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    if (!same_shape(other)) throw StructuralError("tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
    return *this;
  }

  Tensor& axpy(double a, const Tensor& other) {
    if (!same_shape(other)) throw StructuralError("tensor shape mismatch in axpy");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += a * other.data[i];
    return *this;
  }

  Tensor& operator*=(double a) {
    for (double& v : data) v *= a;
    return *this;
  }
};

}  // namespace fednas
