#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lomt {

int shape_numel(const std::vector<int>& shape);

/// Dense row-major tensor of doubles.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(shape_numel(shape), 0.0) {}

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double value);
  static Tensor scalar(double value);
  static Tensor from(std::vector<int> s, std::vector<double> data);

  int numel() const { return (int)v.size(); }
  int rank() const { return (int)shape.size(); }
  int dim(int i) const { return shape[(size_t)i]; }

  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }

  /// Value of a single-element tensor.
  double item() const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

}  // namespace lomt
