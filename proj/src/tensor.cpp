#include "lomt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lomt {

int shape_numel(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= d;
  }
  if (n > (1ll << 31)) throw std::invalid_argument("tensor too large");
  return (int)n;
}

Tensor Tensor::full(std::vector<int> s, double value) {
  Tensor t(std::move(s));
  for (double& x : t.v) x = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t({1});
  t.v[0] = value;
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> data) {
  Tensor t;
  t.shape = std::move(s);
  if ((int)data.size() != shape_numel(t.shape))
    throw std::invalid_argument("tensor data size does not match shape");
  t.v = std::move(data);
  return t;
}

double Tensor::item() const {
  if (v.size() != 1) throw std::logic_error("item() on tensor with numel " + std::to_string(v.size()));
  return v[0];
}

bool Tensor::all_finite() const {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

}  // namespace lomt
