#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fgn/common.hpp"

namespace fgn {

// Row-major dense float64 tensor.  Rank is the length of `shape`; most ops in
// this library work on rank-1 and rank-2 tensors.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t;
    int64_t n = check_shape(shape);
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(n), 0.0);
    return t;
  }

  static Tensor filled(std::vector<int64_t> shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<double> values) {
    int64_t n = check_shape(shape);
    if (static_cast<size_t>(n) != values.size())
      throw ContractViolation("tensor: shape wants " + std::to_string(n) + " values, got " +
                              std::to_string(values.size()));
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    if (!t.all_finite()) throw ContractViolation("tensor: non-finite value in constructor");
    return t;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const {
    if (rank() == 1) return 1;
    return rank() >= 2 ? shape[1] : 0;
  }

  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }

 private:
  static int64_t check_shape(const std::vector<int64_t>& shape) {
    if (shape.empty()) throw ContractViolation("tensor: empty shape");
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw ContractViolation("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }
};

}  // namespace fgn
