#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rvgtree/common.hpp"

namespace rvg {

// Dense 64-bit tensor with a same-shape gradient accumulator.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s)
      : shape(std::move(s)),
        value(static_cast<std::size_t>(numel(shape)), 0.0),
        grad(static_cast<std::size_t>(numel(shape)), 0.0) {}

  static long long numel(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d <= 0) throw DataError("tensor dimension must be positive");
      n *= d;
    }
    return n;
  }

  long long size() const { return static_cast<long long>(value.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  void fill(double v) { std::fill(value.begin(), value.end(), v); }

  bool finite() const {
    for (double v : value)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string("non-finite value produced by ") + what);
}

}  // namespace rvg
