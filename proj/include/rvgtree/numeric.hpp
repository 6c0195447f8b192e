#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rvgtree/common.hpp"

namespace rvg {

inline constexpr double kL2NormEps = 1e-8;

// Max-subtracted softmax. mask, when given, marks entries that take part;
// masked-out entries are exactly zero in the output.
inline std::vector<double> softmax_values(
    const std::vector<double>& v, const std::vector<std::uint8_t>* mask = nullptr) {
  if (v.empty()) throw NumericError("softmax: empty support");
  if (mask && mask->size() != v.size())
    throw DataError("softmax: mask length mismatch");
  double mx = -HUGE_VAL;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!mask || (*mask)[i]) mx = std::max(mx, v[i]);
  if (mx == -HUGE_VAL) throw NumericError("softmax: empty support");
  std::vector<double> out(v.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

inline std::vector<double> log_softmax_values(const std::vector<double>& v) {
  if (v.empty()) throw NumericError("log_softmax: empty support");
  double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  double lz = mx + std::log(z);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lz;
  return out;
}

// Unit-normalized copy of v; vectors with norm <= kL2NormEps map to zero.
inline std::vector<double> l2_normalize_values(const std::vector<double>& v) {
  if (v.empty()) throw NumericError("l2_normalize: empty vector");
  double sq = 0.0;
  for (double x : v) sq += x * x;
  double n = std::sqrt(sq);
  std::vector<double> out(v.size(), 0.0);
  if (n <= kL2NormEps) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline int argmax_index(const std::vector<double>& v,
                        const std::vector<std::uint8_t>* mask = nullptr) {
  int best = -1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    if (best < 0 || v[i] > v[best]) best = static_cast<int>(i);
  }
  if (best < 0) throw NumericError("argmax: empty support");
  return best;
}

}  // namespace rvg
