#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rvgtree/tensor.hpp"

namespace rvg {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int flagged = 0;  // entries above tolerance
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool ok() const {
    for (const auto& e : entries)
      if (e.flagged > 0) return false;
    return true;
  }
  std::string summary() const {
    std::string s;
    for (const auto& e : entries) {
      s += e.name + ": max_rel_err=" + format_double(e.max_rel_err);
      if (e.flagged > 0) s += " FLAGGED(" + std::to_string(e.flagged) + ")";
      s += "\n";
    }
    return s;
  }
};

// Compares analytic gradients against central finite differences.
//
// `loss` must be deterministic (disable Gumbel noise, fix any sampled
// structure), must rebuild its tape from the current parameter values on
// every call, and must populate parameter grads as a side effect (grads are
// zeroed here before the analytic pass and ignored during the difference
// evaluations).
inline GradCheckReport check_gradients(
    const std::function<double()>& loss,
    const std::vector<std::pair<std::string, Tensor*>>& params,
    double eps = 1e-5, double tol = 1e-4) {
  if (eps <= 0.0) throw std::invalid_argument("check_gradients: eps must be positive");
  for (auto& [name, t] : params) t->zero_grad();
  double base = loss();
  if (!std::isfinite(base)) throw NumericError("check_gradients: non-finite loss");

  // Snapshot every analytic gradient now; the difference evaluations below
  // keep accumulating into the grad slots and would pollute later entries.
  std::vector<std::vector<double>> analytic_grads;
  analytic_grads.reserve(params.size());
  for (auto& [name, t] : params) analytic_grads.push_back(t->grad);

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].first;
    Tensor* t = params[p].second;
    GradCheckEntry entry;
    entry.name = name;
    const std::vector<double>& analytic = analytic_grads[p];
    for (std::size_t i = 0; i < t->value.size(); ++i) {
      double saved = t->value[i];
      t->value[i] = saved + eps;
      double up = loss();
      t->value[i] = saved - eps;
      double down = loss();
      t->value[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("check_gradients: non-finite loss during finite differences");
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = static_cast<int>(i);
        entry.analytic = a;
        entry.numeric = numeric;
      }
      if (rel > tol) ++entry.flagged;
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  for (auto& [name, t] : params) t->zero_grad();
  return report;
}

}  // namespace rvg
