#pragma once

// Central-difference verification of analytic gradients.
//
// For each element of each named parameter the numeric derivative
// (f(p+h) - f(p-h)) / 2h is compared against the tape gradient with relative
// error |a - n| / max(1, |a|, |n|). The callable must be a pure function of
// the parameter values: it is evaluated many times and must not mutate state.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ett/tensor.hpp"

namespace ett {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;

  bool passed(double tol) const { return max_rel_err < tol; }
};

// f builds a scalar loss from the current parameter values. It is invoked
// once under a tape for the analytic pass and twice per element without one.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double h = 1e-5, double tol = 1e-4) {
  (void)tol;
  for (auto& [name, p] : params) {
    if (!p.requires_grad())
      throw TensorError("grad_check: parameter '" + name + "' does not require grad");
  }

  std::vector<std::vector<double>> analytic;
  {
    for (auto& [name, p] : params) p.zero_grad();
    Tape tape;
    Tensor loss = f();
    if (loss.size() != 1) throw TensorError("grad_check: f must return a scalar");
    if (!std::isfinite(loss.item())) throw TensorError("grad_check: non-finite loss");
    tape.backward(loss);
    for (auto& [name, p] : params) analytic.push_back(p.grad_vector());
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].second;
    GradCheckEntry entry;
    entry.name = params[pi].first;
    double* vals = t.data();
    for (size_t i = 0; i < t.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      double fp = f().item();
      vals[i] = saved - h;
      double fm = f().item();
      vals[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw TensorError("grad_check: non-finite loss during perturbation");
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi][i];
      double rel = std::abs(a - numeric) /
                   std::max({1.0, std::abs(a), std::abs(numeric)});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ett
