#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "egd/tensor.hpp"

namespace egd {

// A parameter tensor together with the analytic gradient to be verified.
struct CheckedParam {
  std::string name;
  Tensor* value = nullptr;
  const Tensor* analytic = nullptr;
};

struct ParamCheckSummary {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheckSummary> params;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;

  bool passes(double tolerance) const { return max_rel_error < tolerance; }
};

// Relative error |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

// Central-difference check of every entry of every parameter. `loss` is
// re-evaluated at theta +/- h for each entry; parameter values are restored
// afterwards. Throws if the loss is not finite or h is outside [1e-6, 1e-4].
GradCheckReport finite_diff_check(const std::function<double()>& loss, std::vector<CheckedParam> params,
                                  double h = 1e-5);

}  // namespace egd
