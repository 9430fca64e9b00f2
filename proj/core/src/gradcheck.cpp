#include "egd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "egd/error.hpp"

namespace egd {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

GradCheckReport finite_diff_check(const std::function<double()>& loss, std::vector<CheckedParam> params, double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw Error("numerics", "finite difference step must lie in [1e-6, 1e-4]");
  auto eval = [&]() {
    const double f = loss();
    if (!std::isfinite(f)) throw Error("numerics", "finite_diff_check: loss is not finite");
    return f;
  };
  eval();

  GradCheckReport report;
  double total = 0.0;
  for (const CheckedParam& p : params) {
    if (!p.value || !p.analytic || p.value->size() != p.analytic->size()) {
      throw Error("numerics", "finite_diff_check: analytic gradient missing or mis-shaped for " + p.name);
    }
    ParamCheckSummary s;
    s.name = p.name;
    s.count = p.value->size();
    double sum = 0.0;
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      double& theta = (*p.value)[i];
      const double saved = theta;
      theta = saved + h;
      const double up = eval();
      theta = saved - h;
      const double down = eval();
      theta = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = (*p.analytic)[i];
      const double err = relative_error(analytic, numeric);
      sum += err;
      if (i == 0 || err > s.max_rel_error) {
        s.max_rel_error = err;
        s.worst_index = i;
        s.worst_analytic = analytic;
        s.worst_numeric = numeric;
      }
    }
    s.mean_rel_error = s.count ? sum / static_cast<double>(s.count) : 0.0;
    total += sum;
    report.checked += s.count;
    if (report.worst_param.empty() || s.max_rel_error > report.max_rel_error) {
      report.max_rel_error = s.max_rel_error;
      report.worst_param = s.name;
    }
    report.params.push_back(std::move(s));
  }
  report.mean_rel_error = report.checked ? total / static_cast<double>(report.checked) : 0.0;
  return report;
}

}  // namespace egd
