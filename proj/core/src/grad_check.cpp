#include "flexidepth/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flexidepth/errors.hpp"

namespace flexidepth {

namespace {

double finite_value(const Tensor& loss, const char* where) {
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericError(std::string("grad_check: non-finite loss at ") + where);
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  finite_value(loss, "base point");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = finite_value(loss_fn(), "+h probe");
      values[i] = saved - options.step;
      const double minus = finite_value(loss_fn(), "-h probe");
      values[i] = saved;

      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.n_checked;
      if (rel > report.max_rel_error || report.n_checked == 1) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        if (rel >= report.max_rel_error) {
          report.worst_param = pi;
          report.worst_index = i;
          report.analytic = a;
          report.numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace flexidepth
