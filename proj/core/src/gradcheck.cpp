#include "advmtl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace advmtl {

double gradient_relative_error(double analytic, double numeric) noexcept {
  return std::abs(analytic - numeric) / std::max(1e-5, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport finite_difference_check(const ScalarGraph& f, std::span<Parameter* const> params,
                                        double h, double tol) {
  return finite_difference_check(f, f, params, h, tol);
}

GradCheckReport finite_difference_check(const ScalarGraph& f, const ScalarGraph& reference,
                                        std::span<Parameter* const> params, double h, double tol) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");

  std::vector<Tensor> saved;
  saved.reserve(params.size());
  for (auto* p : params) {
    saved.push_back(p->grad);
    p->grad = Tensor::zeros_like(p->value);
  }
  {
    Tape tape;
    tape.backward(f(tape));
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    analytic.push_back(params[k]->grad);
    params[k]->grad = std::move(saved[k]);
  }

  auto evaluate = [&reference] {
    Tape tape;
    return reference(tape).value().item();
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k]->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + h;
      const double fp = evaluate();
      value[i] = orig - h;
      const double fm = evaluate();
      value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = gradient_relative_error(a, numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_parameter = params[k]->name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace advmtl
