#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "advmtl/autodiff.hpp"

namespace advmtl {

/// Builds a scalar loss on a fresh tape. Must read parameters through
/// Tape::parameter() so perturbations are observed.
using ScalarGraph = std::function<Var(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

/// |a - n| / max(1e-5, |a| + |n|). Central differences at h = 1e-5 carry
/// about ulp(f) / 2h ~ 1e-10 of rounding noise; the floor keeps coordinates
/// whose true gradient is exactly zero from reading as large relative errors.
double gradient_relative_error(double analytic, double numeric) noexcept;

/// Compares backward() gradients with central differences
/// (f(theta+h) - f(theta-h)) / 2h on every coordinate of `params`.
/// Existing parameter gradients are preserved.
GradCheckReport finite_difference_check(const ScalarGraph& f, std::span<Parameter* const> params,
                                        double h = 1e-5, double tol = 1e-4);

/// Same comparison, but the reference derivative is taken from a second
/// graph. Used where the backward rule is deliberately not the derivative of
/// the forward map (gradient reversal): `numeric` is then the functional whose
/// true gradient the reversed backward must reproduce.
GradCheckReport finite_difference_check(const ScalarGraph& analytic, const ScalarGraph& numeric,
                                        std::span<Parameter* const> params, double h = 1e-5,
                                        double tol = 1e-4);

}  // namespace advmtl
