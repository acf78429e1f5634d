#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advmtl/gradcheck.hpp"

namespace advmtl {

struct GradcheckSuiteConfig {
  double h = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 1;
  /// Adds a primitive with a deliberately wrong backward rule. Negative
  /// control for the harness; the suite must then fail.
  bool fault_injection = false;
};

struct GradcheckEntry {
  std::string name;
  GradCheckReport report;
};

struct GradcheckSuiteReport {
  std::vector<GradcheckEntry> entries;
  bool passed = true;
};

/// Every autodiff primitive, every loss, and the full composed objective of
/// a small concat assembly with all three discriminators.
GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteConfig& config = {});

}  // namespace advmtl
