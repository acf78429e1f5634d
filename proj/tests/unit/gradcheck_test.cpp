#include <gtest/gtest.h>

#include <random>

#include "advmtl/gradcheck.hpp"
#include "advmtl/gradcheck_suite.hpp"
#include "test_support.hpp"

using namespace advmtl;
using testing_support::random_tensor;

TEST(GradCheck, QuadraticSelfTest) {
  std::mt19937_64 rng(1);
  Parameter p("p", random_tensor({3, 2}, rng));
  std::vector<Parameter*> params{&p};
  auto report = finite_difference_check(
      [&](Tape& t) { return sum(square(add_scalar(t.parameter(p), 0.5))); }, params);
  EXPECT_TRUE(report.passed);
  EXPECT_LE(report.max_rel_error, 1e-6);
  EXPECT_EQ(report.coordinates, 6u);
}

TEST(GradCheck, ConstantFunction) {
  Parameter p("p", Tensor::vector({1, 2, 3}));
  std::vector<Parameter*> params{&p};
  auto report = finite_difference_check(
      [&](Tape& t) {
        auto v = t.parameter(p);
        return add_scalar(scale(sum(v), 0.0), 3.0);
      },
      params);
  EXPECT_TRUE(report.passed);
  EXPECT_DOUBLE_EQ(report.worst_analytic, 0.0);
  EXPECT_DOUBLE_EQ(report.worst_numeric, 0.0);
}

TEST(GradCheck, PreservesExistingGradients) {
  Parameter p("p", Tensor::vector({1, 2}));
  p.grad = Tensor::vector({7, 8});
  std::vector<Parameter*> params{&p};
  finite_difference_check([&](Tape& t) { return sum(square(t.parameter(p))); }, params);
  EXPECT_EQ(p.grad, Tensor::vector({7, 8}));
}

TEST(GradCheck, DetectsWrongGradient) {
  Parameter p("p", Tensor::vector({1.5, -0.5}));
  std::vector<Parameter*> params{&p};
  // Backward claims d/dx x^2 = 3x.
  auto report = finite_difference_check(
      [&](Tape& t) {
        auto x = t.parameter(p);
        auto y = t.record("bad_square", {x}, square(detach(x)).value(), [](BackwardContext& c) {
          auto* g = c.grad_in(0);
          for (std::size_t i = 0; i < g->size(); ++i)
            (*g)[i] += 3.0 * c.value_in(0)[i] * c.grad_out()[i];
        });
        return sum(y);
      },
      params);
  EXPECT_FALSE(report.passed);
  EXPECT_NEAR(report.max_rel_error, 0.2, 1e-6);
}

// With the reversal directly on the parameter the analytic gradient is the
// plain one negated, i.e. the derivative of the negated functional.
TEST(GradCheck, ReversalAgainstSignFlippedReference) {
  std::mt19937_64 rng(4);
  Parameter p("p", random_tensor({2, 3}, rng));
  Parameter q("q", random_tensor({3, 2}, rng));
  std::vector<Parameter*> params{&p};
  auto analytic = [&](Tape& t) {
    auto h = grad_reverse(t.parameter(p), 1.0);
    return sum(square(matmul(h, t.parameter(q))));
  };
  auto reference = [&](Tape& t) {
    return scale(sum(square(matmul(t.parameter(p), t.parameter(q)))), -1.0);
  };
  EXPECT_TRUE(finite_difference_check(analytic, reference, params).passed);
  // Against its own forward map the reversed gradient has the wrong sign.
  EXPECT_FALSE(finite_difference_check(analytic, params).passed);
}

TEST(GradcheckSuite, AllEntriesPass) {
  auto report = run_gradcheck_suite({});
  EXPECT_TRUE(report.passed);
  bool has_composed = false, has_grl = false;
  for (const auto& e : report.entries) {
    EXPECT_TRUE(e.report.passed) << e.name << " rel " << e.report.max_rel_error;
    EXPECT_LE(e.report.max_rel_error, 1e-4) << e.name;
    has_composed |= e.name == "total_loss.composed";
    has_grl |= e.name == "grad_reverse";
  }
  EXPECT_TRUE(has_composed);
  EXPECT_TRUE(has_grl);
}

TEST(GradcheckSuite, PassesForOtherSeeds) {
  for (std::uint64_t seed : {2u, 3u}) {
    GradcheckSuiteConfig cfg;
    cfg.seed = seed;
    EXPECT_TRUE(run_gradcheck_suite(cfg).passed) << "seed " << seed;
  }
}

TEST(GradcheckSuite, FaultInjectionFails) {
  GradcheckSuiteConfig cfg;
  cfg.fault_injection = true;
  auto report = run_gradcheck_suite(cfg);
  EXPECT_FALSE(report.passed);
  std::size_t failed = 0;
  for (const auto& e : report.entries) failed += e.report.passed ? 0 : 1;
  EXPECT_EQ(failed, 1u);
}
