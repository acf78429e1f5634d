#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "advmtl/autodiff.hpp"
#include "advmtl/tensor.hpp"
#include "test_support.hpp"

using namespace advmtl;
using testing_support::input_gradient;
using testing_support::random_tensor;

TEST(Tensor, ShapeAndRowsCols) {
  auto m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_DOUBLE_EQ(m.at(1, 2), 6.0);
  auto v = Tensor::vector({1, 2});
  EXPECT_EQ(v.rows(), 1u);
  EXPECT_EQ(v.cols(), 2u);
  EXPECT_THROW(v.item(), std::logic_error);
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
}

TEST(Tensor, RejectsValueCountMismatch) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, AllFinite) {
  auto t = Tensor::vector({1, 2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(GradReverse, ForwardIsIdentity) {
  Tape tape;
  auto y = grad_reverse(tape.constant(Tensor::vector({1.0, -2.0})), 1.0);
  EXPECT_EQ(y.value(), Tensor::vector({1.0, -2.0}));
}

TEST(GradReverse, BackwardNegatesAndScales) {
  const auto x = Tensor::vector({1.0, -2.0});
  const auto up = Tensor::vector({0.5, 0.5});
  auto g1 = input_gradient(x, up, [](Var v) { return grad_reverse(v, 1.0); });
  EXPECT_EQ(g1, Tensor::vector({-0.5, -0.5}));
  auto g0 = input_gradient(x, up, [](Var v) { return grad_reverse(v, 0.0); });
  EXPECT_DOUBLE_EQ(g0[0], 0.0);
  EXPECT_DOUBLE_EQ(g0[1], 0.0);
}

TEST(GradReverse, RejectsNegativeLambda) {
  Tape tape;
  EXPECT_THROW(grad_reverse(tape.constant(Tensor::vector({1.0})), -0.1), std::invalid_argument);
}

TEST(GradReverse, ForwardBitIdenticalOnRandomInputs) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 5}, rng, 100.0);
    Tape tape;
    EXPECT_EQ(grad_reverse(tape.constant(x), 0.37 * trial).value(), x);
  }
}

// For a random composed scalar, the gradient through grad_reverse(., lambda)
// equals -lambda times the gradient with the layer removed.
TEST(GradReverse, ReversalLawOnRandomGraphs) {
  std::mt19937_64 rng(11);
  for (double lambda : {0.0, 0.5, 1.0, 2.3}) {
    for (int trial = 0; trial < 5; ++trial) {
      Parameter w("w", random_tensor({3, 4}, rng));
      Parameter v("v", random_tensor({4, 2}, rng));
      const auto x = random_tensor({5, 3}, rng);
      auto run = [&](bool reversed) {
        w.zero_grad();
        v.zero_grad();
        Tape tape;
        auto h = leaky_relu(matmul(tape.constant(x), tape.parameter(w)));
        if (reversed) h = grad_reverse(h, lambda);
        auto out = log_softmax(matmul(h, tape.parameter(v)));
        tape.backward(sum(square(out)));
        return std::pair{w.grad, v.grad};
      };
      auto [gw_rev, gv_rev] = run(true);
      auto [gw_id, gv_id] = run(false);
      for (std::size_t i = 0; i < gw_rev.size(); ++i)
        EXPECT_NEAR(gw_rev[i], -lambda * gw_id[i], 1e-12);
      // Parameters downstream of the layer are unaffected.
      EXPECT_EQ(gv_rev, gv_id);
    }
  }
}

TEST(Linear, Examples) {
  Tape tape;
  auto y = linear(tape.constant(Tensor::matrix(1, 2, {1, 2})),
                  tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})),
                  tape.constant(Tensor::vector({0, 0})));
  EXPECT_EQ(y.value(), Tensor::matrix(1, 2, {1, 2}));

  Parameter w("w", Tensor::matrix(2, 1, {2, 3}));
  Tape tape2;
  auto y2 = linear(tape2.constant(Tensor::matrix(1, 2, {1, 1})), tape2.parameter(w),
                   tape2.constant(Tensor::vector({1})));
  EXPECT_DOUBLE_EQ(y2.value()[0], 6.0);
  tape2.backward(sum(y2));
  EXPECT_EQ(w.grad, Tensor::matrix(2, 1, {1, 1}));
}

TEST(Linear, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(linear(tape.constant(Tensor::matrix(1, 3, {1, 2, 3})),
                      tape.constant(Tensor::matrix(2, 1, {1, 1})),
                      tape.constant(Tensor::vector({0}))),
               std::invalid_argument);
}

TEST(LeakyRelu, Examples) {
  Tape tape;
  auto y = leaky_relu(tape.constant(Tensor::vector({2, -2})), 0.01);
  EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.value()[1], -0.02);
  Tape tape0;
  EXPECT_DOUBLE_EQ(leaky_relu(tape0.constant(Tensor::vector({0})), 0.3).value()[0], 0.0);

  auto g = input_gradient(Tensor::vector({2, -2}), Tensor::vector({1, 1}),
                          [](Var v) { return leaky_relu(v, 0.01); });
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 0.01);
}

TEST(LogSoftmax, Examples) {
  Tape tape;
  auto a = log_softmax(tape.constant(Tensor::matrix(1, 2, {0, 0})));
  EXPECT_NEAR(a.value()[0], -std::log(2.0), 1e-15);
  EXPECT_NEAR(a.value()[1], -std::log(2.0), 1e-15);
  auto b = log_softmax(tape.constant(Tensor::matrix(1, 3, {1, 1, 1})));
  for (double v : b.value().values()) EXPECT_NEAR(v, -std::log(3.0), 1e-15);
  auto c = log_softmax(tape.constant(Tensor::matrix(1, 2, {1000, 0})));
  EXPECT_TRUE(c.value().all_finite());
  EXPECT_NEAR(c.value()[0], 0.0, 1e-12);
  EXPECT_NEAR(c.value()[1], -1000.0, 1e-9);
}

TEST(LogSoftmax, RowsNormalizeUpToLargeMagnitudes) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({4, 6});
    for (auto& v : x.values()) v = u(rng);
    Tape tape;
    auto y = log_softmax(tape.constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) s += std::exp(y.value().at(r, c));
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LogSoftmax, ShiftInvariance) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 3}, rng);
  auto shifted = x;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) shifted.at(r, c) += 7.5 * static_cast<double>(r + 1);
  Tape tape;
  auto a = log_softmax(tape.constant(x)).value();
  auto b = log_softmax(tape.constant(shifted)).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Concat, Examples) {
  Tape tape;
  auto y = concat(tape.constant(Tensor::matrix(1, 1, {1})), tape.constant(Tensor::matrix(1, 1, {2})));
  EXPECT_EQ(y.value(), Tensor::matrix(1, 2, {1, 2}));
  Tape wide;
  auto z = concat(wide.constant(Tensor({1, 256})), wide.constant(Tensor({1, 512})));
  EXPECT_EQ(z.value().cols(), 768u);

  Parameter a("a", Tensor::matrix(1, 1, {1}));
  Parameter b("b", Tensor::matrix(1, 1, {2}));
  Tape t;
  auto out = concat(t.parameter(a), t.parameter(b));
  t.backward(sum(mul(out, t.constant(Tensor::matrix(1, 2, {3, 4})))));
  EXPECT_DOUBLE_EQ(a.grad[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad[0], 4.0);
}

TEST(BatchNorm, TrainUsesBiasedBatchVariance) {
  BatchNormState st(1);
  Tape tape;
  auto y = batch_norm_1d(tape.constant(Tensor::matrix(2, 1, {1, 3})),
                         tape.constant(Tensor::vector({1})), tape.constant(Tensor::vector({0})),
                         st, Mode::kTrain);
  // (x - 2) / sqrt(1 + eps)
  EXPECT_NEAR(y.value()[0], -1.0, 1e-5);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-5);
  EXPECT_NEAR(y.value()[0], -1.0 / std::sqrt(1.0 + st.eps), 1e-15);
}

TEST(BatchNorm, EvalWithIdentityStatsIsIdentity) {
  BatchNormState st(2);
  st.running_mean = Tensor::vector({0, 0});
  st.running_var = Tensor::vector({1, 1});
  st.eps = 0.0;
  const auto x = Tensor::matrix(2, 2, {1.5, -2, 3, 0.25});
  Tape tape;
  auto y = batch_norm_1d(tape.constant(x), tape.constant(Tensor::vector({1, 1})),
                         tape.constant(Tensor::vector({0, 0})), st, Mode::kEval);
  EXPECT_EQ(y.value(), x);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(9);
  BatchNormState st(3);
  Tape tape;
  auto y = batch_norm_1d(tape.constant(random_tensor({4, 3}, rng)),
                         tape.constant(Tensor::vector({0, 0, 0})),
                         tape.constant(Tensor::vector({0.5, -1, 2})), st, Mode::kTrain);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_DOUBLE_EQ(y.value().at(r, 0), 0.5);
    EXPECT_DOUBLE_EQ(y.value().at(r, 1), -1.0);
    EXPECT_DOUBLE_EQ(y.value().at(r, 2), 2.0);
  }
}

TEST(BatchNorm, TrainUpdatesRunningStats) {
  BatchNormState st(1);
  Tape tape;
  batch_norm_1d(tape.constant(Tensor::matrix(2, 1, {1, 3})), tape.constant(Tensor::vector({1})),
                tape.constant(Tensor::vector({0})), st, Mode::kTrain);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_GT(st.running_var[0], 0.9);
}

TEST(Dropout, EvalAndZeroRateAreIdentity) {
  std::mt19937_64 rng(1);
  std::mt19937_64 data_rng(2);
  auto x = random_tensor({3, 4}, data_rng);
  Tape tape;
  EXPECT_EQ(dropout(tape.constant(x), 0.5, Mode::kEval, rng).value(), x);
  EXPECT_EQ(dropout(tape.constant(x), 0.0, Mode::kTrain, rng).value(), x);
}

TEST(Dropout, SeededMaskScalesSurvivors) {
  auto run = [] {
    std::mt19937_64 rng(42);
    Tape tape;
    return dropout(tape.constant(Tensor::vector({1, 1, 1, 1})), 0.5, Mode::kTrain, rng).value();
  };
  auto a = run();
  for (double v : a.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
  EXPECT_EQ(a, run());
}

TEST(Backward, Examples) {
  Parameter x("x", Tensor::vector({1, 2, 3}));
  Tape tape;
  tape.backward(sum(tape.parameter(x)));
  EXPECT_EQ(x.grad, Tensor::vector({1, 1, 1}));

  Parameter y("y", Tensor::vector({1, 2}));
  Tape t2;
  t2.backward(sum(square(t2.parameter(y))));
  EXPECT_EQ(y.grad, Tensor::vector({2, 4}));
}

TEST(Backward, RepeatedCallsAccumulate) {
  Parameter y("y", Tensor::vector({1, 2}));
  Tape tape;
  auto loss = sum(square(tape.parameter(y)));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(y.grad, Tensor::vector({4, 8}));
  y.zero_grad();
  EXPECT_EQ(y.grad, Tensor::vector({0, 0}));
}

TEST(Backward, NonScalarLossThrows) {
  Parameter y("y", Tensor::vector({1, 2}));
  Tape tape;
  EXPECT_ANY_THROW(tape.backward(tape.parameter(y)));
}

TEST(Detach, BlocksGradient) {
  Parameter y("y", Tensor::vector({1, 2}));
  Tape tape;
  auto v = tape.parameter(y);
  tape.backward(sum(mul(detach(v), v)));
  EXPECT_EQ(y.grad, Tensor::vector({1, 2}));
}

TEST(Elementwise, ForwardValues) {
  Tape tape;
  auto a = tape.constant(Tensor::vector({1, 4}));
  auto b = tape.constant(Tensor::vector({2, 8}));
  EXPECT_EQ(add(a, b).value(), Tensor::vector({3, 12}));
  EXPECT_EQ(sub(a, b).value(), Tensor::vector({-1, -4}));
  EXPECT_EQ(mul(a, b).value(), Tensor::vector({2, 32}));
  EXPECT_EQ(div(a, b).value(), Tensor::vector({0.5, 0.5}));
  EXPECT_EQ(scale(a, -2).value(), Tensor::vector({-2, -8}));
  EXPECT_EQ(add_scalar(a, 1).value(), Tensor::vector({2, 5}));
  EXPECT_DOUBLE_EQ(mean(b).value().item(), 5.0);
  EXPECT_NEAR(log(a).value()[1], std::log(4.0), 1e-15);
  EXPECT_THROW(add(a, tape.constant(Tensor::vector({1, 2, 3}))), std::invalid_argument);
}

TEST(RowOps, NormalizeScaleSelectClamp) {
  Tape tape;
  auto x = tape.constant(Tensor::matrix(2, 2, {3, 4, 0, 2}));
  auto n = l2_normalize_rows(x).value();
  EXPECT_NEAR(n.at(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(n.at(0, 1), 0.8, 1e-15);
  EXPECT_NEAR(n.at(1, 1), 1.0, 1e-15);
  const std::vector<double> w{2.0, 0.0};
  EXPECT_EQ(scale_rows(x, w).value(), Tensor::matrix(2, 2, {6, 8, 0, 0}));
  const std::vector<int> labels{1, 0};
  EXPECT_EQ(select_columns(x, labels).value(), Tensor::matrix(2, 1, {4, 0}));
  auto c = clamp_abs_min(tape.constant(Tensor::vector({0.5, -1e-6, 2})), 1e-3).value();
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], -1e-3);
  EXPECT_DOUBLE_EQ(c[2], 2.0);
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor({6, 5}, rng);
    Parameter w("w", random_tensor({5, 4}, rng));
    Parameter b("b", random_tensor({4}, rng));
    Tape tape;
    std::mt19937_64 drop(5);
    auto h = dropout(leaky_relu(linear(tape.constant(x), tape.parameter(w), tape.parameter(b))),
                     0.5, Mode::kTrain, drop);
    auto y = log_softmax(h);
    tape.backward(sum(y));
    return std::pair{y.value(), w.grad};
  };
  EXPECT_EQ(run(), run());
}

TEST(RowOps, NormalizeSurvivesOverflowingSquares) {
  Tape tape;
  auto y = l2_normalize_rows(tape.constant(Tensor::matrix(1, 2, {1e300, -1e300})));
  EXPECT_NEAR(y.value()[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(y.value()[1], -1.0 / std::sqrt(2.0), 1e-15);
}
