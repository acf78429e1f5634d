#include "advmtl/gradcheck_suite.hpp"

#include <random>

#include "advmtl/loss.hpp"
#include "advmtl/model.hpp"
#include "advmtl/train.hpp"

namespace advmtl {

namespace {

class Fixture {
 public:
  explicit Fixture(std::uint64_t seed) : rng_(seed) {}

  Tensor random(std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.values()) v = u(rng_);
    return t;
  }

  // Values bounded away from zero in magnitude, random sign.
  Tensor away_from_zero(std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t = random(std::move(shape), lo, hi);
    std::bernoulli_distribution flip(0.5);
    for (auto& v : t.values())
      if (flip(rng_)) v = -v;
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Contract a tensor-valued output to a scalar with fixed random weights so
// every output coordinate contributes a distinct amount.
Var contract(Var y, const Tensor& weights) {
  return sum(mul(y, y.tape().constant(weights)));
}

// Squares its input but claims a derivative of 2.2 x.
Var faulty_square(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= v;
  return x.tape().record("faulty_square", {x}, std::move(out), [](BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const auto& gy = ctx.grad_out();
      const auto& xv = ctx.value_in(0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.2 * xv[i] * gy[i];
    }
  });
}

}  // namespace

GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteConfig& config) {
  Fixture fx(config.seed);
  GradcheckSuiteReport suite;

  auto run2 = [&](std::string name, std::vector<Parameter*> params, const ScalarGraph& analytic,
                  const ScalarGraph& reference) {
    auto report = finite_difference_check(analytic, reference, params, config.h, config.tol);
    suite.passed = suite.passed && report.passed;
    suite.entries.push_back({std::move(name), std::move(report)});
  };
  auto run = [&](std::string name, std::vector<Parameter*> params, const ScalarGraph& f) {
    run2(std::move(name), std::move(params), f, f);
  };

  constexpr std::size_t b = 4, n = 5, m = 3;

  {
    Parameter x("x", fx.random({b, n}));
    const Tensor r = fx.random({b, n});
    // The reversed backward must equal the true derivative of -lambda * x.
    run2("grad_reverse", {&x},
         [&](Tape& t) { return contract(grad_reverse(t.parameter(x), 0.7), r); },
         [&](Tape& t) { return contract(scale(t.parameter(x), -0.7), r); });
  }
  {
    Parameter x("x", fx.random({b, n})), w("w", fx.random({n, m})), bias("bias", fx.random({m}));
    const Tensor r = fx.random({b, m});
    run("linear", {&x, &w, &bias}, [&](Tape& t) {
      return contract(linear(t.parameter(x), t.parameter(w), t.parameter(bias)), r);
    });
  }
  {
    Parameter a("a", fx.random({b, n})), c("b", fx.random({n, m}));
    const Tensor r = fx.random({b, m});
    run("matmul", {&a, &c}, [&](Tape& t) { return contract(matmul(t.parameter(a), t.parameter(c)), r); });
  }
  {
    Parameter a("a", fx.random({b, n})), c("b", fx.random({m, n}));
    const Tensor r = fx.random({b, m});
    run("matmul_nt", {&a, &c},
        [&](Tape& t) { return contract(matmul_nt(t.parameter(a), t.parameter(c)), r); });
  }
  {
    Parameter x("x", fx.away_from_zero({b, n}, 0.1, 1.0));
    const Tensor r = fx.random({b, n});
    run("leaky_relu", {&x}, [&](Tape& t) { return contract(leaky_relu(t.parameter(x), 0.01), r); });
  }
  {
    Parameter x("x", fx.random({b, n}, -3.0, 3.0));
    const Tensor r = fx.random({b, n});
    run("log_softmax", {&x}, [&](Tape& t) { return contract(log_softmax(t.parameter(x)), r); });
  }
  {
    Parameter a("a", fx.random({b, n})), c("b", fx.random({b, m}));
    const Tensor r = fx.random({b, n + m});
    run("concat", {&a, &c}, [&](Tape& t) { return contract(concat(t.parameter(a), t.parameter(c)), r); });
  }
  {
    Parameter x("x", fx.random({b, n})), gamma("gamma", fx.random({n}, 0.5, 1.5)),
        beta("beta", fx.random({n}));
    const Tensor r = fx.random({b, n});
    run("batch_norm_1d.train", {&x, &gamma, &beta}, [&](Tape& t) {
      BatchNormState state(n);
      return contract(batch_norm_1d(t.parameter(x), t.parameter(gamma), t.parameter(beta), state,
                                    Mode::kTrain),
                      r);
    });
    BatchNormState frozen(n);
    frozen.running_mean = fx.random({n});
    frozen.running_var = fx.random({n}, 0.5, 2.0);
    run("batch_norm_1d.eval", {&x, &gamma, &beta}, [&](Tape& t) {
      BatchNormState state = frozen;
      return contract(batch_norm_1d(t.parameter(x), t.parameter(gamma), t.parameter(beta), state,
                                    Mode::kEval),
                      r);
    });
  }
  {
    Parameter x("x", fx.random({b, n}));
    const Tensor r = fx.random({b, n});
    const auto seed = fx.rng()();
    run("dropout", {&x}, [&](Tape& t) {
      std::mt19937_64 mask_rng(seed);  // same mask on every evaluation
      return contract(dropout(t.parameter(x), 0.5, Mode::kTrain, mask_rng), r);
    });
  }
  {
    Parameter a("a", fx.random({b, n})), c("b", fx.away_from_zero({b, n}, 0.5, 1.5));
    const Tensor r = fx.random({b, n});
    run("add", {&a, &c}, [&](Tape& t) { return contract(add(t.parameter(a), t.parameter(c)), r); });
    run("sub", {&a, &c}, [&](Tape& t) { return contract(sub(t.parameter(a), t.parameter(c)), r); });
    run("mul", {&a, &c}, [&](Tape& t) { return contract(mul(t.parameter(a), t.parameter(c)), r); });
    run("div", {&a, &c}, [&](Tape& t) { return contract(div(t.parameter(a), t.parameter(c)), r); });
    run("scale", {&a}, [&](Tape& t) { return contract(scale(t.parameter(a), -1.7), r); });
    run("add_scalar", {&a}, [&](Tape& t) { return contract(add_scalar(t.parameter(a), 0.3), r); });
    run("square", {&a}, [&](Tape& t) { return contract(square(t.parameter(a)), r); });
    run("sum", {&a}, [&](Tape& t) { return scale(sum(t.parameter(a)), 0.9); });
    run("mean", {&a}, [&](Tape& t) { return scale(mean(t.parameter(a)), 1.3); });
  }
  {
    Parameter x("x", fx.random({b, n}, 0.5, 2.0));
    const Tensor r = fx.random({b, n});
    run("log", {&x}, [&](Tape& t) { return contract(log(t.parameter(x)), r); });
  }
  {
    Parameter x("x", fx.random({b, n}));
    const Tensor r = fx.random({b, n});
    run("l2_normalize_rows", {&x}, [&](Tape& t) { return contract(l2_normalize_rows(t.parameter(x)), r); });
    const std::vector<double> w{0.3, 1.0, 0.0, 0.75};
    run("scale_rows", {&x}, [&](Tape& t) { return contract(scale_rows(t.parameter(x), w), r); });
    const std::vector<int> labels{0, 4, 2, 2};
    const Tensor rs = fx.random({b, 1});
    run("select_columns", {&x}, [&](Tape& t) { return contract(select_columns(t.parameter(x), labels), rs); });
  }
  {
    Parameter x("x", fx.away_from_zero({b, n}, 0.2, 1.0));
    const Tensor r = fx.random({b, n});
    run("clamp_abs_min", {&x}, [&](Tape& t) { return contract(clamp_abs_min(t.parameter(x), 0.1), r); });
  }

  // Losses.
  {
    // Nearly collinear class weights keep s * cos away from saturation.
    Parameter emb("emb", fx.random({b, n})), w("w", fx.random({m, n}, -0.05, 0.05));
    const Tensor common = fx.random({n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) w.value[i * n + j] += common[j];
    const std::vector<int> labels{0, 2, 1, 2};
    run("am_softmax_loss", {&emb, &w}, [&](Tape& t) {
      return am_softmax_loss(l2_normalize_rows(t.parameter(emb)), l2_normalize_rows(t.parameter(w)),
                             labels, 0.2, 30.0);
    });
  }
  {
    Parameter x("x", fx.random({b, m}, -2.0, 2.0));
    const std::vector<int> labels{1, 0, 2, 1};
    const std::vector<int> partial{1, -1, -1, 0};
    run("cross_entropy", {&x}, [&](Tape& t) { return cross_entropy(log_softmax(t.parameter(x)), labels); });
    run("nll_label_smoothing", {&x},
        [&](Tape& t) { return nll_label_smoothing(log_softmax(t.parameter(x)), labels, 0.1); });
    run("discriminator_loss", {&x},
        [&](Tape& t) { return discriminator_loss(log_softmax(t.parameter(x)), partial, 0.1); });
  }
  {
    Parameter l1("l1", Tensor::scalar(1.7)), l2("l2", Tensor::scalar(0.4));
    Parameter c1("c1", Tensor::scalar(0.8)), c2("c2", Tensor::scalar(-1.3));
    run("auto_weighted_combine", {&l1, &l2, &c1, &c2}, [&](Tape& t) {
      const std::vector<WeightedTask> tasks{{t.parameter(l1), t.parameter(c1)},
                                            {t.parameter(l2), t.parameter(c2)}};
      return auto_weighted_combine(tasks);
    });
  }

  // The whole objective on a small concat assembly with every discriminator.
  {
    ModelConfig mc;
    mc.integration = Integration::kConcat;
    mc.view1_dim = 6;
    mc.view2_dim = 5;
    mc.extractor_e_hidden = {5};
    mc.extractor_e_out = 4;
    mc.extractor_r_hidden = {5};
    mc.extractor_r_out = 3;
    mc.head_hidden = {5};
    mc.disc_hidden = {4};
    mc.num_speakers = 3;
    mc.discriminators = DiscriminatorConfig::parse("ALL", 1.0);
    mc.seed = fx.rng()();
    NetworkAssembly net(mc);

    constexpr std::size_t rows = 6;
    Batch batch;
    batch.inputs.view1 = fx.random({rows, mc.view1_dim}, -2.0, 2.0);
    batch.inputs.view2 = fx.random({rows, mc.view2_dim}, -2.0, 2.0);
    batch.speakers = {0, 1, 2, 0, 1, 2};
    batch.groups = {0, 1, 2, 0, 1, 2};
    for (auto& s : batch.subgroups) s.assign(rows, -1);
    batch.subgroups[0][0] = 0;
    batch.subgroups[0][3] = 1;
    batch.subgroups[1][1] = 2;
    batch.subgroups[1][4] = 0;
    batch.subgroups[2][2] = 1;
    batch.subgroups[2][5] = 0;

    TrainConfig tc;
    const auto dropout_seed = fx.rng()();
    ForwardOptions opts;
    {
      // Attention is detached, so hold it at its base-point value.
      net.reseed_dropout(dropout_seed);
      Tape tape;
      opts.attention = net.forward(tape, batch.inputs, Mode::kTrain).attention;
    }
    auto total = [&](Tape& t) {
      net.reseed_dropout(dropout_seed);
      return compute_objective(net, t, batch, tc, Mode::kTrain, opts).terms.total;
    };
    // Reference functionals of the saddle point: upstream of the reversal
    // layer the discriminator terms enter with weight -lambda * alpha,
    // everywhere else with +alpha.
    auto saddle = [&](double disc_sign) {
      return [&, disc_sign](Tape& t) {
        net.reseed_dropout(dropout_seed);
        const auto r = compute_objective(net, t, batch, tc, Mode::kTrain, opts).terms.report;
        return t.constant(Tensor::scalar(r.main + disc_sign * r.alpha * r.discriminator_sum));
      };
    };
    std::vector<Parameter*> upstream, downstream;
    for (auto* p : net.parameters()) (p->name.rfind("gf.", 0) == 0 ? upstream : downstream).push_back(p);
    auto a = finite_difference_check(total, saddle(-net.lambda()), upstream, config.h, config.tol);
    auto d = finite_difference_check(total, saddle(1.0), downstream, config.h, config.tol);
    auto merged = a.max_rel_error >= d.max_rel_error ? a : d;
    merged.coordinates = a.coordinates + d.coordinates;
    merged.passed = a.passed && d.passed;
    suite.passed = suite.passed && merged.passed;
    suite.entries.push_back({"total_loss.composed", std::move(merged)});
  }

  if (config.fault_injection) {
    Parameter x("x", fx.random({b, n}));
    const Tensor r = fx.random({b, n});
    run("faulty_square", {&x}, [&](Tape& t) { return contract(faulty_square(t.parameter(x)), r); });
  }
  return suite;
}

}  // namespace advmtl
