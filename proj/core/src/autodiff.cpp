#include "advmtl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace advmtl {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros_like(value)) {}

// ---------------------------------------------------------------------------
// Var / BackwardContext

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& BackwardContext::grad_out() const { return tape_.nodes_[output_].adjoint; }
const Tensor& BackwardContext::value_out() const { return tape_.nodes_[output_].value; }
const Tensor& BackwardContext::value_in(std::size_t i) const {
  return tape_.nodes_[inputs_[i]].value;
}

Tensor* BackwardContext::grad_in(std::size_t i) {
  const auto id = inputs_[i];
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return &tape_.adjoint(id);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (!p.grad.same_shape(p.value)) p.grad = Tensor::zeros_like(p.value);
  nodes_.push_back(Node{p.value, Tensor{}, true, &p});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, std::span<const Var> inputs, Tensor output,
                 BackwardRule rule) {
  Record rec{std::string(op), {}, 0, std::move(rule)};
  bool needs_grad = false;
  rec.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw std::logic_error("primitive '" + rec.op + "' mixes tapes");
    rec.inputs.push_back(v.id());
    needs_grad = needs_grad || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(output), Tensor{}, needs_grad, nullptr});
  rec.output = nodes_.size() - 1;
  records_.push_back(std::move(rec));
  return Var(this, records_.back().output);
}

Tensor& Tape::adjoint(std::size_t id) {
  auto& node = nodes_[id];
  if (node.adjoint.empty()) node.adjoint = Tensor::zeros_like(node.value);
  return node.adjoint;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  const auto& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(lv.shape()));
  }
  if (!std::isfinite(lv[0])) throw std::domain_error("backward: loss is not finite");

  for (auto& n : nodes_) n.adjoint = Tensor{};
  adjoint(loss.id()).fill(1.0);

  last_visits_ = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output > loss.id()) continue;
    const auto& out = nodes_[it->output];
    if (!out.requires_grad || out.adjoint.empty()) continue;
    BackwardContext ctx(*this, it->inputs, it->output);
    it->rule(ctx);
    ++last_visits_;
  }

  for (auto& n : nodes_) {
    if (n.param == nullptr || n.adjoint.empty()) continue;
    auto g = n.param->grad.values();
    auto a = n.adjoint.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
  }
}

void backward(Var loss) { loss.tape().backward(loss); }

// ---------------------------------------------------------------------------
// Helpers

namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.value().same_shape(b.value()), op,
          "shape mismatch " + dims(a.value()) + " vs " + dims(b.value()));
}

void require_matrix(const Var& v, const char* op) {
  require(v.value().rank() == 2, op, "expected a matrix, got " + dims(v.value()));
}

// out[n x m] += a[n x k] * b[k x m]
void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[n x m] += a[n x k] * b[m x k]^T
void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * m + j] += acc;
    }
  }
}

// out[k x m] += a[n x k]^T * b[n x m]
void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* orow = out + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename F>
Var elementwise_unary(const char* op, Var x, F&& forward, BackwardRule rule) {
  Tensor out = Tensor::zeros_like(x.value());
  const auto in = x.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = forward(in[i]);
  return x.tape().record(op, {x}, std::move(out), std::move(rule));
}

}  // namespace

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// Primitives

Var grad_reverse(Var x, double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), "grad_reverse",
          "lambda must be a finite nonnegative scalar");
  return x.tape().record("grad_reverse", {x}, x.value(), [lambda](BackwardContext& ctx) {
    if (auto* gx = ctx.grad_in(0)) {
      const auto g = ctx.grad_out().values();
      auto d = gx->values();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += -lambda * g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto n = a.value().rows(), k = a.value().cols(), m = b.value().cols();
  require(b.value().rows() == k, "matmul",
          "inner dimensions differ: " + dims(a.value()) + " * " + dims(b.value()));
  Tensor out({n, m});
  gemm_nn(a.value().data(), b.value().data(), out.data(), n, k, m);
  return a.tape().record("matmul", {a, b}, std::move(out), [n, k, m](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0)) gemm_nt(g.data(), ctx.value_in(1).data(), ga->data(), n, m, k);
    if (auto* gb = ctx.grad_in(1)) gemm_tn(ctx.value_in(0).data(), g.data(), gb->data(), n, k, m);
  });
}

Var matmul_nt(Var a, Var b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const auto n = a.value().rows(), k = a.value().cols(), m = b.value().rows();
  require(b.value().cols() == k, "matmul_nt",
          "inner dimensions differ: " + dims(a.value()) + " * " + dims(b.value()) + "^T");
  Tensor out({n, m});
  gemm_nt(a.value().data(), b.value().data(), out.data(), n, k, m);
  return a.tape().record("matmul_nt", {a, b}, std::move(out), [n, k, m](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    // da = g * b ; db = g^T * a
    if (auto* ga = ctx.grad_in(0)) gemm_nn(g.data(), ctx.value_in(1).data(), ga->data(), n, m, k);
    if (auto* gb = ctx.grad_in(1)) gemm_tn(g.data(), ctx.value_in(0).data(), gb->data(), n, m, k);
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const auto b = x.value().rows(), n = x.value().cols(), m = weight.value().cols();
  require(weight.value().rows() == n, "linear",
          "input width " + std::to_string(n) + " does not match weight " + dims(weight.value()));
  require(bias.value().rank() == 1 && bias.value().size() == m, "linear",
          "bias must have shape [" + std::to_string(m) + "], got " + dims(bias.value()));
  Tensor out({b, m});
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(bias.value().data(), m, out.data() + i * m);
  gemm_nn(x.value().data(), weight.value().data(), out.data(), b, n, m);
  return x.tape().record("linear", {x, weight, bias}, std::move(out),
                         [b, n, m](BackwardContext& ctx) {
                           const auto& g = ctx.grad_out();
                           if (auto* gx = ctx.grad_in(0))
                             gemm_nt(g.data(), ctx.value_in(1).data(), gx->data(), b, m, n);
                           if (auto* gw = ctx.grad_in(1))
                             gemm_tn(ctx.value_in(0).data(), g.data(), gw->data(), b, n, m);
                           if (auto* gb = ctx.grad_in(2)) {
                             for (std::size_t i = 0; i < b; ++i)
                               for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g[i * m + j];
                           }
                         });
}

Var leaky_relu(Var x, double slope) {
  require(slope > 0.0 && slope < 1.0, "leaky_relu", "slope must lie in (0,1)");
  return elementwise_unary(
      "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto xin = ctx.value_in(0).values();
          const auto g = ctx.grad_out().values();
          auto d = gx->values();
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += xin[i] > 0.0 ? g[i] : slope * g[i];
        }
      });
}

Var log_softmax(Var x) {
  const auto& xv = x.value();
  require(xv.rank() <= 2, "log_softmax", "expected a matrix, got " + dims(xv));
  const auto rows = xv.rows(), c = xv.cols();
  require(c >= 2, "log_softmax", "need at least two classes");
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return x.tape().record("log_softmax", {x}, std::move(out), [rows, c](BackwardContext& ctx) {
    auto* gx = ctx.grad_in(0);
    if (!gx) return;
    const auto& y = ctx.value_out();
    const auto& g = ctx.grad_out();
    for (std::size_t i = 0; i < rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*gx)[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
    }
  });
}

Var concat(Var a, Var b) {
  require_matrix(a, "concat");
  require_matrix(b, "concat");
  const auto rows = a.value().rows(), n = a.value().cols(), m = b.value().cols();
  require(b.value().rows() == rows, "concat",
          "batch dimensions differ: " + dims(a.value()) + " vs " + dims(b.value()));
  Tensor out({rows, n + m});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.value().data() + i * n, n, out.data() + i * (n + m));
    std::copy_n(b.value().data() + i * m, m, out.data() + i * (n + m) + n);
  }
  return a.tape().record("concat", {a, b}, std::move(out), [rows, n, m](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[i * (n + m) + j];
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)[i * m + j] += g[i * (n + m) + n + j];
  });
}

BatchNormState::BatchNormState(std::size_t features)
    : running_mean({features}), running_var(std::vector<std::size_t>{features}, std::vector<double>(features, 1.0)) {}

Var batch_norm_1d(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  require_matrix(x, "batch_norm_1d");
  const auto b = x.value().rows(), n = x.value().cols();
  require(gamma.value().size() == n && beta.value().size() == n, "batch_norm_1d",
          "gamma/beta must have " + std::to_string(n) + " entries");
  require(state.running_mean.size() == n && state.running_var.size() == n, "batch_norm_1d",
          "running statistics have the wrong width");
  const auto& xv = x.value();
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  Tensor out({b, n});
  std::vector<double> xhat(b * n), inv_std(n);

  if (mode == Mode::kTrain) {
    require(b >= 2, "batch_norm_1d", "train mode needs a batch of at least 2 rows");
    for (std::size_t j = 0; j < n; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < b; ++i) mu += xv[i * n + j];
      mu /= static_cast<double>(b);
      double var = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double d = xv[i * n + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(b);
      inv_std[j] = 1.0 / std::sqrt(var + state.eps);
      for (std::size_t i = 0; i < b; ++i) {
        xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[j];
        out[i * n + j] = gm[j] * xhat[i * n + j] + bt[j];
      }
      // Running variance uses the unbiased estimate, as PyTorch does.
      const double unbiased = var * static_cast<double>(b) / static_cast<double>(b - 1);
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu;
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
      for (std::size_t i = 0; i < b; ++i) {
        xhat[i * n + j] = (xv[i * n + j] - state.running_mean[j]) * inv_std[j];
        out[i * n + j] = gm[j] * xhat[i * n + j] + bt[j];
      }
    }
  }

  const bool train = mode == Mode::kTrain;
  return x.tape().record(
      train ? "batch_norm_1d.train" : "batch_norm_1d.eval", {x, gamma, beta}, std::move(out),
      [b, n, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardContext& ctx) {
        const auto& g = ctx.grad_out();
        const auto& gm = ctx.value_in(1);
        std::vector<double> gsum(n, 0.0), gxhat_sum(n, 0.0);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            gsum[j] += g[i * n + j];
            gxhat_sum[j] += g[i * n + j] * xhat[i * n + j];
          }
        if (auto* gg = ctx.grad_in(1))
          for (std::size_t j = 0; j < n; ++j) (*gg)[j] += gxhat_sum[j];
        if (auto* gb = ctx.grad_in(2))
          for (std::size_t j = 0; j < n; ++j) (*gb)[j] += gsum[j];
        if (auto* gx = ctx.grad_in(0)) {
          const double inv_b = 1.0 / static_cast<double>(b);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double gi = g[i * n + j];
              if (train) {
                (*gx)[i * n + j] += gm[j] * inv_std[j] *
                                    (gi - gsum[j] * inv_b - xhat[i * n + j] * gxhat_sum[j] * inv_b);
              } else {
                (*gx)[i * n + j] += gm[j] * inv_std[j] * gi;
              }
            }
        }
      });
}

Var dropout(Var x, double p, Mode mode, std::mt19937_64& rng) {
  require(p >= 0.0 && p < 1.0, "dropout", "rate must lie in [0,1)");
  if (mode == Mode::kEval || p == 0.0) {
    return x.tape().record("dropout.identity", {x}, x.value(), [](BackwardContext& ctx) {
      if (auto* gx = ctx.grad_in(0)) {
        const auto g = ctx.grad_out().values();
        auto d = gx->values();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = uniform01(rng) >= p ? keep_scale : 0.0;
  Tensor out = Tensor::zeros_like(x.value());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = x.value()[i] * mask[i];
  return x.tape().record("dropout", {x}, std::move(out),
                         [mask = std::move(mask)](BackwardContext& ctx) {
                           if (auto* gx = ctx.grad_in(0)) {
                             const auto g = ctx.grad_out().values();
                             auto d = gx->values();
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
                           }
                         });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record("add", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const auto g = ctx.grad_out().values();
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* gi = ctx.grad_in(k))
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record("sub", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const auto g = ctx.grad_out().values();
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record("mul", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const auto g = ctx.grad_out().values();
    const auto& av = ctx.value_in(0);
    const auto& bv = ctx.value_in(1);
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

Var div(Var a, Var b) {
  require_same_shape(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return a.tape().record("div", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const auto g = ctx.grad_out().values();
    const auto& av = ctx.value_in(0);
    const auto& bv = ctx.value_in(1);
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

Var scale(Var x, double c) {
  return elementwise_unary(
      "scale", x, [c](double v) { return c * v; },
      [c](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto g = ctx.grad_out().values();
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
        }
      });
}

Var add_scalar(Var x, double c) {
  return elementwise_unary(
      "add_scalar", x, [c](double v) { return v + c; },
      [](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto g = ctx.grad_out().values();
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        }
      });
}

Var square(Var x) {
  return elementwise_unary(
      "square", x, [](double v) { return v * v; },
      [](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto g = ctx.grad_out().values();
          const auto& xv = ctx.value_in(0);
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0 * xv[i] * g[i];
        }
      });
}

Var log(Var x) {
  return elementwise_unary(
      "log", x, [](double v) { return std::log(v); },
      [](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto g = ctx.grad_out().values();
          const auto& xv = ctx.value_in(0);
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / xv[i];
        }
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record("sum", {x}, Tensor::scalar(s), [](BackwardContext& ctx) {
    if (auto* gx = ctx.grad_in(0)) {
      const double g = ctx.grad_out()[0];
      for (auto& d : gx->values()) d += g;
    }
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record("mean", {x}, Tensor::scalar(s / n), [n](BackwardContext& ctx) {
    if (auto* gx = ctx.grad_in(0)) {
      const double g = ctx.grad_out()[0] / n;
      for (auto& d : gx->values()) d += g;
    }
  });
}

Var l2_normalize_rows(Var x) {
  const auto& xv = x.value();
  require(xv.rank() <= 2, "l2_normalize_rows", "expected a matrix, got " + dims(xv));
  const auto rows = xv.rows(), c = xv.cols();
  constexpr double kMinNorm = 1e-12;
  Tensor out = Tensor::zeros_like(xv);
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::max(std::sqrt(s), kMinNorm);
    if (std::isinf(s)) {
      // Squares overflowed; rescale by the largest magnitude first.
      double m = 0.0;
      for (std::size_t j = 0; j < c; ++j) m = std::max(m, std::abs(xv[i * c + j]));
      double r = 0.0;
      for (std::size_t j = 0; j < c; ++j) r += (xv[i * c + j] / m) * (xv[i * c + j] / m);
      norms[i] = m * std::sqrt(r);
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / norms[i];
  }
  return x.tape().record("l2_normalize_rows", {x}, std::move(out),
                         [rows, c, norms = std::move(norms)](BackwardContext& ctx) {
                           auto* gx = ctx.grad_in(0);
                           if (!gx) return;
                           const auto& y = ctx.value_out();
                           const auto& g = ctx.grad_out();
                           for (std::size_t i = 0; i < rows; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               (*gx)[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                           }
                         });
}

Var scale_rows(Var x, std::span<const double> weights) {
  const auto& xv = x.value();
  const auto rows = xv.rows(), c = xv.cols();
  require(weights.size() == rows, "scale_rows",
          std::to_string(weights.size()) + " weights for " + std::to_string(rows) + " rows");
  std::vector<double> w(weights.begin(), weights.end());
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = w[i] * xv[i * c + j];
  return x.tape().record("scale_rows", {x}, std::move(out),
                         [rows, c, w = std::move(w)](BackwardContext& ctx) {
                           if (auto* gx = ctx.grad_in(0)) {
                             const auto& g = ctx.grad_out();
                             for (std::size_t i = 0; i < rows; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 (*gx)[i * c + j] += w[i] * g[i * c + j];
                           }
                         });
}

Var select_columns(Var x, std::span<const int> labels) {
  const auto& xv = x.value();
  const auto rows = xv.rows(), c = xv.cols();
  require(labels.size() == rows, "select_columns",
          std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor out({rows, 1});
  for (std::size_t i = 0; i < rows; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) {
      throw std::out_of_range("select_columns: label " + std::to_string(lab[i]) +
                              " outside [0," + std::to_string(c) + ")");
    }
    out[i] = xv[i * c + static_cast<std::size_t>(lab[i])];
  }
  return x.tape().record("select_columns", {x}, std::move(out),
                         [c, lab = std::move(lab)](BackwardContext& ctx) {
                           if (auto* gx = ctx.grad_in(0)) {
                             const auto& g = ctx.grad_out();
                             for (std::size_t i = 0; i < lab.size(); ++i)
                               (*gx)[i * c + static_cast<std::size_t>(lab[i])] += g[i];
                           }
                         });
}

Var clamp_abs_min(Var x, double floor) {
  require(floor >= 0.0, "clamp_abs_min", "floor must be nonnegative");
  return elementwise_unary(
      "clamp_abs_min", x,
      [floor](double v) { return std::abs(v) >= floor ? v : (v < 0.0 ? -floor : floor); },
      [floor](BackwardContext& ctx) {
        if (auto* gx = ctx.grad_in(0)) {
          const auto g = ctx.grad_out().values();
          const auto& xv = ctx.value_in(0);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (std::abs(xv[i]) >= floor) (*gx)[i] += g[i];
        }
      });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

}  // namespace advmtl
