#pragma once

// Reverse-mode automatic differentiation over a linear tape.
//
// A Tape records every primitive executed during a forward pass. Values and
// adjoints live on the tape; persistent weights live in Parameter objects
// outside it and receive gradients when a backward pass reaches them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advmtl/tensor.hpp"

namespace advmtl {

/// A named trainable tensor. `grad` accumulates across backward passes
/// until zero_grad() is called.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() noexcept { grad.fill(0.0); }
};

enum class Mode { kTrain, kEval };

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// View handed to a backward rule. grad_in(i) is null when input i does not
/// require a gradient; otherwise the rule must add (never assign) into it.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::span<const std::size_t> inputs, std::size_t output)
      : tape_(tape), inputs_(inputs), output_(output) {}

  const Tensor& grad_out() const;
  const Tensor& value_out() const;
  const Tensor& value_in(std::size_t i) const;
  Tensor* grad_in(std::size_t i);

 private:
  Tape& tape_;
  std::span<const std::size_t> inputs_;
  std::size_t output_;
};

using BackwardRule = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives gradients.
  Var constant(Tensor value);
  /// Leaf bound to `p`; backward() adds the adjoint into p.grad.
  Var parameter(Parameter& p);

  /// Appends a primitive. `inputs` must already be on this tape.
  Var record(std::string_view op, std::span<const Var> inputs, Tensor output, BackwardRule rule);
  Var record(std::string_view op, std::initializer_list<Var> inputs, Tensor output,
             BackwardRule rule) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(output),
                  std::move(rule));
  }

  /// Reverse sweep from a scalar loss. Node adjoints are recomputed from
  /// scratch on every call; parameter gradients accumulate.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  std::size_t num_records() const noexcept { return records_.size(); }
  std::string_view record_op(std::size_t i) const { return records_.at(i).op; }

  /// Number of records whose backward rule ran in the most recent backward().
  std::size_t last_backward_visits() const noexcept { return last_visits_; }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor adjoint;  // empty until first written during backward
    bool requires_grad = false;
    Parameter* param = nullptr;
  };
  struct Record {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    BackwardRule rule;
  };

  Tensor& adjoint(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<Record> records_;
  std::size_t last_visits_ = 0;
};

/// Running statistics of a batch-normalization layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t features = 1);
};

// Primitives. Every function validates shapes and throws std::invalid_argument
// on mismatch.

/// Identity forward; backward multiplies the upstream gradient by -lambda.
Var grad_reverse(Var x, double lambda);

Var linear(Var x, Var weight, Var bias);
Var matmul(Var a, Var b);
/// a * b^T, used for cosine logits against per-class weight rows.
Var matmul_nt(Var a, Var b);
Var leaky_relu(Var x, double slope = 0.01);
Var log_softmax(Var x);
Var concat(Var a, Var b);
Var batch_norm_1d(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);
/// Inverted dropout: survivors are scaled by 1/(1-p) in train mode.
Var dropout(Var x, double p, Mode mode, std::mt19937_64& rng);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var square(Var x);
Var log(Var x);
Var sum(Var x);
Var mean(Var x);
Var l2_normalize_rows(Var x);
/// Row i multiplied by the constant weights[i].
Var scale_rows(Var x, std::span<const double> weights);
/// out[i] = x[i, labels[i]], shape b x 1.
Var select_columns(Var x, std::span<const int> labels);
/// sign(x) * max(|x|, floor); zero gradient where the floor is active.
Var clamp_abs_min(Var x, double floor);
Var detach(Var x);

/// Reverse sweep; free-function form of Tape::backward.
void backward(Var loss);

/// Uniform double in [0,1) from 53 random bits.
double uniform01(std::mt19937_64& rng);

}  // namespace advmtl
