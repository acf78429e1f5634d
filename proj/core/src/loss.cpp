#include "advmtl/loss.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include <spdlog/spdlog.h>

namespace advmtl {

TaskWeights::TaskWeights(double init)
    : speaker("loss.c_spk", Tensor::scalar(init)), age_group("loss.c_ag", Tensor::scalar(init)) {
  if (!(std::abs(init) >= floor) || !std::isfinite(init)) {
    throw std::invalid_argument("task weight initialization must be finite with |C| >= floor");
  }
}

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
  constexpr double kTol = 1e-6;
  const auto rows = t.rows(), c = t.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t[i * c + j] * t[i * c + j];
    if (std::abs(std::sqrt(s) - 1.0) > kTol) {
      throw std::invalid_argument(std::string("am_softmax_loss: ") + what + " row " +
                                  std::to_string(i) + " is not unit-normalized");
    }
  }
}

void require_labels(std::span<const int> labels, std::size_t rows, std::size_t classes,
                    const char* op, bool allow_unlabelled = false) {
  if (labels.size() != rows) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (allow_unlabelled && l < 0) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(l) +
                              " outside [0," + std::to_string(classes) + ")");
    }
  }
}

// -(1/denom) * sum_i sum_j target_ij * log_probs_ij
Var smoothed_nll(Var log_probs, std::span<const int> labels, double eps, double denom) {
  const auto rows = log_probs.value().rows(), c = log_probs.value().cols();
  Tensor target = Tensor::zeros_like(log_probs.value());
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] < 0) continue;
    for (std::size_t j = 0; j < c; ++j) target[i * c + j] = eps / static_cast<double>(c);
    target[i * c + static_cast<std::size_t>(labels[i])] += 1.0 - eps;
  }
  auto& tape = log_probs.tape();
  return scale(sum(mul(log_probs, tape.constant(std::move(target)))), -1.0 / denom);
}

}  // namespace

Var am_softmax_loss(Var embeddings, Var class_weights, std::span<const int> labels, double margin,
                    double scale_factor) {
  if (!(margin >= 0.0 && margin < 1.0)) throw std::invalid_argument("am_softmax_loss: margin must lie in [0,1)");
  if (!(scale_factor > 0.0)) throw std::invalid_argument("am_softmax_loss: scale must be positive");
  require_unit_rows(embeddings.value(), "embedding");
  require_unit_rows(class_weights.value(), "class weight");
  const auto rows = embeddings.value().rows();
  const auto classes = class_weights.value().rows();
  require_labels(labels, rows, classes, "am_softmax_loss");

  auto cos = matmul_nt(embeddings, class_weights);
  Tensor offset({rows, classes});
  for (std::size_t i = 0; i < rows; ++i)
    offset[i * classes + static_cast<std::size_t>(labels[i])] = -margin;
  auto logits = scale(add(cos, embeddings.tape().constant(std::move(offset))), scale_factor);
  return cross_entropy(log_softmax(logits), labels);
}

Var cross_entropy(Var log_probs, std::span<const int> labels) {
  const auto rows = log_probs.value().rows();
  require_labels(labels, rows, log_probs.value().cols(), "cross_entropy");
  return scale(mean(select_columns(log_probs, labels)), -1.0);
}

Var nll_label_smoothing(Var log_probs, std::span<const int> labels, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("nll_label_smoothing: eps must lie in [0,1)");
  const auto rows = log_probs.value().rows();
  require_labels(labels, rows, log_probs.value().cols(), "nll_label_smoothing");
  return smoothed_nll(log_probs, labels, eps, static_cast<double>(rows));
}

Var discriminator_loss(Var log_probs, std::span<const int> labels, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("discriminator_loss: eps must lie in [0,1)");
  const auto rows = log_probs.value().rows();
  require_labels(labels, rows, log_probs.value().cols(), "discriminator_loss", true);
  return smoothed_nll(log_probs, labels, eps, static_cast<double>(rows));
}

Var auto_weighted_combine(std::span<const WeightedTask> tasks, double floor) {
  if (tasks.empty()) throw std::invalid_argument("auto_weighted_combine: no tasks");
  std::optional<Var> acc;
  for (const auto& t : tasks) {
    const double c = t.weight.value().item();
    if (!std::isfinite(c)) throw std::domain_error("auto_weighted_combine: task weight is not finite");
    if (std::abs(c) < floor) {
      spdlog::warn("task weight {} below floor {}; clamping", c, floor);
    }
    auto c2 = square(clamp_abs_min(t.weight, floor));
    auto term = add(div(t.loss, scale(c2, 2.0)), log(add_scalar(c2, 1.0)));
    acc = acc ? add(*acc, term) : term;
  }
  return *acc;
}

LossTerms total_loss(Var main, const std::array<std::optional<Var>, kNumGroups>& disc,
                     double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("total_loss: alpha must be nonnegative");
  LossTerms out;
  out.report.alpha = alpha;
  out.report.main = main.value().item();
  std::optional<Var> dsum;
  for (std::size_t k = 0; k < kNumGroups; ++k) {
    if (!disc[k]) continue;
    out.report.discriminator[k] = disc[k]->value().item();
    dsum = dsum ? add(*dsum, *disc[k]) : *disc[k];
  }
  if (dsum) {
    out.report.discriminator_sum = dsum->value().item();
    out.total = add(main, scale(*dsum, alpha));
  } else {
    out.total = main;
  }
  out.report.total = out.total.value().item();
  return out;
}

}  // namespace advmtl
