#pragma once

#include <array>
#include <optional>
#include <span>

#include "advmtl/autodiff.hpp"
#include "advmtl/data.hpp"

namespace advmtl {

enum class Task { kSpeaker, kAgeGroup };

/// Learnable per-task uncertainty weights C_spk and C_ag.
struct TaskWeights {
  static constexpr double kDefaultFloor = 1e-3;

  explicit TaskWeights(double init = 1.0);

  Parameter speaker;
  Parameter age_group;
  double floor = kDefaultFloor;

  Parameter& weight(Task t) noexcept { return t == Task::kSpeaker ? speaker : age_group; }
  const Parameter& weight(Task t) const noexcept {
    return t == Task::kSpeaker ? speaker : age_group;
  }
};

/// Additive-margin softmax over cosine logits. Both inputs must already be
/// row-normalized (within 1e-6). Returns the batch-mean cross-entropy.
Var am_softmax_loss(Var embeddings, Var class_weights, std::span<const int> labels,
                    double margin = 0.2, double scale = 30.0);

/// Mean of -log_probs[i, labels[i]].
Var cross_entropy(Var log_probs, std::span<const int> labels);

/// Target distribution (1 - eps) on the true class plus eps/c uniform.
Var nll_label_smoothing(Var log_probs, std::span<const int> labels, double eps = 0.1);

/// Label-smoothed NLL summed over rows whose label is >= 0 and divided by the
/// full batch size, so a batch with no labelled rows contributes exactly 0.
Var discriminator_loss(Var log_probs, std::span<const int> labels, double eps = 0.1);

struct WeightedTask {
  Var loss;
  Var weight;  // the task's C parameter on the same tape
};

/// sum_t [ L_t / (2 C_t^2) + ln(1 + C_t^2) ], with |C_t| clamped to `floor`.
Var auto_weighted_combine(std::span<const WeightedTask> tasks,
                          double floor = TaskWeights::kDefaultFloor);

struct LossReport {
  std::optional<double> speaker;    // raw AM-softmax loss
  std::optional<double> age_group;  // raw cross-entropy
  double c_speaker = 1.0;
  double c_age_group = 1.0;
  double main = 0.0;  // automatically weighted sum over the main tasks
  std::array<std::optional<double>, kNumGroups> discriminator{};
  double discriminator_sum = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

struct LossTerms {
  Var total;
  LossReport report;
};

/// total = main + alpha * sum_k disc_k. Inactive groups are nullopt and add
/// nothing. The adversarial sign lives in the gradient reversal layer, so the
/// total is minimized as is.
LossTerms total_loss(Var main, const std::array<std::optional<Var>, kNumGroups>& disc,
                     double alpha);

}  // namespace advmtl
