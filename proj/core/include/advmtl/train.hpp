#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advmtl/data.hpp"
#include "advmtl/loss.hpp"
#include "advmtl/metrics.hpp"
#include "advmtl/model.hpp"

namespace advmtl {

/// STL trains the shared extractor and the age-group head only.
enum class TrainMode { kSTL, kMTL };

std::string_view train_mode_name(TrainMode m) noexcept;
TrainMode parse_train_mode(std::string_view name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double clip_max_norm = 4.0;
  std::size_t accumulation_steps = 5;
  double lr_decay_factor = 0.8;
  std::size_t stagnation_epochs = 2;
  double improvement_threshold = 1e-6;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::kMTL;
  double alpha = 0.01;
  double am_margin = 0.2;
  double am_scale = 30.0;
  double label_smoothing = 0.1;
  bool lambda_schedule = false;  // warm-up of the assembly's lambda over training
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Global L2 norm over every gradient entry.
double global_grad_norm(std::span<Parameter* const> params);

/// Rescales all gradients by max_norm / norm when norm exceeds max_norm.
/// Returns the applied factor (1 when nothing was clipped).
double clip_gradients(std::span<Parameter* const> params, double max_norm);

/// Bias-corrected Adam. Moments are keyed by parameter name.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Throws std::domain_error naming the first parameter with a non-finite
  /// gradient; no parameter is touched in that case.
  void step(std::span<Parameter* const> params, double lr);
  std::uint64_t step_count() const noexcept { return steps_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

struct SchedulerState {
  double lr = 1e-4;
  std::optional<double> best;
  std::size_t epochs_since_improvement = 0;
};

/// Multiplies the learning rate by `factor` once the monitored metric
/// (higher is better) fails to improve for `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.8, std::size_t patience = 2,
                   double threshold = 1e-6);

  /// Returns true when this update reduced the learning rate.
  bool update(double metric);
  double lr() const noexcept { return state_.lr; }
  const SchedulerState& state() const noexcept { return state_; }

 private:
  SchedulerState state_;
  double factor_;
  std::size_t patience_;
  double threshold_;
};

/// Dense speaker indices over the training split. Unseen speakers map to -1.
class SpeakerIndex {
 public:
  SpeakerIndex() = default;
  explicit SpeakerIndex(const Dataset& train);

  int index(std::int64_t speaker) const;
  std::size_t size() const noexcept { return ids_.size(); }

 private:
  std::vector<std::int64_t> ids_;  // sorted
};

struct Batch {
  BatchInputs inputs;
  std::vector<int> speakers;
  std::vector<int> groups;
  /// Per group k: the subgroup label for rows of group k, -1 elsewhere.
  std::array<std::vector<int>, kNumGroups> subgroups;

  std::size_t size() const noexcept { return groups.size(); }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 const SpeakerIndex& speakers, Integration integration);

struct Objective {
  LossTerms terms;
  ForwardOutput output;
};

/// Forward pass plus the full objective. STL: weighted age-group loss only.
/// MTL: weighted speaker and age-group losses plus alpha times the
/// discriminator losses.
Objective compute_objective(NetworkAssembly& assembly, Tape& tape, const Batch& batch,
                            const TrainConfig& config, Mode mode,
                            const ForwardOptions& options = {});

/// Carries the report of the step that produced a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, LossReport report, std::size_t step)
      : std::runtime_error(what), report(std::move(report)), step(step) {}
  LossReport report;
  std::size_t step;
};

struct StepRecord {
  std::size_t step = 0;  // 1-based micro-step
  LossReport report;
  bool optimizer_step = false;
  double grad_norm = 0.0;       // before clipping; 0 on non-update steps
  double clipped_norm = 0.0;    // after clipping
  double learning_rate = 0.0;
  double lambda = 0.0;
};

class Trainer {
 public:
  Trainer(NetworkAssembly& assembly, TrainConfig config);

  /// forward, backward of total / accumulation_steps, and at every
  /// accumulation boundary clip, Adam and zero-grad.
  StepRecord train_step(const Batch& batch);

  std::vector<Parameter*> trainable_parameters();
  std::size_t micro_steps() const noexcept { return micro_steps_; }
  std::uint64_t optimizer_steps() const noexcept { return optimizer_.step_count(); }
  double learning_rate() const noexcept { return lr_; }
  void set_learning_rate(double lr);
  const TrainConfig& config() const noexcept { return config_; }
  NetworkAssembly& assembly() noexcept { return assembly_; }

 private:
  NetworkAssembly& assembly_;
  TrainConfig config_;
  AdamOptimizer optimizer_;
  double lr_;
  std::size_t micro_steps_ = 0;
};

struct DevMetrics {
  ConfusionMatrix confusion;
  PrecisionReport precision;
  /// Subgroup accuracy of each active discriminator on its own group's rows.
  std::array<std::optional<double>, kNumGroups> discriminator_accuracy{};
};

DevMetrics evaluate_dev(NetworkAssembly& assembly, const Dataset& data, std::size_t batch_size,
                        bool discriminators = true);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double dev_macro_precision = 0.0;
  std::vector<std::optional<double>> dev_precision;
  std::array<std::optional<double>, kNumGroups> discriminator_accuracy{};
  double mean_train_loss = 0.0;
  bool improved = false;
};

struct FitResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  NamedTensors best_state;
  std::optional<std::size_t> best_epoch;
  std::uint64_t optimizer_steps = 0;
};

/// Seeded epochs over the shuffled training split with dev evaluation, the
/// plateau schedule and best-checkpoint tracking. With zero epochs the best
/// state is the initial state. On NumericalError the steps taken so far have
/// already reached the caller through `on_step`.
FitResult fit(NetworkAssembly& assembly, const DatasetSplits& splits, const TrainConfig& config,
              const std::function<void(const StepRecord&)>& on_step = {});

/// Number of training batches one epoch yields.
std::size_t batches_per_epoch(std::size_t train_size, std::size_t batch_size, bool batch_norm);

}  // namespace advmtl
