#include "advmtl/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace advmtl {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x5851f42d4c957f2dULL;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const auto c = t.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (t[row * c + j] > t[row * c + best]) best = j;
  return best;
}

}  // namespace

std::string_view train_mode_name(TrainMode m) noexcept {
  return m == TrainMode::kSTL ? "STL" : "MTL";
}

TrainMode parse_train_mode(std::string_view name) {
  const auto s = lower(name);
  if (s == "stl") return TrainMode::kSTL;
  if (s == "mtl") return TrainMode::kMTL;
  throw std::invalid_argument("unknown training mode '" + std::string(name) + "' (valid: STL, MTL)");
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(learning_rate, "learning_rate");
  positive(clip_max_norm, "clip_max_norm");
  if (accumulation_steps == 0) throw std::invalid_argument("accumulation_steps must be positive");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
    throw std::invalid_argument("lr_decay_factor must lie in (0,1]");
  if (stagnation_epochs == 0) throw std::invalid_argument("stagnation_epochs must be positive");
  if (!(improvement_threshold >= 0.0)) throw std::invalid_argument("improvement_threshold must be nonnegative");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be nonnegative");
  if (!(am_margin >= 0.0 && am_margin < 1.0)) throw std::invalid_argument("am_margin must lie in [0,1)");
  positive(am_scale, "am_scale");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("label_smoothing must lie in [0,1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw std::invalid_argument("adam_beta1 must lie in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw std::invalid_argument("adam_beta2 must lie in [0,1)");
  positive(adam_eps, "adam_eps");
}

// ---------------------------------------------------------------------------
// Gradient clipping and the optimizer

double global_grad_norm(std::span<Parameter* const> params) {
  double s = 0.0;
  for (const auto* p : params)
    for (double g : p->grad.values()) s += g * g;
  return std::sqrt(s);
}

double clip_gradients(std::span<Parameter* const> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto* p : params)
    for (auto& g : p->grad.values()) g *= factor;
  return factor;
}

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
    throw std::invalid_argument("Adam hyperparameters out of range");
}

void AdamOptimizer::step(std::span<Parameter* const> params, double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("Adam: learning rate must be positive");
  for (const auto* p : params) {
    if (!p->grad.all_finite())
      throw std::domain_error("non-finite gradient in parameter '" + p->name + "'");
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (auto* p : params) {
    auto it = moments_.find(p->name);
    if (it == moments_.end()) {
      it = moments_.emplace(p->name, Moments{Tensor::zeros_like(p->value), Tensor::zeros_like(p->value)}).first;
    } else if (!it->second.m.same_shape(p->value)) {
      throw std::invalid_argument("Adam: parameter '" + p->name + "' changed shape");
    }
    auto& m = it->second.m;
    auto& v = it->second.v;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p->value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, double threshold)
    : factor_(factor), patience_(patience), threshold_(threshold) {
  if (!(lr > 0.0)) throw std::invalid_argument("scheduler: lr must be positive");
  if (!(factor > 0.0 && factor <= 1.0)) throw std::invalid_argument("scheduler: factor must lie in (0,1]");
  if (patience == 0) throw std::invalid_argument("scheduler: patience must be positive");
  state_.lr = lr;
}

bool PlateauScheduler::update(double metric) {
  if (!std::isfinite(metric)) throw std::invalid_argument("scheduler: metric must be finite");
  if (!state_.best || metric > *state_.best + threshold_) {
    state_.best = metric;
    state_.epochs_since_improvement = 0;
    return false;
  }
  if (++state_.epochs_since_improvement < patience_) return false;
  state_.lr *= factor_;
  state_.epochs_since_improvement = 0;
  return true;
}

// ---------------------------------------------------------------------------
// Batches and the objective

SpeakerIndex::SpeakerIndex(const Dataset& train) : ids_(train.speakers()) {}

int SpeakerIndex::index(std::int64_t speaker) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), speaker);
  if (it == ids_.end() || *it != speaker) return -1;
  return static_cast<int>(it - ids_.begin());
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 const SpeakerIndex& speakers, Integration integration) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const bool concat = integration == Integration::kConcat;
  if (concat && !data.has_view2())
    throw std::invalid_argument("concat integration needs a second view on every sample");
  const auto b = indices.size();
  const auto d1 = data.view1_dim(), d2 = data.view2_dim();
  Batch batch;
  batch.inputs.view1 = Tensor({b, d1});
  if (concat) batch.inputs.view2 = Tensor({b, d2});
  for (auto& s : batch.subgroups) s.assign(b, -1);
  for (std::size_t r = 0; r < b; ++r) {
    const auto i = indices[r];
    const auto& s = data[i];
    std::copy(s.view1.begin(), s.view1.end(), batch.inputs.view1.data() + r * d1);
    if (concat) std::copy(s.view2.begin(), s.view2.end(), batch.inputs.view2->data() + r * d2);
    batch.speakers.push_back(speakers.index(s.speaker_id));
    const auto g = index_of(data.group(i));
    batch.groups.push_back(static_cast<int>(g));
    batch.subgroups[g][r] = data.subgroup(i);
  }
  return batch;
}

Objective compute_objective(NetworkAssembly& assembly, Tape& tape, const Batch& batch,
                            const TrainConfig& config, Mode mode, const ForwardOptions& options) {
  const bool mtl = config.mode == TrainMode::kMTL;
  ForwardOptions opts = options;
  if (!mtl) {
    opts.speaker_head = false;
    opts.discriminators = false;
  }
  Objective obj;
  obj.output = assembly.forward(tape, batch.inputs, mode, opts);
  auto& tw = assembly.task_weights();

  std::vector<WeightedTask> tasks;
  std::optional<Var> l_spk;
  if (mtl && obj.output.spk_embedding) {
    l_spk = am_softmax_loss(*obj.output.spk_embedding, *obj.output.spk_class_weights,
                            batch.speakers, config.am_margin, config.am_scale);
    tasks.push_back({*l_spk, tape.parameter(tw.speaker)});
  }
  auto l_ag = cross_entropy(obj.output.ag_log_probs, batch.groups);
  tasks.push_back({l_ag, tape.parameter(tw.age_group)});
  auto main = auto_weighted_combine(tasks, tw.floor);

  std::array<std::optional<Var>, kNumGroups> disc{};
  for (std::size_t k = 0; k < kNumGroups; ++k) {
    if (!obj.output.subgroup_log_probs[k]) continue;
    disc[k] = discriminator_loss(*obj.output.subgroup_log_probs[k], batch.subgroups[k],
                                 config.label_smoothing);
  }
  obj.terms = total_loss(main, disc, config.alpha);
  auto& r = obj.terms.report;
  if (l_spk) r.speaker = l_spk->value().item();
  r.age_group = l_ag.value().item();
  r.c_speaker = tw.speaker.value.item();
  r.c_age_group = tw.age_group.value.item();
  return obj;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(NetworkAssembly& assembly, TrainConfig config)
    : assembly_(assembly),
      config_(std::move(config)),
      optimizer_(config_.adam_beta1, config_.adam_beta2, config_.adam_eps),
      lr_(config_.learning_rate) {
  config_.validate();
}

void Trainer::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  lr_ = lr;
}

std::vector<Parameter*> Trainer::trainable_parameters() {
  auto all = assembly_.parameters();
  if (config_.mode == TrainMode::kMTL) return all;
  std::vector<Parameter*> out;
  for (auto* p : all) {
    if (starts_with(p->name, "gf.") || starts_with(p->name, "gy.ag.") ||
        p->name == assembly_.task_weights().age_group.name)
      out.push_back(p);
  }
  return out;
}

StepRecord Trainer::train_step(const Batch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch");
  Tape tape;
  auto obj = compute_objective(assembly_, tape, batch, config_, Mode::kTrain);
  StepRecord rec;
  rec.step = micro_steps_ + 1;
  rec.report = obj.terms.report;
  rec.learning_rate = lr_;
  rec.lambda = assembly_.lambda();
  if (!std::isfinite(rec.report.total)) {
    throw NumericalError("non-finite loss at step " + std::to_string(rec.step), rec.report, rec.step);
  }
  tape.backward(scale(obj.terms.total, 1.0 / static_cast<double>(config_.accumulation_steps)));
  ++micro_steps_;
  if (micro_steps_ % config_.accumulation_steps != 0) return rec;

  auto params = trainable_parameters();
  rec.grad_norm = global_grad_norm(params);
  if (!std::isfinite(rec.grad_norm)) {
    std::string culprit;
    for (auto* p : params)
      if (!p->grad.all_finite()) { culprit = p->name; break; }
    throw NumericalError("non-finite gradient in '" + culprit + "' at step " + std::to_string(rec.step),
                         rec.report, rec.step);
  }
  clip_gradients(params, config_.clip_max_norm);
  rec.clipped_norm = global_grad_norm(params);
  optimizer_.step(params, lr_);
  assembly_.zero_grad();
  rec.optimizer_step = true;
  return rec;
}

// ---------------------------------------------------------------------------
// Dev evaluation and the epoch loop

DevMetrics evaluate_dev(NetworkAssembly& assembly, const Dataset& data, std::size_t batch_size,
                        bool discriminators) {
  if (data.empty()) throw std::invalid_argument("evaluate_dev: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate_dev: batch_size must be positive");
  DevMetrics out;
  std::array<std::size_t, kNumGroups> seen{}, correct{};
  const SpeakerIndex no_speakers;
  ForwardOptions opts;
  opts.speaker_head = false;
  opts.discriminators = discriminators;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch(data, idx, no_speakers, assembly.config().integration);
    Tape tape;
    const auto fo = assembly.forward(tape, batch.inputs, Mode::kEval, opts);
    for (std::size_t r = 0; r < batch.size(); ++r) {
      out.confusion.add(batch.groups[r], static_cast<int>(argmax_row(fo.ag_log_probs.value(), r)));
      for (std::size_t k = 0; k < kNumGroups; ++k) {
        if (!fo.subgroup_log_probs[k] || batch.subgroups[k][r] < 0) continue;
        ++seen[k];
        correct[k] += static_cast<int>(argmax_row(fo.subgroup_log_probs[k]->value(), r)) ==
                      batch.subgroups[k][r];
      }
    }
  }
  out.precision = per_class_precision(out.confusion);
  for (std::size_t k = 0; k < kNumGroups; ++k) {
    if (seen[k] > 0)
      out.discriminator_accuracy[k] = static_cast<double>(correct[k]) / static_cast<double>(seen[k]);
  }
  return out;
}

std::size_t batches_per_epoch(std::size_t train_size, std::size_t batch_size, bool batch_norm) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  const auto rem = train_size % batch_size;
  return train_size / batch_size + ((rem > 0 && (!batch_norm || rem >= 2)) ? 1 : 0);
}

FitResult fit(NetworkAssembly& assembly, const DatasetSplits& splits, const TrainConfig& config,
              const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  if (splits.train.empty()) throw std::invalid_argument("fit: empty training split");
  if (splits.dev.empty()) throw std::invalid_argument("fit: empty dev split");
  {
    std::set<std::string_view> ids;
    for (const auto* part : {&splits.train, &splits.dev, &splits.eval})
      for (const auto& s : part->samples())
        if (!ids.insert(s.id).second)
          throw std::invalid_argument("fit: sample '" + s.id + "' appears in more than one split");
  }
  const SpeakerIndex speakers(splits.train);
  const bool mtl = config.mode == TrainMode::kMTL;
  if (mtl && assembly.config().num_speakers != speakers.size()) {
    throw std::invalid_argument("fit: model has " + std::to_string(assembly.config().num_speakers) +
                                " speaker classes but the training split has " +
                                std::to_string(speakers.size()));
  }

  Trainer trainer(assembly, config);
  PlateauScheduler scheduler(config.learning_rate, config.lr_decay_factor, config.stagnation_epochs,
                             config.improvement_threshold);
  FitResult result;
  result.best_state = assembly.state();

  const bool bn = assembly.uses_batch_norm();
  const double base_lambda = assembly.lambda();
  const auto n = splits.train.size();
  const auto total_batches = batches_per_epoch(n, config.batch_size, bn) * config.epochs;
  std::size_t done = 0;
  std::mt19937_64 shuffle_rng(config.seed ^ kShuffleSalt);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::optional<double> best;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const auto len = std::min(config.batch_size, n - start);
      if (bn && len < 2) continue;  // train-mode batch norm needs two rows
      if (config.lambda_schedule) {
        const double p = static_cast<double>(done) / static_cast<double>(total_batches);
        assembly.set_lambda(base_lambda * lambda_warmup(p));
      }
      const auto batch = make_batch(splits.train, std::span(order).subspan(start, len), speakers,
                                    assembly.config().integration);
      auto rec = trainer.train_step(batch);
      ++done;
      loss_sum += rec.report.total;
      ++loss_count;
      if (on_step) on_step(rec);
      result.steps.push_back(std::move(rec));
    }

    const auto dev = evaluate_dev(assembly, splits.dev, config.batch_size, mtl);
    EpochRecord e;
    e.epoch = epoch;
    e.learning_rate = trainer.learning_rate();
    e.dev_macro_precision = dev.precision.macro;
    e.dev_precision = dev.precision.precision;
    e.discriminator_accuracy = dev.discriminator_accuracy;
    e.mean_train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    e.improved = !best || dev.precision.macro > *best + config.improvement_threshold;
    if (e.improved) {
      best = dev.precision.macro;
      result.best_state = assembly.state();
      result.best_epoch = epoch;
    }
    scheduler.update(dev.precision.macro);
    trainer.set_learning_rate(scheduler.lr());
    result.epochs.push_back(std::move(e));
  }
  if (config.lambda_schedule) assembly.set_lambda(base_lambda);
  result.optimizer_steps = trainer.optimizer_steps();
  return result;
}

}  // namespace advmtl
