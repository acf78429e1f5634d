#include "advmtl/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace advmtl {

namespace {

constexpr std::uint64_t kDropoutSeedSalt = 0x9e3779b97f4a7c15ULL;

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Mlp

MlpSpec MlpSpec::make(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                      std::size_t output_dim, bool batch_norm, double dropout,
                      double leaky_slope) {
  MlpSpec s;
  s.input_dim = input_dim;
  s.widths = hidden;
  s.widths.push_back(output_dim);
  s.batch_norm.assign(hidden.size(), batch_norm);
  s.dropout.assign(hidden.size(), dropout);
  s.leaky_slope = leaky_slope;
  return s;
}

void MlpSpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("MlpSpec: input width must be positive");
  if (widths.empty()) throw std::invalid_argument("MlpSpec: at least one layer required");
  for (auto w : widths)
    if (w == 0) throw std::invalid_argument("MlpSpec: layer widths must be positive");
  if (batch_norm.size() != widths.size() - 1 || dropout.size() != widths.size() - 1)
    throw std::invalid_argument("MlpSpec: one batch-norm flag and dropout rate per hidden layer");
  for (auto p : dropout)
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("MlpSpec: dropout must lie in [0,1)");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
    throw std::invalid_argument("MlpSpec: leaky slope must lie in (0,1)");
}

Mlp::Mlp(std::string prefix, MlpSpec spec, std::mt19937_64& init_rng)
    : prefix_(std::move(prefix)), spec_(std::move(spec)) {
  spec_.validate();
  std::size_t in = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    const auto out = spec_.widths[i];
    const auto base = prefix_ + ".layer" + std::to_string(i);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Layer layer;
    layer.weight = Parameter(base + ".weight", uniform_tensor({in, out}, bound, init_rng));
    layer.bias = Parameter(base + ".bias", uniform_tensor({out}, bound, init_rng));
    layer.hidden = i + 1 < spec_.widths.size();
    if (layer.hidden) {
      layer.has_bn = spec_.batch_norm[i];
      layer.dropout = spec_.dropout[i];
      if (layer.has_bn) {
        Tensor ones({out});
        ones.fill(1.0);
        layer.gamma = Parameter(base + ".bn.gamma", std::move(ones));
        layer.beta = Parameter(base + ".bn.beta", Tensor({out}));
        layer.bn = BatchNormState(out);
      }
    }
    layers_.push_back(std::move(layer));
    in = out;
  }
}

Var Mlp::forward(Tape& tape, Var x, Mode mode, std::mt19937_64& dropout_rng) {
  if (x.value().cols() != spec_.input_dim) {
    throw std::invalid_argument(prefix_ + ": input width " + std::to_string(x.value().cols()) +
                                " does not match expected " + std::to_string(spec_.input_dim));
  }
  Var h = x;
  for (auto& layer : layers_) {
    h = linear(h, tape.parameter(layer.weight), tape.parameter(layer.bias));
    if (!layer.hidden) break;
    h = leaky_relu(h, spec_.leaky_slope);
    if (layer.has_bn)
      h = batch_norm_1d(h, tape.parameter(layer.gamma), tape.parameter(layer.beta), layer.bn, mode);
    if (layer.dropout > 0.0) h = dropout(h, layer.dropout, mode, dropout_rng);
  }
  return h;
}

bool Mlp::uses_batch_norm() const noexcept {
  return std::any_of(layers_.begin(), layers_.end(), [](const Layer& l) { return l.has_bn; });
}

void Mlp::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
    if (l.has_bn) {
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
    }
  }
}

void Mlp::collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    if (!l.has_bn) continue;
    const auto base = prefix_ + ".layer" + std::to_string(i) + ".bn";
    out.emplace_back(base + ".running_mean", &l.bn.running_mean);
    out.emplace_back(base + ".running_var", &l.bn.running_var);
  }
}

// ---------------------------------------------------------------------------
// Configuration

std::string_view integration_name(Integration i) noexcept {
  return i == Integration::kConcat ? "concat" : "single";
}

Integration parse_integration(std::string_view name) {
  if (name == "single") return Integration::kSingle;
  if (name == "concat") return Integration::kConcat;
  throw std::invalid_argument("unknown integration '" + std::string(name) +
                              "' (valid: single, concat)");
}

DiscriminatorConfig DiscriminatorConfig::parse(std::string_view preset, double lambda) {
  static const std::map<std::string, std::array<bool, kNumGroups>> kPresets{
      {"wod", {false, false, false}}, {"yd", {true, false, false}},
      {"sd", {false, false, true}},   {"ysd", {true, false, true}},
      {"ad", {false, true, false}},   {"all", {true, true, true}},
  };
  auto it = kPresets.find(lower(preset));
  if (it == kPresets.end()) {
    throw std::invalid_argument("unknown discriminator config '" + std::string(preset) +
                                "' (valid: woD, YD, SD, YSD, AD, ALL)");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("lambda must be a finite nonnegative number");
  DiscriminatorConfig c;
  c.active = it->second;
  c.lambda = lambda;
  return c;
}

std::size_t DiscriminatorConfig::count() const noexcept {
  return static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
}

std::string DiscriminatorConfig::name() const {
  const bool y = active[0], a = active[1], s = active[2];
  if (!y && !a && !s) return "woD";
  if (y && a && s) return "ALL";
  if (y && !a && s) return "YSD";
  if (y && !a && !s) return "YD";
  if (!y && !a && s) return "SD";
  if (!y && a && !s) return "AD";
  std::string out;
  for (auto g : kAllGroups)
    if (is_active(g)) out += static_cast<char>(std::toupper(group_name(g)[0]));
  return out + "D";
}

double lambda_warmup(double progress) noexcept {
  const double p = std::clamp(progress, 0.0, 1.0);
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

std::size_t ModelConfig::feature_dim() const noexcept {
  return integration == Integration::kConcat ? extractor_e_out + extractor_r_out : extractor_e_out;
}

void ModelConfig::validate() const {
  if (view1_dim == 0) throw std::invalid_argument("model: view1 width must be positive");
  if (integration == Integration::kConcat && view2_dim == 0)
    throw std::invalid_argument("model: concat integration requires a second view");
  if (num_speakers == 0) throw std::invalid_argument("model: need at least one speaker class");
  if (!(head_dropout >= 0.0 && head_dropout < 1.0))
    throw std::invalid_argument("model: dropout must lie in [0,1)");
  if (!(leaky_slope >= 0.0 && std::isfinite(leaky_slope)))
    throw std::invalid_argument("model: leaky slope must be finite and nonnegative");
  if (!(std::abs(task_weight_init) >= 1e-3 && std::isfinite(task_weight_init)))
    throw std::invalid_argument("model: task weight init must be finite with |C| >= 1e-3");
  if (extractor_e_out == 0 || (integration == Integration::kConcat && extractor_r_out == 0))
    throw std::invalid_argument("model: extractor output width must be positive");
  for (const auto* ws : {&extractor_e_hidden, &extractor_r_hidden, &head_hidden, &disc_hidden})
    for (auto w : *ws)
      if (w == 0) throw std::invalid_argument("model: hidden widths must be positive");
  for (auto g : kAllGroups) {
    if (discriminators.is_active(g) && subgroup_counts[index_of(g)] < 2) {
      throw std::invalid_argument("model: discriminator for group '" + std::string(group_name(g)) +
                                  "' needs at least two subgroups");
    }
  }
}

// ---------------------------------------------------------------------------
// NetworkAssembly

NetworkAssembly::NetworkAssembly(ModelConfig config)
    : config_(std::move(config)),
      task_weights_(config_.task_weight_init),
      dropout_rng_(config_.seed ^ kDropoutSeedSalt) {
  config_.validate();
  std::mt19937_64 init(config_.seed);
  const auto& c = config_;
  // Construction order fixes the draw order: G_f, then G_y, then G_d.
  extractor_e_ = Mlp("gf.e", MlpSpec::make(c.view1_dim, c.extractor_e_hidden, c.extractor_e_out,
                                           c.extractor_batch_norm, 0.0, c.leaky_slope),
                     init);
  if (c.integration == Integration::kConcat) {
    extractor_r_.emplace("gf.r",
                         MlpSpec::make(c.view2_dim, c.extractor_r_hidden, c.extractor_r_out,
                                       c.extractor_batch_norm, 0.0, c.leaky_slope),
                         init);
  }
  const auto fdim = c.feature_dim();
  const auto emb = c.embedding_dim == 0 ? fdim : c.embedding_dim;
  speaker_head_ = Mlp("gy.spk", MlpSpec::make(fdim, c.head_hidden, emb, c.head_batch_norm,
                                              c.head_dropout, c.leaky_slope),
                      init);
  {
    Tensor w({c.num_speakers, emb});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : w.values()) v = nd(init);
    class_weights_ = Parameter("gy.spk.class_weights", std::move(w));
  }
  age_head_ = Mlp("gy.ag", MlpSpec::make(fdim, c.head_hidden, kNumGroups, c.head_batch_norm,
                                         c.head_dropout, c.leaky_slope),
                  init);
  for (auto g : kAllGroups) {
    if (!c.discriminators.is_active(g)) continue;
    discriminators_[index_of(g)].emplace(
        "gd." + std::string(group_name(g)),
        MlpSpec::make(fdim, c.disc_hidden, c.subgroup_counts[index_of(g)], c.head_batch_norm,
                      c.head_dropout, c.leaky_slope),
        init);
  }
}

void NetworkAssembly::set_lambda(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("lambda must be a finite nonnegative number");
  config_.discriminators.lambda = lambda;
}

bool NetworkAssembly::uses_batch_norm() const noexcept {
  return config_.extractor_batch_norm || config_.head_batch_norm;
}

Var NetworkAssembly::extract_features(Tape& tape, Var view1, std::optional<Var> view2, Mode mode) {
  const bool concat_views = config_.integration == Integration::kConcat;
  if (concat_views && !view2) throw std::invalid_argument("concat integration requires view2");
  if (!concat_views && view2) throw std::invalid_argument("single integration does not take view2");
  if (view1.value().cols() != config_.view1_dim) {
    throw std::invalid_argument("view1 width " + std::to_string(view1.value().cols()) +
                                " does not match extractor input " +
                                std::to_string(config_.view1_dim));
  }
  auto f1 = extractor_e_.forward(tape, view1, mode, dropout_rng_);
  if (!concat_views) return f1;
  if (view2->value().cols() != config_.view2_dim) {
    throw std::invalid_argument("view2 width " + std::to_string(view2->value().cols()) +
                                " does not match extractor input " +
                                std::to_string(config_.view2_dim));
  }
  auto f2 = extractor_r_->forward(tape, *view2, mode, dropout_rng_);
  return concat(f1, f2);
}

LabelPrediction NetworkAssembly::predict_labels(Tape& tape, Var f, Mode mode, bool speaker_head) {
  if (f.value().cols() != feature_dim()) {
    throw std::invalid_argument("feature width " + std::to_string(f.value().cols()) +
                                " does not match heads expecting " + std::to_string(feature_dim()));
  }
  LabelPrediction out;
  if (speaker_head) {
    auto emb = l2_normalize_rows(speaker_head_.forward(tape, f, mode, dropout_rng_));
    auto w = l2_normalize_rows(tape.parameter(class_weights_));
    out.spk_embedding = emb;
    out.spk_class_weights = w;
    out.spk_logits = matmul_nt(emb, w);
  }
  out.ag_log_probs = log_softmax(age_head_.forward(tape, f, mode, dropout_rng_));
  return out;
}

std::vector<double> NetworkAssembly::attention_weights(const Tensor& ag_log_probs, AgeGroup k) {
  const auto rows = ag_log_probs.rows(), c = ag_log_probs.cols();
  std::vector<double> w(rows);
  for (std::size_t i = 0; i < rows; ++i) w[i] = std::exp(ag_log_probs[i * c + index_of(k)]);
  return w;
}

Var NetworkAssembly::discriminate(Tape& tape, Var f, std::span<const double> attention, AgeGroup k,
                                  Mode mode, bool reverse_gradient) {
  auto& disc = discriminators_[index_of(k)];
  if (!disc) {
    throw std::invalid_argument("discriminator for group '" + std::string(group_name(k)) +
                                "' is not active in config " + config_.discriminators.name());
  }
  Var reversed = reverse_gradient ? grad_reverse(f, config_.discriminators.lambda) : f;
  Var input = scale_rows(reversed, attention);
  return log_softmax(disc->forward(tape, input, mode, dropout_rng_));
}

ForwardOutput NetworkAssembly::forward(Tape& tape, const BatchInputs& batch, Mode mode,
                                       const ForwardOptions& options) {
  ForwardOutput out;
  std::optional<Var> v2;
  if (config_.integration == Integration::kConcat) {
    if (!batch.view2) throw std::invalid_argument("concat integration requires view2 in every sample");
    v2 = tape.constant(*batch.view2);
  }
  out.f = extract_features(tape, tape.constant(batch.view1), v2, mode);
  auto pred = predict_labels(tape, out.f, mode, options.speaker_head);
  out.spk_embedding = pred.spk_embedding;
  out.spk_class_weights = pred.spk_class_weights;
  out.spk_logits = pred.spk_logits;
  out.ag_log_probs = pred.ag_log_probs;
  if (!options.discriminators) return out;
  for (auto g : kAllGroups) {
    if (!config_.discriminators.is_active(g)) continue;
    const auto k = index_of(g);
    out.attention[k] = options.attention ? (*options.attention)[k]
                                         : attention_weights(out.ag_log_probs.value(), g);
    out.subgroup_log_probs[k] =
        discriminate(tape, out.f, out.attention[k], g, mode, options.reverse_gradient);
  }
  return out;
}

std::vector<Parameter*> NetworkAssembly::parameters() {
  std::vector<Parameter*> out;
  extractor_e_.collect_parameters(out);
  if (extractor_r_) extractor_r_->collect_parameters(out);
  speaker_head_.collect_parameters(out);
  out.push_back(&class_weights_);
  age_head_.collect_parameters(out);
  for (auto& d : discriminators_)
    if (d) d->collect_parameters(out);
  out.push_back(&task_weights_.speaker);
  out.push_back(&task_weights_.age_group);
  return out;
}

std::vector<Parameter*> NetworkAssembly::parameters_with_prefix(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto* p : parameters())
    if (std::string_view(p->name).substr(0, prefix.size()) == prefix) out.push_back(p);
  return out;
}

std::size_t NetworkAssembly::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> NetworkAssembly::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  extractor_e_.collect_buffers(out);
  if (extractor_r_) extractor_r_->collect_buffers(out);
  speaker_head_.collect_buffers(out);
  age_head_.collect_buffers(out);
  for (auto& d : discriminators_)
    if (d) d->collect_buffers(out);
  return out;
}

NamedTensors NetworkAssembly::state() {
  NamedTensors out;
  for (auto* p : parameters()) out.emplace_back(p->name, p->value);
  for (auto& [name, t] : buffers()) out.emplace_back(name, *t);
  return out;
}

void NetworkAssembly::load_state(const NamedTensors& state) {
  std::map<std::string_view, const Tensor*> by_name;
  for (const auto& [name, t] : state) by_name.emplace(name, &t);
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("checkpoint lacks tensor '" + name + "'");
    if (!it->second->same_shape(dst)) {
      throw std::invalid_argument("checkpoint tensor '" + name + "' has shape " +
                                  shape_string(it->second->shape()) + ", model expects " +
                                  shape_string(dst.shape()));
    }
    dst = *it->second;
  };
  const auto params = parameters();
  const auto bufs = buffers();
  if (state.size() != params.size() + bufs.size()) {
    throw std::invalid_argument("checkpoint holds " + std::to_string(state.size()) +
                                " tensors, model expects " +
                                std::to_string(params.size() + bufs.size()));
  }
  for (auto* p : params) assign(p->name, p->value);
  for (auto& [name, t] : bufs) assign(name, *t);
}

void NetworkAssembly::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

}  // namespace advmtl
