#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advmtl/autodiff.hpp"
#include "advmtl/data.hpp"
#include "advmtl/loss.hpp"

namespace advmtl {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Fully connected stack. Hidden layers are Linear -> LeakyReLU ->
/// [BatchNorm1d] -> [Dropout]; the last layer is a bare Linear.
struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> widths;  // hidden widths followed by the output width
  std::vector<bool> batch_norm;     // one flag per hidden layer
  std::vector<double> dropout;      // one rate per hidden layer
  double leaky_slope = 0.01;

  static MlpSpec make(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                      std::size_t output_dim, bool batch_norm, double dropout,
                      double leaky_slope = 0.01);
  std::size_t output_dim() const { return widths.back(); }
  void validate() const;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, MlpSpec spec, std::mt19937_64& init_rng);

  Var forward(Tape& tape, Var x, Mode mode, std::mt19937_64& dropout_rng);

  const MlpSpec& spec() const noexcept { return spec_; }
  bool uses_batch_norm() const noexcept;
  void collect_parameters(std::vector<Parameter*>& out);
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out);

 private:
  struct Layer {
    Parameter weight;
    Parameter bias;
    bool hidden = false;
    bool has_bn = false;
    Parameter gamma;
    Parameter beta;
    BatchNormState bn;
    double dropout = 0.0;
  };

  std::string prefix_;
  MlpSpec spec_;
  std::vector<Layer> layers_;
};

enum class Integration { kSingle, kConcat };

std::string_view integration_name(Integration i) noexcept;
Integration parse_integration(std::string_view name);

/// Which age-group discriminators exist, plus the reversal coefficient.
struct DiscriminatorConfig {
  std::array<bool, kNumGroups> active{};
  double lambda = 1.0;

  /// woD, YD, SD, YSD, AD or ALL (case-insensitive).
  static DiscriminatorConfig parse(std::string_view preset, double lambda = 1.0);
  bool is_active(AgeGroup g) const noexcept { return active[index_of(g)]; }
  std::size_t count() const noexcept;
  std::string name() const;
};

/// Warm-up coefficient 2 / (1 + exp(-10 p)) - 1 for progress p in [0, 1].
double lambda_warmup(double progress) noexcept;

struct ModelConfig {
  Integration integration = Integration::kSingle;
  std::size_t view1_dim = 80;
  std::size_t view2_dim = 160;
  std::vector<std::size_t> extractor_e_hidden{512};
  std::size_t extractor_e_out = 256;
  std::vector<std::size_t> extractor_r_hidden{512};
  std::size_t extractor_r_out = 512;
  bool extractor_batch_norm = true;
  std::vector<std::size_t> head_hidden{256, 256};
  std::vector<std::size_t> disc_hidden{256, 256};
  bool head_batch_norm = true;
  double head_dropout = 0.5;
  double leaky_slope = 0.01;
  std::size_t embedding_dim = 0;  // 0: same width as f
  std::size_t num_speakers = 1;
  std::array<std::size_t, kNumGroups> subgroup_counts{2, 3, 2};
  DiscriminatorConfig discriminators;
  double task_weight_init = 1.0;
  std::uint64_t seed = 1;

  std::size_t feature_dim() const noexcept;
  void validate() const;
};

struct BatchInputs {
  Tensor view1;
  std::optional<Tensor> view2;
};

struct ForwardOptions {
  bool speaker_head = true;
  bool discriminators = true;
  /// false replaces the gradient reversal layer by identity.
  bool reverse_gradient = true;
  /// Per-group attention weights used instead of exp(ag_log_probs[:, k]).
  std::optional<std::array<std::vector<double>, kNumGroups>> attention;
};

struct LabelPrediction {
  std::optional<Var> spk_embedding;      // b x emb, unit rows
  std::optional<Var> spk_class_weights;  // S x emb, unit rows
  std::optional<Var> spk_logits;         // b x S cosine logits
  Var ag_log_probs;                      // b x 3
};

struct ForwardOutput {
  Var f;
  std::optional<Var> spk_embedding;
  std::optional<Var> spk_class_weights;
  std::optional<Var> spk_logits;
  Var ag_log_probs;
  std::array<std::optional<Var>, kNumGroups> subgroup_log_probs{};
  std::array<std::vector<double>, kNumGroups> attention{};
};

/// Feature extractor(s), speaker and age-group label predictors, and one
/// adversarial subgroup discriminator per active age group.
class NetworkAssembly {
 public:
  explicit NetworkAssembly(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t feature_dim() const noexcept { return config_.feature_dim(); }
  double lambda() const noexcept { return config_.discriminators.lambda; }
  void set_lambda(double lambda);
  bool uses_batch_norm() const noexcept;

  Var extract_features(Tape& tape, Var view1, std::optional<Var> view2, Mode mode);
  LabelPrediction predict_labels(Tape& tape, Var f, Mode mode, bool speaker_head = true);
  /// Subgroup log-probabilities for group k. `attention` holds one constant
  /// weight per row that scales the reversed features.
  Var discriminate(Tape& tape, Var f, std::span<const double> attention, AgeGroup k, Mode mode,
                   bool reverse_gradient = true);
  /// Attention weights exp(ag_log_probs[:, k]), detached from the graph.
  static std::vector<double> attention_weights(const Tensor& ag_log_probs, AgeGroup k);

  ForwardOutput forward(Tape& tape, const BatchInputs& batch, Mode mode,
                        const ForwardOptions& options = {});

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> parameters_with_prefix(std::string_view prefix);
  std::size_t parameter_count();
  TaskWeights& task_weights() noexcept { return task_weights_; }

  /// Parameters and batch-norm running statistics, in a fixed order.
  NamedTensors state();
  /// Throws std::invalid_argument on missing names or shape mismatch.
  void load_state(const NamedTensors& state);
  void zero_grad();

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  std::mt19937_64& dropout_rng() noexcept { return dropout_rng_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> buffers();

  ModelConfig config_;
  Mlp extractor_e_;
  std::optional<Mlp> extractor_r_;
  Mlp speaker_head_;
  Parameter class_weights_;
  Mlp age_head_;
  std::array<std::optional<Mlp>, kNumGroups> discriminators_;
  TaskWeights task_weights_;
  std::mt19937_64 dropout_rng_;
};

}  // namespace advmtl
