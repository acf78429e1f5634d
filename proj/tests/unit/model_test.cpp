#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "advmtl/model.hpp"
#include "advmtl/train.hpp"
#include "test_support.hpp"

using namespace advmtl;
using testing_support::random_tensor;

namespace {

ModelConfig small_config(Integration integration = Integration::kSingle,
                         std::string_view discs = "ALL") {
  ModelConfig c;
  c.integration = integration;
  c.view1_dim = 6;
  c.view2_dim = 5;
  c.extractor_e_hidden = {8};
  c.extractor_e_out = 4;
  c.extractor_r_hidden = {7};
  c.extractor_r_out = 3;
  c.head_hidden = {6};
  c.disc_hidden = {5};
  c.num_speakers = 4;
  c.discriminators = DiscriminatorConfig::parse(discs);
  c.seed = 3;
  return c;
}

BatchInputs random_inputs(const ModelConfig& c, std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BatchInputs in;
  in.view1 = random_tensor({b, c.view1_dim}, rng);
  if (c.integration == Integration::kConcat) in.view2 = random_tensor({b, c.view2_dim}, rng);
  return in;
}

// Independent count: weights, biases and batch-norm scale/shift per layer.
std::size_t mlp_params(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                       bool bn) {
  std::size_t n = 0, prev = in;
  for (auto h : hidden) {
    n += prev * h + h + (bn ? 2 * h : 0);
    prev = h;
  }
  return n + prev * out + out;
}

}  // namespace

TEST(DiscriminatorConfig, Presets) {
  EXPECT_EQ(DiscriminatorConfig::parse("woD").count(), 0u);
  EXPECT_EQ(DiscriminatorConfig::parse("yd").count(), 1u);
  EXPECT_TRUE(DiscriminatorConfig::parse("YD").is_active(AgeGroup::kYoung));
  EXPECT_TRUE(DiscriminatorConfig::parse("SD").is_active(AgeGroup::kSenior));
  EXPECT_TRUE(DiscriminatorConfig::parse("AD").is_active(AgeGroup::kAdult));
  auto ysd = DiscriminatorConfig::parse("YSD");
  EXPECT_EQ(ysd.count(), 2u);
  EXPECT_FALSE(ysd.is_active(AgeGroup::kAdult));
  EXPECT_EQ(DiscriminatorConfig::parse("all").count(), 3u);
  for (auto name : {"woD", "YD", "SD", "YSD", "AD", "ALL"})
    EXPECT_EQ(DiscriminatorConfig::parse(name).name(), name);
  EXPECT_THROW(DiscriminatorConfig::parse("XD"), std::invalid_argument);
  EXPECT_THROW(DiscriminatorConfig::parse("YD", -1.0), std::invalid_argument);
}

TEST(LambdaWarmup, Endpoints) {
  EXPECT_DOUBLE_EQ(lambda_warmup(0.0), 0.0);
  EXPECT_NEAR(lambda_warmup(1.0), 2.0 / (1.0 + std::exp(-10.0)) - 1.0, 1e-15);
  EXPECT_LT(lambda_warmup(0.3), lambda_warmup(0.6));
}

TEST(Model, DefaultFeatureWidths) {
  ModelConfig c;
  c.num_speakers = 3;
  EXPECT_EQ(c.feature_dim(), 256u);
  c.integration = Integration::kConcat;
  EXPECT_EQ(c.feature_dim(), 768u);

  NetworkAssembly net(c);
  Tape tape;
  BatchInputs in{Tensor({2, 80}), Tensor({2, 160})};
  auto out = net.forward(tape, in, Mode::kEval);
  EXPECT_EQ(out.f.value().cols(), 768u);
}

TEST(Model, ConcatParameterCountIsSumOfParts) {
  ModelConfig c;
  c.integration = Integration::kConcat;
  c.num_speakers = 10;
  c.discriminators = DiscriminatorConfig::parse("ALL");
  NetworkAssembly net(c);
  const std::size_t fdim = 768;
  std::size_t expected = mlp_params(80, {512}, 256, true) + mlp_params(160, {512}, 512, true) +
                         mlp_params(fdim, {256, 256}, fdim, true) + 10 * fdim +
                         mlp_params(fdim, {256, 256}, 3, true);
  const std::array<std::size_t, 3> subgroups{2, 3, 2};
  for (auto s : subgroups) expected += mlp_params(fdim, {256, 256}, s, true);
  expected += 2;  // task weights
  EXPECT_EQ(net.parameter_count(), expected);
}

TEST(Model, ParameterNamesUnique) {
  NetworkAssembly net(small_config(Integration::kConcat));
  std::set<std::string> names;
  for (auto* p : net.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_FALSE(net.parameters_with_prefix("gf.r.").empty());
  // One hidden layer with batch norm (4 tensors) plus the output layer (2).
  EXPECT_EQ(net.parameters_with_prefix("gd.").size(), 3u * 6u);
}

TEST(Model, ZeroExtractorGivesZeroFeature) {
  auto c = small_config(Integration::kConcat);
  NetworkAssembly net(c);
  for (auto* p : net.parameters_with_prefix("gf.")) p->value.fill(0.0);
  Tape tape;
  auto out = net.forward(tape, random_inputs(c, 3, 1), Mode::kEval);
  for (double v : out.f.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, HeadOutputsContracts) {
  auto c = small_config();
  NetworkAssembly net(c);
  for (auto mode : {Mode::kTrain, Mode::kEval}) {
    Tape tape;
    auto out = net.forward(tape, random_inputs(c, 5, 2), mode);
    const auto& ag = out.ag_log_probs.value();
    ASSERT_EQ(ag.cols(), 3u);
    for (std::size_t r = 0; r < ag.rows(); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += std::exp(ag.at(r, k));
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const auto& emb = out.spk_embedding->value();
    for (std::size_t r = 0; r < emb.rows(); ++r) {
      double n = 0.0;
      for (std::size_t j = 0; j < emb.cols(); ++j) n += emb.at(r, j) * emb.at(r, j);
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
    }
    EXPECT_EQ(out.spk_logits->value().rows(), 5u);
    EXPECT_EQ(out.spk_logits->value().cols(), c.num_speakers);
    for (auto g : kAllGroups) {
      const auto k = index_of(g);
      ASSERT_TRUE(out.subgroup_log_probs[k].has_value());
      EXPECT_EQ(out.subgroup_log_probs[k]->value().cols(), c.subgroup_counts[k]);
      for (std::size_t r = 0; r < 5; ++r)
        EXPECT_DOUBLE_EQ(out.attention[k][r], std::exp(ag.at(r, k)));
    }
  }
}

TEST(Model, DiscriminatorPresetsControlBranches) {
  for (auto [name, expected] : {std::pair{"woD", 0u}, {"YD", 1u}, {"SD", 1u}, {"AD", 1u},
                                {"YSD", 2u}, {"ALL", 3u}}) {
    auto c = small_config(Integration::kSingle, name);
    NetworkAssembly net(c);
    Tape tape;
    auto out = net.forward(tape, random_inputs(c, 3, 4), Mode::kEval);
    std::size_t present = 0;
    for (const auto& s : out.subgroup_log_probs) present += s.has_value();
    EXPECT_EQ(present, expected) << name;
    EXPECT_EQ(net.parameters_with_prefix("gd.").size(), expected * 6u) << name;
  }
}

TEST(Model, InactiveDiscriminatorThrows) {
  auto c = small_config(Integration::kSingle, "YD");
  NetworkAssembly net(c);
  Tape tape;
  auto f = tape.constant(Tensor({2, 4}));
  const std::vector<double> w{1.0, 1.0};
  EXPECT_THROW(net.discriminate(tape, f, w, AgeGroup::kSenior, Mode::kEval), std::invalid_argument);
}

TEST(Model, ViewContracts) {
  auto single = small_config();
  NetworkAssembly net(single);
  Tape tape;
  BatchInputs wrong{Tensor({2, 7}), std::nullopt};
  EXPECT_THROW(net.forward(tape, wrong, Mode::kEval), std::invalid_argument);
  // Single integration ignores a second view.
  BatchInputs extra{Tensor({2, 6}), Tensor({2, 5})};
  EXPECT_NO_THROW(net.forward(tape, extra, Mode::kEval));

  NetworkAssembly cnet(small_config(Integration::kConcat));
  BatchInputs missing{Tensor({2, 6}), std::nullopt};
  EXPECT_THROW(cnet.forward(tape, missing, Mode::kEval), std::invalid_argument);
}

TEST(Model, ZeroAttentionRowFeedsZeroInput) {
  auto c = small_config(Integration::kSingle, "YD");
  c.head_batch_norm = false;
  NetworkAssembly net(c);
  std::mt19937_64 rng(5);
  Tape tape;
  auto f = tape.constant(random_tensor({2, 4}, rng));
  const std::vector<double> w{0.0, 1.0};
  auto out = net.discriminate(tape, f, w, AgeGroup::kYoung, Mode::kEval);

  // The same discriminator applied to an all-zero row.
  Tape t2;
  auto z = t2.constant(Tensor({1, 4}));
  const std::vector<double> one{1.0};
  auto ref = net.discriminate(t2, z, one, AgeGroup::kYoung, Mode::kEval);
  for (std::size_t j = 0; j < out.value().cols(); ++j)
    EXPECT_DOUBLE_EQ(out.value().at(0, j), ref.value().at(0, j));
}

// d disc_loss / d f = -lambda * w * d disc_loss / d (discriminator input).
TEST(Model, GradientIntoFeatureIsReversedAndScaled) {
  auto c = small_config(Integration::kSingle, "ALL");
  c.head_dropout = 0.0;
  for (double lambda : {0.0, 0.5, 1.0}) {
    NetworkAssembly net(c);
    net.set_lambda(lambda);
    std::mt19937_64 rng(17);
    const auto fval = random_tensor({4, 4}, rng);
    const std::vector<double> w{1.0, 0.3, 0.0, 0.8};
    const std::vector<int> labels{0, 1, -1, 1};
    for (auto g : kAllGroups) {
      Parameter fp("f", fval);
      Tape tape;
      auto f = tape.parameter(fp);
      tape.backward(discriminator_loss(net.discriminate(tape, f, w, g, Mode::kEval), labels));

      // Same graph with the discriminator input as the leaf.
      Tensor scaled = fval;
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 4; ++j) scaled.at(r, j) *= w[r];
      Parameter xp("x", scaled);
      Tape t2;
      const std::vector<double> ones(4, 1.0);
      t2.backward(discriminator_loss(
          net.discriminate(t2, t2.parameter(xp), ones, g, Mode::kEval, false), labels));
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 4; ++j)
          EXPECT_NEAR(fp.grad.at(r, j), -lambda * w[r] * xp.grad.at(r, j), 1e-12);
      net.zero_grad();
    }
  }
}

TEST(Model, EvalIsDeterministic) {
  auto c = small_config(Integration::kConcat);
  NetworkAssembly net(c);
  const auto in = random_inputs(c, 4, 6);
  Tape t1, t2;
  auto a = net.forward(t1, in, Mode::kEval);
  auto b = net.forward(t2, in, Mode::kEval);
  EXPECT_EQ(a.f.value(), b.f.value());
  EXPECT_EQ(a.ag_log_probs.value(), b.ag_log_probs.value());
  EXPECT_EQ(a.spk_logits->value(), b.spk_logits->value());
}

TEST(Model, SameSeedSameInitialization) {
  NetworkAssembly a(small_config()), b(small_config());
  EXPECT_EQ(a.state(), b.state());
  auto other = small_config();
  other.seed = 4;
  NetworkAssembly d(other);
  EXPECT_NE(a.state(), d.state());
}

TEST(Model, LoadStateRoundTripAndMismatch) {
  NetworkAssembly a(small_config());
  auto other = small_config();
  other.seed = 9;
  NetworkAssembly b(other);
  b.load_state(a.state());
  EXPECT_EQ(a.state(), b.state());

  NetworkAssembly c(small_config(Integration::kConcat));
  EXPECT_THROW(c.load_state(a.state()), std::invalid_argument);
  auto wrong = a.state();
  wrong[0].second = Tensor({1, 1});
  EXPECT_THROW(b.load_state(wrong), std::invalid_argument);
}

// With lambda = 0 the discriminators cannot move G_f: one training step gives
// the same extractor as a run without discriminators.
TEST(Model, ZeroLambdaLeavesExtractorUntouchedByDiscriminators) {
  SynthConfig sc;
  sc.speakers_per_group = {2, 2, 2};
  sc.utts_per_speaker = 4;
  sc.view1_dim = 6;
  sc.view2_dim = 0;
  sc.age_dims = 2;
  sc.subgroup_dims = 2;
  auto data = generate_synthetic(sc);
  SpeakerIndex speakers(data);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto batch = make_batch(data, idx, speakers, Integration::kSingle);

  TrainConfig tc;
  tc.accumulation_steps = 1;
  tc.clip_max_norm = 1e12;
  tc.learning_rate = 1e-2;
  auto run = [&](std::string_view discs) {
    auto c = small_config(Integration::kSingle, discs);
    c.num_speakers = speakers.size();
    c.discriminators.lambda = 0.0;
    NetworkAssembly net(c);
    Trainer trainer(net, tc);
    trainer.train_step(batch);
    NamedTensors out;
    for (auto* p : net.parameters_with_prefix("gf.")) out.emplace_back(p->name, p->value);
    return out;
  };
  const auto with = run("ALL");
  const auto without = run("woD");
  ASSERT_EQ(with.size(), without.size());
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_EQ(with[i], without[i]) << with[i].first;
}
