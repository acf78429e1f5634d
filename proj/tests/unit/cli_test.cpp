#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "advmtl/checkpoint.hpp"
#include "app/commands.hpp"
#include "test_support.hpp"

using app::RunConfig;
using testing_support::TempDir;

namespace {

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny(const std::filesystem::path& run_dir) {
  auto cfg = RunConfig::from_text(R"(
view1_dim = 8
view2_dim = 6
age_dims = 2
subgroup_dims = 2
speakers_young = 4
speakers_adult = 4
speakers_senior = 4
utts_per_speaker = 6
extractor_e_hidden = 8
extractor_e_out = 4
extractor_r_hidden = 8
extractor_r_out = 4
head_hidden = 8
disc_hidden = 8
batch_size = 8
epochs = 1
trials = 200
probe_iterations = 20
split_train = 0.5
split_dev = 0.25
split_eval = 0.25
)");
  cfg.set("run_dir", run_dir.string());
  return cfg;
}

int run(std::string_view command, const RunConfig& cfg) {
  std::ostringstream out;
  return app::run_command(command, cfg, out);
}

}  // namespace

TEST(Config, UnknownAndDuplicateKeys) {
  EXPECT_THROW(RunConfig::from_text("no_such_key = 1"), app::ConfigError);
  EXPECT_THROW(RunConfig::from_text("seed = 1\nseed = 2"), app::ConfigError);
  EXPECT_THROW(RunConfig::from_text("seed 1"), app::ConfigError);
  EXPECT_NO_THROW(RunConfig::from_text("# comment only\n\nseed = 3  # trailing"));
}

TEST(Config, OverridesApplyInOrder) {
  RunConfig cfg;
  cfg.apply_overrides({"--seed=5", "--mode=STL", "--seed=9"});
  EXPECT_EQ(cfg.seed(), 9u);
  EXPECT_EQ(cfg.get("mode"), "STL");
  EXPECT_THROW(cfg.apply_overrides({"--bogus=1"}), app::ConfigError);
}

TEST(Config, EchoRoundTrips) {
  auto cfg = RunConfig::from_text("seed = 77\nhead_hidden = 3,4\nlambda = 0.25");
  const auto again = RunConfig::from_text(cfg.echo());
  EXPECT_EQ(again.echo(), cfg.echo());
  EXPECT_EQ(again.seed(), 77u);
}

TEST(Config, InvalidSchemeNamesTheOptions) {
  auto cfg = RunConfig::from_text("scheme = leq30");
  try {
    cfg.scheme();
    FAIL() << "expected ConfigError";
  } catch (const app::ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("leq29"), std::string::npos);
    EXPECT_NE(msg.find("leq17"), std::string::npos);
  }
  TempDir dir("cli");
  cfg.set("run_dir", dir.path().string());
  EXPECT_EQ(run("gen-data", cfg), app::kExitConfigError);
}

TEST(Config, OutOfRangeValuesAreConfigErrors) {
  for (const char* text : {"learning_rate = -1", "batch_size = 0", "alpha = x", "head_dropout = 1.5",
                           "mode = both", "split_train = 0.5"}) {
    auto cfg = RunConfig::from_text(text);
    EXPECT_THROW(cfg.validate(), app::ConfigError) << text;
  }
}

TEST(Seeds, StreamsAreDistinctAndStable) {
  using app::SeedStream;
  EXPECT_EQ(app::derive_seed(1, SeedStream::kData), app::derive_seed(1, SeedStream::kData));
  EXPECT_NE(app::derive_seed(1, SeedStream::kData), app::derive_seed(1, SeedStream::kModel));
  EXPECT_NE(app::derive_seed(1, SeedStream::kData), app::derive_seed(2, SeedStream::kData));
}

TEST(Commands, UnknownCommand) {
  TempDir dir("cli");
  EXPECT_EQ(run("fly", tiny(dir.path())), app::kExitConfigError);
}

TEST(Commands, GenDataIsByteIdentical) {
  TempDir dir("cli");
  auto cfg = tiny(dir / "a");
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  cfg.set("run_dir", (dir / "b").string());
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  const auto a = read_all(dir / "a" / "data" / "dataset.jsonl");
  const auto b = read_all(dir / "b" / "data" / "dataset.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  const auto meta = nlohmann::json::parse(read_all(dir / "a" / "data" / "dataset.jsonl.meta.json"));
  EXPECT_EQ(static_cast<std::size_t>(std::count(a.begin(), a.end(), '\n')), meta["samples"].get<std::size_t>());
  EXPECT_EQ(meta["samples"].get<std::size_t>(), 12u * 6u);
}

TEST(Commands, MissingDatasetIsConfigError) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  cfg.set("data_path", (dir / "absent.jsonl").string());
  EXPECT_EQ(run("train", cfg), app::kExitConfigError);
  EXPECT_EQ(run("eval", cfg), app::kExitConfigError);
}

TEST(Commands, ZeroEpochTrainSavesInitialModel) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  cfg.set("epochs", "0");
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  ASSERT_EQ(run("train", cfg), app::kExitOk);

  const auto data = advmtl::load_jsonl(cfg.data_path(), advmtl::LabelScheme::make(cfg.scheme()));
  const auto splits =
      advmtl::split(data, cfg.split_fractions(), app::derive_seed(cfg.seed(), app::SeedStream::kSplit));
  const advmtl::SpeakerIndex speakers(splits.train);
  const auto model = cfg.model(data.view1_dim(), data.view2_dim(), speakers.size());
  EXPECT_EQ(model.seed, app::derive_seed(cfg.seed(), app::SeedStream::kModel));
  advmtl::NetworkAssembly net(model);
  advmtl::save_checkpoint(net.state(), dir / "expected.ckpt");
  EXPECT_EQ(read_all(dir / "checkpoints" / "best.ckpt"), read_all(dir / "expected.ckpt"));
}

TEST(Commands, TrainThenEvalWritesReports) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  ASSERT_EQ(run("train", cfg), app::kExitOk);
  ASSERT_EQ(run("eval", cfg), app::kExitOk);
  for (const char* f : {"logs/steps.csv", "logs/epochs.csv", "checkpoints/last.ckpt",
                        "reports/train_summary.json", "reports/metrics.csv",
                        "reports/operating_points.csv", "reports/embeddings.jsonl", "config.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto m = nlohmann::json::parse(read_all(dir / "reports" / "metrics.json"));
  const double eer = m["speaker"]["eer"].get<double>();
  EXPECT_GE(eer, 0.0);
  EXPECT_LE(eer, 1.0);
  const double macro = m["age_group"]["macro_precision"].get<double>();
  EXPECT_GE(macro, 0.0);
  EXPECT_LE(macro, 1.0);
  EXPECT_EQ(m["discriminators"], "ALL");
}

TEST(Commands, UntrainedModelIsNearChance) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  cfg.set("epochs", "0");
  cfg.set("speakers_young", "30");
  cfg.set("speakers_adult", "30");
  cfg.set("speakers_senior", "30");
  cfg.set("utts_per_speaker", "4");
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  ASSERT_EQ(run("train", cfg), app::kExitOk);
  ASSERT_EQ(run("eval", cfg), app::kExitOk);
  const auto m = nlohmann::json::parse(read_all(dir / "reports" / "metrics.json"));
  EXPECT_NEAR(m["age_group"]["accuracy"].get<double>(), 1.0 / 3.0, 0.10);
}

TEST(Commands, DivergenceExitsWithNumericalError) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  cfg.set("learning_rate", "1e300");
  cfg.set("accumulation_steps", "1");
  cfg.set("clip_max_norm", "1e300");
  ASSERT_EQ(run("gen-data", cfg), app::kExitOk);
  EXPECT_EQ(run("train", cfg), app::kExitNumericalError);
  EXPECT_TRUE(std::filesystem::exists(dir / "logs" / "failure.txt"));
  const auto steps = read_all(dir / "logs" / "steps.csv");
  EXPECT_GE(std::count(steps.begin(), steps.end(), '\n'), 2);
}

TEST(Commands, GradcheckFaultInjectionFails) {
  TempDir dir("cli");
  auto cfg = tiny(dir.path());
  cfg.set("gradcheck_fault_injection", "true");
  std::ostringstream out;
  EXPECT_EQ(app::run_command("gradcheck", cfg, out), app::kExitFailure);
  EXPECT_NE(out.str().find("overall FAIL"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "reports" / "gradcheck.txt"));
}
