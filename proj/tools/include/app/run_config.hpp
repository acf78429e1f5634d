#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advmtl/data.hpp"
#include "advmtl/gradcheck_suite.hpp"
#include "advmtl/metrics.hpp"
#include "advmtl/model.hpp"
#include "advmtl/train.hpp"

namespace app {

/// Bad key, bad value, or inputs that do not fit the configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
};

/// Every recognised key with its default, in echo (sorted) order.
const std::vector<KeySpec>& config_keys();

/// Independent sub-seeds drawn from the single run seed.
enum class SeedStream : std::uint64_t {
  kData = 1,
  kSplit,
  kModel,
  kShuffle,
  kTrials,
  kProbe,
  kGradcheck,
};

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) noexcept;

/// Flat key = value configuration. '#' starts a comment. Unknown keys and
/// repeated keys are rejected.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_text(std::string_view text, std::string_view origin = "<text>");
  static RunConfig from_file(const std::filesystem::path& path);

  /// Applies "--key=value" overrides in order.
  void apply_overrides(const std::vector<std::string>& args);
  void set(std::string_view key, std::string_view value);
  const std::string& get(std::string_view key) const;

  /// All keys, sorted, one "key = value" per line.
  std::string echo() const;
  void write_echo(const std::filesystem::path& path) const;

  // Typed views. Each throws ConfigError on malformed or out-of-range values.
  std::uint64_t seed() const;
  std::filesystem::path run_dir() const;
  std::filesystem::path data_path() const;
  std::filesystem::path checkpoint_path() const;
  advmtl::SchemeVariant scheme() const;
  advmtl::SynthConfig synth() const;
  advmtl::SplitFractions split_fractions() const;
  /// Data-dependent fields (widths, speaker count) come from the caller.
  advmtl::ModelConfig model(std::size_t view1_dim, std::size_t view2_dim,
                            std::size_t num_speakers) const;
  advmtl::TrainConfig train() const;
  advmtl::ProbeConfig probe() const;
  advmtl::GradcheckSuiteConfig gradcheck() const;
  std::size_t trials() const;
  double p_target() const;
  double c_miss() const;
  double c_fa() const;

  /// Evaluates every typed view once so bad values surface before any work.
  void validate() const;

 private:
  double real(std::string_view key) const;
  std::int64_t integer(std::string_view key) const;
  std::size_t count(std::string_view key) const;
  bool flag(std::string_view key) const;
  std::vector<std::size_t> widths(std::string_view key) const;

  std::map<std::string, std::string, std::less<>> values_;
};

}  // namespace app
