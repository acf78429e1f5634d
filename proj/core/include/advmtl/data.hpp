#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advmtl {

enum class AgeGroup { kYoung = 0, kAdult = 1, kSenior = 2 };

inline constexpr std::size_t kNumGroups = 3;
inline constexpr std::array<AgeGroup, kNumGroups> kAllGroups{AgeGroup::kYoung, AgeGroup::kAdult,
                                                             AgeGroup::kSenior};

constexpr std::size_t index_of(AgeGroup g) noexcept { return static_cast<std::size_t>(g); }
std::string_view group_name(AgeGroup g) noexcept;
std::optional<AgeGroup> parse_group(std::string_view name) noexcept;

/// Young/adult boundary variants: young <= 29 or young <= 17. Senior is
/// always >= 60.
enum class SchemeVariant { kLeq29, kLeq17 };

std::string_view scheme_name(SchemeVariant v) noexcept;
/// Throws std::invalid_argument naming the valid options.
SchemeVariant parse_scheme(std::string_view name);

/// Closed age interval [lo, hi]; hi == kOpenEnd means unbounded.
struct AgeInterval {
  static constexpr int kOpenEnd = std::numeric_limits<int>::max();
  int lo = 0;
  int hi = kOpenEnd;

  bool contains(int age) const noexcept { return age >= lo && age <= hi; }
  friend bool operator==(const AgeInterval&, const AgeInterval&) = default;
};

struct GroupScheme {
  SchemeVariant variant = SchemeVariant::kLeq29;
  int young_max = 29;
  int senior_min = 60;

  static GroupScheme make(SchemeVariant v) noexcept;
  AgeInterval range(AgeGroup g) const noexcept;
};

/// Ordered age intervals per group. Intervals partition the group's range.
struct SubgroupScheme {
  std::array<std::vector<AgeInterval>, kNumGroups> intervals;

  /// Decade bins for adults, two bins for young and senior groups.
  static SubgroupScheme default_for(SchemeVariant v);
  std::size_t count(AgeGroup g) const noexcept { return intervals[index_of(g)].size(); }
  std::array<std::size_t, kNumGroups> counts() const noexcept;
};

struct LabelScheme {
  GroupScheme groups;
  SubgroupScheme subgroups;

  static LabelScheme make(SchemeVariant v);
  SchemeVariant variant() const noexcept { return groups.variant; }
};

struct AgeLabels {
  AgeGroup group = AgeGroup::kYoung;
  int subgroup = 0;
  friend bool operator==(const AgeLabels&, const AgeLabels&) = default;
};

/// Throws std::invalid_argument for negative ages.
AgeGroup age_to_group(int age, const GroupScheme& scheme);
AgeGroup age_to_group(int age, SchemeVariant v);
/// Closed-left lookup inside the group's interval list.
AgeLabels age_to_subgroup(int age, const LabelScheme& scheme);
AgeLabels age_to_subgroup(int age, SchemeVariant v);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string id;
  std::int64_t speaker_id = 0;
  int age = 0;
  std::vector<double> view1;
  std::vector<double> view2;  // empty when the record has no second view

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Immutable collection of samples with labels derived from a scheme.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Sample> samples, LabelScheme scheme);

  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  std::span<const Sample> samples() const noexcept { return samples_; }
  const LabelScheme& scheme() const noexcept { return scheme_; }

  AgeGroup group(std::size_t i) const { return labels_[i].group; }
  int subgroup(std::size_t i) const { return labels_[i].subgroup; }
  const AgeLabels& labels(std::size_t i) const { return labels_[i]; }

  std::size_t view1_dim() const noexcept { return view1_dim_; }
  /// Width of the second view, 0 if no record carries one.
  std::size_t view2_dim() const noexcept { return view2_dim_; }
  /// True iff every record carries a second view.
  bool has_view2() const noexcept { return all_have_view2_; }

  /// Distinct speaker ids in ascending order.
  std::vector<std::int64_t> speakers() const;
  std::array<std::size_t, kNumGroups> group_counts() const;
  Dataset subset(std::span<const std::size_t> indices) const;

 private:
  std::vector<Sample> samples_;
  LabelScheme scheme_ = LabelScheme::make(SchemeVariant::kLeq29);
  std::vector<AgeLabels> labels_;
  std::size_t view1_dim_ = 0;
  std::size_t view2_dim_ = 0;
  bool all_have_view2_ = false;
};

enum class AgeDistribution { kSubgroupBalanced, kUniform };

std::string_view age_distribution_name(AgeDistribution d) noexcept;
AgeDistribution parse_age_distribution(std::string_view name);

/// Desk-scale surrogate for a labelled speech corpus. Each speaker owns a
/// Gaussian cluster centre per view; designated leading dimensions carry an
/// additive age-group pattern followed by an additive age-subgroup pattern.
struct SynthConfig {
  SchemeVariant scheme = SchemeVariant::kLeq29;
  std::array<std::size_t, kNumGroups> speakers_per_group{12, 12, 12};
  std::size_t utts_per_speaker = 20;
  std::size_t view1_dim = 80;
  std::size_t view2_dim = 160;  // 0 disables the second view
  double cluster_spread = 1.0;
  double noise_std = 1.0;
  std::size_t age_dims = 8;
  std::size_t subgroup_dims = 8;
  double age_signal = 1.0;
  double subgroup_signal = 1.0;
  AgeDistribution age_distribution = AgeDistribution::kSubgroupBalanced;
  std::uint64_t seed = 1;

  void validate() const;
};

Dataset generate_synthetic(const SynthConfig& config);

struct SplitFractions {
  double train = 0.8;
  double dev = 0.1;
  double eval = 0.1;
};

struct DatasetSplits {
  Dataset train;
  Dataset dev;
  Dataset eval;
};

/// Utterance-level split stratified by age group. Speakers may appear in
/// several splits.
DatasetSplits split(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed);

/// One JSON object per line:
/// {"id": str, "speaker": int, "age": int, "view1": [..], "view2": [..]}
/// view2 is optional. Labels are derived from `scheme` at load time.
Dataset load_jsonl(const std::filesystem::path& path, const LabelScheme& scheme);
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

}  // namespace advmtl
