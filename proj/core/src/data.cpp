#include "advmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

namespace advmtl {

std::string_view group_name(AgeGroup g) noexcept {
  switch (g) {
    case AgeGroup::kYoung: return "young";
    case AgeGroup::kAdult: return "adult";
    case AgeGroup::kSenior: return "senior";
  }
  return "unknown";
}

std::optional<AgeGroup> parse_group(std::string_view name) noexcept {
  for (auto g : kAllGroups)
    if (group_name(g) == name) return g;
  return std::nullopt;
}

std::string_view scheme_name(SchemeVariant v) noexcept {
  return v == SchemeVariant::kLeq29 ? "leq29" : "leq17";
}

SchemeVariant parse_scheme(std::string_view name) {
  if (name == "leq29") return SchemeVariant::kLeq29;
  if (name == "leq17") return SchemeVariant::kLeq17;
  throw std::invalid_argument("unknown age-group scheme '" + std::string(name) +
                              "' (valid: leq29, leq17)");
}

GroupScheme GroupScheme::make(SchemeVariant v) noexcept {
  GroupScheme s;
  s.variant = v;
  s.young_max = v == SchemeVariant::kLeq29 ? 29 : 17;
  // 60 belongs to the senior group; adults end at 59.
  s.senior_min = 60;
  return s;
}

AgeInterval GroupScheme::range(AgeGroup g) const noexcept {
  switch (g) {
    case AgeGroup::kYoung: return {0, young_max};
    case AgeGroup::kAdult: return {young_max + 1, senior_min - 1};
    case AgeGroup::kSenior: return {senior_min, AgeInterval::kOpenEnd};
  }
  return {};
}

SubgroupScheme SubgroupScheme::default_for(SchemeVariant v) {
  SubgroupScheme s;
  if (v == SchemeVariant::kLeq29) {
    s.intervals[index_of(AgeGroup::kYoung)] = {{0, 19}, {20, 29}};
    s.intervals[index_of(AgeGroup::kAdult)] = {{30, 39}, {40, 49}, {50, 59}};
  } else {
    // MPA-style split of minors.
    s.intervals[index_of(AgeGroup::kYoung)] = {{0, 12}, {13, 17}};
    s.intervals[index_of(AgeGroup::kAdult)] = {{18, 29}, {30, 39}, {40, 49}, {50, 59}};
  }
  s.intervals[index_of(AgeGroup::kSenior)] = {{60, 69}, {70, AgeInterval::kOpenEnd}};
  return s;
}

std::array<std::size_t, kNumGroups> SubgroupScheme::counts() const noexcept {
  return {intervals[0].size(), intervals[1].size(), intervals[2].size()};
}

LabelScheme LabelScheme::make(SchemeVariant v) {
  return LabelScheme{GroupScheme::make(v), SubgroupScheme::default_for(v)};
}

AgeGroup age_to_group(int age, const GroupScheme& scheme) {
  if (age < 0) throw std::invalid_argument("age must be nonnegative, got " + std::to_string(age));
  if (age <= scheme.young_max) return AgeGroup::kYoung;
  if (age < scheme.senior_min) return AgeGroup::kAdult;
  return AgeGroup::kSenior;
}

AgeGroup age_to_group(int age, SchemeVariant v) { return age_to_group(age, GroupScheme::make(v)); }

AgeLabels age_to_subgroup(int age, const LabelScheme& scheme) {
  const auto g = age_to_group(age, scheme.groups);
  const auto& bins = scheme.subgroups.intervals[index_of(g)];
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (bins[i].contains(age)) return {g, static_cast<int>(i)};
  throw std::logic_error("subgroup scheme does not cover age " + std::to_string(age));
}

AgeLabels age_to_subgroup(int age, SchemeVariant v) {
  return age_to_subgroup(age, LabelScheme::make(v));
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::vector<Sample> samples, LabelScheme scheme)
    : samples_(std::move(samples)), scheme_(std::move(scheme)) {
  labels_.reserve(samples_.size());
  std::map<std::int64_t, int> speaker_age;
  all_have_view2_ = !samples_.empty();
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& s = samples_[i];
    if (s.view1.empty()) throw DataError("sample '" + s.id + "' has an empty view1");
    if (i == 0) view1_dim_ = s.view1.size();
    if (s.view1.size() != view1_dim_) {
      throw DataError("sample '" + s.id + "' has view1 width " + std::to_string(s.view1.size()) +
                      ", expected " + std::to_string(view1_dim_));
    }
    if (s.view2.empty()) {
      all_have_view2_ = false;
    } else if (view2_dim_ == 0) {
      view2_dim_ = s.view2.size();
    } else if (s.view2.size() != view2_dim_) {
      throw DataError("sample '" + s.id + "' has view2 width " + std::to_string(s.view2.size()) +
                      ", expected " + std::to_string(view2_dim_));
    }
    auto [it, inserted] = speaker_age.emplace(s.speaker_id, s.age);
    if (!inserted && it->second != s.age) {
      throw DataError("speaker " + std::to_string(s.speaker_id) + " has conflicting ages " +
                      std::to_string(it->second) + " and " + std::to_string(s.age));
    }
    labels_.push_back(age_to_subgroup(s.age, scheme_));
  }
}

std::vector<std::int64_t> Dataset::speakers() const {
  std::set<std::int64_t> ids;
  for (const auto& s : samples_) ids.insert(s.speaker_id);
  return {ids.begin(), ids.end()};
}

std::array<std::size_t, kNumGroups> Dataset::group_counts() const {
  std::array<std::size_t, kNumGroups> c{};
  for (const auto& l : labels_) ++c[index_of(l.group)];
  return c;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples_.at(i));
  return Dataset(std::move(out), scheme_);
}

// ---------------------------------------------------------------------------
// Synthetic generation

std::string_view age_distribution_name(AgeDistribution d) noexcept {
  return d == AgeDistribution::kUniform ? "uniform" : "subgroup_balanced";
}

AgeDistribution parse_age_distribution(std::string_view name) {
  if (name == "uniform") return AgeDistribution::kUniform;
  if (name == "subgroup_balanced") return AgeDistribution::kSubgroupBalanced;
  throw std::invalid_argument("unknown age distribution '" + std::string(name) +
                              "' (valid: subgroup_balanced, uniform)");
}

void SynthConfig::validate() const {
  for (auto n : speakers_per_group)
    if (n == 0) throw std::invalid_argument("speakers per group must be positive");
  if (utts_per_speaker == 0) throw std::invalid_argument("utterances per speaker must be positive");
  if (view1_dim == 0) throw std::invalid_argument("view1 dimension must be positive");
  const auto informative = age_dims + subgroup_dims;
  if (informative > view1_dim || (view2_dim > 0 && informative > view2_dim)) {
    throw std::invalid_argument("informative dimensions exceed the view dimensions");
  }
  if (!(cluster_spread >= 0.0) || !(noise_std >= 0.0))
    throw std::invalid_argument("spread and noise must be nonnegative");
}

namespace {

// Practical sampling limits for the open-ended bins.
constexpr int kMinSampledAge = 6;
constexpr int kMaxSampledAge = 89;

int draw_age(const LabelScheme& scheme, AgeGroup g, AgeDistribution dist, std::mt19937_64& rng) {
  auto clamp_interval = [](AgeInterval iv) {
    return AgeInterval{std::max(iv.lo, kMinSampledAge), std::min(iv.hi, kMaxSampledAge)};
  };
  AgeInterval iv;
  if (dist == AgeDistribution::kSubgroupBalanced) {
    const auto& bins = scheme.subgroups.intervals[index_of(g)];
    std::uniform_int_distribution<std::size_t> pick(0, bins.size() - 1);
    iv = clamp_interval(bins[pick(rng)]);
  } else {
    iv = clamp_interval(scheme.groups.range(g));
  }
  std::uniform_int_distribution<int> age(iv.lo, iv.hi);
  return age(rng);
}

std::vector<double> gaussian_vector(std::size_t n, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = sd * nd(rng);
  return v;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& config) {
  config.validate();
  const auto scheme = LabelScheme::make(config.scheme);
  std::mt19937_64 rng(config.seed);

  std::array<std::vector<double>, kNumGroups> group_pattern;
  std::array<std::vector<std::vector<double>>, kNumGroups> subgroup_pattern;
  for (auto g : kAllGroups) {
    group_pattern[index_of(g)] = gaussian_vector(config.age_dims, 1.0, rng);
    for (std::size_t s = 0; s < scheme.subgroups.count(g); ++s)
      subgroup_pattern[index_of(g)].push_back(gaussian_vector(config.subgroup_dims, 1.0, rng));
  }

  auto add_label_signal = [&](std::vector<double>& v, const AgeLabels& lab) {
    const auto& gp = group_pattern[index_of(lab.group)];
    for (std::size_t j = 0; j < config.age_dims; ++j) v[j] += config.age_signal * gp[j];
    const auto& sp = subgroup_pattern[index_of(lab.group)][static_cast<std::size_t>(lab.subgroup)];
    for (std::size_t j = 0; j < config.subgroup_dims; ++j)
      v[config.age_dims + j] += config.subgroup_signal * sp[j];
  };

  std::vector<Sample> samples;
  std::int64_t speaker = 0;
  for (auto g : kAllGroups) {
    for (std::size_t k = 0; k < config.speakers_per_group[index_of(g)]; ++k, ++speaker) {
      const int age = draw_age(scheme, g, config.age_distribution, rng);
      const auto labels = age_to_subgroup(age, scheme);
      const auto center1 = gaussian_vector(config.view1_dim, config.cluster_spread, rng);
      const auto center2 = gaussian_vector(config.view2_dim, config.cluster_spread, rng);
      for (std::size_t u = 0; u < config.utts_per_speaker; ++u) {
        Sample s;
        s.id = "spk" + std::to_string(speaker) + "-utt" + std::to_string(u);
        s.speaker_id = speaker;
        s.age = age;
        s.view1 = gaussian_vector(config.view1_dim, config.noise_std, rng);
        for (std::size_t j = 0; j < config.view1_dim; ++j) s.view1[j] += center1[j];
        add_label_signal(s.view1, labels);
        if (config.view2_dim > 0) {
          s.view2 = gaussian_vector(config.view2_dim, config.noise_std, rng);
          for (std::size_t j = 0; j < config.view2_dim; ++j) s.view2[j] += center2[j];
          add_label_signal(s.view2, labels);
        }
        samples.push_back(std::move(s));
      }
    }
  }
  return Dataset(std::move(samples), scheme);
}

// ---------------------------------------------------------------------------
// Splitting

DatasetSplits split(const Dataset& dataset, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0.0 || f.dev < 0.0 || f.eval < 0.0 ||
      std::abs(f.train + f.dev + f.eval - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be nonnegative and sum to 1");
  }
  std::array<std::vector<std::size_t>, kNumGroups> strata;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    strata[index_of(dataset.group(i))].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, dev, eval;
  for (auto& stratum : strata) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    const auto n = stratum.size();
    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n))));
    const auto n_dev =
        std::min(n - n_train, static_cast<std::size_t>(std::llround(f.dev * static_cast<double>(n))));
    train.insert(train.end(), stratum.begin(), stratum.begin() + static_cast<std::ptrdiff_t>(n_train));
    dev.insert(dev.end(), stratum.begin() + static_cast<std::ptrdiff_t>(n_train),
               stratum.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    eval.insert(eval.end(), stratum.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), stratum.end());
  }
  auto check = [](const std::vector<std::size_t>& idx, double frac, const char* name) {
    if (frac > 0.0 && idx.empty())
      throw DataError(std::string("split '") + name + "' would be empty (empty stratum)");
  };
  check(train, f.train, "train");
  check(dev, f.dev, "dev");
  check(eval, f.eval, "eval");
  for (auto* v : {&train, &dev, &eval}) std::sort(v->begin(), v->end());
  return {dataset.subset(train), dataset.subset(dev), dataset.subset(eval)};
}

// ---------------------------------------------------------------------------
// JSONL

Dataset load_jsonl(const std::filesystem::path& path, const LabelScheme& scheme) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::string>();
      s.speaker_id = j.at("speaker").get<std::int64_t>();
      s.age = j.at("age").get<int>();
      s.view1 = j.at("view1").get<std::vector<double>>();
      if (auto it = j.find("view2"); it != j.end() && !it->is_null())
        s.view2 = it->get<std::vector<double>>();
      if (s.age < 0) throw DataError("negative age");
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed record at " + where + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("malformed record at " + where + ": " + e.what());
    }
  }
  try {
    return Dataset(std::move(samples), scheme);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset '" + path.string() + "'");
  for (const auto& s : dataset.samples()) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["speaker"] = s.speaker_id;
    j["age"] = s.age;
    j["view1"] = s.view1;
    if (!s.view2.empty()) j["view2"] = s.view2;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed while writing '" + path.string() + "'");
}

}  // namespace advmtl
