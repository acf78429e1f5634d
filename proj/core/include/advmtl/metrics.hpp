#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advmtl/data.hpp"
#include "advmtl/tensor.hpp"

namespace advmtl {

/// Rows are true classes, columns are predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = kNumGroups);

  void add(int truth, int predicted);
  std::size_t classes() const noexcept { return classes_; }
  std::size_t count(std::size_t truth, std::size_t predicted) const {
    return counts_.at(truth * classes_ + predicted);
  }
  std::size_t total() const noexcept { return total_; }
  std::size_t column_sum(std::size_t predicted) const;
  double accuracy() const;

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

struct PrecisionReport {
  std::vector<std::optional<double>> precision;  // nullopt: class never predicted
  double macro = 0.0;                            // mean over defined entries
  std::vector<std::size_t> undefined;
};

/// precision_k = cm[k][k] / column_sum(k).
PrecisionReport per_class_precision(const ConfusionMatrix& cm);

/// dot(a, b) / (|a| |b|); throws on zero vectors or width mismatch.
double cosine_score(std::span<const double> a, std::span<const double> b);

struct TrialPair {
  std::size_t enroll = 0;  // indices into the dataset
  std::size_t test = 0;
  std::string enroll_id;
  std::string test_id;
  bool is_target = false;
};

struct TrialList {
  std::vector<TrialPair> pairs;
  std::size_t targets = 0;
  std::size_t nontargets = 0;
  bool balanced = true;
  std::string warning;  // set when the 50/50 balance was infeasible
};

/// Seeded sampling of unordered utterance pairs with a 50/50 target split
/// when feasible and no duplicates. Throws if no target pair exists.
TrialList generate_trials(const Dataset& dataset, std::size_t n_pairs, std::uint64_t seed);

struct ScoreSet {
  std::vector<double> scores;
  std::vector<bool> is_target;

  std::size_t targets() const noexcept;
  std::size_t nontargets() const noexcept;
  /// Throws unless lengths match and both classes are present.
  void validate() const;
};

/// Accept when score >= threshold. The last point has threshold +inf.
struct OperatingPoint {
  double threshold;
  double far;
  double frr;
};

/// One point per distinct score, ascending, plus the reject-all point.
std::vector<OperatingPoint> operating_points(const ScoreSet& scores);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

/// FAR = FRR crossing, linearly interpolated between the two operating
/// points that bracket it.
EerResult compute_eer(const ScoreSet& scores);
/// Same interpolation applied to an explicit operating-point sweep.
EerResult eer_from_points(std::span<const OperatingPoint> points);

struct DcfResult {
  double min_dcf = 0.0;
  double threshold = 0.0;
};

/// min_t [c_miss p FRR(t) + c_fa (1-p) FAR(t)] / min(c_miss p, c_fa (1-p)).
DcfResult compute_min_dcf(const ScoreSet& scores, double p_target = 0.01, double c_miss = 1.0,
                          double c_fa = 1.0);
DcfResult min_dcf_from_points(std::span<const OperatingPoint> points, double p_target,
                              double c_miss, double c_fa);

struct ProbeConfig {
  std::size_t iterations = 300;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  double train_fraction = 0.5;
};

struct ProbeResult {
  double accuracy = 0.0;
  double chance = 0.0;  // majority-class rate on the held-out part
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::size_t classes = 0;
};

/// Softmax regression on standardized frozen features with a fixed
/// full-batch gradient budget; stratified seeded train/held-out partition.
ProbeResult linear_probe(const Tensor& features, std::span<const int> labels, std::uint64_t seed,
                         const ProbeConfig& config = {});

/// linear_probe over the rows of one age group, predicting its subgroups.
/// Throws when fewer than two subgroups are present.
ProbeResult subgroup_probe(const Tensor& features, std::span<const int> subgroup_labels,
                           AgeGroup group, std::uint64_t seed, const ProbeConfig& config = {});

}  // namespace advmtl
