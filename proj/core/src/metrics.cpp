#include "advmtl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace advmtl {

// ---------------------------------------------------------------------------
// Classification

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int predicted) {
  const auto c = static_cast<int>(classes_);
  if (truth < 0 || truth >= c || predicted < 0 || predicted >= c)
    throw std::out_of_range("confusion matrix label out of range");
  ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)];
  ++total_;
}

std::size_t ConfusionMatrix::column_sum(std::size_t predicted) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < classes_; ++t) s += count(t, predicted);
  return s;
}

double ConfusionMatrix::accuracy() const {
  if (total_ == 0) return 0.0;
  std::size_t diag = 0;
  for (std::size_t k = 0; k < classes_; ++k) diag += count(k, k);
  return static_cast<double>(diag) / static_cast<double>(total_);
}

PrecisionReport per_class_precision(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("per_class_precision: empty confusion matrix");
  PrecisionReport r;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto col = cm.column_sum(k);
    if (col == 0) {
      r.precision.emplace_back();
      r.undefined.push_back(k);
      continue;
    }
    const double p = static_cast<double>(cm.count(k, k)) / static_cast<double>(col);
    r.precision.emplace_back(p);
    sum += p;
    ++defined;
  }
  r.macro = defined ? sum / static_cast<double>(defined) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Speaker scoring

double cosine_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_score: width mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_score: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

TrialList generate_trials(const Dataset& dataset, std::size_t n_pairs, std::uint64_t seed) {
  std::map<std::int64_t, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_speaker[dataset[i].speaker_id].push_back(i);
  if (by_speaker.size() < 2) throw DataError("trial generation needs at least two speakers");

  using Pair = std::pair<std::size_t, std::size_t>;
  std::vector<Pair> target_pool;
  for (const auto& [spk, idx] : by_speaker)
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = a + 1; b < idx.size(); ++b) target_pool.emplace_back(idx[a], idx[b]);
  if (target_pool.empty()) throw DataError("no speaker has two utterances; no target trials possible");

  const std::size_t n = dataset.size();
  const std::size_t total_pairs = n * (n - 1) / 2;
  const std::size_t feasible_nontargets = total_pairs - target_pool.size();

  const std::size_t want_t = n_pairs / 2;
  const std::size_t want_n = n_pairs - want_t;
  const std::size_t n_t = std::min(want_t, target_pool.size());
  const std::size_t n_n = std::min(want_n, feasible_nontargets);

  std::mt19937_64 rng(seed);
  std::shuffle(target_pool.begin(), target_pool.end(), rng);
  target_pool.resize(n_t);

  std::vector<Pair> nontargets;
  if (feasible_nontargets <= 4 * n_n + 100000) {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        if (dataset[a].speaker_id != dataset[b].speaker_id) nontargets.emplace_back(a, b);
    std::shuffle(nontargets.begin(), nontargets.end(), rng);
    nontargets.resize(n_n);
  } else {
    std::set<Pair> seen;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    while (nontargets.size() < n_n) {
      auto a = pick(rng), b = pick(rng);
      if (a == b || dataset[a].speaker_id == dataset[b].speaker_id) continue;
      if (a > b) std::swap(a, b);
      if (seen.emplace(a, b).second) nontargets.emplace_back(a, b);
    }
  }

  TrialList out;
  out.targets = n_t;
  out.nontargets = n_n;
  out.balanced = n_t == want_t && n_n == want_n;
  if (!out.balanced) {
    out.warning = "requested " + std::to_string(n_pairs) + " trials but only " +
                  std::to_string(n_t) + " target / " + std::to_string(n_n) +
                  " non-target pairs are available";
    spdlog::warn("{}", out.warning);
  }
  auto push = [&](const Pair& p, bool target) {
    out.pairs.push_back({p.first, p.second, dataset[p.first].id, dataset[p.second].id, target});
  };
  for (const auto& p : target_pool) push(p, true);
  for (const auto& p : nontargets) push(p, false);
  std::shuffle(out.pairs.begin(), out.pairs.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Detection metrics

std::size_t ScoreSet::targets() const noexcept {
  return static_cast<std::size_t>(std::count(is_target.begin(), is_target.end(), true));
}

std::size_t ScoreSet::nontargets() const noexcept { return is_target.size() - targets(); }

void ScoreSet::validate() const {
  if (scores.size() != is_target.size())
    throw std::invalid_argument("score set: scores and target flags differ in length");
  if (targets() == 0 || nontargets() == 0)
    throw std::invalid_argument("score set needs at least one target and one non-target trial");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("score set contains a non-finite score");
}

std::vector<OperatingPoint> operating_points(const ScoreSet& set) {
  set.validate();
  std::vector<std::size_t> order(set.scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });

  const double nt = static_cast<double>(set.targets());
  const double nn = static_cast<double>(set.nontargets());
  const std::size_t total_nontargets = set.nontargets();
  std::vector<OperatingPoint> points;
  std::size_t targets_below = 0, nontargets_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = set.scores[order[i]];
    points.push_back({t, static_cast<double>(total_nontargets - nontargets_below) / nn,
                      static_cast<double>(targets_below) / nt});
    for (; i < order.size() && set.scores[order[i]] == t; ++i) {
      if (set.is_target[order[i]]) ++targets_below;
      else ++nontargets_below;
    }
  }
  points.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  return points;
}

EerResult eer_from_points(std::span<const OperatingPoint> points) {
  if (points.size() < 2) throw std::invalid_argument("EER needs at least two operating points");
  for (std::size_t j = 0; j < points.size(); ++j) {
    const double dj = points[j].far - points[j].frr;
    if (dj > 0.0) continue;
    if (dj == 0.0 || j == 0) return {points[j].far, points[j].threshold};
    const auto& lo = points[j - 1];
    const auto& hi = points[j];
    const double di = lo.far - lo.frr;
    const double a = di / (di - dj);
    const double eer = lo.far + a * (hi.far - lo.far);
    const double thr = std::isfinite(hi.threshold) ? lo.threshold + a * (hi.threshold - lo.threshold)
                                                   : lo.threshold;
    return {eer, thr};
  }
  throw std::logic_error("operating points never cross FAR = FRR");
}

EerResult compute_eer(const ScoreSet& scores) {
  const auto points = operating_points(scores);
  return eer_from_points(points);
}

DcfResult min_dcf_from_points(std::span<const OperatingPoint> points, double p_target,
                              double c_miss, double c_fa) {
  if (!(p_target > 0.0 && p_target < 1.0)) throw std::invalid_argument("p_target must lie in (0,1)");
  if (!(c_miss > 0.0 && c_fa > 0.0)) throw std::invalid_argument("detection costs must be positive");
  const double w_miss = c_miss * p_target;
  const double w_fa = c_fa * (1.0 - p_target);
  const double norm = std::min(w_miss, w_fa);
  DcfResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (const auto& p : points) {
    const double dcf = (w_miss * p.frr + w_fa * p.far) / norm;
    if (dcf < best.min_dcf) best = {dcf, p.threshold};
  }
  best.min_dcf = std::min(best.min_dcf, 1.0);
  return best;
}

DcfResult compute_min_dcf(const ScoreSet& scores, double p_target, double c_miss, double c_fa) {
  const auto points = operating_points(scores);
  return min_dcf_from_points(points, p_target, c_miss, c_fa);
}

// ---------------------------------------------------------------------------
// Linear probes

ProbeResult linear_probe(const Tensor& features, std::span<const int> labels, std::uint64_t seed,
                         const ProbeConfig& config) {
  const auto n = features.rows(), d = features.cols();
  if (labels.size() != n) throw std::invalid_argument("linear_probe: one label per feature row");
  if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0))
    throw std::invalid_argument("linear_probe: train fraction must lie in (0,1)");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw std::invalid_argument("linear_probe: need at least two classes");
  std::map<int, int> dense;
  for (const auto& [label, rows] : by_class) dense.emplace(label, static_cast<int>(dense.size()));
  const auto c = by_class.size();

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, test;
  for (auto& [label, rows] : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    auto k = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(rows.size())));
    if (rows.size() >= 2) k = std::clamp<std::size_t>(k, 1, rows.size() - 1);
    train.insert(train.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
    test.insert(test.end(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  if (train.empty() || test.empty()) throw std::invalid_argument("linear_probe: too few samples");

  // Standardize with training statistics.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (auto i : train)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features[i * d + j];
  for (auto& m : mu) m /= static_cast<double>(train.size());
  for (auto i : train)
    for (std::size_t j = 0; j < d; ++j) {
      const double z = features[i * d + j] - mu[j];
      sd[j] += z * z;
    }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(train.size()));
  auto feature = [&](std::size_t i, std::size_t j) {
    return sd[j] > 1e-12 ? (features[i * d + j] - mu[j]) / sd[j] : 0.0;
  };

  std::vector<double> w(d * c, 0.0), b(c, 0.0), gw(d * c), gb(c), logits(c);
  const double inv_n = 1.0 / static_cast<double>(train.size());
  auto predict = [&](std::size_t i) {
    for (std::size_t k = 0; k < c; ++k) {
      double z = b[k];
      for (std::size_t j = 0; j < d; ++j) z += feature(i, j) * w[j * c + k];
      logits[k] = z;
    }
  };
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (auto i : train) {
      predict(i);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double s = 0.0;
      for (auto& z : logits) s += (z = std::exp(z - mx));
      const auto y = static_cast<std::size_t>(dense.at(labels[i]));
      for (std::size_t k = 0; k < c; ++k) {
        const double r = logits[k] / s - (k == y ? 1.0 : 0.0);
        gb[k] += r * inv_n;
        for (std::size_t j = 0; j < d; ++j) gw[j * c + k] += r * feature(i, j) * inv_n;
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= config.learning_rate * (gw[q] + config.l2 * w[q]);
    for (std::size_t k = 0; k < c; ++k) b[k] -= config.learning_rate * gb[k];
  }

  ProbeResult r;
  r.classes = c;
  r.train_size = train.size();
  r.test_size = test.size();
  std::size_t correct = 0;
  std::vector<std::size_t> test_counts(c, 0);
  for (auto i : test) {
    predict(i);
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const auto y = static_cast<std::size_t>(dense.at(labels[i]));
    correct += pred == y;
    ++test_counts[y];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  r.chance = static_cast<double>(*std::max_element(test_counts.begin(), test_counts.end())) /
             static_cast<double>(test.size());
  return r;
}

ProbeResult subgroup_probe(const Tensor& features, std::span<const int> subgroup_labels,
                           AgeGroup group, std::uint64_t seed, const ProbeConfig& config) {
  std::set<int> distinct(subgroup_labels.begin(), subgroup_labels.end());
  if (distinct.size() < 2) {
    throw std::invalid_argument("subgroup_probe: group '" + std::string(group_name(group)) +
                                "' has fewer than two subgroups present");
  }
  return linear_probe(features, subgroup_labels, seed, config);
}

}  // namespace advmtl
