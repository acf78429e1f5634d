#pragma once

// Quadratic-time reference sweep for EER and minDCF. Every threshold is
// evaluated by recounting all trials, independent of the sorted single pass
// used by the library.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <set>
#include <vector>

namespace oracle {

struct SweepPoint {
  double threshold;
  double far;
  double frr;
};

inline std::vector<SweepPoint> sweep(const std::vector<double>& scores,
                                     const std::vector<bool>& is_target) {
  std::set<double> distinct(scores.begin(), scores.end());
  std::vector<double> thresholds(distinct.begin(), distinct.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t nt = 0, nn = 0;
  for (bool t : is_target) (t ? nt : nn) += 1;
  std::vector<SweepPoint> out;
  for (double thr : thresholds) {
    std::size_t false_accepts = 0, misses = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool accept = scores[i] >= thr;
      if (is_target[i] && !accept) ++misses;
      if (!is_target[i] && accept) ++false_accepts;
    }
    out.push_back({thr, static_cast<double>(false_accepts) / static_cast<double>(nn),
                   static_cast<double>(misses) / static_cast<double>(nt)});
  }
  return out;
}

// FAR falls and FRR rises with the threshold; the first point with FAR <= FRR
// and its predecessor bracket the crossing.
inline double eer(const std::vector<double>& scores, const std::vector<bool>& is_target) {
  const auto pts = sweep(scores, is_target);
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const double dj = pts[j].far - pts[j].frr;
    if (dj > 0.0) continue;
    if (dj == 0.0 || j == 0) return pts[j].far;
    const double di = pts[j - 1].far - pts[j - 1].frr;
    const double a = di / (di - dj);
    return pts[j - 1].far + a * (pts[j].far - pts[j - 1].far);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline double min_dcf(const std::vector<double>& scores, const std::vector<bool>& is_target,
                      double p_target, double c_miss, double c_fa) {
  const double w_miss = c_miss * p_target, w_fa = c_fa * (1.0 - p_target);
  const double norm = std::min(w_miss, w_fa);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : sweep(scores, is_target))
    best = std::min(best, (w_miss * p.frr + w_fa * p.far) / norm);
  return std::min(best, 1.0);
}

}  // namespace oracle
