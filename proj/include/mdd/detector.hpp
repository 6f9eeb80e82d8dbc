// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mdd/common.hpp"

namespace mdd {

struct DetectionThreshold {
  double tau_det = 0.0;
  double fpr_target = 0.0;
  size_t calibration_size = 0;
  double realized_fpr = 0.0;
};

// tau is the m-th ascending order statistic with m = ceil(N * (1 - target)):
// the minimal observed value for which #{d > tau}/N stays at or below the
// target (classification uses strict inequality).
inline DetectionThreshold calibrate_threshold(const std::vector<double>& clean_d,
                                              double fpr_target) {
  if (clean_d.empty())
    throw ValueError("cannot calibrate a threshold on an empty set");
  if (!(fpr_target > 0.0 && fpr_target < 1.0))
    throw RangeError("fpr_target must lie in (0, 1)");
  for (double d : clean_d)
    if (!(d >= 0.0) || !std::isfinite(d))
      throw ValueError("calibration d-values must be finite and >= 0");

  std::vector<double> sorted = clean_d;
  std::sort(sorted.begin(), sorted.end());
  size_t n = sorted.size();
  size_t m = static_cast<size_t>(std::ceil(n * (1.0 - fpr_target)));
  m = std::clamp<size_t>(m, 1, n);

  DetectionThreshold th;
  th.fpr_target = fpr_target;
  th.calibration_size = n;
  th.tau_det = sorted[m - 1];
  size_t above = 0;
  for (double d : clean_d)
    if (d > th.tau_det) ++above;
  th.realized_fpr = static_cast<double>(above) / n;
  return th;
}

enum class Detection { clean, adversarial };

inline Detection detect(double d, const DetectionThreshold& threshold) {
  if (!(d >= 0.0)) throw ValueError("score difference must be >= 0");
  return d > threshold.tau_det ? Detection::adversarial : Detection::clean;
}

// percentage of adversarial d-values above the threshold
inline double detection_rate(const std::vector<double>& adv_d,
                             const DetectionThreshold& threshold) {
  if (adv_d.empty())
    throw ValueError("cannot compute a detection rate on an empty set");
  size_t above = 0;
  for (double d : adv_d)
    if (d > threshold.tau_det) ++above;
  return 100.0 * above / adv_d.size();
}

namespace detail {

// Operating points swept over the pooled score values plus a sentinel above
// the maximum. FRR(tau) = #{target < tau}/Nt, FAR(tau) = #{impostor >= tau}/Ni.
inline std::vector<std::array<double, 3>> operating_points(
    const std::vector<double>& target_scores,
    const std::vector<double>& impostor_scores) {
  if (target_scores.empty() || impostor_scores.empty())
    throw ValueError("EER needs nonempty target and impostor score sets");
  std::vector<double> pooled = target_scores;
  pooled.insert(pooled.end(), impostor_scores.begin(), impostor_scores.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  pooled.push_back(pooled.back() + 1.0);  // tau above every score

  std::vector<std::array<double, 3>> pts;
  pts.reserve(pooled.size());
  for (double tau : pooled) {
    size_t frr_n = 0, far_n = 0;
    for (double s : target_scores)
      if (s < tau) ++frr_n;
    for (double s : impostor_scores)
      if (s >= tau) ++far_n;
    pts.push_back({tau, static_cast<double>(far_n) / impostor_scores.size(),
                   static_cast<double>(frr_n) / target_scores.size()});
  }
  return pts;
}

}  // namespace detail

// Equal error rate (%) with linear interpolation between the two operating
// points bracketing the FAR/FRR crossing.
inline double eer(const std::vector<double>& target_scores,
                  const std::vector<double>& impostor_scores) {
  auto pts = detail::operating_points(target_scores, impostor_scores);
  // diff = FRR - FAR is nondecreasing in tau; find the sign change
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    double d0 = pts[i][2] - pts[i][1];
    double d1 = pts[i + 1][2] - pts[i + 1][1];
    if (d0 > 0) break;  // crossed before the first point
    if (d1 < 0) continue;
    if (d0 == d1) return 100.0 * pts[i][2];
    double t = -d0 / (d1 - d0);
    double eer_val = pts[i][2] + t * (pts[i + 1][2] - pts[i][2]);
    return 100.0 * eer_val;
  }
  // no interior crossing: one side dominates everywhere
  double first = pts.front()[2] - pts.front()[1];
  return first > 0 ? 100.0 * std::min(pts.front()[1], pts.front()[2])
                   : 100.0 * std::min(pts.back()[1], pts.back()[2]);
}

// Monotone staircase of (FAR, FRR) points, one per distinct pooled score plus
// the all-rejecting endpoint.
inline std::vector<std::pair<double, double>> det_curve(
    const std::vector<double>& target_scores,
    const std::vector<double>& impostor_scores) {
  auto pts = detail::operating_points(target_scores, impostor_scores);
  std::vector<std::pair<double, double>> curve;
  curve.reserve(pts.size());
  for (const auto& p : pts) curve.emplace_back(p[1], p[2]);
  return curve;
}

struct Histogram {
  std::vector<size_t> counts;
  double lo = 0.0, hi = 0.0;

  size_t total() const {
    size_t n = 0;
    for (size_t c : counts) n += c;
    return n;
  }
};

// equal-width bins over [min, max]; the max value lands in the last bin
inline Histogram score_histogram(const std::vector<double>& d_values,
                                 int n_bins) {
  if (d_values.empty()) throw ValueError("cannot bin an empty set");
  if (n_bins < 1) throw RangeError("need at least one bin");
  Histogram h;
  h.counts.assign(n_bins, 0);
  h.lo = *std::min_element(d_values.begin(), d_values.end());
  h.hi = *std::max_element(d_values.begin(), d_values.end());
  if (h.hi == h.lo) {
    h.counts[0] = d_values.size();
    return h;
  }
  double width = (h.hi - h.lo) / n_bins;
  for (double d : d_values) {
    int b = static_cast<int>((d - h.lo) / width);
    b = std::clamp(b, 0, n_bins - 1);
    ++h.counts[b];
  }
  return h;
}

struct MetricsReport {
  std::map<double, double> dr_at_fpr;   // fpr target -> detection rate (%)
  std::map<double, double> realized_fpr_calibration;
  std::map<double, double> realized_fpr_eval;  // on held-out clean d-values
  double eer_clean = 0.0;     // tar vs nontar, raw scores
  double eer_attacked = 0.0;  // tar vs adversarial nontar, raw scores
  double eer_clean_purified = 0.0;     // tar vs nontar, purified scores
  double eer_attacked_purified = 0.0;  // tar vs adv, purified scores
  size_t n_target = 0, n_nontarget = 0, n_adversarial = 0;
  std::string scoring_path;
  std::string notes;
};

}  // namespace mdd
