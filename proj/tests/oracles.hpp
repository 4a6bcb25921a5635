#pragma once

// Brute-force reference implementations for the metric tests. Written for
// clarity, not speed; all O(n^2) or exhaustive.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace oracle {

inline std::vector<double> flip(std::vector<double> v) {
  for (auto& x : v) x = -x;
  return v;
}

/// Pairwise P(out > in) + 0.5 P(out == in); higher = anomalous.
inline double auroc(const std::vector<double>& in, const std::vector<double>& out) {
  double s = 0.0;
  for (double o : out)
    for (double i : in) s += o > i ? 1.0 : (o == i ? 0.5 : 0.0);
  return s / (static_cast<double>(in.size()) * static_cast<double>(out.size()));
}

inline double accuracy_at(const std::vector<double>& in, const std::vector<double>& out, double t) {
  double a = 0.0, b = 0.0;
  for (double i : in) a += i <= t ? 1.0 : 0.0;
  for (double o : out) b += o > t ? 1.0 : 0.0;
  return 0.5 * a / static_cast<double>(in.size()) + 0.5 * b / static_cast<double>(out.size());
}

/// Every midpoint between adjacent distinct scores, plus +-inf.
inline double accuracy_max(const std::vector<double>& in, const std::vector<double>& out) {
  std::vector<double> all(in);
  all.insert(all.end(), out.begin(), out.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  double best = std::max(accuracy_at(in, out, -std::numeric_limits<double>::infinity()),
                         accuracy_at(in, out, std::numeric_limits<double>::infinity()));
  for (std::size_t i = 0; i + 1 < all.size(); ++i)
    best = std::max(best, accuracy_at(in, out, 0.5 * (all[i] + all[i + 1])));
  return best;
}

/// Precision/recall at each distinct threshold from the top, summed as
/// (R_i - R_{i-1}) * P_i.
inline double average_precision(const std::vector<double>& in, const std::vector<double>& out) {
  std::vector<double> cuts(in);
  cuts.insert(cuts.end(), out.begin(), out.end());
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  double prev_recall = 0.0, ap = 0.0;
  for (double c : cuts) {
    double tp = 0.0, fp = 0.0;
    for (double o : out) tp += o >= c ? 1.0 : 0.0;
    for (double i : in) fp += i >= c ? 1.0 : 0.0;
    const double recall = tp / static_cast<double>(out.size());
    if (tp > 0.0) ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

/// t = m / sqrt((1/kr + n2/n1) s2), s2 with kr - 1 in the denominator.
inline double corrected_t(const std::vector<double>& a, const std::vector<double>& b, double n1, double n2) {
  const double kr = static_cast<double>(a.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m += a[i] - b[i];
  m /= kr;
  double s2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s2 += (a[i] - b[i] - m) * (a[i] - b[i] - m);
  s2 /= kr - 1.0;
  return m / std::sqrt((1.0 / kr + n2 / n1) * s2);
}

}  // namespace oracle
