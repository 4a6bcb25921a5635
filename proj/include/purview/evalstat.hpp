#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace purview {

enum class Orientation { higher_is_anomalous, lower_is_anomalous };

std::string_view to_string(Orientation o);

/// Confidence scores for normal (in) and anomalous (out) samples. The
/// orientation is always explicit.
struct ScoreSet {
  std::vector<double> in_scores;
  std::vector<double> out_scores;
  Orientation orientation = Orientation::higher_is_anomalous;

  /// Throws ConfigError on an empty side or a non-finite score.
  void validate() const;
};

/// 0.5 * P_in(q <= t) + 0.5 * P_out(q > t), maximized over every threshold
/// (midpoints of adjacent distinct scores and +-inf). Scores are oriented
/// first, so "q > t" always means "flagged anomalous".
double detection_accuracy_max(const ScoreSet& s);

/// The same balanced accuracy at a fixed threshold delta on the raw score.
/// For lower_is_anomalous a sample is flagged when q < delta.
double detection_accuracy_at(const ScoreSet& s, double delta);

/// Mann-Whitney: P(out > in) + 0.5 P(out == in), after orientation.
double auroc(const ScoreSet& s);

/// Average precision with anomalies as positives: descending scores, tied
/// scores enter as one group, sum of (recall step) * precision.
double aupr(const ScoreSet& s);

/// Two-sided Student-t critical value. Degrees of freedom 1..30 come from a
/// table at p in {0.2, 0.1, 0.05, 0.02, 0.01, 0.001}; larger df use the
/// normal quantile. Any other p snaps to the nearest tabulated level and
/// `note` says so.
double t_critical(int df, double p, std::string* note = nullptr);

struct TTestResult {
  double m = 0.0;
  double sigma2 = 0.0;
  double t = 0.0;
  std::size_t k = 0, r = 0;
  double n1 = 0.0, n2 = 0.0;
  double p = 0.05;
  double critical = 0.0;
  bool significant = false;
  /// sigma2 == 0 with m != 0: t is +-inf and the result counts as significant.
  bool degenerate = false;
  std::string note;

  nlohmann::json to_json() const;
};

/// Corrected repeated k-fold CV paired t-test on x_ij = a_ij - b_ij, stored
/// flat as index j * k + i (repetition-major):
///   m = mean(x), sigma2 = sum (x - m)^2 / (kr - 1),
///   t = m / sqrt((1/kr + n2/n1) sigma2), df = kr - 1.
/// n1 / n2 are the training / testing instance counts of one round.
TTestResult corrected_ttest(const std::vector<double>& a, const std::vector<double>& b, std::size_t k, std::size_t r,
                            double n1, double n2, double p = 0.05);

/// Threshold-free and thresholded metrics of one score set.
struct Metrics {
  double acc_max = 0.0;
  double acc_fixed = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;

  nlohmann::json to_json() const;
};

Metrics evaluate(const ScoreSet& s, double delta);

/// One table row: a dataset pairing scored by one method.
struct EvalRow {
  std::string pairing;
  std::string method;
  /// Means over rounds.
  Metrics mean;
  /// Per-round values, in round order.
  std::vector<Metrics> rounds;
  /// Comparison against the baseline row of the same pairing, if any.
  std::optional<TTestResult> ttest;

  nlohmann::json to_json() const;
};

struct EvalReport {
  nlohmann::json config;
  std::vector<EvalRow> rows;

  nlohmann::json to_json() const;
  /// pairing,method,acc_max,acc_fixed,auroc,aupr,t,significant
  std::string to_csv() const;
};

}  // namespace purview
