#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/data.hpp"
#include "purview/evalstat.hpp"
#include "purview/network.hpp"

namespace purview {

/// Row-major [rows x cols] feature block.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows);
  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  FeatureMatrix select(const std::vector<std::size_t>& indices) const;
  /// Keeps the listed columns, in the given order.
  FeatureMatrix columns(const std::vector<std::size_t>& keep) const;
};

struct DetectorConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 40;
  /// Dense layers including the output layer.
  std::size_t layers = 2;
  double dropout = 0.5;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  /// log(x + floor) before standardization; squared gradient norms span
  /// many orders of magnitude.
  bool log_features = true;
  double log_floor = 1e-30;
  double delta = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
};

struct DetectorEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

/// Trained detector: a d -> hidden -> ... -> 1 network whose input
/// standardization (training statistics) lives in the architecture.
struct Detector {
  DetectorConfig config;
  Model model;
  std::vector<DetectorEpoch> log;
};

/// Binary cross-entropy with Adam; label 0 = normal, 1 = anomalous.
/// Initialization, shuffling and dropout masks derive from cfg.seed.
Detector train_detector(const FeatureMatrix& normal, const FeatureMatrix& anomalous, DetectorConfig cfg);

/// Pre-sigmoid output per row; monotone in score().
std::vector<double> detector_logits(const Detector& d, const FeatureMatrix& x);
/// Sigmoid of the logit, in (0, 1) for finite logits.
std::vector<double> score(const Detector& d, const FeatureMatrix& x);
double score(const Detector& d, std::span<const double> row);

/// Per-class fold plans over balanced pools. The larger class is
/// downsampled (seeded) to the size of the smaller; each class is folded
/// independently and round (rep, fold) pairs fold i of both.
struct CvPlan {
  std::size_t k = 5, r = 2;
  std::uint64_t seed = 0;
  std::vector<std::size_t> normal_pool;
  std::vector<std::size_t> anomalous_pool;
  FoldPlan normal_folds;
  FoldPlan anomalous_folds;

  std::size_t rounds() const { return k * r; }
  /// Indices into the caller's matrices.
  std::vector<std::size_t> train_normal(std::size_t round) const;
  std::vector<std::size_t> test_normal(std::size_t round) const;
  std::vector<std::size_t> train_anomalous(std::size_t round) const;
  std::vector<std::size_t> test_anomalous(std::size_t round) const;
};

/// Throws ConfigError when a test fold would lack either class.
CvPlan make_cv_plan(std::size_t n_normal, std::size_t n_anomalous, std::size_t k, std::size_t r, std::uint64_t seed);

struct CvRound {
  std::size_t rep = 0, fold = 0;
  std::uint64_t seed = 0;
  std::size_t n_train = 0, n_test = 0;
  Metrics metrics;
  std::vector<double> in_scores;
  std::vector<double> out_scores;
};

struct CvResult {
  std::string method;
  std::size_t k = 0, r = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<CvRound> rounds;

  Metrics mean() const;
  std::vector<double> round_values(double Metrics::* field) const;
  EvalRow to_row(const std::string& pairing) const;
  nlohmann::json to_json() const;
  static CvResult from_json(const nlohmann::json& j);
};

/// Trains a fresh detector per round on the training folds of both
/// classes and scores the held-out folds. AUROC/AUPR use the pre-sigmoid
/// logit (monotone in the probability, free of float saturation ties);
/// accuracy at delta uses the probability. Each round owns its detector,
/// so dropping or reordering rounds changes no other round.
CvResult run_cv(const FeatureMatrix& normal, const FeatureMatrix& anomalous, const DetectorConfig& cfg,
                const CvPlan& plan);

/// Convenience form: rows are put in a canonical (lexicographic) order
/// before folding, so the result does not depend on input row order.
CvResult run_cv(const FeatureMatrix& normal, const FeatureMatrix& anomalous, const DetectorConfig& cfg,
                std::size_t k = 5, std::size_t r = 2);

/// Scores that need no training (e.g. the max-softmax baseline), evaluated
/// on the same held-out folds as run_cv.
CvResult score_cv(const std::vector<double>& normal, const std::vector<double>& anomalous, Orientation orientation,
                  const CvPlan& plan, double delta, const std::string& method);

}  // namespace purview
