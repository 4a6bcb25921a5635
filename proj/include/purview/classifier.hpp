#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/data.hpp"
#include "purview/network.hpp"

namespace purview {

/// SGD recipe for the classifiers: Nesterov momentum, L2 weight decay and
/// step decay of the learning rate at fixed fractions of the run.
struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  std::vector<double> milestones{0.5, 0.75};
  double gamma = 0.1;
  std::uint64_t seed = 0;
  /// Store training-set channel statistics in the architecture so that
  /// every later forward pass (probe, attacks) standardizes the same way.
  bool normalize_inputs = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate for 0-based epoch e: lr * gamma^(number of milestones m
/// with e >= ceil(m * epochs)).
double scheduled_lr(const TrainConfig& cfg, std::size_t epoch);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  /// NaN when no test split was given.
  double test_acc = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

/// Cross-entropy training with a seeded per-epoch shuffle. Throws
/// NumericError naming the epoch if the loss stops being finite.
TrainResult train_classifier(const Dataset& train, ArchSpec arch, const TrainConfig& cfg,
                             const Dataset* test = nullptr);

std::string training_log_csv(const std::vector<EpochLog>& log);

/// Index of the largest value; the lowest index wins ties.
std::size_t argmax(std::span<const float> values);

struct Prediction {
  Tensor logits;  // [B, N]
  std::vector<int> classes;
};

/// Evaluation-mode forward over `images` [B, ...input_shape] in chunks.
Prediction predict(Model& model, const Tensor& images, std::size_t chunk = 256);
double accuracy(Model& model, const Dataset& ds);

/// Squared L2 norm of every recorded layer output, one row per image.
/// Rows follow Model::activation_names().
std::vector<std::vector<double>> capture_activations(Model& model, const Tensor& images);

}  // namespace purview
