#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/attacks.hpp"
#include "purview/classifier.hpp"
#include "purview/detector.hpp"
#include "purview/evalstat.hpp"
#include "purview/probe.hpp"

namespace purview {

enum class ExperimentKind { ood, adversarial, corruption, figure3, figure4, ablation_labels, ablation_detector };

std::string_view to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(std::string_view name);

/// One-factor-at-a-time detector sweep; every axis varies alone with the
/// others at the detector defaults.
struct AblationGrid {
  std::vector<std::size_t> layers{2, 3, 4};
  std::vector<std::size_t> neurons{10, 15, 20, 25, 30, 35, 40, 45};
  std::vector<std::size_t> epochs{10, 15, 20, 25, 30, 35};
  std::vector<double> lrs{0.1, 0.05, 0.01, 0.005, 0.001, 0.0005};

  nlohmann::json to_json() const;
  static AblationGrid from_json(const nlohmann::json& j);
};

/// Everything a run depends on. A run is reproducible from this alone.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::ood;
  /// digits | shapes (procedural glyphs) or mnist (IDX files in data_dir).
  std::string in_dataset = "digits";
  /// OOD sets: uniform_noise, gaussian_noise_images, shuffled_pixels,
  /// shapes, digits, or file:<dataset blob>.
  std::vector<std::string> out_datasets{"uniform_noise", "shuffled_pixels"};
  std::string data_dir;
  std::size_t n_train = 6000;
  std::size_t n_test = 500;
  std::size_t n_ood = 500;
  /// small_cnn | small_resnet | mlp
  std::string arch = "small_cnn";
  TrainConfig train;
  LabelRequest label;
  Objective objective = Objective::bce;
  DetectorConfig detector;
  std::vector<AttackSpec> attacks;
  std::vector<CorruptionKind> corruptions;
  std::vector<int> severities{1, 2, 3, 4, 5};
  /// Corruption parameter file; empty = built-in table.
  std::string corruption_table;
  /// figure4: number of leading classes per rung.
  std::vector<std::size_t> ladder{2, 5, 10};
  AblationGrid grid;
  /// ablation_labels: designs to compare; empty = the default set.
  std::vector<LabelRequest> label_designs;
  std::size_t k = 5;
  std::size_t r = 2;
  std::uint64_t seed = 1;
  std::string out_dir = "runs";

  /// Fills attacks / corruptions / label designs when left empty.
  static ExperimentConfig defaults(ExperimentKind kind);
  void validate() const;
  nlohmann::json to_json() const;
  /// Requires `version` == 1; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// SHA-256 (hex) of the canonical JSON form, excluding out_dir.
  std::string hash() const;
};

/// NR label designs compared by the label ablation: all-hot, top-k for
/// k = 2..5, even/odd taxonomy, max-logit objective.
std::vector<std::pair<LabelRequest, Objective>> default_label_designs(std::size_t classes);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

struct Artifact {
  std::string path;
  std::string sha256;
  std::size_t bytes = 0;
};

/// Append-only run directory owned by one pipeline through a lock file.
class RunDir {
 public:
  /// Creates <out_dir>/<hash prefix>-<UTC timestamp>[-n] and takes its lock.
  RunDir(const std::filesystem::path& out_dir, const std::string& config_hash);
  /// Opens an explicit directory (must not exist yet).
  explicit RunDir(std::filesystem::path root);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::filesystem::path& root() const { return root_; }
  /// Absolute path for a new artifact; throws StateError if it exists.
  std::filesystem::path fresh(const std::string& rel);
  void write(const std::string& rel, std::string_view bytes);
  /// Records a file already written at fresh(rel).
  void record(const std::string& rel);
  const std::vector<Artifact>& artifacts() const { return artifacts_; }

 private:
  void lock();
  std::filesystem::path root_;
  std::vector<Artifact> artifacts_;
  bool locked_ = false;
};

struct PipelineResult {
  EvalReport report;
  std::filesystem::path run_dir;
  std::vector<Artifact> artifacts;
};

/// data -> train -> probe -> detect -> evaluate, writing features,
/// checkpoints, cross-validation results, report.json / report.csv and
/// manifest.json into a fresh run directory. A failing stage rethrows with
/// the stage name after writing a partial manifest.
PipelineResult run_pipeline(const ExperimentConfig& cfg);

/// Same, into an explicit (new) directory.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

/// Per-layer quantile rows: dataset,layer,statistic_kind,n,q05,q25,q50,q75,q95,mean.
/// grad is the squared gradient norm of the layer (weight + bias), activ the
/// squared norm of its output, loss the per-sample loss (repeated per layer).
std::string figure_series_csv(const std::vector<std::pair<std::string, ProbeMatrix>>& sets,
                              const std::string& rung = "");

/// Median of summed grad norms (OOD) minus the same for in-distribution.
double median_gap(const ProbeMatrix& in, const ProbeMatrix& ood);

/// Process exit code for an exception: 2 configuration, 3 numeric, 1 other.
int exit_code_for(const std::exception& e);

}  // namespace purview
