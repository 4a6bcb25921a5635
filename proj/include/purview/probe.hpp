#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/data.hpp"
#include "purview/network.hpp"

namespace purview {

enum class LabelDesign { all_hot, top_k, class_subset, taxonomy, empty, fr_target, fr_subset };
enum class Provenance { nr, fr };
enum class Objective { bce, max_logit };

std::string_view to_string(LabelDesign d);
std::string_view to_string(Provenance p);
std::string_view to_string(Objective o);
LabelDesign label_design_from_string(std::string_view name);
Objective objective_from_string(std::string_view name);

/// What to build; the logit-dependent designs (top_k, taxonomy) are resolved
/// per sample from that sample's logits.
struct LabelRequest {
  LabelDesign design = LabelDesign::all_hot;
  std::size_t k = 2;
  /// class_subset / fr_target / fr_subset members.
  std::vector<int> indices;
  /// taxonomy: disjoint class groups; the group holding the top-1 class is used.
  std::vector<std::vector<int>> groups;
  /// FR designs only: permit a single positive class.
  bool allow_singleton = false;

  static LabelRequest top_k_of(std::size_t k);
  static LabelRequest of(LabelDesign design, std::vector<int> indices = {}, bool allow_singleton = false);
  static LabelRequest taxonomy_of(std::vector<std::vector<int>> groups);

  Provenance provenance() const;
  bool needs_logits() const { return design == LabelDesign::top_k || design == LabelDesign::taxonomy; }
  nlohmann::json to_json() const;
  static LabelRequest from_json(const nlohmann::json& j);
};

/// Multi-hot target over the N trained classes. Only make_label() builds
/// one, and it refuses exactly one positive bit unless an FR request
/// explicitly allows it.
class ConfoundingLabel {
 public:
  const std::vector<float>& bits() const { return bits_; }
  std::size_t classes() const { return bits_.size(); }
  std::size_t positives() const;
  LabelDesign design() const { return design_; }
  Provenance provenance() const { return provenance_; }
  /// e.g. "all_hot", "top_k(3)", "fr_target(4)".
  const std::string& describe() const { return text_; }

 private:
  friend ConfoundingLabel make_label(const LabelRequest&, std::size_t, std::span<const float>);
  ConfoundingLabel() = default;

  std::vector<float> bits_;
  LabelDesign design_ = LabelDesign::all_hot;
  Provenance provenance_ = Provenance::nr;
  std::string text_;
};

/// Throws LabelError for a single positive bit (without the FR override),
/// out-of-range k or indices, or missing logits for logit-dependent designs.
ConfoundingLabel make_label(const LabelRequest& request, std::size_t classes, std::span<const float> logits = {});

struct ProbeRecord {
  std::size_t sample_id = 0;
  /// Squared L2 norm of the loss gradient per ParamSet, in index order.
  std::vector<double> grad_norms;
  /// Squared L2 norm of each recorded layer output.
  std::vector<double> activ_norms;
  double loss = 0.0;
  std::vector<float> logits;
  std::string label_design;
  Objective objective = Objective::bce;
};

/// Forward, loss, backward for one image [C, H, W] (or [1, C, H, W]).
/// Parameters are left untouched; gradient buffers are released afterwards.
ProbeRecord probe_sample(Model& model, const Tensor& image, const ConfoundingLabel& label,
                         Objective objective = Objective::bce, std::size_t sample_id = 0);
/// Same, with the label resolved from this sample's own logits.
ProbeRecord probe_sample(Model& model, const Tensor& image, const LabelRequest& request,
                         Objective objective = Objective::bce, std::size_t sample_id = 0);

struct ProbeFailure {
  std::size_t sample_id;
  std::string message;
};

struct ProbeMatrix {
  std::vector<std::string> param_names;
  std::vector<std::string> activation_names;
  std::vector<ProbeRecord> records;
  std::vector<ProbeFailure> failures;

  std::vector<std::vector<double>> grad_rows() const;
  std::vector<std::vector<double>> activ_rows() const;
  std::vector<double> losses() const;
};

/// Probes every image; sample ids are first_id + position. Failing samples
/// are reported in `failures` and skipped.
ProbeMatrix probe_batch(Model& model, const Dataset& ds, const LabelRequest& request,
                        Objective objective = Objective::bce, std::size_t first_id = 0);

/// Maximum softmax probability (computed in double) per image.
std::vector<double> baseline_msp(Model& model, const Tensor& images);
double baseline_msp(std::span<const float> logits);

/// CSV `sample_id,label_design,objective,loss,g0..,a0..` with shortest
/// round-trip number formatting, plus `<path>.json` naming every column.
void write_features(const std::filesystem::path& path, const ProbeMatrix& m, const nlohmann::json& extra = {});
ProbeMatrix read_features(const std::filesystem::path& path);

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

}  // namespace purview
