#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/tensor.hpp"

namespace purview {

struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

/// Labelled image set; images are [n, c, h, w].
struct Dataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  /// Present once normalize() has been applied; reused at probe time.
  std::optional<Normalization> normalization;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return class_names.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t sample_numel() const { return images.dim(1) * images.dim(2) * images.dim(3); }
  std::span<const float> image(std::size_t i) const {
    return images.data().subspan(i * sample_numel(), sample_numel());
  }
  std::span<float> image(std::size_t i) { return images.data().subspan(i * sample_numel(), sample_numel()); }

  /// Checks label range and, for unnormalized data, that pixels lie in [0, 1].
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;
};

/// Builds a dataset from per-image data; throws on inconsistent sizes.
Dataset make_dataset(std::string name, Shape sample_shape, std::vector<float> pixels, std::vector<int> labels,
                     std::vector<std::string> class_names);

/// Keeps only the listed classes and relabels them 0..k-1 in the listed order.
Dataset filter_classes(const Dataset& ds, std::span<const int> classes);
Dataset concat(const Dataset& a, const Dataset& b, std::string name);

// --- IDX ------------------------------------------------------------------

/// Raw IDX array of unsigned bytes (type code 0x08).
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

IdxArray parse_idx(std::string_view file_bytes);
IdxArray read_idx(const std::filesystem::path& path);
std::string encode_idx(const IdxArray& array);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

std::vector<int> idx_labels(const IdxArray& array);
/// [n, 1, h, w] with bytes divided by 255.
Tensor idx_images(const IdxArray& array);
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::string name);

// --- normalization ----------------------------------------------------------

Normalization channel_stats(const Dataset& ds);
/// (x - mean) / std per channel; attaches the statistics.
Dataset normalize(const Dataset& ds, const Normalization& stats);

// --- folds ------------------------------------------------------------------

/// Repeated k-fold assignment of n indices.
struct FoldPlan {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t r = 0;
  std::uint64_t seed = 0;
  /// One shuffled index order per repetition.
  std::vector<std::vector<std::size_t>> permutations;
  /// k + 1 cut points into each permutation (same for every repetition).
  std::vector<std::size_t> bounds;

  std::vector<std::size_t> test_indices(std::size_t rep, std::size_t fold) const;
  std::vector<std::size_t> train_indices(std::size_t rep, std::size_t fold) const;
  std::size_t fold_size(std::size_t fold) const { return bounds[fold + 1] - bounds[fold]; }
};

/// Seeded shuffle per repetition, split into k folds whose sizes differ by at
/// most one (the first n % k folds take the extra element).
FoldPlan make_folds(std::size_t n, std::size_t k, std::size_t r, std::uint64_t seed);

// --- synthetic data ---------------------------------------------------------

enum class GlyphFamily { digits, shapes };

/// Procedurally rendered 28x28 grayscale glyphs, ten classes per family,
/// with random affine jitter and stroke width. Stand-in for MNIST-family
/// data when no IDX files are available.
Dataset synth_glyphs(GlyphFamily family, std::size_t n, std::uint64_t seed, std::size_t size = 28);

enum class OodKind { uniform_noise, gaussian_noise_images, shuffled_pixels };

std::string_view to_string(OodKind kind);
OodKind ood_kind_from_string(std::string_view name);

/// n images shaped like `reference`: i.i.d. U[0,1]; N(0.5, 0.25) clipped;
/// or per-sample pixel permutations of reference images.
Dataset synth_ood(OodKind kind, const Dataset& reference, std::size_t n, std::uint64_t seed);

// --- corruption -------------------------------------------------------------

enum class CorruptionKind { gaussian_noise, speckle_noise, box_blur, darken, brighten, contrast };

std::string_view to_string(CorruptionKind kind);
CorruptionKind corruption_kind_from_string(std::string_view name);
std::vector<CorruptionKind> all_corruption_kinds();

/// Per-kind parameter for severities 1..5.
class CorruptionTable {
 public:
  static CorruptionTable defaults();
  static CorruptionTable from_json(const nlohmann::json& j);
  static CorruptionTable load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  double parameter(CorruptionKind kind, int severity) const;
  int version() const { return version_; }

 private:
  int version_ = 1;
  std::map<CorruptionKind, std::array<double, 5>> params_;
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
};

/// Applies the corruption per image, clamped to [0, 1]; deterministic in seed.
Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, const CorruptionTable& table, std::uint64_t seed);

// --- persistence ------------------------------------------------------------

void save_dataset(const std::filesystem::path& path, const Dataset& ds, const nlohmann::json& extra = {});
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace purview
