#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/data.hpp"
#include "purview/network.hpp"

namespace purview {

enum class AttackKind { fgsm, bim, pgd, iterll, semantic };

std::string_view to_string(AttackKind kind);
AttackKind attack_kind_from_string(std::string_view name);
std::vector<AttackKind> all_attack_kinds();

/// L-infinity attack settings in pixel units ([0, 1] images).
struct AttackSpec {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.03;
  double alpha = 0.0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;

  /// FGSM eps .03; BIM eps .03 alpha .008 x100; PGD eps .03 alpha .008 x10
  /// (random start); IterLL eps .05 alpha .005 x15; semantic has none.
  static AttackSpec defaults(AttackKind kind);

  void validate() const;
  nlohmann::json to_json() const;
  static AttackSpec from_json(const nlohmann::json& j);
};

/// x' = clip(x + eps * sign(grad_x CE(f(x), y))). `images` is [B, ...].
Tensor fgsm(Model& model, const Tensor& images, std::span<const int> classes, double epsilon);

/// BIM/PGD ascend cross-entropy on `classes`; IterLL descends it on the
/// least-likely clean class. Each step is projected onto the eps-ball and
/// clipped to [0, 1]. PGD's random start is seeded per sample from
/// (spec.seed, first_id + row).
Tensor iterate_attack(Model& model, const Tensor& images, std::span<const int> classes, const AttackSpec& spec,
                      std::size_t first_id = 0);

/// 1 - x.
Tensor semantic(const Tensor& images);

/// Lowest-index argmin per row of [B, N] logits.
std::vector<int> least_likely(const Tensor& logits);

/// Attacks every image of `ds` in chunks; labels and class names are kept.
Dataset attack_dataset(Model& model, const Dataset& ds, const AttackSpec& spec, std::size_t chunk = 128);

/// Largest |x' - x| over all pixels, computed in double.
double linf_distance(const Tensor& a, const Tensor& b);

}  // namespace purview
