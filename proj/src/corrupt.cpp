#include <algorithm>
#include <cmath>
#include <numeric>

#include "purview/checkpoint.hpp"
#include "purview/data.hpp"
#include "purview/rng.hpp"

namespace purview {

std::string_view to_string(OodKind kind) {
  switch (kind) {
    case OodKind::uniform_noise: return "uniform_noise";
    case OodKind::gaussian_noise_images: return "gaussian_noise_images";
    case OodKind::shuffled_pixels: return "shuffled_pixels";
  }
  return "unknown";
}

OodKind ood_kind_from_string(std::string_view name) {
  for (auto k : {OodKind::uniform_noise, OodKind::gaussian_noise_images, OodKind::shuffled_pixels})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown OOD kind '" + std::string(name) + "'");
}

Dataset synth_ood(OodKind kind, const Dataset& reference, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("OOD sample count must be positive");
  const Shape shape = reference.sample_shape();
  const std::size_t per = reference.sample_numel();
  const std::size_t plane = shape[1] * shape[2];
  Rng rng(seed);
  std::vector<float> pixels(n * per);
  switch (kind) {
    case OodKind::uniform_noise:
      for (auto& v : pixels) v = static_cast<float>(rng.uniform());
      break;
    case OodKind::gaussian_noise_images:
      for (auto& v : pixels) v = static_cast<float>(std::clamp(rng.normal(0.5, 0.25), 0.0, 1.0));
      break;
    case OodKind::shuffled_pixels: {
      if (reference.normalization) throw ConfigError("shuffled_pixels needs an unnormalized reference");
      std::vector<std::size_t> perm(plane);
      for (std::size_t i = 0; i < n; ++i) {
        const auto src = reference.image(static_cast<std::size_t>(rng.below(reference.size())));
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(perm));
        float* dst = pixels.data() + i * per;
        for (std::size_t c = 0; c < shape[0]; ++c)
          for (std::size_t p = 0; p < plane; ++p) dst[c * plane + p] = src[c * plane + perm[p]];
      }
      break;
    }
  }
  return make_dataset(std::string(to_string(kind)), shape, std::move(pixels), std::vector<int>(n, 0), {"ood"});
}

// --- corruption -------------------------------------------------------------

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::speckle_noise: return "speckle_noise";
    case CorruptionKind::box_blur: return "box_blur";
    case CorruptionKind::darken: return "darken";
    case CorruptionKind::brighten: return "brighten";
    case CorruptionKind::contrast: return "contrast";
  }
  return "unknown";
}

std::vector<CorruptionKind> all_corruption_kinds() {
  return {CorruptionKind::gaussian_noise, CorruptionKind::speckle_noise, CorruptionKind::box_blur,
          CorruptionKind::darken,         CorruptionKind::brighten,      CorruptionKind::contrast};
}

CorruptionKind corruption_kind_from_string(std::string_view name) {
  for (auto k : all_corruption_kinds())
    if (to_string(k) == name) return k;
  throw ConfigError("unknown corruption kind '" + std::string(name) + "'");
}

CorruptionTable CorruptionTable::defaults() {
  // Keep in sync with config/corruptions.json.
  CorruptionTable t;
  t.params_[CorruptionKind::gaussian_noise] = {0.02, 0.05, 0.10, 0.18, 0.30};  // sigma
  t.params_[CorruptionKind::speckle_noise] = {0.06, 0.12, 0.20, 0.30, 0.45};   // sigma of x*N(0, s)
  t.params_[CorruptionKind::box_blur] = {1, 2, 3, 4, 5};                       // radius in pixels
  t.params_[CorruptionKind::darken] = {0.85, 0.70, 0.55, 0.40, 0.25};          // multiplier 1 - 0.15*level
  t.params_[CorruptionKind::brighten] = {0.10, 0.20, 0.30, 0.40, 0.50};        // x + (1 - x)*b
  t.params_[CorruptionKind::contrast] = {0.75, 0.60, 0.45, 0.30, 0.15};        // (x - mean)*c + mean
  return t;
}

CorruptionTable CorruptionTable::from_json(const nlohmann::json& j) {
  CorruptionTable t;
  try {
    t.version_ = j.at("version").get<int>();
    for (const auto& [name, levels] : j.at("kinds").items()) {
      const auto kind = corruption_kind_from_string(name);
      const auto v = levels.get<std::vector<double>>();
      if (v.size() != 5) throw ConfigError("corruption '" + name + "' must list 5 severity parameters");
      std::array<double, 5> a{};
      std::copy(v.begin(), v.end(), a.begin());
      // magnitude must move away from the identity as severity rises
      const bool rising = std::is_sorted(a.begin(), a.end()) && std::adjacent_find(a.begin(), a.end()) == a.end();
      const bool falling =
          std::is_sorted(a.rbegin(), a.rend()) && std::adjacent_find(a.begin(), a.end()) == a.end();
      const bool decreasing_kind = kind == CorruptionKind::darken || kind == CorruptionKind::contrast;
      if (decreasing_kind ? !falling : !rising)
        throw ConfigError("corruption '" + name + "' parameters must be strictly monotone in severity");
      t.params_[kind] = a;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid corruption table: ") + e.what());
  }
  for (auto k : all_corruption_kinds())
    if (!t.params_.count(k)) throw ConfigError("corruption table is missing '" + std::string(to_string(k)) + "'");
  return t;
}

CorruptionTable CorruptionTable::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

nlohmann::json CorruptionTable::to_json() const {
  nlohmann::json kinds;
  for (const auto& [k, v] : params_) kinds[std::string(to_string(k))] = v;
  return {{"version", version_}, {"kinds", kinds}};
}

double CorruptionTable::parameter(CorruptionKind kind, int severity) const {
  if (severity < 1 || severity > 5) throw ConfigError("severity must be in 1..5, got " + std::to_string(severity));
  return params_.at(kind)[static_cast<std::size_t>(severity - 1)];
}

namespace {

void box_blur_plane(std::span<float> plane, std::size_t h, std::size_t w, int radius) {
  std::vector<float> tmp(plane.size());
  // horizontal then vertical pass; edges average over the in-bounds window
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      int count = 0;
      for (int d = -radius; d <= radius; ++d) {
        const auto xx = static_cast<std::ptrdiff_t>(x) + d;
        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
        acc += plane[y * w + static_cast<std::size_t>(xx)];
        ++count;
      }
      tmp[y * w + x] = static_cast<float>(acc / count);
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      int count = 0;
      for (int d = -radius; d <= radius; ++d) {
        const auto yy = static_cast<std::ptrdiff_t>(y) + d;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        acc += tmp[static_cast<std::size_t>(yy) * w + x];
        ++count;
      }
      plane[y * w + x] = static_cast<float>(acc / count);
    }
}

}  // namespace

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, const CorruptionTable& table, std::uint64_t seed) {
  if (ds.normalization) throw ConfigError("corruptions apply to unnormalized [0, 1] images");
  const double p = table.parameter(spec.kind, spec.severity);
  Dataset out = ds;
  out.name = ds.name + "/" + std::string(to_string(spec.kind)) + "@" + std::to_string(spec.severity);
  const std::size_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    auto img = out.image(i);
    switch (spec.kind) {
      case CorruptionKind::gaussian_noise:
        for (auto& v : img) v = static_cast<float>(v + rng.normal(0.0, p));
        break;
      case CorruptionKind::speckle_noise:
        for (auto& v : img) v = static_cast<float>(v + v * rng.normal(0.0, p));
        break;
      case CorruptionKind::box_blur:
        for (std::size_t ch = 0; ch < c; ++ch) box_blur_plane(img.subspan(ch * h * w, h * w), h, w, static_cast<int>(p));
        break;
      case CorruptionKind::darken:
        for (auto& v : img) v = static_cast<float>(v * p);
        break;
      case CorruptionKind::brighten:
        for (auto& v : img) v = static_cast<float>(v + (1.0 - v) * p);
        break;
      case CorruptionKind::contrast: {
        const double mean = std::accumulate(img.begin(), img.end(), 0.0) / static_cast<double>(img.size());
        for (auto& v : img) v = static_cast<float>((v - mean) * p + mean);
        break;
      }
    }
    for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

}  // namespace purview
