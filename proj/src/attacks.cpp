#include "purview/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "purview/errors.hpp"

namespace purview {

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::pgd: return "pgd";
    case AttackKind::iterll: return "iterll";
    case AttackKind::semantic: return "semantic";
  }
  return "unknown";
}

std::vector<AttackKind> all_attack_kinds() {
  return {AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::iterll, AttackKind::semantic};
}

AttackKind attack_kind_from_string(std::string_view name) {
  for (auto k : all_attack_kinds())
    if (to_string(k) == name) return k;
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

AttackSpec AttackSpec::defaults(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return {kind, 0.03, 0.0, 0, 0};
    case AttackKind::bim: return {kind, 0.03, 0.008, 100, 0};
    case AttackKind::pgd: return {kind, 0.03, 0.008, 10, 0};
    case AttackKind::iterll: return {kind, 0.05, 0.005, 15, 0};
    case AttackKind::semantic: return {kind, 0.0, 0.0, 0, 0};
  }
  return {};
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
  const bool iterative = kind == AttackKind::bim || kind == AttackKind::pgd || kind == AttackKind::iterll;
  if (iterative) {
    if (!(alpha > 0.0)) throw ConfigError(std::string(to_string(kind)) + " needs alpha > 0");
    if (steps < 1) throw ConfigError(std::string(to_string(kind)) + " needs at least one step");
  }
}

nlohmann::json AttackSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"eps", epsilon}, {"alpha", alpha}, {"steps", steps}, {"seed", seed},
          {"norm", "linf"}};
}

AttackSpec AttackSpec::from_json(const nlohmann::json& j) {
  try {
    AttackSpec s = defaults(attack_kind_from_string(j.at("kind").get<std::string>()));
    s.epsilon = j.value("eps", s.epsilon);
    s.alpha = j.value("alpha", s.alpha);
    s.steps = j.value("steps", s.steps);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid attack spec: ") + e.what());
  }
}

namespace {

void check_images(const Model& model, const Tensor& images, std::span<const int> classes) {
  const Shape& want = model.arch().input_shape;
  if (images.rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), images.shape().begin() + 1))
    throw DimensionError("attack expects [B, " + shape_to_string(want) + "], got " + shape_to_string(images.shape()));
  if (classes.size() != images.dim(0)) throw DimensionError("one class per image is required");
  for (int c : classes)
    if (c < 0 || static_cast<std::size_t>(c) >= model.arch().classes)
      throw ConfigError("attack class " + std::to_string(c) + " out of range");
}

/// Sum-reduced CE so each row's input gradient is independent of the batch.
Tensor input_gradient(Model& model, const Tensor& x, std::span<const int> classes) {
  Graph<float> g;
  const Var in = g.input(x, true);
  const auto out = model.forward(g, in);
  g.backward(ops::softmax_cross_entropy<float>(g, out.logits, classes, Reduction::sum));
  model.drop_grad();
  const auto grad = g.grad(in);
  if (grad.size() != x.numel()) throw StateError("input gradient did not reach the image");
  return Tensor(x.shape(), std::vector<float>(grad.begin(), grad.end()));
}

float sign(float v) { return v > 0.0f ? 1.0f : v < 0.0f ? -1.0f : 0.0f; }

/// Bounds of the eps-ball around x intersected with [0, 1], nudged so that
/// |bound - x| <= eps holds exactly when evaluated in double.
std::pair<float, float> ball(float x, double eps) {
  float lo = static_cast<float>(x - eps);
  float hi = static_cast<float>(x + eps);
  while (static_cast<double>(x) - lo > eps) lo = std::nextafter(lo, 2.0f);
  while (static_cast<double>(hi) - x > eps) hi = std::nextafter(hi, -1.0f);
  return {std::max(lo, 0.0f), std::min(hi, 1.0f)};
}

void project(std::span<float> adv, std::span<const float> clean, double eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const auto [lo, hi] = ball(clean[i], eps);
    adv[i] = std::clamp(adv[i], lo, hi);
  }
}

}  // namespace

Tensor fgsm(Model& model, const Tensor& images, std::span<const int> classes, double epsilon) {
  check_images(model, images, classes);
  if (!(epsilon >= 0.0)) throw ConfigError("attack epsilon must be >= 0");
  const Tensor grad = input_gradient(model, images, classes);
  Tensor adv = images;
  for (std::size_t i = 0; i < adv.numel(); ++i)
    adv[i] = static_cast<float>(images[i] + epsilon * sign(grad[i]));
  project(adv.data(), images.data(), epsilon);
  return adv;
}

std::vector<int> least_likely(const Tensor& logits) {
  const auto [b, n] = logits_layout(logits.shape());
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.data().subspan(i * n, n);
    out[i] = static_cast<int>(std::min_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Tensor iterate_attack(Model& model, const Tensor& images, std::span<const int> classes, const AttackSpec& spec,
                      std::size_t first_id) {
  spec.validate();
  if (spec.kind != AttackKind::bim && spec.kind != AttackKind::pgd && spec.kind != AttackKind::iterll)
    throw ConfigError(std::string(to_string(spec.kind)) + " is not an iterative attack");
  check_images(model, images, classes);
  const std::size_t per = images.numel() / images.dim(0);

  std::vector<int> targets(classes.begin(), classes.end());
  float direction = 1.0f;
  if (spec.kind == AttackKind::iterll) {
    Graph<float> g;
    targets = least_likely(g.value_tensor(model.forward(g, g.input(images)).logits));
    direction = -1.0f;
  }

  Tensor adv = images;
  if (spec.kind == AttackKind::pgd) {
    for (std::size_t r = 0; r < images.dim(0); ++r) {
      Rng rng(derive_seed(spec.seed, first_id + r));
      for (std::size_t j = 0; j < per; ++j) {
        const std::size_t i = r * per + j;
        adv[i] = static_cast<float>(images[i] + rng.uniform(-spec.epsilon, spec.epsilon));
      }
    }
    project(adv.data(), images.data(), spec.epsilon);
  }

  for (std::size_t step = 0; step < spec.steps; ++step) {
    const Tensor grad = input_gradient(model, adv, targets);
    for (std::size_t i = 0; i < adv.numel(); ++i)
      adv[i] = static_cast<float>(adv[i] + direction * spec.alpha * sign(grad[i]));
    project(adv.data(), images.data(), spec.epsilon);
  }
  return adv;
}

Tensor semantic(const Tensor& images) {
  Tensor out = images;
  for (auto& v : out.data()) v = 1.0f - v;
  return out;
}

Dataset attack_dataset(Model& model, const Dataset& ds, const AttackSpec& spec, std::size_t chunk) {
  spec.validate();
  if (ds.normalization) throw ConfigError("attacks operate on unnormalized [0, 1] images");
  Dataset out = ds;
  out.name = ds.name + "/" + std::string(to_string(spec.kind));
  const Shape shape = ds.sample_shape();
  const std::size_t per = ds.sample_numel();
  for (std::size_t first = 0; first < ds.size(); first += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - first);
    const Tensor x = make_batch(shape, ds.images.data(), first, count);
    const std::span<const int> y(ds.labels.data() + first, count);
    Tensor adv;
    switch (spec.kind) {
      case AttackKind::fgsm: adv = fgsm(model, x, y, spec.epsilon); break;
      case AttackKind::semantic: adv = semantic(x); break;
      default: adv = iterate_attack(model, x, y, spec, first); break;
    }
    std::copy(adv.data().begin(), adv.data().end(),
              out.images.data().begin() + static_cast<std::ptrdiff_t>(first * per));
  }
  return out;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("linf_distance needs equal shapes");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

}  // namespace purview
