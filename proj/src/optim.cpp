#include "purview/optim.hpp"

#include <cmath>

namespace purview {
namespace {

template <class State>
void ensure_state(State& state, const std::vector<ParamSet<float>>& params) {
  if (state.empty()) {
    for (const auto& p : params) state.emplace_back(p.tensor.numel(), 0.0f);
    return;
  }
  if (state.size() != params.size()) throw DimensionError("optimizer state does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state[i].size() != params[i].tensor.numel())
      throw DimensionError("optimizer state shape mismatch for " + params[i].name);
  }
}

}  // namespace

void Sgd::step(std::vector<ParamSet<float>>& params) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  ensure_state(velocity_, params);
  const auto lr = static_cast<float>(options_.lr);
  const auto mu = static_cast<float>(options_.momentum);
  const auto wd = static_cast<float>(options_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.has_grad()) continue;
    auto values = t.data();
    auto grad = t.grad();
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      float g = grad[j] + wd * values[j];
      float update = g;
      if (mu != 0.0f) {
        vel[j] = mu * vel[j] + g;
        update = options_.nesterov ? g + mu * vel[j] : vel[j];
      }
      values[j] -= lr * update;
    }
  }
}

void Adam::step(std::vector<ParamSet<float>>& params) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(options_.beta1);
  const auto b2 = static_cast<float>(options_.beta2);
  const auto step_size = static_cast<float>(options_.lr / c1);
  const auto sqrt_c2 = static_cast<float>(std::sqrt(c2));
  const auto eps = static_cast<float>(options_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.has_grad()) continue;
    auto values = t.data();
    auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * grad[j];
      v[j] = b2 * v[j] + (1.0f - b2) * grad[j] * grad[j];
      values[j] -= step_size * m[j] / (std::sqrt(v[j]) / sqrt_c2 + eps);
    }
  }
}

}  // namespace purview
