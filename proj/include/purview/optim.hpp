#pragma once

#include <vector>

#include "purview/network.hpp"

namespace purview {

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool nesterov = false;
};

/// SGD with optional (Nesterov) momentum and L2 weight decay, one velocity
/// buffer per ParamSet:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * (nesterov ? g + mu * v : v)
class Sgd {
 public:
  explicit Sgd(SgdOptions options) : options_(options) {}

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }

  void step(std::vector<ParamSet<float>>& params);

 private:
  SgdOptions options_;
  std::vector<std::vector<float>> velocity_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected first and second moments.
class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void step(std::vector<ParamSet<float>>& params);
  long steps() const { return t_; }

 private:
  AdamOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long t_ = 0;
};

}  // namespace purview
