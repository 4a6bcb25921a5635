#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "purview/network.hpp"

namespace purview {

/// Builds a scalar loss from a network output on the 64-bit verification path.
using LossBuilder = std::function<Var(Graph<double>&, Network<double>&, Var input)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Scalars checked per ParamSet; all of them when the set is smaller.
  std::size_t samples_per_param = 48;
  std::uint64_t seed = 0;
  /// Also check the gradient with respect to the input.
  bool check_input = false;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool finite = true;
  /// Coordinates whose +-step interval straddles a kink (ReLU, max pool):
  /// the one-sided slopes disagree and the analytic value matches one of
  /// them. Counted here and left out of max_rel_error.
  std::size_t kinks = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> entries;
  bool passed = false;
  double max_rel_error() const;
  /// Names of the entries that exceeded tolerance or went non-finite.
  std::vector<std::string> failures(double tolerance) const;
  std::size_t kinks() const;
};

/// Compares backward() against central finite differences, both computed in
/// double precision on a 64-bit copy of `network`. Relative error is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport grad_check(const Model& network, const Tensor& input, const LossBuilder& loss,
                           const GradCheckOptions& options = {});

/// Loss builders for the standard objectives.
LossBuilder bce_loss(std::vector<double> label);
LossBuilder cross_entropy_loss(std::vector<int> classes);
LossBuilder max_logit_loss();

}  // namespace purview
