#include "purview/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace purview {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.finite ? e.max_rel_error : INFINITY);
  return worst;
}

std::vector<std::string> GradCheckReport::failures(double tolerance) const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.finite || e.max_rel_error > tolerance) out.push_back(e.name);
  return out;
}

std::size_t GradCheckReport::kinks() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.kinks;
  return n;
}

namespace {

double evaluate(Network<double>& net, const BasicTensor<double>& x, const LossBuilder& loss) {
  Graph<double> g;
  Var in = g.input(x);
  return g.scalar(loss(g, net, in));
}

std::vector<std::size_t> pick(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= k) return idx;
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

/// Perturbs one scalar through `at` and compares against the analytic value.
template <class Set>
void check_coordinate(ParamCheck& entry, double analytic, double h, double tolerance, Set&& at) {
  ++entry.checked;
  double up = NAN, down = NAN;
  try {
    up = at(h);
    down = at(-h);
  } catch (const NumericError&) {
    entry.finite = false;
    return;
  }
  const double numeric = (up - down) / (2.0 * h);
  if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
    entry.finite = false;
    return;
  }
  const double err = rel(analytic, numeric);
  if (err > tolerance) {
    const double mid = at(0.0);
    const double right = (up - mid) / h;
    const double left = (mid - down) / h;
    if (rel(left, right) > tolerance && std::min(rel(analytic, left), rel(analytic, right)) <= tolerance) {
      ++entry.kinks;
      return;
    }
  }
  entry.max_rel_error = std::max(entry.max_rel_error, err);
}

}  // namespace

GradCheckReport grad_check(const Model& network, const Tensor& input, const LossBuilder& loss,
                           const GradCheckOptions& options) {
  auto net = network.cast<double>();
  auto x = input.cast<double>();
  net.drop_grad();

  Graph<double> g;
  Var in = g.input(x, options.check_input);
  Var l = loss(g, net, in);
  g.backward(l);
  const std::vector<double> input_grad(g.grad(in).begin(), g.grad(in).end());

  Rng rng(options.seed);
  const double h = options.step;
  GradCheckReport report;
  for (auto& p : net.params()) {
    ParamCheck entry{p.name};
    const std::vector<double> analytic = p.tensor.has_grad()
                                             ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                                             : std::vector<double>(p.tensor.numel(), 0.0);
    for (auto i : pick(p.tensor.numel(), options.samples_per_param, rng)) {
      const double saved = p.tensor[i];
      check_coordinate(entry, analytic[i], h, options.tolerance, [&](double d) {
        p.tensor[i] = saved + d;
        double v = NAN;
        try {
          v = evaluate(net, x, loss);
        } catch (...) {
          p.tensor[i] = saved;
          throw;
        }
        p.tensor[i] = saved;
        return v;
      });
    }
    report.entries.push_back(entry);
  }
  if (options.check_input) {
    ParamCheck entry{"input"};
    for (auto i : pick(x.numel(), options.samples_per_param, rng)) {
      const double saved = x[i];
      check_coordinate(entry, input_grad.empty() ? 0.0 : input_grad[i], h, options.tolerance, [&](double d) {
        x[i] = saved + d;
        double v = NAN;
        try {
          v = evaluate(net, x, loss);
        } catch (...) {
          x[i] = saved;
          throw;
        }
        x[i] = saved;
        return v;
      });
    }
    report.entries.push_back(entry);
  }
  report.passed = report.failures(options.tolerance).empty();
  return report;
}

LossBuilder bce_loss(std::vector<double> label) {
  return [label = std::move(label)](Graph<double>& g, Network<double>& net, Var in) {
    auto out = net.forward(g, in);
    return ops::bce_with_logits<double>(g, out.logits, label);
  };
}

LossBuilder cross_entropy_loss(std::vector<int> classes) {
  return [classes = std::move(classes)](Graph<double>& g, Network<double>& net, Var in) {
    auto out = net.forward(g, in);
    return ops::softmax_cross_entropy<double>(g, out.logits, classes);
  };
}

LossBuilder max_logit_loss() {
  return [](Graph<double>& g, Network<double>& net, Var in) {
    auto out = net.forward(g, in);
    return ops::max_logit<double>(g, out.logits);
  };
}

}  // namespace purview
