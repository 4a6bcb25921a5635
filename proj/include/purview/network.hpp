#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/graph.hpp"

namespace purview {

enum class ArchKind { mlp, small_cnn, small_resnet, detector };

std::string_view to_string(ArchKind kind);
ArchKind arch_kind_from_string(std::string_view name);

/// Architecture description; enough to rebuild a network deterministically.
struct ArchSpec {
  ArchKind kind = ArchKind::small_cnn;
  /// mlp/detector: hidden layer widths. small_cnn: channels per conv block.
  /// small_resnet: {stem channels, residual block count}.
  std::vector<std::size_t> widths;
  std::size_t classes = 10;
  /// Per-sample input shape: {C, H, W} for images, {d} for feature vectors.
  Shape input_shape;
  std::size_t kernel = 3;
  bool bias = true;
  /// Dropout after the first hidden layer (detector only).
  double dropout = 0.0;
  /// Fixed input standardization applied inside forward(); empty = none.
  std::vector<float> input_mean;
  std::vector<float> input_std;

  static ArchSpec mlp(Shape input, std::vector<std::size_t> hidden, std::size_t classes);
  /// Two conv blocks (8, 16 channels) then one dense layer by default.
  static ArchSpec small_cnn(Shape input, std::size_t classes, std::vector<std::size_t> channels = {8, 16});
  /// Stem conv, then `blocks` residual blocks each followed by 2x2 pooling, then dense.
  static ArchSpec small_resnet(Shape input, std::size_t classes, std::size_t channels = 8, std::size_t blocks = 2);
  /// d -> hidden -> ... -> 1 logit; `layers` counts dense layers (>= 2).
  static ArchSpec detector(std::size_t input_dim, std::size_t hidden, std::size_t layers, double dropout);

  void validate() const;
  nlohmann::json to_json() const;
  static ArchSpec from_json(const nlohmann::json& j);
  bool operator==(const ArchSpec&) const = default;
};

/// One named weight or bias array.
template <class T>
struct ParamSet {
  std::string name;
  BasicTensor<T> tensor;
  std::size_t index = 0;
};

struct ForwardOptions {
  bool train = false;
  /// Required when train is true and the architecture has dropout.
  Rng* rng = nullptr;
};

/// Result of one forward pass.
struct ForwardResult {
  Var logits;
  /// Output of each parametric layer (pre-nonlinearity), in parameter order.
  std::vector<Var> activations;
};

/// One instruction of a network's layer program.
struct LayerStep {
  enum class Op { normalize, conv, dense, relu, pool, flatten, push_skip, residual_add, dropout };
  Op op;
  std::size_t weight = 0;  // parameter index of weight; bias follows when present
  bool has_bias = false;
  std::string layer;
};

/// A feed-forward network over the layer vocabulary in graph.hpp.
template <class T>
class Network {
 public:
  Network() = default;
  /// Builds the layer program and initializes weights and biases
  /// uniformly in +-1/sqrt(fan_in).
  Network(ArchSpec arch, std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::vector<ParamSet<T>>& params() { return params_; }
  const std::vector<ParamSet<T>>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }
  std::size_t scalar_count() const;
  /// Number of recorded activation layers.
  std::size_t activation_count() const;
  std::vector<std::string> param_names() const;
  std::vector<std::string> activation_names() const;

  ParamSet<T>& param(const std::string& name);

  /// Records a forward pass of an input batch [B, ...input_shape] on `g`.
  ForwardResult forward(Graph<T>& g, Var input, const ForwardOptions& options = {});

  void zero_grad();
  void drop_grad();

  /// Copies the network with a different scalar type (same names and order).
  template <class U>
  Network<U> cast() const {
    Network<U> out;
    out.arch_ = arch_;
    out.program_ = program_;
    for (const auto& p : params_) out.params_.push_back({p.name, p.tensor.template cast<U>(), p.index});
    return out;
  }

  /// Flat copy of every parameter value in index order.
  std::vector<T> flat_values() const;

  using Step = LayerStep;

 private:
  template <class>
  friend class Network;

  void build_program(std::uint64_t seed);
  void add_param(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);

  ArchSpec arch_;
  std::vector<ParamSet<T>> params_;
  std::vector<Step> program_;
};

extern template class Network<float>;
extern template class Network<double>;

using Model = Network<float>;

/// Batches `samples` consecutive images from a flat buffer into a tensor.
Tensor make_batch(const Shape& sample_shape, std::span<const float> flat, std::size_t first, std::size_t count);

}  // namespace purview
