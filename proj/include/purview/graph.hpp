#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "purview/rng.hpp"
#include "purview/tensor.hpp"

namespace purview {

/// Handle to a node recorded on a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

/// Tape of forward operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order; backward walks it in reverse and visits each node
/// once. Gradients reaching a parameter node are added into the parameter
/// tensor's grad buffer, so repeated backward calls accumulate.
template <class T>
class Graph {
 public:
  using Backprop = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  /// Records a leaf holding a copy of `x`. Rejects non-finite data.
  Var input(const BasicTensor<T>& x, bool requires_grad = false);
  /// Records a leaf that aliases a trainable tensor; gradients flow into p.grad().
  Var parameter(BasicTensor<T>& p);

  const Shape& shape(Var v) const { return node(v).shape; }
  std::span<const T> value(Var v) const { return node(v).value; }
  T scalar(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  /// Gradient of the last backward() with respect to `v`; empty if none reached it.
  std::span<const T> grad(Var v) const { return node(v).grad; }
  BasicTensor<T> value_tensor(Var v) const;

  /// Backpropagates from a scalar node.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Appends an op output. `backprop` is invoked only when the node requires grad.
  Var emit(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, Backprop backprop,
           std::string_view op_name);

  /// Upstream gradient of node `id` (valid inside a Backprop callback).
  std::span<const T> upstream(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient accumulator for `v`, allocated on first use; empty span if `v` needs no grad.
  std::span<T> accum(Var v);

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    Backprop backprop;
    BasicTensor<T>* param = nullptr;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

enum class Reduction { mean, sum };

/// Layer and loss primitives. Every function records one node on the graph.
namespace ops {

template <class T>
Var dense(Graph<T>& g, Var x, Var weight, Var bias, std::string_view layer = "dense");
/// Stride 1, zero padding of kernel/2 on each side (odd kernels only).
template <class T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias, std::string_view layer = "conv2d");
template <class T>
Var relu(Graph<T>& g, Var x);
template <class T>
Var sigmoid(Graph<T>& g, Var x);
/// 2x2 window, stride 2; ties resolve to the first element in row-major order.
template <class T>
Var maxpool2d(Graph<T>& g, Var x, std::string_view layer = "maxpool2d");
template <class T>
Var flatten(Graph<T>& g, Var x);
/// Elementwise sum of equal shapes (residual connections).
template <class T>
Var add(Graph<T>& g, Var a, Var b, std::string_view layer = "residual_add");
template <class T>
Var scale(Graph<T>& g, Var x, T factor);
/// (x - mean[c]) / stddev[c] over NCHW or [B, C] inputs.
template <class T>
Var channel_affine(Graph<T>& g, Var x, std::span<const T> mean, std::span<const T> stddev);
/// Inverted dropout; identity when rate is 0.
template <class T>
Var dropout(Graph<T>& g, Var x, double rate, Rng& rng);

/// Mean over all elements of softplus(z) - y*z. `targets` either matches the
/// logits element count or has one entry per class, broadcast across the batch.
template <class T>
Var bce_with_logits(Graph<T>& g, Var logits, std::span<const T> targets);
template <class T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> classes,
                          Reduction reduction = Reduction::mean);
/// Sum over rows of the row maximum; gradient 1 at the first argmax.
template <class T>
Var max_logit(Graph<T>& g, Var logits);
/// Sum of all elements.
template <class T>
Var sum(Graph<T>& g, Var x);

/// Elementwise op with caller-supplied forward and derivative (test hooks, custom activations).
template <class T>
Var pointwise(Graph<T>& g, Var x, std::function<T(T)> forward, std::function<T(T, T)> derivative,
              std::string_view name);

}  // namespace ops

enum class LayerKind { dense, conv2d, relu, sigmoid, maxpool2d, flatten, residual_add };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// Single entry point over the layer vocabulary. `a`/`b` are the weight and
/// bias for dense/conv2d, or the skip operand (in `a`) for residual_add.
template <class T>
Var forward_layer(Graph<T>& g, LayerKind kind, Var input, Var a = {}, Var b = {},
                  std::string_view layer = {});

/// Infers [batch, classes] from a logits shape of rank 1 or 2.
std::pair<std::size_t, std::size_t> logits_layout(const Shape& shape);

}  // namespace purview
