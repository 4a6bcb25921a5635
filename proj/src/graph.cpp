#include "purview/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace purview {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::pair<std::size_t, std::size_t> logits_layout(const Shape& shape) {
  if (shape.size() == 1) return {1, shape[0]};
  if (shape.size() == 2) return {shape[0], shape[1]};
  throw DimensionError("logits must be rank 1 or 2, got " + shape_to_string(shape));
}

// ---------------------------------------------------------------------------
// Graph

template <class T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw StateError("variable does not belong to this graph");
  return nodes_[v.id];
}

template <class T>
Var Graph<T>::input(const BasicTensor<T>& x, bool requires_grad) {
  if (!x.all_finite()) throw NumericError("non-finite value in graph input");
  Node n;
  n.shape = x.shape();
  n.value = x.values();
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class T>
Var Graph<T>::parameter(BasicTensor<T>& p) {
  if (!p.all_finite()) throw NumericError("non-finite parameter value");
  Node n;
  n.shape = p.shape();
  n.value = p.values();
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class T>
T Graph<T>::scalar(Var v) const {
  const auto& n = node(v);
  if (n.value.size() != 1) throw DimensionError("expected a scalar, got shape " + shape_to_string(n.shape));
  return n.value[0];
}

template <class T>
BasicTensor<T> Graph<T>::value_tensor(Var v) const {
  const auto& n = node(v);
  return BasicTensor<T>(n.shape, n.value);
}

template <class T>
Var Graph<T>::emit(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, Backprop backprop,
                   std::string_view op_name) {
  for (T x : value) {
    if (!std::isfinite(x)) throw NumericError("non-finite output in " + std::string(op_name));
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (Var in : inputs) {
    if (in.valid() && node(in).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class T>
std::span<T> Graph<T>::accum(Var v) {
  if (!v.valid()) return {};
  auto& n = nodes_[v.id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <class T>
void Graph<T>::backward(Var loss) {
  if (nodes_.empty()) throw StateError("backward called before any forward pass");
  const auto& root = node(loss);
  if (root.value.size() != 1) throw DimensionError("backward requires a scalar loss, got " + shape_to_string(root.shape));
  for (auto& n : nodes_) n.grad.clear();
  if (!root.requires_grad) return;
  nodes_[loss.id].grad.assign(1, T{1});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backprop) n.backprop(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto dst = n.param->ensure_grad();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
  }
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Ops

namespace ops {
namespace {

[[noreturn]] void shape_error(std::string_view layer, const std::string& what) {
  throw DimensionError(std::string(layer) + ": " + what);
}

template <class T>
T softplus(T z) {
  // log(1 + e^z) without overflow for large |z|.
  return std::max(z, T{0}) + std::log1p(std::exp(-std::abs(z)));
}

template <class T>
T stable_sigmoid(T z) {
  if (z >= 0) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

}  // namespace

template <class T>
Var dense(Graph<T>& g, Var x, Var weight, Var bias, std::string_view layer) {
  const auto& xs = g.shape(x);
  const auto& ws = g.shape(weight);
  if (xs.size() != 2) shape_error(layer, "dense input must be 2-D [batch, features], got " + shape_to_string(xs));
  if (ws.size() != 2 || ws[1] != xs[1]) {
    shape_error(layer, "weight " + shape_to_string(ws) + " incompatible with input " + shape_to_string(xs));
  }
  const std::size_t batch = xs[0], in = xs[1], out = ws[0];
  if (bias.valid() && (g.shape(bias).size() != 1 || g.shape(bias)[0] != out)) {
    shape_error(layer, "bias " + shape_to_string(g.shape(bias)) + " does not match " + std::to_string(out) + " outputs");
  }
  const auto xv = g.value(x);
  const auto wv = g.value(weight);
  std::vector<T> y(batch * out);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xr = xv.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = wv.data() + o * in;
      T acc = bias.valid() ? g.value(bias)[o] : T{0};
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[b * out + o] = acc;
    }
  }
  return g.emit(
      {batch, out}, std::move(y), {x, weight, bias},
      [x, weight, bias, batch, in, out](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        const auto xv = gr.value(x);
        const auto wv = gr.value(weight);
        if (auto dw = gr.accum(weight); !dw.empty()) {
          for (std::size_t b = 0; b < batch; ++b) {
            const T* xr = xv.data() + b * in;
            for (std::size_t o = 0; o < out; ++o) {
              const T d = dy[b * out + o];
              if (d == T{0}) continue;
              T* dwr = dw.data() + o * in;
              for (std::size_t i = 0; i < in; ++i) dwr[i] += d * xr[i];
            }
          }
        }
        if (auto db = gr.accum(bias); !db.empty()) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out; ++o) db[o] += dy[b * out + o];
        }
        if (auto dx = gr.accum(x); !dx.empty()) {
          for (std::size_t b = 0; b < batch; ++b) {
            T* dxr = dx.data() + b * in;
            for (std::size_t o = 0; o < out; ++o) {
              const T d = dy[b * out + o];
              if (d == T{0}) continue;
              const T* wr = wv.data() + o * in;
              for (std::size_t i = 0; i < in; ++i) dxr[i] += d * wr[i];
            }
          }
        }
      },
      layer);
}

template <class T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias, std::string_view layer) {
  const auto& xs = g.shape(x);
  const auto& ws = g.shape(weight);
  if (xs.size() != 4) shape_error(layer, "conv2d input must be 4-D NCHW, got " + shape_to_string(xs));
  if (ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0) {
    shape_error(layer, "weight " + shape_to_string(ws) + " incompatible with input " + shape_to_string(xs) +
                           " (expects [out, in, k, k] with odd k)");
  }
  const std::size_t batch = xs[0], channels = xs[1], height = xs[2], width = xs[3];
  const std::size_t out_ch = ws[0], k = ws[2];
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  if (bias.valid() && (g.shape(bias).size() != 1 || g.shape(bias)[0] != out_ch)) {
    shape_error(layer, "bias " + shape_to_string(g.shape(bias)) + " does not match " + std::to_string(out_ch) + " channels");
  }
  const std::size_t hw = height * width;
  const std::size_t patch = channels * k * k;

  // im2col per batch item: cols[b][(c*k + ki)*k + kj][h*W + w]
  auto cols = std::make_shared<std::vector<T>>(batch * patch * hw, T{0});
  const auto xv = g.value(x);
  for (std::size_t b = 0; b < batch; ++b) {
    T* cb = cols->data() + b * patch * hw;
    const T* xb = xv.data() + b * channels * hw;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* row = cb + ((c * k + ki) * k + kj) * hw;
          for (std::size_t h = 0; h < height; ++h) {
            const auto sh = static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(ki) - pad;
            if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(height)) continue;
            const T* src = xb + c * hw + static_cast<std::size_t>(sh) * width;
            for (std::size_t w = 0; w < width; ++w) {
              const auto sw = static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(kj) - pad;
              if (sw < 0 || sw >= static_cast<std::ptrdiff_t>(width)) continue;
              row[h * width + w] = src[sw];
            }
          }
        }
      }
    }
  }

  const auto wv = g.value(weight);
  std::vector<T> y(batch * out_ch * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* cb = cols->data() + b * patch * hw;
    for (std::size_t o = 0; o < out_ch; ++o) {
      T* yr = y.data() + (b * out_ch + o) * hw;
      const T init = bias.valid() ? g.value(bias)[o] : T{0};
      std::fill(yr, yr + hw, init);
      for (std::size_t p = 0; p < patch; ++p) {
        const T wgt = wv[o * patch + p];
        const T* cr = cb + p * hw;
        for (std::size_t i = 0; i < hw; ++i) yr[i] += wgt * cr[i];
      }
    }
  }

  return g.emit(
      {batch, out_ch, height, width}, std::move(y), {x, weight, bias},
      [=](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        if (auto dw = gr.accum(weight); !dw.empty()) {
          for (std::size_t b = 0; b < batch; ++b) {
            const T* cb = cols->data() + b * patch * hw;
            for (std::size_t o = 0; o < out_ch; ++o) {
              const T* dyr = dy.data() + (b * out_ch + o) * hw;
              for (std::size_t p = 0; p < patch; ++p) {
                const T* cr = cb + p * hw;
                T acc{0};
                for (std::size_t i = 0; i < hw; ++i) acc += dyr[i] * cr[i];
                dw[o * patch + p] += acc;
              }
            }
          }
        }
        if (auto db = gr.accum(bias); !db.empty()) {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < out_ch; ++o) {
              const T* dyr = dy.data() + (b * out_ch + o) * hw;
              T acc{0};
              for (std::size_t i = 0; i < hw; ++i) acc += dyr[i];
              db[o] += acc;
            }
          }
        }
        if (auto dx = gr.accum(x); !dx.empty()) {
          const auto wv = gr.value(weight);
          std::vector<T> dcols(patch * hw);
          for (std::size_t b = 0; b < batch; ++b) {
            std::fill(dcols.begin(), dcols.end(), T{0});
            for (std::size_t o = 0; o < out_ch; ++o) {
              const T* dyr = dy.data() + (b * out_ch + o) * hw;
              for (std::size_t p = 0; p < patch; ++p) {
                const T wgt = wv[o * patch + p];
                T* dr = dcols.data() + p * hw;
                for (std::size_t i = 0; i < hw; ++i) dr[i] += wgt * dyr[i];
              }
            }
            T* dxb = dx.data() + b * channels * hw;
            for (std::size_t c = 0; c < channels; ++c) {
              for (std::size_t ki = 0; ki < k; ++ki) {
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const T* row = dcols.data() + ((c * k + ki) * k + kj) * hw;
                  for (std::size_t h = 0; h < height; ++h) {
                    const auto sh = static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(ki) - pad;
                    if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(height)) continue;
                    T* dst = dxb + c * hw + static_cast<std::size_t>(sh) * width;
                    for (std::size_t w = 0; w < width; ++w) {
                      const auto sw = static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(kj) - pad;
                      if (sw < 0 || sw >= static_cast<std::ptrdiff_t>(width)) continue;
                      dst[sw] += row[h * width + w];
                    }
                  }
                }
              }
            }
          }
        }
      },
      layer);
}

template <class T>
Var relu(Graph<T>& g, Var x) {
  const auto xv = g.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T{0} ? xv[i] : T{0};
  return g.emit(
      g.shape(x), std::move(y), {x},
      [x](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        const auto xv = gr.value(x);
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (xv[i] > T{0}) dx[i] += dy[i];
      },
      "relu");
}

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
  const auto xv = g.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(xv[i]);
  Var out;
  out = g.emit(
      g.shape(x), std::move(y), {x},
      [x](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        const auto yv = gr.value(Var{self});
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * yv[i] * (T{1} - yv[i]);
      },
      "sigmoid");
  return out;
}

template <class T>
Var maxpool2d(Graph<T>& g, Var x, std::string_view layer) {
  const auto& xs = g.shape(x);
  if (xs.size() != 4) shape_error(layer, "maxpool2d input must be 4-D NCHW, got " + shape_to_string(xs));
  const std::size_t planes = xs[0] * xs[1], height = xs[2], width = xs[3];
  const std::size_t oh = height / 2, ow = width / 2;
  if (oh == 0 || ow == 0) shape_error(layer, "spatial extent too small for 2x2 pooling: " + shape_to_string(xs));
  const auto xv = g.value(x);
  std::vector<T> y(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * height * width;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = base + (2 * i) * width + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + (2 * i + di) * width + 2 * j + dj;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        y[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  return g.emit(
      {xs[0], xs[1], oh, ow}, std::move(y), {x},
      [x, argmax](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        auto dx = gr.accum(x);
        for (std::size_t o = 0; o < dy.size(); ++o) dx[(*argmax)[o]] += dy[o];
      },
      layer);
}

template <class T>
Var flatten(Graph<T>& g, Var x) {
  const auto& xs = g.shape(x);
  const std::size_t batch = xs[0];
  const std::size_t rest = shape_numel(xs) / batch;
  const auto xv = g.value(x);
  return g.emit(
      {batch, rest}, std::vector<T>(xv.begin(), xv.end()), {x},
      [x](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      },
      "flatten");
}

template <class T>
Var add(Graph<T>& g, Var a, Var b, std::string_view layer) {
  if (g.shape(a) != g.shape(b)) {
    shape_error(layer, "operand shapes differ: " + shape_to_string(g.shape(a)) + " vs " + shape_to_string(g.shape(b)));
  }
  const auto av = g.value(a);
  const auto bv = g.value(b);
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return g.emit(
      g.shape(a), std::move(y), {a, b},
      [a, b](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        // a and b may be the same node; accumulate through separate lookups.
        if (auto da = gr.accum(a); !da.empty())
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
        if (auto db = gr.accum(b); !db.empty())
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i];
      },
      layer);
}

template <class T>
Var scale(Graph<T>& g, Var x, T factor) {
  const auto xv = g.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = factor * xv[i];
  return g.emit(
      g.shape(x), std::move(y), {x},
      [x, factor](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
      },
      "scale");
}

template <class T>
Var channel_affine(Graph<T>& g, Var x, std::span<const T> mean, std::span<const T> stddev) {
  const auto& xs = g.shape(x);
  if (xs.size() < 2 || xs[1] != mean.size() || mean.size() != stddev.size()) {
    shape_error("normalize", "per-channel statistics of length " + std::to_string(mean.size()) +
                                 " do not match input " + shape_to_string(xs));
  }
  const std::size_t batch = xs[0], channels = xs[1];
  const std::size_t inner = shape_numel(xs) / (batch * channels);
  auto inv = std::make_shared<std::vector<T>>(channels);
  for (std::size_t c = 0; c < channels; ++c) (*inv)[c] = T{1} / stddev[c];
  const auto xv = g.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * channels + c) * inner + i;
        y[idx] = (xv[idx] - mean[c]) * (*inv)[c];
      }
  return g.emit(
      xs, std::move(y), {x},
      [x, inv, batch, channels, inner](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        auto dx = gr.accum(x);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * channels + c) * inner + i;
              dx[idx] += dy[idx] * (*inv)[c];
            }
      },
      "normalize");
}

template <class T>
Var dropout(Graph<T>& g, Var x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  const auto xv = g.value(x);
  auto mask = std::make_shared<std::vector<T>>(xv.size(), T{1});
  if (rate > 0.0) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : *mask) m = rng.uniform() < rate ? T{0} : keep_scale;
  }
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * (*mask)[i];
  return g.emit(
      g.shape(x), std::move(y), {x},
      [x, mask](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (*mask)[i];
      },
      "dropout");
}

template <class T>
Var bce_with_logits(Graph<T>& g, Var logits, std::span<const T> targets) {
  const auto zv = g.value(logits);
  const auto [batch, classes] = logits_layout(g.shape(logits));
  const bool broadcast = targets.size() == classes && batch > 1;
  if (targets.size() != zv.size() && !broadcast) {
    throw DimensionError("bce_with_logits: label length " + std::to_string(targets.size()) +
                         " does not match logits " + shape_to_string(g.shape(logits)));
  }
  auto target_at = [targets, broadcast, classes](std::size_t i) {
    return broadcast ? targets[i % classes] : targets[i];
  };
  const auto count = static_cast<T>(zv.size());
  // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y*z
  T total{0};
  for (std::size_t i = 0; i < zv.size(); ++i) total += softplus(zv[i]) - target_at(i) * zv[i];
  std::vector<T> tcopy(zv.size());
  for (std::size_t i = 0; i < zv.size(); ++i) tcopy[i] = target_at(i);
  return g.emit(
      {1}, {total / count}, {logits},
      [logits, tcopy = std::move(tcopy), count](Graph<T>& gr, std::size_t self) {
        const T dy = gr.upstream(self)[0];
        const auto zv = gr.value(logits);
        auto dz = gr.accum(logits);
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dy * (stable_sigmoid(zv[i]) - tcopy[i]) / count;
      },
      "bce_with_logits");
}

template <class T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> classes, Reduction reduction) {
  const auto [batch, n] = logits_layout(g.shape(logits));
  if (classes.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(classes.size()) + " class indices for batch of " +
                         std::to_string(batch));
  }
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= n) {
      throw std::out_of_range("softmax_cross_entropy: class index " + std::to_string(c) + " outside [0, " +
                              std::to_string(n) + ")");
    }
  }
  const auto zv = g.value(logits);
  auto probs = std::make_shared<std::vector<T>>(zv.size());
  T total{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = zv.data() + b * n;
    const T zmax = *std::max_element(z, z + n);
    T denom{0};
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(z[i] - zmax);
    const T lse = zmax + std::log(denom);
    for (std::size_t i = 0; i < n; ++i) (*probs)[b * n + i] = std::exp(z[i] - lse);
    total += lse - z[classes[b]];
  }
  const T norm = reduction == Reduction::mean ? static_cast<T>(batch) : T{1};
  std::vector<int> cls(classes.begin(), classes.end());
  return g.emit(
      {1}, {total / norm}, {logits},
      [logits, probs, cls = std::move(cls), n, norm](Graph<T>& gr, std::size_t self) {
        const T dy = gr.upstream(self)[0];
        auto dz = gr.accum(logits);
        for (std::size_t b = 0; b < cls.size(); ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            const T onehot = static_cast<std::size_t>(cls[b]) == i ? T{1} : T{0};
            dz[b * n + i] += dy * ((*probs)[b * n + i] - onehot) / norm;
          }
        }
      },
      "softmax_cross_entropy");
}

template <class T>
Var max_logit(Graph<T>& g, Var logits) {
  const auto [batch, n] = logits_layout(g.shape(logits));
  const auto zv = g.value(logits);
  auto winners = std::make_shared<std::vector<std::size_t>>(batch);
  T total{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = zv.data() + b * n;
    // max_element returns the first maximum: lowest index on ties.
    const auto best = static_cast<std::size_t>(std::max_element(z, z + n) - z);
    (*winners)[b] = b * n + best;
    total += z[best];
  }
  return g.emit(
      {1}, {total}, {logits},
      [logits, winners](Graph<T>& gr, std::size_t self) {
        const T dy = gr.upstream(self)[0];
        auto dz = gr.accum(logits);
        for (auto idx : *winners) dz[idx] += dy;
      },
      "max_logit");
}

template <class T>
Var sum(Graph<T>& g, Var x) {
  const auto xv = g.value(x);
  T total{0};
  for (T v : xv) total += v;
  return g.emit(
      {1}, {total}, {x},
      [x](Graph<T>& gr, std::size_t self) {
        const T dy = gr.upstream(self)[0];
        auto dx = gr.accum(x);
        for (auto& d : dx) d += dy;
      },
      "sum");
}

template <class T>
Var pointwise(Graph<T>& g, Var x, std::function<T(T)> forward, std::function<T(T, T)> derivative,
              std::string_view name) {
  const auto xv = g.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = forward(xv[i]);
  return g.emit(
      g.shape(x), std::move(y), {x},
      [x, derivative = std::move(derivative)](Graph<T>& gr, std::size_t self) {
        const auto dy = gr.upstream(self);
        const auto xv = gr.value(x);
        const auto yv = gr.value(Var{self});
        auto dx = gr.accum(x);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * derivative(xv[i], yv[i]);
      },
      name);
}

#define PURVIEW_INSTANTIATE_OPS(T)                                                                  \
  template Var dense<T>(Graph<T>&, Var, Var, Var, std::string_view);                                \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, std::string_view);                               \
  template Var relu<T>(Graph<T>&, Var);                                                             \
  template Var sigmoid<T>(Graph<T>&, Var);                                                          \
  template Var maxpool2d<T>(Graph<T>&, Var, std::string_view);                                      \
  template Var flatten<T>(Graph<T>&, Var);                                                          \
  template Var add<T>(Graph<T>&, Var, Var, std::string_view);                                       \
  template Var scale<T>(Graph<T>&, Var, T);                                                         \
  template Var channel_affine<T>(Graph<T>&, Var, std::span<const T>, std::span<const T>);           \
  template Var dropout<T>(Graph<T>&, Var, double, Rng&);                                            \
  template Var bce_with_logits<T>(Graph<T>&, Var, std::span<const T>);                              \
  template Var softmax_cross_entropy<T>(Graph<T>&, Var, std::span<const int>, Reduction);           \
  template Var max_logit<T>(Graph<T>&, Var);                                                        \
  template Var sum<T>(Graph<T>&, Var);                                                              \
  template Var pointwise<T>(Graph<T>&, Var, std::function<T(T)>, std::function<T(T, T)>, std::string_view);

PURVIEW_INSTANTIATE_OPS(float)
PURVIEW_INSTANTIATE_OPS(double)
#undef PURVIEW_INSTANTIATE_OPS

}  // namespace ops

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual_add";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto kind : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::sigmoid, LayerKind::maxpool2d,
                    LayerKind::flatten, LayerKind::residual_add}) {
    if (to_string(kind) == name) return kind;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

template <class T>
Var forward_layer(Graph<T>& g, LayerKind kind, Var input, Var a, Var b, std::string_view layer) {
  const std::string_view name = layer.empty() ? to_string(kind) : layer;
  switch (kind) {
    case LayerKind::dense:
      if (!a.valid()) throw ConfigError(std::string(name) + ": dense requires a weight");
      return ops::dense(g, input, a, b, name);
    case LayerKind::conv2d:
      if (!a.valid()) throw ConfigError(std::string(name) + ": conv2d requires a weight");
      return ops::conv2d(g, input, a, b, name);
    case LayerKind::relu: return ops::relu(g, input);
    case LayerKind::sigmoid: return ops::sigmoid(g, input);
    case LayerKind::maxpool2d: return ops::maxpool2d(g, input, name);
    case LayerKind::flatten: return ops::flatten(g, input);
    case LayerKind::residual_add:
      if (!a.valid()) throw ConfigError(std::string(name) + ": residual_add requires a skip operand");
      return ops::add(g, input, a, name);
  }
  throw ConfigError("unhandled layer kind");
}

template Var forward_layer<float>(Graph<float>&, LayerKind, Var, Var, Var, std::string_view);
template Var forward_layer<double>(Graph<double>&, LayerKind, Var, Var, Var, std::string_view);

}  // namespace purview
