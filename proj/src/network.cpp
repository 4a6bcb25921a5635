#include "purview/network.hpp"

#include <cmath>

namespace purview {

std::string_view to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::mlp: return "mlp";
    case ArchKind::small_cnn: return "small_cnn";
    case ArchKind::small_resnet: return "small_resnet";
    case ArchKind::detector: return "detector";
  }
  return "unknown";
}

ArchKind arch_kind_from_string(std::string_view name) {
  for (auto k : {ArchKind::mlp, ArchKind::small_cnn, ArchKind::small_resnet, ArchKind::detector}) {
    if (to_string(k) == name) return k;
  }
  throw FormatError("unknown architecture kind '" + std::string(name) + "'");
}

ArchSpec ArchSpec::mlp(Shape input, std::vector<std::size_t> hidden, std::size_t classes) {
  ArchSpec a;
  a.kind = ArchKind::mlp;
  a.input_shape = std::move(input);
  a.widths = std::move(hidden);
  a.classes = classes;
  return a;
}

ArchSpec ArchSpec::small_cnn(Shape input, std::size_t classes, std::vector<std::size_t> channels) {
  ArchSpec a;
  a.kind = ArchKind::small_cnn;
  a.input_shape = std::move(input);
  a.widths = std::move(channels);
  a.classes = classes;
  return a;
}

ArchSpec ArchSpec::small_resnet(Shape input, std::size_t classes, std::size_t channels, std::size_t blocks) {
  ArchSpec a;
  a.kind = ArchKind::small_resnet;
  a.input_shape = std::move(input);
  a.widths = {channels, blocks};
  a.classes = classes;
  return a;
}

ArchSpec ArchSpec::detector(std::size_t input_dim, std::size_t hidden, std::size_t layers, double dropout) {
  if (layers < 2) throw ConfigError("detector depth must be at least 2 dense layers");
  ArchSpec a;
  a.kind = ArchKind::detector;
  a.input_shape = {input_dim};
  a.widths.assign(layers - 1, hidden);
  a.classes = 1;
  a.dropout = dropout;
  return a;
}

void ArchSpec::validate() const {
  if (classes == 0) throw ConfigError("architecture must emit at least one logit");
  if (input_shape.empty()) throw ConfigError("architecture input shape is empty");
  for (auto e : input_shape)
    if (e == 0) throw ConfigError("architecture input extents must be positive");
  if (!input_mean.empty() || !input_std.empty()) {
    if (input_mean.size() != input_shape[0] || input_std.size() != input_shape[0])
      throw ConfigError("input normalization must have one mean/std per channel");
    for (float s : input_std)
      if (!(s > 0.0f)) throw ConfigError("input normalization std must be positive");
  }
  switch (kind) {
    case ArchKind::mlp:
      break;
    case ArchKind::detector:
      if (widths.empty()) throw ConfigError("detector needs at least one hidden layer");
      if (input_shape.size() != 1) throw ConfigError("detector input must be a feature vector");
      if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
      break;
    case ArchKind::small_cnn:
    case ArchKind::small_resnet:
      if (input_shape.size() != 3) throw ConfigError("convolutional architectures need a {C, H, W} input shape");
      if (kernel % 2 == 0) throw ConfigError("kernel size must be odd");
      if (widths.empty()) throw ConfigError("convolutional architectures need a channel plan");
      if (kind == ArchKind::small_resnet && (widths.size() != 2 || widths[1] < 2))
        throw ConfigError("small_resnet needs {channels, blocks} with at least 2 residual blocks");
      break;
  }
  for (auto w : widths)
    if (w == 0) throw ConfigError("layer widths must be positive");
}

nlohmann::json ArchSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = std::string(to_string(kind));
  j["widths"] = widths;
  j["classes"] = classes;
  j["input_shape"] = input_shape;
  j["kernel"] = kernel;
  j["bias"] = bias;
  j["dropout"] = dropout;
  j["input_mean"] = input_mean;
  j["input_std"] = input_std;
  return j;
}

ArchSpec ArchSpec::from_json(const nlohmann::json& j) {
  try {
    ArchSpec a;
    a.kind = arch_kind_from_string(j.at("kind").get<std::string>());
    a.widths = j.at("widths").get<std::vector<std::size_t>>();
    a.classes = j.at("classes").get<std::size_t>();
    a.input_shape = j.at("input_shape").get<Shape>();
    a.kernel = j.value("kernel", std::size_t{3});
    a.bias = j.value("bias", true);
    a.dropout = j.value("dropout", 0.0);
    a.input_mean = j.value("input_mean", std::vector<float>{});
    a.input_std = j.value("input_std", std::vector<float>{});
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid architecture record: ") + e.what());
  }
}

template <class T>
Network<T>::Network(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  build_program(seed);
}

template <class T>
void Network<T>::add_param(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  params_.push_back({name, std::move(t), params_.size()});
}

template <class T>
void Network<T>::build_program(std::uint64_t seed) {
  Rng rng(seed);
  using Op = typename Step::Op;
  const auto& in = arch_.input_shape;
  const bool bias = arch_.bias;

  auto linear = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    Step s{Op::dense, params_.size(), bias, name};
    add_param(name + ".weight", {fan_out, fan_in}, fan_in, rng);
    if (bias) add_param(name + ".bias", {fan_out}, fan_in, rng);
    program_.push_back(s);
  };
  auto conv = [&](const std::string& name, std::size_t c_in, std::size_t c_out) {
    const std::size_t k = arch_.kernel;
    Step s{Op::conv, params_.size(), bias, name};
    add_param(name + ".weight", {c_out, c_in, k, k}, c_in * k * k, rng);
    if (bias) add_param(name + ".bias", {c_out}, c_in * k * k, rng);
    program_.push_back(s);
  };
  auto simple = [&](Op op, std::string name = {}) { program_.push_back(Step{op, 0, false, std::move(name)}); };

  if (!arch_.input_mean.empty()) simple(Op::normalize);

  switch (arch_.kind) {
    case ArchKind::mlp: {
      simple(Op::flatten);
      std::size_t width = shape_numel(in);
      for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
        linear("fc" + std::to_string(i + 1), width, arch_.widths[i]);
        simple(Op::relu);
        width = arch_.widths[i];
      }
      linear("fc" + std::to_string(arch_.widths.size() + 1), width, arch_.classes);
      break;
    }
    case ArchKind::detector: {
      std::size_t width = in[0];
      for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
        linear("fc" + std::to_string(i + 1), width, arch_.widths[i]);
        simple(Op::relu);
        if (i == 0 && arch_.dropout > 0.0) simple(Op::dropout);
        width = arch_.widths[i];
      }
      linear("fc" + std::to_string(arch_.widths.size() + 1), width, 1);
      break;
    }
    case ArchKind::small_cnn: {
      std::size_t channels = in[0], h = in[1], w = in[2];
      for (std::size_t i = 0; i < arch_.widths.size(); ++i) {
        conv("conv" + std::to_string(i + 1), channels, arch_.widths[i]);
        simple(Op::relu);
        simple(Op::pool, "pool" + std::to_string(i + 1));
        channels = arch_.widths[i];
        h /= 2;
        w /= 2;
        if (h == 0 || w == 0) throw ConfigError("input too small for the number of pooling stages");
      }
      simple(Op::flatten);
      linear("fc", channels * h * w, arch_.classes);
      break;
    }
    case ArchKind::small_resnet: {
      const std::size_t channels = arch_.widths[0], blocks = arch_.widths[1];
      std::size_t h = in[1], w = in[2];
      conv("stem", in[0], channels);
      simple(Op::relu);
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::string name = "block" + std::to_string(b + 1);
        simple(Op::push_skip);
        conv(name + ".conv1", channels, channels);
        simple(Op::relu);
        conv(name + ".conv2", channels, channels);
        simple(Op::residual_add, name + ".add");
        simple(Op::relu);
        if (h >= 4 && w >= 4) {
          simple(Op::pool, name + ".pool");
          h /= 2;
          w /= 2;
        }
      }
      simple(Op::flatten);
      linear("fc", channels * h * w, arch_.classes);
      break;
    }
  }
}

template <class T>
ForwardResult Network<T>::forward(Graph<T>& g, Var input, const ForwardOptions& options) {
  const auto& xs = g.shape(input);
  Shape expected{xs.empty() ? 0 : xs[0]};
  expected.insert(expected.end(), arch_.input_shape.begin(), arch_.input_shape.end());
  if (xs != expected) {
    throw DimensionError("network input " + shape_to_string(xs) + " does not match architecture input " +
                         shape_to_string(arch_.input_shape));
  }
  using Op = typename Step::Op;
  ForwardResult result;
  std::vector<Var> skips;
  std::vector<T> mean(arch_.input_mean.begin(), arch_.input_mean.end());
  std::vector<T> stddev(arch_.input_std.begin(), arch_.input_std.end());
  Var x = input;
  for (const auto& step : program_) {
    switch (step.op) {
      case Op::normalize:
        x = ops::channel_affine<T>(g, x, mean, stddev);
        break;
      case Op::conv:
      case Op::dense: {
        Var w = g.parameter(params_[step.weight].tensor);
        Var b = step.has_bias ? g.parameter(params_[step.weight + 1].tensor) : Var{};
        x = forward_layer(g, step.op == Op::conv ? LayerKind::conv2d : LayerKind::dense, x, w, b, step.layer);
        result.activations.push_back(x);
        break;
      }
      case Op::relu:
        x = ops::relu(g, x);
        break;
      case Op::pool:
        x = ops::maxpool2d(g, x, step.layer);
        break;
      case Op::flatten:
        x = ops::flatten(g, x);
        break;
      case Op::push_skip:
        skips.push_back(x);
        break;
      case Op::residual_add:
        x = ops::add(g, x, skips.back(), step.layer);
        skips.pop_back();
        break;
      case Op::dropout:
        if (options.train && arch_.dropout > 0.0) {
          if (options.rng == nullptr) throw StateError("training forward with dropout needs an rng");
          x = ops::dropout(g, x, arch_.dropout, *options.rng);
        }
        break;
    }
  }
  result.logits = x;
  return result;
}

template <class T>
std::size_t Network<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <class T>
std::size_t Network<T>::activation_count() const {
  std::size_t n = 0;
  for (const auto& s : program_)
    if (s.op == Step::Op::conv || s.op == Step::Op::dense) ++n;
  return n;
}

template <class T>
std::vector<std::string> Network<T>::param_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

template <class T>
std::vector<std::string> Network<T>::activation_names() const {
  std::vector<std::string> out;
  for (const auto& s : program_)
    if (s.op == Step::Op::conv || s.op == Step::Op::dense) out.push_back(s.layer);
  return out;
}

template <class T>
ParamSet<T>& Network<T>::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError("no parameter set named '" + name + "'");
}

template <class T>
void Network<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <class T>
void Network<T>::drop_grad() {
  for (auto& p : params_) p.tensor.drop_grad();
}

template <class T>
std::vector<T> Network<T>::flat_values() const {
  std::vector<T> out;
  out.reserve(scalar_count());
  for (const auto& p : params_) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template class Network<float>;
template class Network<double>;

Tensor make_batch(const Shape& sample_shape, std::span<const float> flat, std::size_t first, std::size_t count) {
  const std::size_t per = shape_numel(sample_shape);
  if ((first + count) * per > flat.size()) throw DimensionError("batch range exceeds dataset");
  Shape shape{count};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::vector<float> data(flat.begin() + static_cast<std::ptrdiff_t>(first * per),
                          flat.begin() + static_cast<std::ptrdiff_t>((first + count) * per));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace purview
