#include "purview/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "purview/errors.hpp"
#include "purview/optim.hpp"

namespace purview {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  for (double m : milestones)
    if (!(m > 0.0 && m < 1.0)) throw ConfigError("lr milestones must lie in (0, 1)");
  if (!(gamma > 0.0)) throw ConfigError("lr decay factor must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size}, {"lr", lr},
          {"momentum", momentum},   {"nesterov", nesterov},     {"weight_decay", weight_decay},
          {"milestones", milestones}, {"gamma", gamma},         {"seed", seed},
          {"normalize_inputs", normalize_inputs}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.nesterov = j.value("nesterov", c.nesterov);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.milestones = j.value("milestones", c.milestones);
    c.gamma = j.value("gamma", c.gamma);
    c.seed = j.value("seed", c.seed);
    c.normalize_inputs = j.value("normalize_inputs", c.normalize_inputs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
  return c;
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (double m : cfg.milestones)
    if (static_cast<double>(epoch) >= std::ceil(m * static_cast<double>(cfg.epochs))) lr *= cfg.gamma;
  return lr;
}

std::size_t argmax(std::span<const float> values) {
  if (values.empty()) throw DimensionError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

namespace {

Tensor gather(const Dataset& ds, std::span<const std::size_t> order, std::size_t first, std::size_t count) {
  const std::size_t per = ds.sample_numel();
  Shape shape{count};
  const Shape s = ds.sample_shape();
  shape.insert(shape.end(), s.begin(), s.end());
  std::vector<float> data(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    const auto img = ds.image(order[first + i]);
    std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(std::move(shape), std::move(data));
}

void check_dataset(const Dataset& ds, const ArchSpec& arch) {
  if (ds.sample_shape() != arch.input_shape)
    throw DimensionError("dataset samples are " + shape_to_string(ds.sample_shape()) + " but the network expects " +
                         shape_to_string(arch.input_shape));
  for (int l : ds.labels)
    if (l < 0 || static_cast<std::size_t>(l) >= arch.classes)
      throw ConfigError("label " + std::to_string(l) + " outside [0, " + std::to_string(arch.classes) + ")");
}

}  // namespace

TrainResult train_classifier(const Dataset& train, ArchSpec arch, const TrainConfig& cfg, const Dataset* test) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("empty training set");
  if (train.normalization) throw ConfigError("pass unnormalized images; the network standardizes its inputs");
  if (cfg.normalize_inputs && arch.input_mean.empty()) {
    const auto stats = channel_stats(train);
    for (float s : stats.std)
      if (!(s > 0.0f)) throw ConfigError("training images have a constant channel");
    arch.input_mean = stats.mean;
    arch.input_std = stats.std;
  }
  check_dataset(train, arch);
  if (test) check_dataset(*test, arch);

  TrainResult result{Model(arch, derive_seed(cfg.seed, 0)), {}};
  Model& net = result.model;
  Sgd opt({cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov});
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg, epoch);
    opt.set_lr(lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    try {
      for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, order.size() - first);
        std::vector<int> labels(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = train.labels[order[first + i]];

        net.zero_grad();
        Graph<float> g;
        const auto out = net.forward(g, g.input(gather(train, order, first, count)), {true, &dropout_rng});
        const Var loss = ops::softmax_cross_entropy<float>(g, out.logits, labels);
        const auto logits = g.value(out.logits);
        const std::size_t n = arch.classes;
        for (std::size_t i = 0; i < count; ++i)
          if (static_cast<int>(argmax(logits.subspan(i * n, n))) == labels[i]) ++correct;
        loss_sum += static_cast<double>(g.scalar(loss)) * static_cast<double>(count);
        g.backward(loss);
        opt.step(net.params());
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    EpochLog row{epoch, lr, loss_sum / static_cast<double>(train.size()),
                 static_cast<double>(correct) / static_cast<double>(train.size()),
                 std::numeric_limits<double>::quiet_NaN()};
    if (!std::isfinite(row.train_loss))
      throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": loss is not finite");
    for (const auto& p : net.params())
      if (!p.tensor.all_finite())
        throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": parameter " + p.name +
                           " is not finite");
    if (test) row.test_acc = accuracy(net, *test);
    result.log.push_back(row);
  }
  net.drop_grad();
  return result;
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,lr,train_loss,train_acc,test_acc\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_acc << ',';
    if (std::isfinite(r.test_acc)) out << r.test_acc;
    out << '\n';
  }
  return out.str();
}

Prediction predict(Model& model, const Tensor& images, std::size_t chunk) {
  const Shape& want = model.arch().input_shape;
  if (images.rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), images.shape().begin() + 1))
    throw DimensionError("predict expects [B, " + shape_to_string(want) + "] but got " +
                         shape_to_string(images.shape()));
  const std::size_t b = images.dim(0);
  const std::size_t n = model.arch().classes;
  Prediction out{Tensor({b, n}), std::vector<int>(b)};
  for (std::size_t first = 0; first < b; first += chunk) {
    const std::size_t count = std::min(chunk, b - first);
    Graph<float> g;
    const auto res = model.forward(g, g.input(make_batch(want, images.data(), first, count)));
    const auto logits = g.value(res.logits);
    std::copy(logits.begin(), logits.end(), out.logits.data().begin() + static_cast<std::ptrdiff_t>(first * n));
  }
  for (std::size_t i = 0; i < b; ++i)
    out.classes[i] = static_cast<int>(argmax(out.logits.data().subspan(i * n, n)));
  return out;
}

double accuracy(Model& model, const Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("accuracy of an empty dataset");
  const auto pred = predict(model, ds.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += pred.classes[i] == ds.labels[i];
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::vector<std::vector<double>> capture_activations(Model& model, const Tensor& images) {
  const Shape& want = model.arch().input_shape;
  if (images.rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), images.shape().begin() + 1))
    throw DimensionError("capture_activations expects [B, " + shape_to_string(want) + "] but got " +
                         shape_to_string(images.shape()));
  Graph<float> g;
  const auto res = model.forward(g, g.input(images));
  const std::size_t b = images.dim(0);
  std::vector<std::vector<double>> rows(b, std::vector<double>(res.activations.size()));
  for (std::size_t l = 0; l < res.activations.size(); ++l) {
    const auto v = g.value(res.activations[l]);
    const std::size_t per = v.size() / b;
    for (std::size_t i = 0; i < b; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < per; ++j) acc += static_cast<double>(v[i * per + j]) * v[i * per + j];
      rows[i][l] = acc;
    }
  }
  return rows;
}

}  // namespace purview
