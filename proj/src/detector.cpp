#include "purview/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "purview/errors.hpp"
#include "purview/optim.hpp"

namespace purview {

FeatureMatrix FeatureMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  FeatureMatrix m;
  m.rows = rows.size();
  m.cols = rows.empty() ? 0 : rows[0].size();
  m.values.reserve(m.rows * m.cols);
  for (const auto& r : rows) {
    if (r.size() != m.cols) throw DimensionError("feature rows have different lengths");
    m.values.insert(m.values.end(), r.begin(), r.end());
  }
  return m;
}

FeatureMatrix FeatureMatrix::select(const std::vector<std::size_t>& indices) const {
  FeatureMatrix m;
  m.rows = indices.size();
  m.cols = cols;
  m.values.reserve(m.rows * cols);
  for (std::size_t i : indices) {
    if (i >= rows) throw DimensionError("feature row " + std::to_string(i) + " out of range");
    const auto r = row(i);
    m.values.insert(m.values.end(), r.begin(), r.end());
  }
  return m;
}

FeatureMatrix FeatureMatrix::columns(const std::vector<std::size_t>& keep) const {
  FeatureMatrix m;
  m.rows = rows;
  m.cols = keep.size();
  m.values.reserve(rows * keep.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c : keep) {
      if (c >= cols) throw DimensionError("feature column " + std::to_string(c) + " out of range");
      m.values.push_back(values[i * cols + c]);
    }
  return m;
}

void DetectorConfig::validate() const {
  if (input_dim == 0) throw ConfigError("detector input dimension must be positive");
  if (hidden == 0) throw ConfigError("detector hidden width must be at least 1");
  if (layers < 2) throw ConfigError("detector depth must be at least 2");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("detector dropout must be in [0, 1)");
  if (epochs == 0) throw ConfigError("detector epochs must be positive");
  if (!(lr > 0.0)) throw ConfigError("detector learning rate must be positive");
  if (batch_size == 0) throw ConfigError("detector batch size must be positive");
  if (!(log_floor > 0.0)) throw ConfigError("log floor must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("threshold delta must be in (0, 1)");
}

nlohmann::json DetectorConfig::to_json() const {
  return {{"input_dim", input_dim}, {"hidden", hidden},         {"layers", layers},
          {"dropout", dropout},     {"epochs", epochs},         {"lr", lr},
          {"optimizer", "adam"},    {"batch_size", batch_size}, {"log_features", log_features},
          {"log_floor", log_floor}, {"delta", delta},           {"seed", seed}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  DetectorConfig c;
  try {
    if (j.contains("optimizer") && j.at("optimizer") != "adam") throw ConfigError("detector optimizer must be adam");
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.dropout = j.value("dropout", c.dropout);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.log_features = j.value("log_features", c.log_features);
    c.log_floor = j.value("log_floor", c.log_floor);
    c.delta = j.value("delta", c.delta);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid detector config: ") + e.what());
  }
  // input_dim 0 is allowed here; callers fill it from the feature width.
  if (c.input_dim == 0) {
    DetectorConfig probe = c;
    probe.input_dim = 1;
    probe.validate();
  } else {
    c.validate();
  }
  return c;
}

namespace {

std::vector<float> transform(const DetectorConfig& cfg, std::span<const double> row) {
  std::vector<float> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (!std::isfinite(row[i])) throw NumericError("non-finite detector feature");
    out[i] = static_cast<float>(cfg.log_features ? std::log(std::max(row[i], 0.0) + cfg.log_floor) : row[i]);
  }
  return out;
}

Tensor batch_of(const std::vector<std::vector<float>>& rows, std::span<const std::size_t> order, std::size_t first,
                std::size_t count) {
  const std::size_t d = rows[0].size();
  std::vector<float> data(count * d);
  for (std::size_t i = 0; i < count; ++i)
    std::copy(rows[order[first + i]].begin(), rows[order[first + i]].end(),
              data.begin() + static_cast<std::ptrdiff_t>(i * d));
  return Tensor({count, d}, std::move(data));
}

}  // namespace

Detector train_detector(const FeatureMatrix& normal, const FeatureMatrix& anomalous, DetectorConfig cfg) {
  if (normal.rows == 0 || anomalous.rows == 0) throw ConfigError("detector training needs both classes");
  if (normal.cols != anomalous.cols) throw DimensionError("normal and anomalous features differ in width");
  if (cfg.input_dim == 0) cfg.input_dim = normal.cols;
  cfg.validate();
  if (cfg.input_dim != normal.cols)
    throw DimensionError("detector expects d=" + std::to_string(cfg.input_dim) + ", features have " +
                         std::to_string(normal.cols));

  std::vector<std::vector<float>> rows;
  std::vector<float> targets;
  for (std::size_t i = 0; i < normal.rows; ++i) rows.push_back(transform(cfg, normal.row(i))), targets.push_back(0.0f);
  for (std::size_t i = 0; i < anomalous.rows; ++i)
    rows.push_back(transform(cfg, anomalous.row(i))), targets.push_back(1.0f);

  const std::size_t d = cfg.input_dim;
  ArchSpec arch = ArchSpec::detector(d, cfg.hidden, cfg.layers, cfg.dropout);
  arch.input_mean.assign(d, 0.0f);
  arch.input_std.assign(d, 1.0f);
  for (std::size_t c = 0; c < d; ++c) {
    double sum = 0.0, sq = 0.0;
    for (const auto& r : rows) sum += r[c];
    const double mean = sum / static_cast<double>(rows.size());
    for (const auto& r : rows) sq += (r[c] - mean) * (r[c] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(rows.size()));
    arch.input_mean[c] = static_cast<float>(mean);
    // Constant features pass through centred but unscaled.
    arch.input_std[c] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;
  }

  Detector det{cfg, Model(arch, derive_seed(cfg.seed, 0)), {}};
  Adam opt(AdamOptions{cfg.lr});
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(rows.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      const Tensor x = batch_of(rows, order, first, count);
      std::vector<float> y(count);
      for (std::size_t i = 0; i < count; ++i) y[i] = targets[order[first + i]];
      Graph<float> g;
      const auto out = det.model.forward(g, g.input(x), {.train = true, .rng = &dropout_rng});
      const Var loss = ops::bce_with_logits<float>(g, out.logits, y);
      const float lv = g.scalar(loss);
      if (!std::isfinite(lv)) throw NumericError("detector training diverged in epoch " + std::to_string(epoch));
      g.backward(loss);
      opt.step(det.model.params());
      det.model.drop_grad();
      loss_sum += static_cast<double>(lv) * static_cast<double>(count);
      const auto z = g.value(out.logits);
      for (std::size_t i = 0; i < count; ++i) correct += ((z[i] > 0.0f) == (y[i] > 0.5f)) ? 1 : 0;
    }
    det.log.push_back({epoch, loss_sum / static_cast<double>(rows.size()),
                       static_cast<double>(correct) / static_cast<double>(rows.size())});
  }
  return det;
}

std::vector<double> detector_logits(const Detector& d, const FeatureMatrix& x) {
  if (x.cols != d.config.input_dim)
    throw DimensionError("detector expects d=" + std::to_string(d.config.input_dim) + ", got " +
                         std::to_string(x.cols));
  std::vector<double> out;
  out.reserve(x.rows);
  // forward() only reads parameters; a copy keeps the const contract honest.
  Model model = d.model;
  constexpr std::size_t kChunk = 512;
  for (std::size_t first = 0; first < x.rows; first += kChunk) {
    const std::size_t count = std::min(kChunk, x.rows - first);
    std::vector<float> data;
    data.reserve(count * x.cols);
    for (std::size_t i = 0; i < count; ++i) {
      const auto r = transform(d.config, x.row(first + i));
      data.insert(data.end(), r.begin(), r.end());
    }
    Graph<float> g;
    const auto res = model.forward(g, g.input(Tensor({count, x.cols}, std::move(data))));
    for (float z : g.value(res.logits)) out.push_back(static_cast<double>(z));
  }
  return out;
}

std::vector<double> score(const Detector& d, const FeatureMatrix& x) {
  auto z = detector_logits(d, x);
  for (auto& v : z) v = 1.0 / (1.0 + std::exp(-v));
  return z;
}

double score(const Detector& d, std::span<const double> row) {
  FeatureMatrix m{1, row.size(), {row.begin(), row.end()}};
  return score(d, m)[0];
}

// --- cross-validation -------------------------------------------------------

namespace {

std::vector<std::size_t> map(const std::vector<std::size_t>& pool, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = pool[idx[i]];
  return out;
}

}  // namespace

std::vector<std::size_t> CvPlan::train_normal(std::size_t round) const {
  return map(normal_pool, normal_folds.train_indices(round / k, round % k));
}
std::vector<std::size_t> CvPlan::test_normal(std::size_t round) const {
  return map(normal_pool, normal_folds.test_indices(round / k, round % k));
}
std::vector<std::size_t> CvPlan::train_anomalous(std::size_t round) const {
  return map(anomalous_pool, anomalous_folds.train_indices(round / k, round % k));
}
std::vector<std::size_t> CvPlan::test_anomalous(std::size_t round) const {
  return map(anomalous_pool, anomalous_folds.test_indices(round / k, round % k));
}

CvPlan make_cv_plan(std::size_t n_normal, std::size_t n_anomalous, std::size_t k, std::size_t r, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  if (r < 1) throw ConfigError("cross-validation needs at least one repetition");
  const std::size_t pool = std::min(n_normal, n_anomalous);
  if (pool < k)
    throw ConfigError("cannot fold " + std::to_string(n_normal) + " normal / " + std::to_string(n_anomalous) +
                      " anomalous samples into " + std::to_string(k) + " folds with both classes in each");
  CvPlan plan;
  plan.k = k;
  plan.r = r;
  plan.seed = seed;
  auto draw = [&](std::size_t n, std::uint64_t stream) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n > pool) {
      Rng rng(derive_seed(seed, stream));
      rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(pool);
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };
  plan.normal_pool = draw(n_normal, 0);
  plan.anomalous_pool = draw(n_anomalous, 1);
  plan.normal_folds = make_folds(pool, k, r, derive_seed(seed, 2));
  plan.anomalous_folds = make_folds(pool, k, r, derive_seed(seed, 3));
  return plan;
}

Metrics CvResult::mean() const {
  Metrics m;
  if (rounds.empty()) return m;
  for (const auto& r : rounds) {
    m.acc_max += r.metrics.acc_max;
    m.acc_fixed += r.metrics.acc_fixed;
    m.auroc += r.metrics.auroc;
    m.aupr += r.metrics.aupr;
  }
  const double n = static_cast<double>(rounds.size());
  return {m.acc_max / n, m.acc_fixed / n, m.auroc / n, m.aupr / n};
}

std::vector<double> CvResult::round_values(double Metrics::* field) const {
  std::vector<double> out;
  for (const auto& r : rounds) out.push_back(r.metrics.*field);
  return out;
}

EvalRow CvResult::to_row(const std::string& pairing) const {
  EvalRow row{pairing, method, mean(), {}, std::nullopt};
  for (const auto& r : rounds) row.rounds.push_back(r.metrics);
  return row;
}

nlohmann::json CvResult::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rounds)
    rs.push_back({{"rep", r.rep},
                  {"fold", r.fold},
                  {"seed", r.seed},
                  {"n_train", r.n_train},
                  {"n_test", r.n_test},
                  {"metrics", r.metrics.to_json()},
                  {"in_scores", r.in_scores},
                  {"out_scores", r.out_scores}});
  return {{"format", "purview.cv"}, {"version", 1}, {"method", method}, {"k", k},
          {"r", r},                 {"seed", seed}, {"config", config}, {"rounds", rs},
          {"mean", mean().to_json()}};
}

CvResult CvResult::from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != "purview.cv") throw FormatError("not a cross-validation result");
    CvResult res;
    res.method = j.at("method").get<std::string>();
    res.k = j.at("k").get<std::size_t>();
    res.r = j.at("r").get<std::size_t>();
    res.seed = j.at("seed").get<std::uint64_t>();
    res.config = j.at("config");
    for (const auto& r : j.at("rounds")) {
      CvRound cr;
      cr.rep = r.at("rep").get<std::size_t>();
      cr.fold = r.at("fold").get<std::size_t>();
      cr.seed = r.at("seed").get<std::uint64_t>();
      cr.n_train = r.at("n_train").get<std::size_t>();
      cr.n_test = r.at("n_test").get<std::size_t>();
      const auto& m = r.at("metrics");
      cr.metrics = {m.at("acc_max").get<double>(), m.at("acc_fixed").get<double>(), m.at("auroc").get<double>(),
                    m.at("aupr").get<double>()};
      cr.in_scores = r.at("in_scores").get<std::vector<double>>();
      cr.out_scores = r.at("out_scores").get<std::vector<double>>();
      res.rounds.push_back(std::move(cr));
    }
    if (res.rounds.size() != res.k * res.r) throw FormatError("cross-validation result has the wrong round count");
    return res;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cross-validation result: ") + e.what());
  }
}

CvResult run_cv(const FeatureMatrix& normal, const FeatureMatrix& anomalous, const DetectorConfig& cfg,
                const CvPlan& plan) {
  if (normal.cols != anomalous.cols) throw DimensionError("normal and anomalous features differ in width");
  if (plan.normal_pool.empty() || plan.normal_pool.back() >= normal.rows ||
      plan.anomalous_pool.back() >= anomalous.rows)
    throw DimensionError("cross-validation plan does not fit the feature matrices");
  CvResult res;
  res.method = "detector";
  res.k = plan.k;
  res.r = plan.r;
  res.seed = cfg.seed;
  DetectorConfig base = cfg;
  if (base.input_dim == 0) base.input_dim = normal.cols;
  base.validate();
  res.config = base.to_json();
  res.config["plan_seed"] = plan.seed;

  for (std::size_t round = 0; round < plan.rounds(); ++round) {
    DetectorConfig rc = base;
    rc.seed = derive_seed(cfg.seed, round);
    const auto tn = normal.select(plan.train_normal(round));
    const auto ta = anomalous.select(plan.train_anomalous(round));
    const auto hn = normal.select(plan.test_normal(round));
    const auto ha = anomalous.select(plan.test_anomalous(round));
    const Detector det = train_detector(tn, ta, rc);

    CvRound cr;
    cr.rep = round / plan.k;
    cr.fold = round % plan.k;
    cr.seed = rc.seed;
    cr.n_train = tn.rows + ta.rows;
    cr.n_test = hn.rows + ha.rows;
    const ScoreSet by_logit{detector_logits(det, hn), detector_logits(det, ha), Orientation::higher_is_anomalous};
    const ScoreSet by_prob{score(det, hn), score(det, ha), Orientation::higher_is_anomalous};
    cr.metrics = {detection_accuracy_max(by_logit), detection_accuracy_at(by_prob, rc.delta), auroc(by_logit),
                  aupr(by_logit)};
    cr.in_scores = by_prob.in_scores;
    cr.out_scores = by_prob.out_scores;
    res.rounds.push_back(std::move(cr));
  }
  return res;
}

namespace {

std::vector<std::size_t> canonical_order(const FeatureMatrix& m) {
  std::vector<std::size_t> idx(m.rows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto ra = m.row(a), rb = m.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  return idx;
}

}  // namespace

CvResult run_cv(const FeatureMatrix& normal, const FeatureMatrix& anomalous, const DetectorConfig& cfg, std::size_t k,
                std::size_t r) {
  const auto n = normal.select(canonical_order(normal));
  const auto a = anomalous.select(canonical_order(anomalous));
  return run_cv(n, a, cfg, make_cv_plan(n.rows, a.rows, k, r, cfg.seed));
}

CvResult score_cv(const std::vector<double>& normal, const std::vector<double>& anomalous, Orientation orientation,
                  const CvPlan& plan, double delta, const std::string& method) {
  if (plan.normal_pool.empty() || plan.normal_pool.back() >= normal.size() ||
      plan.anomalous_pool.back() >= anomalous.size())
    throw DimensionError("cross-validation plan does not fit the score vectors");
  CvResult res;
  res.method = method;
  res.k = plan.k;
  res.r = plan.r;
  res.seed = plan.seed;
  res.config = {{"orientation", to_string(orientation)}, {"delta", delta}, {"plan_seed", plan.seed}};
  for (std::size_t round = 0; round < plan.rounds(); ++round) {
    CvRound cr;
    cr.rep = round / plan.k;
    cr.fold = round % plan.k;
    cr.seed = plan.seed;
    cr.n_train = plan.train_normal(round).size() + plan.train_anomalous(round).size();
    for (std::size_t i : plan.test_normal(round)) cr.in_scores.push_back(normal[i]);
    for (std::size_t i : plan.test_anomalous(round)) cr.out_scores.push_back(anomalous[i]);
    cr.n_test = cr.in_scores.size() + cr.out_scores.size();
    cr.metrics = evaluate({cr.in_scores, cr.out_scores, orientation}, delta);
    res.rounds.push_back(std::move(cr));
  }
  return res;
}

}  // namespace purview
