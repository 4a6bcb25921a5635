#include "purview/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <set>
#include <sstream>

#include "purview/checkpoint.hpp"
#include "purview/errors.hpp"

namespace purview {

namespace fs = std::filesystem;

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::ood: return "ood";
    case ExperimentKind::adversarial: return "adversarial";
    case ExperimentKind::corruption: return "corruption";
    case ExperimentKind::figure3: return "figure3";
    case ExperimentKind::figure4: return "figure4";
    case ExperimentKind::ablation_labels: return "ablation_labels";
    case ExperimentKind::ablation_detector: return "ablation_detector";
  }
  return "unknown";
}

ExperimentKind experiment_kind_from_string(std::string_view name) {
  for (auto k : {ExperimentKind::ood, ExperimentKind::adversarial, ExperimentKind::corruption, ExperimentKind::figure3,
                 ExperimentKind::figure4, ExperimentKind::ablation_labels, ExperimentKind::ablation_detector})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown experiment kind '" + std::string(name) + "'");
}

// --- configuration ----------------------------------------------------------

nlohmann::json AblationGrid::to_json() const {
  return {{"layers", layers}, {"neurons", neurons}, {"epochs", epochs}, {"lrs", lrs}};
}

AblationGrid AblationGrid::from_json(const nlohmann::json& j) {
  AblationGrid g;
  g.layers = j.value("layers", g.layers);
  g.neurons = j.value("neurons", g.neurons);
  g.epochs = j.value("epochs", g.epochs);
  g.lrs = j.value("lrs", g.lrs);
  return g;
}

std::vector<std::pair<LabelRequest, Objective>> default_label_designs(std::size_t classes) {
  std::vector<std::pair<LabelRequest, Objective>> out{{LabelRequest{}, Objective::bce}};
  for (std::size_t k = 2; k <= std::min<std::size_t>(5, classes); ++k) out.push_back({LabelRequest::top_k_of(k), Objective::bce});
  std::vector<int> even, odd;
  for (std::size_t c = 0; c < classes; ++c) (c % 2 ? odd : even).push_back(static_cast<int>(c));
  if (even.size() >= 2 && odd.size() >= 2) out.push_back({LabelRequest::taxonomy_of({even, odd}), Objective::bce});
  out.push_back({LabelRequest{}, Objective::max_logit});
  return out;
}

ExperimentConfig ExperimentConfig::defaults(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  switch (kind) {
    case ExperimentKind::adversarial:
      for (auto a : all_attack_kinds()) c.attacks.push_back(AttackSpec::defaults(a));
      break;
    case ExperimentKind::corruption: c.corruptions = all_corruption_kinds(); break;
    case ExperimentKind::figure3: c.out_datasets = {"uniform_noise", "shuffled_pixels", "shapes"}; break;
    case ExperimentKind::figure4: c.out_datasets = {"shapes", "uniform_noise", "shuffled_pixels"}; break;
    case ExperimentKind::ablation_labels:
      c.out_datasets = {"uniform_noise"};
      c.attacks = {AttackSpec::defaults(AttackKind::fgsm), AttackSpec::defaults(AttackKind::semantic)};
      break;
    case ExperimentKind::ablation_detector: c.out_datasets = {"uniform_noise"}; break;
    case ExperimentKind::ood: break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (in_dataset != "digits" && in_dataset != "shapes" && in_dataset != "mnist")
    throw ConfigError("unknown in-distribution dataset '" + in_dataset + "'");
  if (in_dataset == "mnist" && data_dir.empty()) throw ConfigError("mnist needs --data-dir with the IDX files");
  if (arch != "small_cnn" && arch != "small_resnet" && arch != "mlp") throw ConfigError("unknown arch '" + arch + "'");
  if (n_train == 0 || n_test == 0 || n_ood == 0) throw ConfigError("sample counts must be positive");
  train.validate();
  {
    DetectorConfig d = detector;
    if (d.input_dim == 0) d.input_dim = 1;
    d.validate();
  }
  for (const auto& a : attacks) a.validate();
  for (int s : severities)
    if (s < 1 || s > 5) throw ConfigError("corruption severity must be in 1..5");
  if (k < 2 || r < 1) throw ConfigError("cross-validation needs k >= 2 and r >= 1");
  const bool needs_out = kind == ExperimentKind::ood || kind == ExperimentKind::figure3 ||
                         kind == ExperimentKind::figure4 || kind == ExperimentKind::ablation_detector;
  if (needs_out && out_datasets.empty()) throw ConfigError(std::string(to_string(kind)) + " needs out datasets");
  if (kind == ExperimentKind::adversarial && attacks.empty()) throw ConfigError("adversarial run needs attacks");
  if (kind == ExperimentKind::corruption && (corruptions.empty() || severities.empty()))
    throw ConfigError("corruption run needs kinds and severities");
  if (kind == ExperimentKind::figure4) {
    if (ladder.empty()) throw ConfigError("figure4 needs a class ladder");
    for (auto c : ladder)
      if (c < 2 || c > 10) throw ConfigError("ladder rungs must have 2..10 classes");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json atk = nlohmann::json::array();
  for (const auto& a : attacks) atk.push_back(a.to_json());
  std::vector<std::string> corr;
  for (auto c : corruptions) corr.emplace_back(to_string(c));
  nlohmann::json designs = nlohmann::json::array();
  for (const auto& d : label_designs) designs.push_back(d.to_json());
  return {{"version", 1},
          {"kind", to_string(kind)},
          {"in_dataset", in_dataset},
          {"out_datasets", out_datasets},
          {"data_dir", data_dir},
          {"n_train", n_train},
          {"n_test", n_test},
          {"n_ood", n_ood},
          {"arch", arch},
          {"train", train.to_json()},
          {"label", label.to_json()},
          {"objective", to_string(objective)},
          {"detector", detector.to_json()},
          {"attacks", atk},
          {"corruptions", corr},
          {"severities", severities},
          {"corruption_table", corruption_table},
          {"ladder", ladder},
          {"grid", grid.to_json()},
          {"label_designs", designs},
          {"k", k},
          {"r", r},
          {"seed", seed},
          {"out_dir", out_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  if (!j.contains("version") || j.at("version") != 1) throw ConfigError("experiment config needs \"version\": 1");
  static const std::set<std::string> known{
      "version", "kind",       "in_dataset",  "out_datasets", "data_dir",         "n_train", "n_test",
      "n_ood",   "arch",       "train",       "label",        "objective",        "detector", "attacks",
      "corruptions", "severities", "corruption_table", "ladder", "grid",         "label_designs", "k",
      "r",       "seed",       "out_dir"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown experiment config key '" + key + "'");
  try {
    ExperimentConfig c = defaults(experiment_kind_from_string(j.value("kind", std::string("ood"))));
    c.in_dataset = j.value("in_dataset", c.in_dataset);
    c.out_datasets = j.value("out_datasets", c.out_datasets);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.n_ood = j.value("n_ood", c.n_ood);
    c.arch = j.value("arch", c.arch);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("label")) c.label = LabelRequest::from_json(j.at("label"));
    if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
    if (j.contains("detector")) c.detector = DetectorConfig::from_json(j.at("detector"));
    if (j.contains("attacks")) {
      c.attacks.clear();
      for (const auto& a : j.at("attacks")) c.attacks.push_back(AttackSpec::from_json(a));
    }
    if (j.contains("corruptions")) {
      c.corruptions.clear();
      for (const auto& s : j.at("corruptions")) c.corruptions.push_back(corruption_kind_from_string(s.get<std::string>()));
    }
    c.severities = j.value("severities", c.severities);
    c.corruption_table = j.value("corruption_table", c.corruption_table);
    c.ladder = j.value("ladder", c.ladder);
    if (j.contains("grid")) c.grid = AblationGrid::from_json(j.at("grid"));
    if (j.contains("label_designs")) {
      c.label_designs.clear();
      for (const auto& d : j.at("label_designs")) c.label_designs.push_back(LabelRequest::from_json(d));
    }
    c.k = j.value("k", c.k);
    c.r = j.value("r", c.r);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("out_dir");
  return sha256_hex(j.dump());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw StateError("SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

// --- run directory ----------------------------------------------------------

namespace {

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

}  // namespace

RunDir::RunDir(const fs::path& out_dir, const std::string& config_hash) {
  fs::create_directories(out_dir);
  const std::string base = config_hash.substr(0, 12) + "-" + utc_stamp();
  for (int n = 0;; ++n) {
    const fs::path candidate = out_dir / (n == 0 ? base : base + "-" + std::to_string(n));
    std::error_code ec;
    if (fs::create_directory(candidate, ec)) {
      root_ = candidate;
      break;
    }
    if (ec) throw ConfigError("cannot create run directory " + candidate.string() + ": " + ec.message());
  }
  lock();
}

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
  if (fs::exists(root_)) throw ConfigError("run directory " + root_.string() + " already exists");
  fs::create_directories(root_);
  lock();
}

void RunDir::lock() {
  std::FILE* f = std::fopen((root_ / ".lock").c_str(), "wx");
  if (f == nullptr) throw StateError("run directory " + root_.string() + " is locked by another pipeline");
  std::fclose(f);
  locked_ = true;
}

RunDir::~RunDir() {
  if (locked_) {
    std::error_code ec;
    fs::remove(root_ / ".lock", ec);
  }
}

fs::path RunDir::fresh(const std::string& rel) {
  const fs::path p = root_ / rel;
  if (fs::exists(p)) throw StateError("artifact " + rel + " already exists; run directories are append-only");
  fs::create_directories(p.parent_path());
  return p;
}

void RunDir::write(const std::string& rel, std::string_view bytes) {
  write_file(fresh(rel), bytes);
  record(rel);
}

void RunDir::record(const std::string& rel) {
  const std::string bytes = read_file(root_ / rel);
  artifacts_.push_back({rel, sha256_hex(bytes), bytes.size()});
}

// --- figure helpers ---------------------------------------------------------

namespace {

double quantile(const std::vector<double>& sorted, double q) {
  // Linear interpolation between closest ranks.
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string layer_of(const std::string& param) { return param.substr(0, param.rfind('.')); }

}  // namespace

std::string figure_series_csv(const std::vector<std::pair<std::string, ProbeMatrix>>& sets, const std::string& rung) {
  std::string out = (rung.empty() ? "" : "rung,") + std::string("dataset,layer,statistic_kind,n,q05,q25,q50,q75,q95,mean\n");
  for (const auto& [name, m] : sets) {
    if (m.records.empty()) throw ConfigError("figure series for '" + name + "' has no probed samples");
    for (const auto& layer : m.activation_names) {
      std::vector<double> grad, activ, loss;
      const auto a = static_cast<std::size_t>(
          std::find(m.activation_names.begin(), m.activation_names.end(), layer) - m.activation_names.begin());
      for (const auto& rec : m.records) {
        double g = 0.0;
        for (std::size_t p = 0; p < m.param_names.size(); ++p)
          if (layer_of(m.param_names[p]) == layer) g += rec.grad_norms[p];
        grad.push_back(g);
        activ.push_back(rec.activ_norms[a]);
        loss.push_back(rec.loss);
      }
      const std::pair<const char*, std::vector<double>*> kinds[] = {{"grad", &grad}, {"activ", &activ}, {"loss", &loss}};
      for (const auto& [kind, values] : kinds) {
        std::sort(values->begin(), values->end());
        double mean = 0.0;
        for (double v : *values) mean += v;
        mean /= static_cast<double>(values->size());
        if (!rung.empty()) out += rung + ",";
        out += name + "," + layer + "," + kind + "," + std::to_string(values->size());
        for (double q : {0.05, 0.25, 0.5, 0.75, 0.95}) out += "," + format_double(quantile(*values, q));
        out += "," + format_double(mean) + "\n";
      }
    }
  }
  return out;
}

double median_gap(const ProbeMatrix& in, const ProbeMatrix& ood) {
  auto med = [](const ProbeMatrix& m) {
    std::vector<double> s;
    for (const auto& r : m.records) {
      double t = 0.0;
      for (double g : r.grad_norms) t += g;
      s.push_back(t);
    }
    if (s.empty()) throw ConfigError("median of an empty probe set");
    std::sort(s.begin(), s.end());
    return quantile(s, 0.5);
  };
  return med(ood) - med(in);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const FormatError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 3;
  return 1;
}

// --- pipeline ---------------------------------------------------------------

namespace {

enum Stream : std::uint64_t {
  kTrainData = 1,
  kTestData = 2,
  kTrainSeed = 3,
  kAttackSeed = 4,
  kCorruptSeed = 5,
  kPlanSeed = 6,
  kDetectorSeed = 7,
  kOodData = 100,
};

struct Context {
  /// Seeds derived; `given` is the config as supplied, which names the run.
  ExperimentConfig cfg;
  ExperimentConfig given;
  RunDir& run;
  std::string stage = "config";
  EvalReport report;
};

template <class F>
auto in_stage(Context& ctx, const std::string& name, F&& f) {
  ctx.stage = name;
  return f();
}

std::pair<Dataset, Dataset> load_in(const ExperimentConfig& cfg) {
  if (cfg.in_dataset == "mnist") {
    const fs::path dir(cfg.data_dir);
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-labels-idx1-ubyte"})
      if (!fs::exists(dir / f)) throw ConfigError("missing IDX file " + (dir / f).string());
    auto train = load_idx_dataset(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "mnist");
    auto test = load_idx_dataset(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "mnist");
    return {train.head(std::min(cfg.n_train, train.size())), test.head(std::min(cfg.n_test, test.size()))};
  }
  const auto family = cfg.in_dataset == "shapes" ? GlyphFamily::shapes : GlyphFamily::digits;
  return {synth_glyphs(family, cfg.n_train, derive_seed(cfg.seed, kTrainData)),
          synth_glyphs(family, cfg.n_test, derive_seed(cfg.seed, kTestData))};
}

Dataset load_out(const ExperimentConfig& cfg, const std::string& name, const Dataset& reference, std::size_t n,
                 std::size_t index) {
  const std::uint64_t seed = derive_seed(cfg.seed, kOodData + index);
  if (name.rfind("file:", 0) == 0) {
    auto ds = load_dataset(name.substr(5));
    return ds.head(std::min(n, ds.size()));
  }
  if (name == "shapes") return synth_glyphs(GlyphFamily::shapes, n, seed);
  if (name == "digits") return synth_glyphs(GlyphFamily::digits, n, seed);
  return synth_ood(ood_kind_from_string(name), reference, n, seed);
}

ArchSpec make_arch(const ExperimentConfig& cfg, const Dataset& train) {
  const Shape s = train.sample_shape();
  const std::size_t classes = train.classes();
  if (cfg.arch == "small_resnet") return ArchSpec::small_resnet(s, classes);
  if (cfg.arch == "mlp") return ArchSpec::mlp(s, {100}, classes);
  return ArchSpec::small_cnn(s, classes);
}

Model train_model(Context& ctx, const Dataset& train, const Dataset& test, const std::string& prefix) {
  auto res = train_classifier(train, make_arch(ctx.cfg, train), ctx.cfg.train, &test);
  save_checkpoint(ctx.run.fresh(prefix + "model.bin"), res.model, ctx.cfg.train.seed);
  ctx.run.record(prefix + "model.bin");
  ctx.run.write(prefix + "training_log.csv", training_log_csv(res.log));
  return std::move(res.model);
}

ProbeMatrix probe_and_save(Context& ctx, Model& model, const Dataset& ds, const std::string& rel,
                           const LabelRequest& label, Objective objective) {
  auto m = probe_batch(model, ds, label, objective);
  if (m.records.empty()) throw NumericError("every sample of " + ds.name + " failed to probe");
  write_features(ctx.run.fresh(rel), m, {{"dataset", ds.name}});
  ctx.run.record(rel);
  ctx.run.record(rel + ".json");
  return m;
}

FeatureMatrix grads(const ProbeMatrix& m) { return FeatureMatrix::from_rows(m.grad_rows()); }
FeatureMatrix activs(const ProbeMatrix& m) { return FeatureMatrix::from_rows(m.activ_rows()); }

std::vector<double> msp_of(const ProbeMatrix& m) {
  std::vector<double> out;
  for (const auto& r : m.records) out.push_back(baseline_msp(r.logits));
  return out;
}

CvPlan plan_for(const Context& ctx, const ProbeMatrix& in, const ProbeMatrix& out) {
  return make_cv_plan(in.records.size(), out.records.size(), ctx.cfg.k, ctx.cfg.r,
                      derive_seed(ctx.cfg.seed, kPlanSeed));
}

/// Gradient detector, activation detector and MSP on identical folds; the
/// gradient row carries the t-test against MSP.
void evaluate_pairing(Context& ctx, const std::string& pairing, const std::string& slug, const ProbeMatrix& in,
                      const ProbeMatrix& out, std::vector<EvalRow>* rows_out = nullptr) {
  const auto plan = plan_for(ctx, in, out);
  auto grad = run_cv(grads(in), grads(out), ctx.cfg.detector, plan);
  grad.method = "purview";
  auto activ = run_cv(activs(in), activs(out), ctx.cfg.detector, plan);
  activ.method = "activation";
  const auto msp = score_cv(msp_of(in), msp_of(out), Orientation::lower_is_anomalous, plan, ctx.cfg.detector.delta,
                            "msp");
  ctx.run.write("cv/" + slug + ".json",
                nlohmann::json{{"pairing", pairing},
                               {"purview", grad.to_json()},
                               {"activation", activ.to_json()},
                               {"msp", msp.to_json()}}
                    .dump(1));
  auto g = grad.to_row(pairing);
  g.ttest = corrected_ttest(grad.round_values(&Metrics::acc_fixed), msp.round_values(&Metrics::acc_max), ctx.cfg.k,
                            ctx.cfg.r, static_cast<double>(grad.rounds[0].n_train),
                            static_cast<double>(grad.rounds[0].n_test));
  for (auto row : {g, activ.to_row(pairing), msp.to_row(pairing)}) {
    ctx.report.rows.push_back(row);
    if (rows_out) rows_out->push_back(row);
  }
}

void write_report(RunDir& run, const EvalReport& rep, const std::string& stem) {
  run.write(stem + ".json", rep.to_json().dump(1));
  run.write(stem + ".csv", rep.to_csv());
}

std::string metrics_csv(const Metrics& m) {
  return format_double(m.auroc) + "," + format_double(m.aupr) + "," + format_double(m.acc_fixed) + "," +
         format_double(m.acc_max);
}

void run_ood(Context& ctx, Model& model, const Dataset& test, const ProbeMatrix& in) {
  for (std::size_t i = 0; i < ctx.cfg.out_datasets.size(); ++i) {
    const auto& name = ctx.cfg.out_datasets[i];
    const auto slug = name.rfind("file:", 0) == 0 ? "file" + std::to_string(i) : name;
    const auto ood = in_stage(ctx, "data:" + name, [&] { return load_out(ctx.cfg, name, test, ctx.cfg.n_ood, i); });
    const auto m = in_stage(ctx, "probe:" + name,
                            [&] { return probe_and_save(ctx, model, ood, "features/" + slug + ".csv", ctx.cfg.label,
                                                        ctx.cfg.objective); });
    in_stage(ctx, "detect:" + name, [&] { evaluate_pairing(ctx, ctx.cfg.in_dataset + "/" + slug, slug, in, m); });
  }
}

void run_adversarial(Context& ctx, Model& model, const Dataset& test, const ProbeMatrix& in) {
  for (const auto& spec : ctx.cfg.attacks) {
    const std::string name(to_string(spec.kind));
    const auto adv = in_stage(ctx, "attack:" + name, [&] { return attack_dataset(model, test, spec); });
    const auto m = in_stage(ctx, "probe:" + name, [&] {
      return probe_and_save(ctx, model, adv, "features/" + name + ".csv", ctx.cfg.label, ctx.cfg.objective);
    });
    in_stage(ctx, "detect:" + name, [&] { evaluate_pairing(ctx, ctx.cfg.in_dataset + "/" + name, name, in, m); });
  }
}

void run_corruption(Context& ctx, Model& model, const Dataset& test, const ProbeMatrix& in) {
  const auto table = in_stage(ctx, "data:corruption_table", [&] {
    return ctx.cfg.corruption_table.empty() ? CorruptionTable::defaults()
                                            : CorruptionTable::load(ctx.cfg.corruption_table);
  });
  ctx.run.write("corruption_table.json", table.to_json().dump(1));
  std::string trend = "kind,severity,method,auroc,aupr,acc_fixed,acc_max\n";
  for (int sev : ctx.cfg.severities) {
    EvalReport per;
    per.config = ctx.report.config;
    for (auto kind : ctx.cfg.corruptions) {
      const std::string name = std::string(to_string(kind)) + "@" + std::to_string(sev);
      const std::string slug = std::string(to_string(kind)) + "_s" + std::to_string(sev);
      const auto bad = in_stage(ctx, "corrupt:" + name, [&] {
        return corrupt(test, {kind, sev}, table, derive_seed(ctx.cfg.seed, kCorruptSeed));
      });
      const auto m = in_stage(ctx, "probe:" + name, [&] {
        return probe_and_save(ctx, model, bad, "features/" + slug + ".csv", ctx.cfg.label, ctx.cfg.objective);
      });
      std::vector<EvalRow> rows;
      in_stage(ctx, "detect:" + name,
               [&] { evaluate_pairing(ctx, ctx.cfg.in_dataset + "/" + name, slug, in, m, &rows); });
      for (const auto& row : rows) {
        per.rows.push_back(row);
        trend += std::string(to_string(kind)) + "," + std::to_string(sev) + "," + row.method + "," +
                 metrics_csv(row.mean) + "\n";
      }
    }
    write_report(ctx.run, per, "report_s" + std::to_string(sev));
  }
  ctx.run.write("severity_trend.csv", trend);
}

void run_figure3(Context& ctx, Model& model, const Dataset& test, const ProbeMatrix& in) {
  std::vector<std::pair<std::string, ProbeMatrix>> sets{{ctx.cfg.in_dataset, in}};
  for (std::size_t i = 0; i < ctx.cfg.out_datasets.size(); ++i) {
    const auto& name = ctx.cfg.out_datasets[i];
    const auto ood = in_stage(ctx, "data:" + name, [&] { return load_out(ctx.cfg, name, test, ctx.cfg.n_ood, i); });
    sets.emplace_back(name, in_stage(ctx, "probe:" + name, [&] {
                        return probe_and_save(ctx, model, ood, "features/" + name + ".csv", ctx.cfg.label,
                                              ctx.cfg.objective);
                      }));
  }
  ctx.run.write("figure3.csv", figure_series_csv(sets));
}

void run_figure4(Context& ctx) {
  const auto& cfg = ctx.cfg;
  // One 10-class pool; each rung keeps its leading classes.
  const std::size_t smallest = *std::min_element(cfg.ladder.begin(), cfg.ladder.end());
  auto [train_all, test_all] = in_stage(ctx, "data", [&] {
    ExperimentConfig big = cfg;
    if (cfg.in_dataset != "mnist") {
      big.n_train = cfg.n_train * 12 / smallest;
      big.n_test = cfg.n_test * 12 / smallest;
    }
    return load_in(big);
  });

  // Fixed OOD pool shared by every rung: equal parts of each out dataset.
  const auto pool = in_stage(ctx, "data:ood_pool", [&] {
    const auto reference = test_all.head(std::min(test_all.size(), cfg.n_test));
    const std::size_t part = cfg.n_ood / cfg.out_datasets.size();
    Dataset ood;
    for (std::size_t i = 0; i < cfg.out_datasets.size(); ++i) {
      auto d = load_out(cfg, cfg.out_datasets[i], reference, part, i);
      d.labels.assign(d.size(), 0);
      d.class_names = {"ood"};
      ood = i == 0 ? d : concat(ood, d, "ood_pool");
    }
    ood.name = "ood_pool";
    return ood;
  });

  std::string series;
  std::string gaps = "rung,classes,median_in,median_ood,gap\n";
  for (std::size_t c : cfg.ladder) {
    const std::string rung = "c" + std::to_string(c);
    std::vector<int> classes(c);
    for (std::size_t i = 0; i < c; ++i) classes[i] = static_cast<int>(i);
    const auto train = filter_classes(train_all, classes);
    const auto test = filter_classes(test_all, classes);
    if (train.size() < cfg.n_train || test.size() < cfg.n_test)
      throw ConfigError("rung " + rung + " has too few samples for the requested sizes");
    const auto tr = train.head(cfg.n_train);
    const auto te = test.head(cfg.n_test);
    Model model = in_stage(ctx, "train:" + rung, [&] { return train_model(ctx, tr, te, rung + "/"); });
    const auto in = in_stage(ctx, "probe:" + rung, [&] {
      return probe_and_save(ctx, model, te, rung + "/features/in.csv", ctx.cfg.label, ctx.cfg.objective);
    });
    const auto out = in_stage(ctx, "probe:" + rung + ":ood", [&] {
      return probe_and_save(ctx, model, pool, rung + "/features/ood.csv", ctx.cfg.label, ctx.cfg.objective);
    });
    const auto part = figure_series_csv({{cfg.in_dataset, in}, {"ood_pool", out}}, rung);
    series += series.empty() ? part : part.substr(part.find('\n') + 1);
    auto med = [](const ProbeMatrix& m) {
      std::vector<double> s;
      for (const auto& r : m.records) {
        double t = 0.0;
        for (double g : r.grad_norms) t += g;
        s.push_back(t);
      }
      std::sort(s.begin(), s.end());
      return quantile(s, 0.5);
    };
    gaps += rung + "," + std::to_string(c) + "," + format_double(med(in)) + "," + format_double(med(out)) + "," +
            format_double(median_gap(in, out)) + "\n";
  }
  ctx.run.write("figure4.csv", series);
  ctx.run.write("figure4_gap.csv", gaps);
}

/// (pairing, anomalous set) for the ablations: OOD sets then attacks.
std::vector<std::pair<std::string, Dataset>> ablation_pairings(Context& ctx, Model& model, const Dataset& test) {
  std::vector<std::pair<std::string, Dataset>> out;
  for (std::size_t i = 0; i < ctx.cfg.out_datasets.size(); ++i) {
    const auto& name = ctx.cfg.out_datasets[i];
    out.emplace_back(name, in_stage(ctx, "data:" + name,
                                    [&] { return load_out(ctx.cfg, name, test, ctx.cfg.n_ood, i); }));
  }
  for (const auto& spec : ctx.cfg.attacks) {
    const std::string name(to_string(spec.kind));
    out.emplace_back(name, in_stage(ctx, "attack:" + name, [&] { return attack_dataset(model, test, spec); }));
  }
  return out;
}

void run_ablation_labels(Context& ctx, Model& model, const Dataset& test) {
  const auto pairings = ablation_pairings(ctx, model, test);
  std::vector<std::pair<LabelRequest, Objective>> designs;
  if (ctx.cfg.label_designs.empty()) designs = default_label_designs(test.classes());
  else
    for (const auto& d : ctx.cfg.label_designs) designs.push_back({d, Objective::bce});

  std::string csv = "design,objective,pairing,auroc,aupr,acc_fixed,acc_max\n";
  for (const auto& [label, objective] : designs) {
    std::string tag = label.to_json().dump();
    if (label.design == LabelDesign::top_k) tag = "top_k" + std::to_string(label.k);
    else tag = std::string(to_string(label.design));
    if (objective == Objective::max_logit) tag = "max_logit";
    const auto in = in_stage(ctx, "probe:" + tag,
                             [&] { return probe_and_save(ctx, model, test, "features/" + tag + "/in.csv", label, objective); });
    for (const auto& [name, ds] : pairings) {
      const auto out = in_stage(ctx, "probe:" + tag + ":" + name, [&] {
        return probe_and_save(ctx, model, ds, "features/" + tag + "/" + name + ".csv", label, objective);
      });
      const auto res = in_stage(ctx, "detect:" + tag + ":" + name,
                                [&] { return run_cv(grads(in), grads(out), ctx.cfg.detector, plan_for(ctx, in, out)); });
      auto row = res.to_row(ctx.cfg.in_dataset + "/" + name);
      row.method = tag;
      ctx.report.rows.push_back(row);
      csv += tag + "," + std::string(to_string(objective)) + "," + name + "," + metrics_csv(row.mean) + "\n";
    }
  }
  ctx.run.write("ablation_labels.csv", csv);
}

void run_ablation_detector(Context& ctx, Model& model, const Dataset& test, const ProbeMatrix& in) {
  const auto pairings = ablation_pairings(ctx, model, test);
  std::vector<std::pair<std::string, DetectorConfig>> points;
  const auto& g = ctx.cfg.grid;
  const DetectorConfig base = ctx.cfg.detector;
  for (auto v : g.layers) points.emplace_back("layers=" + std::to_string(v), base), points.back().second.layers = v;
  for (auto v : g.neurons) points.emplace_back("neurons=" + std::to_string(v), base), points.back().second.hidden = v;
  for (auto v : g.epochs) points.emplace_back("epochs=" + std::to_string(v), base), points.back().second.epochs = v;
  for (auto v : g.lrs) points.emplace_back("lr=" + format_double(v), base), points.back().second.lr = v;

  std::string csv = "axis,value,pairing,status,auroc,aupr,acc_fixed,acc_max\n";
  for (const auto& [name, ds] : pairings) {
    const auto out = in_stage(ctx, "probe:" + name, [&] {
      return probe_and_save(ctx, model, ds, "features/" + name + ".csv", ctx.cfg.label, ctx.cfg.objective);
    });
    const auto plan = plan_for(ctx, in, out);
    for (const auto& [point, dc] : points) {
      const auto eq = point.find('=');
      const std::string axis = point.substr(0, eq), value = point.substr(eq + 1);
      try {
        const auto res = in_stage(ctx, "detect:" + point + ":" + name,
                                  [&] { return run_cv(grads(in), grads(out), dc, plan); });
        auto row = res.to_row(ctx.cfg.in_dataset + "/" + name);
        row.method = point;
        ctx.report.rows.push_back(row);
        csv += axis + "," + value + "," + name + ",ok," + metrics_csv(row.mean) + "\n";
      } catch (const ConfigError& e) {
        // An invalid grid point is skipped and recorded.
        csv += axis + "," + value + "," + name + ",skipped: " + e.what() + ",,,,\n";
      }
    }
  }
  ctx.run.write("ablation_detector.csv", csv);
}

void execute(Context& ctx) {
  const auto& cfg = ctx.cfg;
  ctx.run.write("config.json", ctx.given.to_json().dump(1));
  if (cfg.kind == ExperimentKind::figure4) {
    run_figure4(ctx);
    return;
  }
  auto [train, test] = in_stage(ctx, "data", [&] { return load_in(cfg); });
  Model model = in_stage(ctx, "train", [&] { return train_model(ctx, train, test, ""); });
  if (cfg.kind == ExperimentKind::ablation_labels) {
    run_ablation_labels(ctx, model, test);
    return;
  }
  const auto in = in_stage(ctx, "probe:in",
                           [&] { return probe_and_save(ctx, model, test, "features/in.csv", cfg.label, cfg.objective); });
  switch (cfg.kind) {
    case ExperimentKind::ood: run_ood(ctx, model, test, in); break;
    case ExperimentKind::adversarial: run_adversarial(ctx, model, test, in); break;
    case ExperimentKind::corruption: run_corruption(ctx, model, test, in); break;
    case ExperimentKind::figure3: run_figure3(ctx, model, test, in); break;
    case ExperimentKind::ablation_detector: run_ablation_detector(ctx, model, test, in); break;
    default: break;
  }
}

/// Every seed in the run derives from the top-level one.
ExperimentConfig effective(const ExperimentConfig& cfg) {
  ExperimentConfig e = cfg;
  e.train.seed = derive_seed(cfg.seed, kTrainSeed);
  e.detector.seed = derive_seed(cfg.seed, kDetectorSeed);
  for (std::size_t i = 0; i < e.attacks.size(); ++i) e.attacks[i].seed = derive_seed(cfg.seed, kAttackSeed + 1000 * i);
  return e;
}

void write_manifest(RunDir& run, const ExperimentConfig& cfg, const std::string& status, const std::string& stage,
                    const std::string& error) {
  nlohmann::json arts = nlohmann::json::array();
  std::string chain = cfg.hash();
  for (const auto& a : run.artifacts()) {
    arts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
    chain += "\n" + a.path + " " + a.sha256;
  }
  nlohmann::json m{{"format", "purview.manifest"},
                   {"version", 1},
                   {"kind", to_string(cfg.kind)},
                   {"config_hash", cfg.hash()},
                   {"seed", cfg.seed},
                   {"status", status},
                   {"created_utc", utc_stamp()},
                   {"artifacts", arts},
                   {"manifest_hash", sha256_hex(chain)}};
  if (!stage.empty()) m["failed_stage"] = stage;
  if (!error.empty()) m["error"] = error;
  write_file(run.fresh("manifest.json"), m.dump(1));
}

PipelineResult run_in(const ExperimentConfig& raw, RunDir& run) {
  Context ctx{effective(raw), raw, run, "config", {}};
  ctx.report.config = ctx.cfg.to_json();
  auto fail = [&](const std::exception& e) {
    write_manifest(run, ctx.given, "failed", ctx.stage, e.what());
    return "stage " + ctx.stage + ": " + e.what();
  };
  try {
    execute(ctx);
    ctx.stage = "report";
    write_report(run, ctx.report, "report");
  } catch (const NumericError& e) {
    throw NumericError(fail(e));
  } catch (const ConfigError& e) {
    throw ConfigError(fail(e));
  } catch (const FormatError& e) {
    throw FormatError(fail(e));
  } catch (const std::exception& e) {
    throw std::runtime_error(fail(e));
  }
  write_manifest(run, ctx.given, "ok", "", "");
  return {ctx.report, run.root(), run.artifacts()};
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  RunDir run(cfg.out_dir, cfg.hash());
  return run_in(cfg, run);
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  RunDir run(run_dir);
  return run_in(cfg, run);
}

}  // namespace purview
