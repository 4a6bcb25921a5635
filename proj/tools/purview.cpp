// purview command-line front end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "purview/checkpoint.hpp"
#include "purview/errors.hpp"
#include "purview/pipeline.hpp"

using namespace purview;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string config;
  std::string out_dir = "runs";
  std::string data_dir;
};

nlohmann::json load_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// digits | shapes | mnist | mnist-train | uniform_noise | gaussian_noise_images |
/// shuffled_pixels | path to a dataset blob.
Dataset load_spec(const std::string& spec, std::size_t n, std::uint64_t seed, const Globals& g) {
  if (spec == "digits") return synth_glyphs(GlyphFamily::digits, n, seed);
  if (spec == "shapes") return synth_glyphs(GlyphFamily::shapes, n, seed);
  if (spec == "mnist" || spec == "mnist-train") {
    if (g.data_dir.empty()) throw ConfigError("mnist needs --data-dir");
    const fs::path d(g.data_dir);
    const std::string p = spec == "mnist" ? "t10k" : "train";
    auto ds = load_idx_dataset(d / (p + "-images-idx3-ubyte"), d / (p + "-labels-idx1-ubyte"), "mnist");
    return ds.head(std::min(n, ds.size()));
  }
  if (spec == "uniform_noise" || spec == "gaussian_noise_images" || spec == "shuffled_pixels") {
    const auto reference = synth_glyphs(GlyphFamily::digits, n, derive_seed(seed, 1));
    return synth_ood(ood_kind_from_string(spec), reference, n, seed);
  }
  if (!fs::exists(spec)) throw ConfigError("unknown dataset '" + spec + "'");
  auto ds = load_dataset(spec);
  return ds.head(std::min(n, ds.size()));
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

LabelRequest label_from(const std::string& design, std::size_t k) {
  if (design == "top_k") return LabelRequest::top_k_of(k);
  if (design == "taxonomy") return LabelRequest::taxonomy_of({{0, 2, 4, 6, 8}, {1, 3, 5, 7, 9}});
  if (design == "all_hot") return LabelRequest{};
  throw ConfigError("label design '" + design + "' is not available from the command line; use --config");
}

ExperimentConfig experiment_from(const Globals& g, ExperimentKind kind) {
  ExperimentConfig cfg = ExperimentConfig::defaults(kind);
  if (!g.config.empty()) {
    auto j = load_json(g.config);
    j["kind"] = to_string(kind);
    cfg = ExperimentConfig::from_json(j);
  }
  cfg.seed = g.seed;
  cfg.out_dir = g.out_dir;
  if (!g.data_dir.empty()) cfg.data_dir = g.data_dir;
  return cfg;
}

void print_report(const PipelineResult& res) {
  std::cout << res.report.to_csv() << "run directory: " << res.run_dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"purview: gradient-based probing of trained classifiers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Top-level seed")->capture_default_str();
  app.add_option("--config", g.config, "JSON config file (with a version field)");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--data-dir", g.data_dir, "Directory with MNIST-format IDX files");

  // train
  auto* train = app.add_subcommand("train", "Train a classifier");
  std::string train_data = "digits", arch = "small_cnn";
  std::size_t n_train = 6000, n_test = 2000;
  TrainConfig tc;
  train->add_option("--dataset", train_data, "digits | shapes | mnist")->capture_default_str();
  train->add_option("--arch", arch, "small_cnn | small_resnet | mlp")->capture_default_str();
  train->add_option("--n-train", n_train)->capture_default_str();
  train->add_option("--n-test", n_test)->capture_default_str();
  train->add_option("--epochs", tc.epochs)->capture_default_str();
  train->add_option("--lr", tc.lr)->capture_default_str();
  train->add_option("--batch-size", tc.batch_size)->capture_default_str();

  // probe
  auto* probe = app.add_subcommand("probe", "Write gradient/activation features for a dataset");
  std::string model_path, data_spec = "digits", label_design = "all_hot", objective = "bce", output;
  std::size_t n_samples = 500, top_k = 2;
  probe->add_option("--model", model_path, "Checkpoint")->required();
  probe->add_option("--data", data_spec, "Dataset name or blob path")->capture_default_str();
  probe->add_option("-n,--n", n_samples)->capture_default_str();
  probe->add_option("--label", label_design, "all_hot | top_k | taxonomy")->capture_default_str();
  probe->add_option("--k", top_k, "k for top_k")->capture_default_str();
  probe->add_option("--objective", objective, "bce | max_logit")->capture_default_str();
  probe->add_option("-o,--output", output, "Feature CSV (default <out-dir>/features.csv)");

  // attack
  auto* attack = app.add_subcommand("attack", "Attack a dataset and save it as a blob");
  std::string attack_kind = "fgsm";
  std::optional<double> eps, alpha;
  std::optional<std::size_t> steps;
  attack->add_option("--model", model_path)->required();
  attack->add_option("--data", data_spec)->capture_default_str();
  attack->add_option("-n,--n", n_samples)->capture_default_str();
  attack->add_option("--attack", attack_kind, "fgsm | bim | pgd | iterll | semantic")->capture_default_str();
  attack->add_option("--eps", eps, "L-inf budget in [0, 1] pixel units");
  attack->add_option("--alpha", alpha, "Step size");
  attack->add_option("--steps", steps, "Iterations");
  attack->add_option("-o,--output", output);

  // corrupt
  auto* corrupt_cmd = app.add_subcommand("corrupt", "Corrupt a dataset and save it as a blob");
  std::string corruption = "gaussian_noise", table_path;
  int severity = 1;
  corrupt_cmd->add_option("--data", data_spec)->capture_default_str();
  corrupt_cmd->add_option("-n,--n", n_samples)->capture_default_str();
  corrupt_cmd->add_option("--kind", corruption)->capture_default_str();
  corrupt_cmd->add_option("--severity", severity, "1..5")->capture_default_str();
  corrupt_cmd->add_option("--table", table_path, "Corruption parameter file");
  corrupt_cmd->add_option("-o,--output", output);

  // detect
  auto* detect = app.add_subcommand("detect", "Cross-validate a detector on two feature files");
  std::string normal_csv, anomalous_csv, features = "grad";
  DetectorConfig dc;
  std::size_t k = 5, r = 2;
  detect->add_option("--normal", normal_csv)->required();
  detect->add_option("--anomalous", anomalous_csv)->required();
  detect->add_option("--features", features, "grad | activ")->capture_default_str();
  detect->add_option("--hidden", dc.hidden)->capture_default_str();
  detect->add_option("--layers", dc.layers)->capture_default_str();
  detect->add_option("--epochs", dc.epochs)->capture_default_str();
  detect->add_option("--lr", dc.lr)->capture_default_str();
  detect->add_option("--dropout", dc.dropout)->capture_default_str();
  detect->add_option("--k", k)->capture_default_str();
  detect->add_option("--r", r)->capture_default_str();
  detect->add_option("-o,--output", output);

  // eval
  auto* eval = app.add_subcommand("eval", "Build an evaluation report from cross-validation results");
  std::vector<std::string> cv_files;
  std::string baseline_file, pairing = "pairing";
  eval->add_option("--cv", cv_files, "Cross-validation result JSON")->required();
  eval->add_option("--baseline", baseline_file, "Result to t-test each --cv against");
  eval->add_option("--pairing", pairing)->capture_default_str();

  // run / ablate / figures
  auto* run = app.add_subcommand("run", "Run a full experiment pipeline");
  std::string run_kind = "ood", in_name;
  std::vector<std::string> outs, attacks;
  run->add_option("kind", run_kind, "ood | adversarial | corruption")->capture_default_str();
  run->add_option("--in", in_name, "In-distribution dataset");
  run->add_option("--out", outs, "OOD dataset(s)");
  run->add_option("--attack", attacks, "Attack kind(s)");
  run->add_option("--eps", eps);
  run->add_option("--alpha", alpha);
  run->add_option("--steps", steps);
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  std::string ablate_kind = "detector";
  ablate->add_option("kind", ablate_kind, "labels | detector")->capture_default_str();
  auto* figures = app.add_subcommand("figures", "Emit per-layer distribution data");
  std::string figure_kind = "figure3";
  figures->add_option("kind", figure_kind, "figure3 | figure4")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      if (!g.config.empty()) tc = TrainConfig::from_json(load_json(g.config).value("train", tc.to_json()));
      tc.seed = derive_seed(g.seed, 3);
      const auto tr = load_spec(train_data == "mnist" ? "mnist-train" : train_data, n_train, derive_seed(g.seed, 1), g);
      const auto te = load_spec(train_data, n_test, derive_seed(g.seed, 2), g);
      const Shape s = tr.sample_shape();
      const ArchSpec spec = arch == "small_resnet" ? ArchSpec::small_resnet(s, tr.classes())
                            : arch == "mlp"        ? ArchSpec::mlp(s, {100}, tr.classes())
                                                   : ArchSpec::small_cnn(s, tr.classes());
      auto res = train_classifier(tr, spec, tc, &te);
      save_checkpoint(out_path(g, "model.bin"), res.model, tc.seed);
      write_file(out_path(g, "training_log.csv"), training_log_csv(res.log));
      std::cout << "test accuracy " << res.log.back().test_acc << "\n";
    } else if (*probe) {
      Model model = load_checkpoint(model_path).model;
      const auto ds = load_spec(data_spec, n_samples, g.seed, g);
      const auto m = probe_batch(model, ds, label_from(label_design, top_k), objective_from_string(objective));
      const fs::path path = output.empty() ? out_path(g, "features.csv") : fs::path(output);
      write_features(path, m, {{"dataset", ds.name}, {"seed", g.seed}});
      std::cout << m.records.size() << " samples probed, " << m.failures.size() << " failed -> " << path.string()
                << "\n";
      return m.failures.empty() ? 0 : 3;
    } else if (*attack) {
      Model model = load_checkpoint(model_path).model;
      const auto ds = load_spec(data_spec, n_samples, g.seed, g);
      auto spec = AttackSpec::defaults(attack_kind_from_string(attack_kind));
      if (eps) spec.epsilon = *eps;
      if (alpha) spec.alpha = *alpha;
      if (steps) spec.steps = *steps;
      spec.seed = g.seed;
      const auto adv = attack_dataset(model, ds, spec);
      const fs::path path = output.empty() ? out_path(g, attack_kind + ".bin") : fs::path(output);
      save_dataset(path, adv, {{"attack", spec.to_json()}});
      std::cout << "accuracy clean " << accuracy(model, ds) << " -> attacked " << accuracy(model, adv) << "\n";
    } else if (*corrupt_cmd) {
      const auto ds = load_spec(data_spec, n_samples, g.seed, g);
      const auto table = table_path.empty() ? CorruptionTable::defaults() : CorruptionTable::load(table_path);
      const auto bad = corrupt(ds, {corruption_kind_from_string(corruption), severity}, table, g.seed);
      const fs::path path =
          output.empty() ? out_path(g, corruption + "_s" + std::to_string(severity) + ".bin") : fs::path(output);
      save_dataset(path, bad, {{"corruption", corruption}, {"severity", severity}});
      std::cout << "wrote " << path.string() << "\n";
    } else if (*detect) {
      if (!g.config.empty()) {
        const auto j = load_json(g.config);
        if (j.contains("detector")) dc = DetectorConfig::from_json(j.at("detector"));
      }
      dc.seed = g.seed;
      const auto a = read_features(normal_csv);
      const auto b = read_features(anomalous_csv);
      if (features != "grad" && features != "activ") throw ConfigError("--features must be grad or activ");
      auto rows = [&](const ProbeMatrix& m) {
        return FeatureMatrix::from_rows(features == "grad" ? m.grad_rows() : m.activ_rows());
      };
      auto res = run_cv(rows(a), rows(b), dc, k, r);
      res.method = features == "grad" ? "purview" : "activation";
      const fs::path path = output.empty() ? out_path(g, "cv.json") : fs::path(output);
      write_file(path, res.to_json().dump(1));
      const auto m = res.mean();
      std::cout << "auroc " << m.auroc << " aupr " << m.aupr << " acc@delta " << m.acc_fixed << " acc_max "
                << m.acc_max << " (" << res.rounds.size() << " rounds) -> " << path.string() << "\n";
    } else if (*eval) {
      EvalReport rep;
      std::optional<CvResult> base;
      if (!baseline_file.empty()) base = CvResult::from_json(load_json(baseline_file));
      for (const auto& f : cv_files) {
        const auto cv = CvResult::from_json(load_json(f));
        auto row = cv.to_row(pairing);
        if (base) {
          if (base->rounds.size() != cv.rounds.size()) throw ConfigError("baseline has a different round count");
          row.ttest = corrected_ttest(cv.round_values(&Metrics::acc_fixed), base->round_values(&Metrics::acc_max), cv.k,
                                      cv.r, static_cast<double>(cv.rounds[0].n_train),
                                      static_cast<double>(cv.rounds[0].n_test));
        }
        rep.config["inputs"].push_back(f);
        rep.rows.push_back(row);
      }
      if (base) rep.rows.push_back(base->to_row(pairing));
      write_file(out_path(g, "report.json"), rep.to_json().dump(1));
      write_file(out_path(g, "report.csv"), rep.to_csv());
      std::cout << rep.to_csv();
    } else if (*run) {
      const auto kind = experiment_kind_from_string(run_kind);
      if (kind != ExperimentKind::ood && kind != ExperimentKind::adversarial && kind != ExperimentKind::corruption)
        throw ConfigError("run takes ood, adversarial or corruption; see ablate and figures");
      auto cfg = experiment_from(g, kind);
      if (!in_name.empty()) cfg.in_dataset = in_name;
      if (!outs.empty()) cfg.out_datasets = outs;
      if (!attacks.empty()) {
        cfg.attacks.clear();
        for (const auto& a : attacks) cfg.attacks.push_back(AttackSpec::defaults(attack_kind_from_string(a)));
      }
      for (auto& a : cfg.attacks) {
        if (eps) a.epsilon = *eps;
        if (alpha) a.alpha = *alpha;
        if (steps) a.steps = *steps;
      }
      print_report(run_pipeline(cfg));
    } else if (*ablate) {
      if (ablate_kind != "labels" && ablate_kind != "detector") throw ConfigError("ablate takes labels or detector");
      print_report(run_pipeline(
          experiment_from(g, ablate_kind == "labels" ? ExperimentKind::ablation_labels : ExperimentKind::ablation_detector)));
    } else if (*figures) {
      const auto kind = experiment_kind_from_string(figure_kind);
      if (kind != ExperimentKind::figure3 && kind != ExperimentKind::figure4)
        throw ConfigError("figures takes figure3 or figure4");
      const auto res = run_pipeline(experiment_from(g, kind));
      std::cout << "run directory: " << res.run_dir.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
