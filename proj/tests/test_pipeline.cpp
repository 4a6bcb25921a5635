#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "purview/errors.hpp"
#include "purview/pipeline.hpp"

using namespace purview;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("purview_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream s(text);
  for (std::string l; std::getline(s, l);) out.push_back(l);
  return out;
}

ExperimentConfig tiny(ExperimentKind kind) {
  auto c = ExperimentConfig::defaults(kind);
  c.arch = "mlp";
  c.n_train = 400;
  c.n_test = 60;
  c.n_ood = 60;
  c.train.epochs = 1;
  c.detector.epochs = 2;
  return c;
}

}  // namespace

TEST_CASE("experiment config round trip and hash") {
  auto c = ExperimentConfig::defaults(ExperimentKind::adversarial);
  c.seed = 42;
  const auto j = c.to_json();
  CHECK(j["version"] == 1);
  const auto back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == c.hash());
  CHECK(c.hash().size() == 64);

  auto moved = c;
  moved.out_dir = "elsewhere";
  CHECK(moved.hash() == c.hash());
  auto reseeded = c;
  reseeded.seed = 43;
  CHECK(reseeded.hash() != c.hash());

  auto bad = j;
  bad["version"] = 2;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  bad = j;
  bad["surprise"] = true;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  CHECK_THROWS_AS(experiment_kind_from_string("nope"), ConfigError);
  for (auto k : {ExperimentKind::ood, ExperimentKind::figure4, ExperimentKind::ablation_detector})
    CHECK(experiment_kind_from_string(to_string(k)) == k);
}

TEST_CASE("experiment config validation") {
  auto c = tiny(ExperimentKind::ood);
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.in_dataset = "cifar";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.in_dataset = "mnist";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.out_datasets.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.k = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny(ExperimentKind::corruption);
  bad.severities = {0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny(ExperimentKind::figure4);
  bad.ladder = {1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("defaults per experiment kind") {
  CHECK(ExperimentConfig::defaults(ExperimentKind::adversarial).attacks.size() == 5);
  CHECK_FALSE(ExperimentConfig::defaults(ExperimentKind::corruption).corruptions.empty());
  CHECK(ExperimentConfig::defaults(ExperimentKind::figure3).out_datasets.size() == 3);
  const auto designs = default_label_designs(10);
  CHECK(designs.size() == 7);
  CHECK(designs.back().second == Objective::max_logit);
}

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("run directories are locked and append-only") {
  const auto out = scratch("rundir");
  {
    RunDir run(out, std::string(64, 'a'));
    const auto name = run.root().filename().string();
    CHECK(name.rfind("aaaaaaaaaaaa-", 0) == 0);
    CHECK(name.size() >= 13 + 16);
    CHECK(fs::exists(run.root() / ".lock"));

    run.write("a/b.txt", "hello");
    REQUIRE(run.artifacts().size() == 1);
    CHECK(run.artifacts()[0].path == "a/b.txt");
    CHECK(run.artifacts()[0].bytes == 5);
    CHECK(run.artifacts()[0].sha256 == sha256_hex("hello"));
    CHECK_THROWS_AS(run.write("a/b.txt", "again"), StateError);
    CHECK(slurp(run.root() / "a/b.txt") == "hello");

    // A second run in the same second gets a suffix, never the same directory.
    RunDir twin(out, std::string(64, 'a'));
    CHECK(twin.root() != run.root());

    CHECK_THROWS_AS(RunDir(run.root()), ConfigError);
  }
  for (const auto& e : fs::directory_iterator(out)) CHECK_FALSE(fs::exists(e.path() / ".lock"));

  fs::remove_all(out);
}

TEST_CASE("ood pipeline is deterministic and fully recorded") {
  const auto base = scratch("ood");
  auto cfg = tiny(ExperimentKind::ood);
  cfg.seed = 9;
  const auto a = run_pipeline(cfg, base / "a");
  const auto b = run_pipeline(cfg, base / "b");

  for (const char* rel : {"features/in.csv", "features/uniform_noise.csv", "features/shuffled_pixels.csv",
                          "report.json", "report.csv", "cv/uniform_noise.json", "model.bin", "config.json"}) {
    CAPTURE(rel);
    REQUIRE(fs::exists(a.run_dir / rel));
    CHECK(slurp(a.run_dir / rel) == slurp(b.run_dir / rel));
  }
  CHECK(fs::exists(a.run_dir / "features/in.csv.json"));
  CHECK_FALSE(fs::exists(a.run_dir / ".lock"));

  // Three methods per pairing; the t-test sits on the gradient row.
  REQUIRE(a.report.rows.size() == 6);
  CHECK(a.report.rows[0].method == "purview");
  CHECK(a.report.rows[0].ttest.has_value());
  CHECK(a.report.rows[0].rounds.size() == 10);
  CHECK(a.report.rows[2].method == "msp");

  const auto m = nlohmann::json::parse(slurp(a.run_dir / "manifest.json"));
  CHECK(m["status"] == "ok");
  CHECK(m["config_hash"] == cfg.hash());
  CHECK(m["manifest_hash"] == nlohmann::json::parse(slurp(b.run_dir / "manifest.json"))["manifest_hash"]);
  std::set<std::string> listed;
  for (const auto& art : m["artifacts"]) {
    const std::string path = art["path"];
    listed.insert(path);
    CHECK(sha256_hex(slurp(a.run_dir / path)) == art["sha256"]);
  }
  CHECK(listed.count("report.json") == 1);
  CHECK(listed.count("features/in.csv") == 1);
  CHECK(ExperimentConfig::from_json(nlohmann::json::parse(slurp(a.run_dir / "config.json"))).hash() == cfg.hash());

  // A different seed changes the data and therefore the features.
  auto other = cfg;
  other.seed = 10;
  const auto c = run_pipeline(other, base / "c");
  CHECK(slurp(c.run_dir / "features/in.csv") != slurp(a.run_dir / "features/in.csv"));
  fs::remove_all(base);
}

TEST_CASE("a failing stage leaves a partial manifest") {
  const auto base = scratch("fail");
  auto cfg = tiny(ExperimentKind::ood);
  cfg.out_datasets = {"uniform_noise", "file:/nonexistent/blob.bin"};
  try {
    run_pipeline(cfg, base / "run");
    FAIL("expected the pipeline to fail");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).rfind("stage data:file:", 0) == 0);
    CHECK(exit_code_for(e) == 2);
  }
  const auto m = nlohmann::json::parse(slurp(base / "run/manifest.json"));
  CHECK(m["status"] == "failed");
  CHECK(m["failed_stage"] == "data:file:/nonexistent/blob.bin");
  // Work finished before the failure is kept and listed.
  CHECK(fs::exists(base / "run/cv/uniform_noise.json"));
  bool listed = false;
  for (const auto& art : m["artifacts"]) listed |= art["path"] == "cv/uniform_noise.json";
  CHECK(listed);
  CHECK_FALSE(fs::exists(base / "run/report.json"));
  fs::remove_all(base);
}

TEST_CASE("figure series schema") {
  const auto base = scratch("fig3");
  auto cfg = tiny(ExperimentKind::figure3);
  const auto res = run_pipeline(cfg, base / "run");
  const auto rows = lines(slurp(res.run_dir / "figure3.csv"));
  REQUIRE_FALSE(rows.empty());
  CHECK(rows[0] == "dataset,layer,statistic_kind,n,q05,q25,q50,q75,q95,mean");
  // mlp: two linear layers; in-distribution plus three OOD sets; three kinds.
  CHECK(rows.size() == 1 + 4 * 2 * 3);
  std::map<std::string, int> kinds;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto c1 = rows[i].find(',');
    const auto c2 = rows[i].find(',', c1 + 1);
    const auto c3 = rows[i].find(',', c2 + 1);
    ++kinds[rows[i].substr(c2 + 1, c3 - c2 - 1)];
  }
  CHECK(kinds["grad"] == 8);
  CHECK(kinds["activ"] == 8);
  CHECK(kinds["loss"] == 8);
  fs::remove_all(base);
}

TEST_CASE("figure4 ladder writes one gap per rung") {
  const auto base = scratch("fig4");
  auto cfg = tiny(ExperimentKind::figure4);
  cfg.n_train = 600;
  const auto res = run_pipeline(cfg, base / "run");
  const auto gaps = lines(slurp(res.run_dir / "figure4_gap.csv"));
  REQUIRE(gaps.size() == 4);
  CHECK(gaps[0] == "rung,classes,median_in,median_ood,gap");
  CHECK(gaps[1].rfind("c2,2,", 0) == 0);
  CHECK(gaps[3].rfind("c10,10,", 0) == 0);
  // Per rung: in-distribution and the OOD pool, two layers, three kinds.
  CHECK(lines(slurp(res.run_dir / "figure4.csv")).size() == 1 + 3 * 2 * 2 * 3);
  for (const char* rung : {"c2", "c5", "c10"}) CHECK(fs::exists(res.run_dir / rung / "model.bin"));
  fs::remove_all(base);
}

TEST_CASE("detector ablation grid") {
  const auto base = scratch("ablate");
  auto cfg = tiny(ExperimentKind::ablation_detector);
  cfg.out_datasets = {"uniform_noise"};
  cfg.grid.epochs.clear();
  cfg.grid.lrs.clear();
  const auto res = run_pipeline(cfg, base / "run");
  const auto rows = lines(slurp(res.run_dir / "ablation_detector.csv"));
  CHECK(rows[0] == "axis,value,pairing,status,auroc,aupr,acc_fixed,acc_max");
  // Three depths and eight widths.
  CHECK(rows.size() == 1 + 11);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].find(",ok,") != std::string::npos);
  fs::remove_all(base);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(FormatError("x")) == 2);
  CHECK(exit_code_for(NumericError("x")) == 3);
  CHECK(exit_code_for(StateError("x")) == 1);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
