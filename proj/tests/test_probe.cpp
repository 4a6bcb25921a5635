#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "purview/checkpoint.hpp"
#include "purview/classifier.hpp"
#include "purview/errors.hpp"
#include "purview/probe.hpp"

using namespace purview;

namespace {

std::vector<int> positives(const ConfoundingLabel& l) {
  std::vector<int> out;
  for (std::size_t i = 0; i < l.bits().size(); ++i)
    if (l.bits()[i] == 1.0f) out.push_back(static_cast<int>(i));
  return out;
}

Tensor image_of(const Dataset& ds, std::size_t i) { return make_batch(ds.sample_shape(), ds.images.data(), i, 1); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))];
}

}  // namespace

TEST_CASE("label designs") {
  SUBCASE("all hot") {
    const auto l = make_label({}, 10);
    CHECK(l.bits() == std::vector<float>(10, 1.0f));
    CHECK(l.describe() == "all_hot");
    CHECK(l.provenance() == Provenance::nr);
  }
  SUBCASE("top k") {
    const std::vector<float> logits{0.3f, 2.1f, -0.5f, 1.7f};
    auto r = LabelRequest::top_k_of(2);
    CHECK(positives(make_label(r, 4, logits)) == std::vector<int>{1, 3});
    r.k = 1;
    CHECK_THROWS_AS(make_label(r, 4, logits), LabelError);
    r.k = 5;
    CHECK_THROWS_AS(make_label(r, 4, logits), LabelError);
    r.k = 2;
    CHECK_THROWS_AS(make_label(r, 4), LabelError);
    const std::vector<float> tied{1.0f, 1.0f, 1.0f, 0.0f};
    CHECK(positives(make_label(r, 4, tied)) == std::vector<int>{0, 1});
  }
  SUBCASE("animal subset of ten classes") {
    // bird, cat, deer, dog, frog, horse in the usual ten-class order
    const auto r = LabelRequest::of(LabelDesign::class_subset, {2, 3, 4, 5, 6, 7});
    const auto l = make_label(r, 10);
    CHECK(l.positives() == 6);
    CHECK(l.describe() == "class_subset(2;3;4;5;6;7)");
  }
  SUBCASE("singletons are refused") {
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::class_subset, {4}), 10), LabelError);
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::fr_target, {4}), 10), LabelError);
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::fr_subset, {4}), 10), LabelError);
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::class_subset, {4}, true), 10), LabelError);
  }
  SUBCASE("FR override") {
    const auto l = make_label(LabelRequest::of(LabelDesign::fr_target, {4}, true), 10);
    CHECK(l.positives() == 1);
    CHECK(l.provenance() == Provenance::fr);
    CHECK(l.describe() == "fr_target(4)");
  }
  SUBCASE("empty") {
    const auto l = make_label(LabelRequest::of(LabelDesign::empty), 10);
    CHECK(l.positives() == 0);
  }
  SUBCASE("taxonomy follows the predicted class") {
    auto r = LabelRequest::taxonomy_of({{0, 2, 4, 6, 8}, {1, 3, 5, 7, 9}});
    std::vector<float> logits(10, 0.0f);
    logits[3] = 4.0f;
    CHECK(positives(make_label(r, 10, logits)) == std::vector<int>{1, 3, 5, 7, 9});
    r.groups = {{0, 2, 4, 6, 8}, {3}, {1, 5, 7, 9}};
    CHECK_THROWS_AS(make_label(r, 10, logits), LabelError);
    r.groups = {{0, 2}, {1, 2}};
    CHECK_THROWS_AS(make_label(r, 10, logits), LabelError);
  }
  SUBCASE("bad indices") {
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::class_subset, {1, 10}), 10), LabelError);
    CHECK_THROWS_AS(make_label(LabelRequest::of(LabelDesign::class_subset, {1, 1}), 10), LabelError);
  }
  SUBCASE("json round trip") {
    const auto r = LabelRequest::of(LabelDesign::fr_subset, {1, 4});
    const auto back = LabelRequest::from_json(r.to_json());
    CHECK(back.design == r.design);
    CHECK(back.indices == r.indices);
  }
}

TEST_CASE("no reachable label has exactly one positive without the FR override") {
  Rng rng(2024);
  const std::vector<LabelDesign> designs{LabelDesign::all_hot,  LabelDesign::top_k,     LabelDesign::class_subset,
                                         LabelDesign::taxonomy, LabelDesign::empty,     LabelDesign::fr_target,
                                         LabelDesign::fr_subset};
  std::size_t built = 0, refused = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t n = 2 + rng.below(11);
    LabelRequest r;
    r.design = designs[rng.below(designs.size())];
    r.k = rng.below(n + 2);
    for (std::size_t i = 0, m = rng.below(4); i < m; ++i) r.indices.push_back(static_cast<int>(rng.below(n)));
    for (std::size_t g = 0, m = rng.below(4); g < m; ++g) {
      std::vector<int> grp;
      for (std::size_t i = 0, s = rng.below(4); i < s; ++i) grp.push_back(static_cast<int>(rng.below(n)));
      r.groups.push_back(grp);
    }
    std::vector<float> logits(n);
    for (auto& z : logits) z = static_cast<float>(rng.normal());
    try {
      const auto l = make_label(r, n, logits);
      ++built;
      CHECK(l.classes() == n);
      if (l.positives() == 1) CHECK(l.provenance() == Provenance::fr);
    } catch (const LabelError&) {
      ++refused;
    }
  }
  CHECK(built > 1000);
  CHECK(refused > 1000);
}

TEST_CASE("probe a small network") {
  Model net(ArchSpec::small_cnn({1, 12, 12}, 4, {3, 5}), 31);
  const auto ds = synth_glyphs(GlyphFamily::digits, 9, 6, 12);
  const auto label = make_label({}, 4);

  SUBCASE("record layout and purity") {
    const auto before = net.flat_values();
    const auto a = probe_sample(net, image_of(ds, 0), label, Objective::bce, 7);
    const auto b = probe_sample(net, image_of(ds, 0), label, Objective::bce, 7);
    const auto after = net.flat_values();
    CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0);
    CHECK(a.sample_id == 7);
    CHECK(a.grad_norms.size() == net.param_count());
    CHECK(a.activ_norms.size() == net.activation_count());
    CHECK(a.grad_norms == b.grad_norms);
    CHECK(a.activ_norms == b.activ_norms);
    CHECK(a.loss == b.loss);
    for (double g : a.grad_norms) CHECK((std::isfinite(g) && g >= 0.0));
    for (const auto& p : net.params()) CHECK_FALSE(p.tensor.has_grad());
  }

  SUBCASE("norms match a gradient dump") {
    const Tensor x = image_of(ds, 3);
    const auto rec = probe_sample(net, x, label);
    Graph<float> g;
    const auto out = net.forward(g, g.input(x));
    const auto loss = ops::bce_with_logits<float>(g, out.logits, label.bits());
    g.backward(loss);
    for (std::size_t i = 0; i < net.param_count(); ++i) {
      const auto grad = net.params()[i].tensor.grad();
      std::vector<long double> dump(grad.begin(), grad.end());
      const long double want = std::inner_product(dump.begin(), dump.end(), dump.begin(), 0.0L);
      CAPTURE(net.params()[i].name);
      CHECK(std::abs(rec.grad_norms[i] - static_cast<double>(want)) <= 1e-6 * static_cast<double>(want) + 1e-300);
    }
    net.drop_grad();
  }

  SUBCASE("bias gradient of the output layer") {
    const auto rec = probe_sample(net, image_of(ds, 2), label);
    double want = 0.0;
    for (float z : rec.logits) {
      const double d = (1.0 / (1.0 + std::exp(-static_cast<double>(z))) - 1.0) / 4.0;
      want += d * d;
    }
    CHECK(rec.grad_norms.back() == doctest::Approx(want).epsilon(1e-5));
    CHECK(rec.loss == doctest::Approx([&] {
            double s = 0.0;
            for (float z : rec.logits) s += std::log1p(std::exp(-static_cast<double>(z)));
            return s / 4.0;
          }()).epsilon(1e-5));

    const auto ml = probe_sample(net, image_of(ds, 2), label, Objective::max_logit);
    CHECK(ml.grad_norms.back() == doctest::Approx(1.0));
    CHECK(ml.loss == doctest::Approx(*std::max_element(ml.logits.begin(), ml.logits.end())));
  }

  SUBCASE("saturated logits give vanishing gradients") {
    auto& fc_w = net.param("fc.weight").tensor;
    auto& fc_b = net.param("fc.bias").tensor;
    std::fill(fc_w.data().begin(), fc_w.data().end(), 0.0f);
    std::fill(fc_b.data().begin(), fc_b.data().end(), 40.0f);
    const auto rec = probe_sample(net, image_of(ds, 1), label);
    for (double g : rec.grad_norms) CHECK(g < 1e-30);
  }

  SUBCASE("logit-dependent labels resolve per sample") {
    const auto r = LabelRequest::top_k_of(2);
    const auto rec = probe_sample(net, image_of(ds, 4), r);
    const auto fixed = make_label(r, 4, rec.logits);
    CHECK(rec.label_design == "top_k(2)");
    CHECK(probe_sample(net, image_of(ds, 4), fixed).grad_norms == rec.grad_norms);
  }

  SUBCASE("shape errors") {
    CHECK_THROWS_AS(probe_sample(net, Tensor({1, 10, 10}), label), DimensionError);
    CHECK_THROWS_AS(probe_sample(net, image_of(ds, 0), make_label({}, 5)), LabelError);
  }
}

TEST_CASE("probe_batch") {
  Model net(ArchSpec::small_resnet({1, 12, 12}, 5, 3, 2), 8);
  const auto ds = synth_glyphs(GlyphFamily::shapes, 12, 3, 12);
  const auto all = probe_batch(net, ds, {});
  REQUIRE(all.records.size() == 12);
  CHECK(all.failures.empty());
  for (const auto& r : all.records) CHECK(r.grad_norms.size() == net.param_count());
  CHECK(all.param_names == net.param_names());

  std::vector<std::size_t> first(7), second(5);
  std::iota(first.begin(), first.end(), std::size_t{0});
  std::iota(second.begin(), second.end(), std::size_t{7});
  const auto a = probe_batch(net, ds.subset(first), {}, Objective::bce, 0);
  const auto b = probe_batch(net, ds.subset(second), {}, Objective::bce, 7);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto& r = i < 7 ? a.records[i] : b.records[i - 7];
    CHECK(r.sample_id == all.records[i].sample_id);
    CHECK(r.grad_norms == all.records[i].grad_norms);
    CHECK(r.activ_norms == all.records[i].activ_norms);
  }

  SUBCASE("a failing sample is reported and the rest continue") {
    Dataset bad = ds;
    auto img = bad.image(5);
    img[17] = std::nanf("");
    const auto m = probe_batch(net, bad, {});
    CHECK(m.records.size() == 11);
    REQUIRE(m.failures.size() == 1);
    CHECK(m.failures[0].sample_id == 5);
    CHECK(m.failures[0].message.find("sample 5") != std::string::npos);
  }
  SUBCASE("an invalid design fails up front") {
    CHECK_THROWS_AS(probe_batch(net, ds, LabelRequest::of(LabelDesign::class_subset, {1})), LabelError);
  }
}

TEST_CASE("max softmax baseline") {
  CHECK(baseline_msp(std::vector<float>(10, 0.3f)) == doctest::Approx(0.1).epsilon(1e-12));
  std::vector<float> dominant(10, 0.0f);
  dominant[4] = 60.0f;
  CHECK(baseline_msp(dominant) > 1.0 - 1e-12);

  Model net(ArchSpec::small_cnn({1, 12, 12}, 6, {3, 4}), 2);
  const auto ds = synth_glyphs(GlyphFamily::digits, 20, 1, 12);
  const auto scores = baseline_msp(net, ds.images);
  const auto pred = predict(net, ds.images);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    long double top = -1e300L, denom = 0.0L;
    for (std::size_t c = 0; c < 6; ++c) top = std::max<long double>(top, pred.logits[i * 6 + c]);
    for (std::size_t c = 0; c < 6; ++c) denom += std::exp(static_cast<long double>(pred.logits[i * 6 + c]) - top);
    CHECK(std::abs(scores[i] - static_cast<double>(1.0L / denom)) < 1e-9);
    CHECK((scores[i] > 0.0 && scores[i] <= 1.0));
  }
}

TEST_CASE("feature files") {
  Model net(ArchSpec::small_cnn({1, 12, 12}, 4, {3, 5}), 31);
  const auto ds = synth_glyphs(GlyphFamily::digits, 6, 6, 12);
  const auto m = probe_batch(net, ds, LabelRequest::of(LabelDesign::class_subset, {0, 2}), Objective::bce, 100);
  const auto dir = std::filesystem::temp_directory_path() / "purview_test_probe";
  write_features(dir / "f.csv", m, {{"checkpoint", "x"}});
  const auto text = read_file(dir / "f.csv");
  CHECK(text.rfind("sample_id,label_design,objective,loss,g0,g1,g2,g3,g4,g5,a0,a1,a2\n", 0) == 0);
  CHECK(text.find("\n100,class_subset(0;2),bce,") != std::string::npos);
  const auto side = nlohmann::json::parse(read_file(dir / "f.csv.json"));
  CHECK(side["columns"]["g0"] == "conv1.weight");
  CHECK(side["columns"]["a2"] == "fc");

  const auto back = read_features(dir / "f.csv");
  REQUIRE(back.records.size() == m.records.size());
  CHECK(back.param_names == m.param_names);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    CHECK(back.records[i].grad_norms == m.records[i].grad_norms);
    CHECK(back.records[i].activ_norms == m.records[i].activ_norms);
    CHECK(back.records[i].loss == m.records[i].loss);
    CHECK(back.records[i].sample_id == m.records[i].sample_id);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1e-300) == "1e-300");
}

// All-hot gradient norms are expected to be larger for OOD inputs than for
// in-distribution inputs at every layer. On the glyph-digit small CNN the
// uniform-noise gradients come out smaller at every layer, so this check
// is expected to fail; it prints the measured medians and overlaps.
TEST_CASE("uniform noise gradient direction at desk scale" * doctest::should_fail()) {
  const auto train = synth_glyphs(GlyphFamily::digits, 3000, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 3;
  auto net = train_classifier(train, ArchSpec::small_cnn({1, 28, 28}, 10), cfg).model;
  const auto in = probe_batch(net, synth_glyphs(GlyphFamily::digits, 300, 2), {});
  const auto ood = probe_batch(net, synth_ood(OodKind::uniform_noise, train, 300, 5), {});

  std::size_t larger = 0;
  double grad_overlap = 0.0;
  for (std::size_t l = 0; l < net.param_count(); ++l) {
    std::vector<double> a, b;
    for (const auto& r : in.records) a.push_back(r.grad_norms[l]);
    for (const auto& r : ood.records) b.push_back(r.grad_norms[l]);
    larger += median(b) > median(a);
    const double p95 = quantile(a, 0.95);
    grad_overlap += static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v < p95; })) /
                    static_cast<double>(b.size());
    MESSAGE(net.param_names()[l] << ": median in " << median(a) << ", ood " << median(b));
  }
  grad_overlap /= static_cast<double>(net.param_count());
  double activ_overlap = 0.0;
  for (std::size_t l = 0; l < net.activation_count(); ++l) {
    std::vector<double> a, b;
    for (const auto& r : in.records) a.push_back(r.activ_norms[l]);
    for (const auto& r : ood.records) b.push_back(r.activ_norms[l]);
    const double p95 = quantile(a, 0.95);
    activ_overlap += static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v < p95; })) /
                     static_cast<double>(b.size());
  }
  activ_overlap /= static_cast<double>(net.activation_count());
  MESSAGE("layers with larger OOD median: " << larger << " of " << net.param_count());
  MESSAGE("overlap below in-distribution p95: gradients " << grad_overlap << ", activations " << activ_overlap);
  CHECK(static_cast<double>(larger) >= 0.75 * static_cast<double>(net.param_count()));
  CHECK(grad_overlap < activ_overlap);
}
