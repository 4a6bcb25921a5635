#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "purview/checkpoint.hpp"
#include "purview/data.hpp"
#include "purview/errors.hpp"
#include "purview/rng.hpp"

using namespace purview;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "purview_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string be32(std::uint32_t v) {
  std::string s;
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
  return s;
}

double mean_abs_diff(const Dataset& a, const Dataset& b) {
  double acc = 0.0;
  const auto x = a.images.data();
  const auto y = b.images.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

}  // namespace

TEST_CASE("idx label file") {
  const std::string bytes = be32(0x00000801) + be32(3) + std::string{7, 2, 1};
  const auto labels = idx_labels(parse_idx(bytes));
  CHECK(labels == std::vector<int>{7, 2, 1});
}

TEST_CASE("idx truncated image payload names the offset") {
  std::string bytes = be32(0x00000803) + be32(2) + be32(28) + be32(28) + std::string(28 * 28, '\x10');
  try {
    parse_idx(bytes);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
}

TEST_CASE("idx bad magic") {
  const std::string bytes = be32(0x00000D01) + be32(1) + std::string(1, 'x');
  CHECK_THROWS_AS(parse_idx(bytes), FormatError);
}

TEST_CASE("idx round trip on random bytes") {
  Rng rng(11);
  IdxArray a{{5, 7, 3}, {}};
  for (int i = 0; i < 5 * 7 * 3; ++i) a.bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
  const auto path = scratch("rt.idx");
  write_idx(path, a);
  const auto b = read_idx(path);
  CHECK(b.dims == a.dims);
  CHECK(b.bytes == a.bytes);
  const auto c = read_idx(path);
  CHECK(c.bytes == b.bytes);

  const Tensor img = idx_images(b);
  CHECK(img.shape() == Shape{5, 1, 7, 3});
  CHECK(img[4] == doctest::Approx(a.bytes[4] / 255.0));
}

TEST_CASE("normalize") {
  const auto ds = synth_glyphs(GlyphFamily::digits, 64, 3);

  SUBCASE("mean 0 std 1 is the identity") {
    const auto out = normalize(ds, {{0.0f}, {1.0f}});
    CHECK(std::equal(out.images.data().begin(), out.images.data().end(), ds.images.data().begin()));
    REQUIRE(out.normalization);
  }
  SUBCASE("constant image") {
    auto flat = make_dataset("flat", {1, 4, 4}, std::vector<float>(16, 0.5f), {0}, {"a"});
    const auto out = normalize(flat, {{0.5f}, {0.5f}});
    for (float v : out.images.data()) CHECK(v == 0.0f);
  }
  SUBCASE("own statistics centre the split") {
    const auto out = normalize(ds, channel_stats(ds));
    double sum = 0.0;
    for (float v : out.images.data()) sum += v;
    CHECK(std::abs(sum / static_cast<double>(out.images.numel())) < 1e-6);
  }
  SUBCASE("zero std") { CHECK_THROWS_AS(normalize(ds, {{0.0f}, {0.0f}}), ConfigError); }
}

TEST_CASE("folds") {
  SUBCASE("even split") {
    const auto plan = make_folds(10, 5, 1, 1);
    for (std::size_t f = 0; f < 5; ++f) CHECK(plan.fold_size(f) == 2);
  }
  SUBCASE("remainder goes to the first folds") {
    const auto plan = make_folds(11, 5, 1, 1);
    std::vector<std::size_t> sizes;
    for (std::size_t f = 0; f < 5; ++f) sizes.push_back(plan.fold_size(f));
    CHECK(sizes == std::vector<std::size_t>{3, 2, 2, 2, 2});
  }
  SUBCASE("partition per repetition") {
    const auto plan = make_folds(37, 5, 2, 9);
    for (std::size_t rep = 0; rep < 2; ++rep) {
      std::multiset<std::size_t> seen;
      for (std::size_t f = 0; f < 5; ++f) {
        const auto test = plan.test_indices(rep, f);
        const auto train = plan.train_indices(rep, f);
        CHECK(test.size() + train.size() == 37);
        std::set<std::size_t> both(test.begin(), test.end());
        both.insert(train.begin(), train.end());
        CHECK(both.size() == 37);
        seen.insert(test.begin(), test.end());
      }
      CHECK(seen.size() == 37);
      CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 37);
    }
  }
  SUBCASE("seeded") {
    CHECK(make_folds(50, 5, 2, 4).permutations == make_folds(50, 5, 2, 4).permutations);
    CHECK(make_folds(50, 5, 2, 4).permutations != make_folds(50, 5, 2, 5).permutations);
    const auto plan = make_folds(50, 5, 2, 4);
    CHECK(plan.permutations[0] != plan.permutations[1]);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(make_folds(4, 5, 1, 0), ConfigError);
    CHECK_THROWS_AS(make_folds(10, 1, 1, 0), ConfigError);
  }
}

TEST_CASE("glyphs are valid and seeded") {
  const auto a = synth_glyphs(GlyphFamily::digits, 50, 7);
  const auto b = synth_glyphs(GlyphFamily::digits, 50, 7);
  const auto s = synth_glyphs(GlyphFamily::shapes, 50, 7);
  a.validate();
  s.validate();
  CHECK(a.images.shape() == Shape{50, 1, 28, 28});
  CHECK(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
  CHECK(a.classes() == 10);
  CHECK(s.class_names[0] == "square");
}

TEST_CASE("synthetic ood") {
  const auto ref = synth_glyphs(GlyphFamily::digits, 40, 1);

  SUBCASE("uniform noise mean") {
    const auto u = synth_ood(OodKind::uniform_noise, ref, 1000, 5);
    double sum = 0.0;
    for (float v : u.images.data()) sum += v;
    CHECK(std::abs(sum / static_cast<double>(u.images.numel()) - 0.5) < 0.01);
    CHECK(u.sample_shape() == ref.sample_shape());
  }
  SUBCASE("shuffled pixels keep each histogram") {
    const auto sh = synth_ood(OodKind::shuffled_pixels, ref, 20, 8);
    for (std::size_t i = 0; i < sh.size(); ++i) {
      std::vector<float> got(sh.image(i).begin(), sh.image(i).end());
      std::sort(got.begin(), got.end());
      bool matched = false;
      for (std::size_t j = 0; j < ref.size() && !matched; ++j) {
        std::vector<float> src(ref.image(j).begin(), ref.image(j).end());
        std::sort(src.begin(), src.end());
        matched = src == got;
      }
      CHECK(matched);
    }
  }
  SUBCASE("different seeds give uncorrelated samples") {
    for (auto kind : {OodKind::uniform_noise, OodKind::gaussian_noise_images, OodKind::shuffled_pixels}) {
      const auto x = synth_ood(kind, ref, 30, 100);
      const auto y = synth_ood(kind, ref, 30, 101);
      double worst = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const auto p = x.image(i);
        const auto q = y.image(i);
        const double mp = std::accumulate(p.begin(), p.end(), 0.0) / p.size();
        const double mq = std::accumulate(q.begin(), q.end(), 0.0) / q.size();
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) {
          sxy += (p[j] - mp) * (q[j] - mq);
          sxx += (p[j] - mp) * (p[j] - mp);
          syy += (q[j] - mq) * (q[j] - mq);
        }
        worst = std::max(worst, std::abs(sxy / std::sqrt(sxx * syy)));
      }
      CAPTURE(to_string(kind));
      CHECK(worst < 0.2);
    }
  }
  SUBCASE("all in range") {
    for (auto kind : {OodKind::uniform_noise, OodKind::gaussian_noise_images, OodKind::shuffled_pixels})
      synth_ood(kind, ref, 10, 3).validate();
  }
  SUBCASE("n must be positive") { CHECK_THROWS_AS(synth_ood(OodKind::uniform_noise, ref, 0, 1), ConfigError); }
}

TEST_CASE("corruption table") {
  const auto table = CorruptionTable::defaults();
  const std::vector<double> sigma{0.02, 0.05, 0.10, 0.18, 0.30};
  for (int s = 1; s <= 5; ++s) {
    CHECK(table.parameter(CorruptionKind::gaussian_noise, s) == sigma[s - 1]);
    CHECK(table.parameter(CorruptionKind::darken, s) == doctest::Approx(1.0 - 0.15 * s));
  }
  CHECK_THROWS_AS(table.parameter(CorruptionKind::darken, 0), ConfigError);
  CHECK_THROWS_AS(table.parameter(CorruptionKind::darken, 6), ConfigError);
  CHECK_THROWS_AS(corruption_kind_from_string("jpeg"), ConfigError);

  const auto shipped = CorruptionTable::load(std::filesystem::path(PURVIEW_SOURCE_DIR) / "config/corruptions.json");
  CHECK(shipped.to_json() == table.to_json());

  auto bad = table.to_json();
  bad["kinds"]["gaussian_noise"] = {0.1, 0.05, 0.2, 0.3, 0.4};
  CHECK_THROWS_AS(CorruptionTable::from_json(bad), ConfigError);
}

TEST_CASE("corruptions") {
  const auto batch = synth_glyphs(GlyphFamily::digits, 100, 21);
  const auto table = CorruptionTable::defaults();

  SUBCASE("darken multiplies") {
    const auto d = corrupt(batch, {CorruptionKind::darken, 2}, table, 0);
    for (std::size_t i = 0; i < 500; ++i)
      CHECK(d.images[i] == doctest::Approx(batch.images[i] * 0.70).epsilon(1e-6));
  }
  SUBCASE("strictly stronger with severity, in range") {
    for (auto kind : all_corruption_kinds()) {
      CAPTURE(to_string(kind));
      double last = 0.0;
      for (int s = 1; s <= 5; ++s) {
        const auto out = corrupt(batch, {kind, s}, table, 77);
        out.validate();
        CHECK(out.images.all_finite());
        const double d = mean_abs_diff(batch, out);
        CHECK(d > last);
        last = d;
      }
    }
  }
  SUBCASE("seeded") {
    const auto a = corrupt(batch, {CorruptionKind::speckle_noise, 3}, table, 5);
    const auto b = corrupt(batch, {CorruptionKind::speckle_noise, 3}, table, 5);
    const auto c = corrupt(batch, {CorruptionKind::speckle_noise, 3}, table, 6);
    CHECK(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
    CHECK(!std::equal(a.images.data().begin(), a.images.data().end(), c.images.data().begin()));
  }
}

TEST_CASE("dataset blob round trip") {
  auto ds = normalize(synth_glyphs(GlyphFamily::shapes, 12, 2), {{0.1f}, {0.3f}});
  const auto path = scratch("ds.blob");
  save_dataset(path, ds);
  const auto back = load_dataset(path);
  CHECK(back.name == ds.name);
  CHECK(back.labels == ds.labels);
  CHECK(back.class_names == ds.class_names);
  REQUIRE(back.normalization);
  CHECK(back.normalization->std == ds.normalization->std);
  CHECK(std::equal(back.images.data().begin(), back.images.data().end(), ds.images.data().begin()));
}

TEST_CASE("filter and subset") {
  const auto ds = synth_glyphs(GlyphFamily::digits, 200, 4);
  const std::vector<int> keep{3, 8};
  const auto f = filter_classes(ds, keep);
  CHECK(f.classes() == 2);
  CHECK(f.class_names == std::vector<std::string>{"3", "8"});
  for (int l : f.labels) CHECK((l == 0 || l == 1));
  const std::size_t expected =
      static_cast<std::size_t>(std::count(ds.labels.begin(), ds.labels.end(), 3) + std::count(ds.labels.begin(), ds.labels.end(), 8));
  CHECK(f.size() == expected);
}
