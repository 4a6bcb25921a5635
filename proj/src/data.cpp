#include "purview/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "purview/checkpoint.hpp"
#include "purview/rng.hpp"

namespace purview {

void Dataset::validate() const {
  if (images.rank() != 4) throw DimensionError("dataset images must be [n, c, h, w]");
  if (images.dim(0) != labels.size()) throw DimensionError("dataset has " + std::to_string(images.dim(0)) +
                                                           " images but " + std::to_string(labels.size()) + " labels");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_names.size())
      throw ConfigError("label " + std::to_string(l) + " outside [0, " + std::to_string(class_names.size()) + ")");
  }
  if (!normalization) {
    for (float v : images.data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw NumericError("pixel value outside [0, 1] in dataset " + name);
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ConfigError("cannot take an empty subset of " + name);
  const std::size_t per = sample_numel();
  std::vector<float> pixels;
  pixels.reserve(indices.size() * per);
  std::vector<int> lab;
  lab.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("subset index out of range");
    auto img = image(i);
    pixels.insert(pixels.end(), img.begin(), img.end());
    lab.push_back(labels[i]);
  }
  Dataset out = make_dataset(name, sample_shape(), std::move(pixels), std::move(lab), class_names);
  out.normalization = normalization;
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(idx);
}

Dataset make_dataset(std::string name, Shape sample_shape, std::vector<float> pixels, std::vector<int> labels,
                     std::vector<std::string> class_names) {
  if (sample_shape.size() != 3) throw DimensionError("sample shape must be {c, h, w}");
  Shape shape{labels.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Dataset ds{std::move(name), Tensor(std::move(shape), std::move(pixels)), std::move(labels), std::move(class_names), {}};
  return ds;
}

Dataset filter_classes(const Dataset& ds, std::span<const int> classes) {
  std::vector<std::size_t> keep;
  std::vector<int> remap(ds.classes(), -1);
  std::vector<std::string> names;
  for (std::size_t j = 0; j < classes.size(); ++j) {
    const int c = classes[j];
    if (c < 0 || static_cast<std::size_t>(c) >= ds.classes()) throw ConfigError("class " + std::to_string(c) + " not in dataset");
    remap[c] = static_cast<int>(j);
    names.push_back(ds.class_names[c]);
  }
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (remap[ds.labels[i]] >= 0) keep.push_back(i);
  Dataset out = ds.subset(keep);
  for (auto& l : out.labels) l = remap[l];
  out.class_names = std::move(names);
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b, std::string name) {
  if (a.sample_shape() != b.sample_shape()) throw DimensionError("cannot concatenate datasets of different image shapes");
  std::vector<float> pixels(a.images.data().begin(), a.images.data().end());
  pixels.insert(pixels.end(), b.images.data().begin(), b.images.data().end());
  std::vector<int> labels = a.labels;
  labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  auto names = a.class_names.size() >= b.class_names.size() ? a.class_names : b.class_names;
  return make_dataset(std::move(name), a.sample_shape(), std::move(pixels), std::move(labels), std::move(names));
}

// --- IDX ------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::string_view bytes, std::size_t at) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3]));
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xFF));
}

}  // namespace

IdxArray parse_idx(std::string_view bytes) {
  if (bytes.size() < 4) throw FormatError("IDX truncated at byte offset " + std::to_string(bytes.size()) + " (missing magic)");
  const std::uint32_t magic = read_be32(bytes, 0);
  const std::uint32_t type = (magic >> 8) & 0xFF;
  const std::uint32_t ndims = magic & 0xFF;
  if ((magic >> 16) != 0 || type != 0x08 || ndims == 0) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08X", magic);
    throw FormatError(std::string("bad IDX magic ") + buf + " at byte offset 0");
  }
  IdxArray out;
  std::size_t offset = 4;
  std::size_t count = 1;
  for (std::uint32_t d = 0; d < ndims; ++d) {
    if (offset + 4 > bytes.size()) throw FormatError("IDX truncated at byte offset " + std::to_string(bytes.size()) + " while reading dimensions");
    out.dims.push_back(read_be32(bytes, offset));
    count *= out.dims.back();
    offset += 4;
  }
  if (bytes.size() - offset < count) {
    throw FormatError("IDX payload truncated at byte offset " + std::to_string(bytes.size()) + ": expected " +
                      std::to_string(count) + " bytes after offset " + std::to_string(offset));
  }
  out.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(offset + count));
  return out;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(read_file(path)); }

std::string encode_idx(const IdxArray& array) {
  std::string out;
  put_be32(out, 0x00000800u | static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) put_be32(out, d);
  out.append(array.bytes.begin(), array.bytes.end());
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) { write_file(path, encode_idx(array)); }

std::vector<int> idx_labels(const IdxArray& array) {
  if (array.dims.size() != 1) throw FormatError("IDX label file must be 1-D (magic 0x00000801)");
  return {array.bytes.begin(), array.bytes.end()};
}

Tensor idx_images(const IdxArray& array) {
  if (array.dims.size() != 3) throw FormatError("IDX image file must be 3-D (magic 0x00000803)");
  std::vector<float> pixels(array.bytes.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(array.bytes[i]) / 255.0f;
  return Tensor({array.dims[0], 1, array.dims[1], array.dims[2]}, std::move(pixels));
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::string name) {
  Tensor img = idx_images(read_idx(images));
  std::vector<int> lab = idx_labels(read_idx(labels));
  if (img.dim(0) != lab.size()) throw FormatError("IDX image and label counts differ");
  const int top = lab.empty() ? 0 : *std::max_element(lab.begin(), lab.end());
  std::vector<std::string> names;
  for (int c = 0; c <= std::max(top, 9); ++c) names.push_back(std::to_string(c));
  Dataset ds{std::move(name), std::move(img), std::move(lab), std::move(names), {}};
  ds.validate();
  return ds;
}

// --- normalization ----------------------------------------------------------

Normalization channel_stats(const Dataset& ds) {
  const std::size_t c = ds.images.dim(1), inner = ds.images.dim(2) * ds.images.dim(3);
  Normalization stats{std::vector<float>(c), std::vector<float>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto img = ds.image(i).subspan(ch * inner, inner);
      for (float v : img) {
        sum += v;
        sq += static_cast<double>(v) * v;
      }
    }
    const double count = static_cast<double>(ds.size() * inner);
    const double mean = sum / count;
    stats.mean[ch] = static_cast<float>(mean);
    stats.std[ch] = static_cast<float>(std::sqrt(std::max(0.0, sq / count - mean * mean)));
  }
  return stats;
}

Dataset normalize(const Dataset& ds, const Normalization& stats) {
  const std::size_t c = ds.images.dim(1), inner = ds.images.dim(2) * ds.images.dim(3);
  if (stats.mean.size() != c || stats.std.size() != c) throw DimensionError("normalization needs one mean/std per channel");
  for (float s : stats.std)
    if (!(s > 0.0f)) throw ConfigError("normalization std must be positive");
  Dataset out = ds;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto img = out.image(i);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) {
        float& v = img[ch * inner + j];
        v = (v - stats.mean[ch]) / stats.std[ch];
      }
  }
  out.normalization = stats;
  return out;
}

// --- folds ------------------------------------------------------------------

FoldPlan make_folds(std::size_t n, std::size_t k, std::size_t r, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be at least 2");
  if (r < 1) throw ConfigError("repetition count must be at least 1");
  if (n < k) throw ConfigError("cannot split " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
  FoldPlan plan{n, k, r, seed, {}, {0}};
  for (std::size_t f = 0; f < k; ++f) plan.bounds.push_back(plan.bounds.back() + n / k + (f < n % k ? 1 : 0));
  for (std::size_t rep = 0; rep < r; ++rep) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, rep));
    rng.shuffle(std::span<std::size_t>(perm));
    plan.permutations.push_back(std::move(perm));
  }
  return plan;
}

std::vector<std::size_t> FoldPlan::test_indices(std::size_t rep, std::size_t fold) const {
  const auto& perm = permutations.at(rep);
  return {perm.begin() + static_cast<std::ptrdiff_t>(bounds.at(fold)),
          perm.begin() + static_cast<std::ptrdiff_t>(bounds.at(fold + 1))};
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t rep, std::size_t fold) const {
  const auto& perm = permutations.at(rep);
  std::vector<std::size_t> out(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(bounds.at(fold)));
  out.insert(out.end(), perm.begin() + static_cast<std::ptrdiff_t>(bounds.at(fold + 1)), perm.end());
  return out;
}

// --- persistence ------------------------------------------------------------

void save_dataset(const std::filesystem::path& path, const Dataset& ds, const nlohmann::json& extra) {
  nlohmann::json h;
  h["format"] = "purview.dataset";
  h["version"] = 1;
  h["name"] = ds.name;
  h["shape"] = ds.images.shape();
  h["labels"] = ds.labels;
  h["class_names"] = ds.class_names;
  if (ds.normalization) h["normalization"] = {{"mean", ds.normalization->mean}, {"std", ds.normalization->std}};
  if (!extra.is_null()) h["extra"] = extra;
  write_blob(path, h, ds.images.data());
}

Dataset load_dataset(const std::filesystem::path& path) {
  Blob blob = read_blob(path);
  const auto& h = blob.header;
  if (h.value("format", "") != "purview.dataset") throw FormatError(path.string() + " is not a dataset blob");
  try {
    Dataset ds{h.at("name").get<std::string>(), Tensor(h.at("shape").get<Shape>(), std::move(blob.payload)),
               h.at("labels").get<std::vector<int>>(), h.at("class_names").get<std::vector<std::string>>(), {}};
    if (h.contains("normalization")) {
      ds.normalization = Normalization{h["normalization"].at("mean").get<std::vector<float>>(),
                                       h["normalization"].at("std").get<std::vector<float>>()};
    }
    ds.validate();
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid dataset header: ") + e.what());
  }
}

}  // namespace purview
