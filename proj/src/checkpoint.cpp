#include "purview/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace purview {
namespace {

constexpr std::string_view kMagic = "PVBLOB01";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string encode_blob(const nlohmann::json& header, std::span<const float> payload) {
  const std::string text = header.dump();
  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + payload.size() * 4);
  for (float f : payload) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  return out;
}

Blob decode_blob(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) throw FormatError("not a purview blob (bad magic at offset 0)");
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (16 + header_len > bytes.size()) throw FormatError("blob header truncated at offset 16");
  Blob blob;
  try {
    blob.header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("blob header is not valid JSON: ") + e.what());
  }
  const std::size_t start = 16 + header_len;
  const std::size_t rest = bytes.size() - start;
  if (rest % 4 != 0) throw FormatError("blob payload length " + std::to_string(rest) + " is not a multiple of 4");
  blob.payload.resize(rest / 4);
  for (std::size_t i = 0; i < blob.payload.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[start + 4 * i + b])) << (8 * b);
    blob.payload[i] = std::bit_cast<float>(bits);
  }
  return blob;
}

void write_blob(const std::filesystem::path& path, const nlohmann::json& header, std::span<const float> payload) {
  write_file(path, encode_blob(header, payload));
}

Blob read_blob(const std::filesystem::path& path) { return decode_blob(read_file(path)); }

nlohmann::json checkpoint_header(const Model& model, std::uint64_t seed) {
  nlohmann::json header;
  header["format"] = "purview.checkpoint";
  header["version"] = 1;
  header["arch"] = model.arch().to_json();
  header["seed"] = seed;
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}, {"index", p.index}});
    offset += p.tensor.numel() * 4;
  }
  header["params"] = params;
  return header;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t seed) {
  const auto flat = model.flat_values();
  write_blob(path, checkpoint_header(model, seed), flat);
}

Model model_from_blob(const Blob& blob) {
  const auto& h = blob.header;
  if (h.value("format", "") != "purview.checkpoint") throw FormatError("blob is not a checkpoint");
  ArchSpec arch = ArchSpec::from_json(h.at("arch"));
  Model model(arch, 0);
  const auto& records = h.at("params");
  if (records.size() != model.param_count()) {
    throw FormatError("checkpoint lists " + std::to_string(records.size()) + " parameter sets, architecture has " +
                      std::to_string(model.param_count()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& p = model.params()[i];
    const auto& r = records[i];
    const auto name = r.at("name").get<std::string>();
    const auto shape = r.at("shape").get<Shape>();
    if (name != p.name) throw FormatError("checkpoint parameter " + std::to_string(i) + " is '" + name + "', expected '" + p.name + "'");
    if (shape != p.tensor.shape()) {
      throw FormatError("shape mismatch for " + name + ": file " + shape_to_string(shape) + ", architecture " +
                        shape_to_string(p.tensor.shape()));
    }
    const auto offset = r.at("offset").get<std::size_t>();
    if (offset % 4 != 0 || offset / 4 + p.tensor.numel() > blob.payload.size())
      throw FormatError("checkpoint payload truncated for " + name);
    std::copy_n(blob.payload.begin() + static_cast<std::ptrdiff_t>(offset / 4), p.tensor.numel(), p.tensor.data().begin());
  }
  return model;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Blob blob = read_blob(path);
  LoadedCheckpoint out{model_from_blob(blob), blob.header.value("seed", std::uint64_t{0})};
  return out;
}

}  // namespace purview
