#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "purview/network.hpp"

namespace purview {

/// JSON header followed by little-endian float32 payload.
///
/// Byte layout: 8-byte magic "PVBLOB01", uint64 LE header length, header
/// JSON text, then the payload floats.
struct Blob {
  nlohmann::json header;
  std::vector<float> payload;
};

std::string encode_blob(const nlohmann::json& header, std::span<const float> payload);
Blob decode_blob(std::string_view bytes);
void write_blob(const std::filesystem::path& path, const nlohmann::json& header, std::span<const float> payload);
Blob read_blob(const std::filesystem::path& path);

/// Header lists the architecture, the seed, and name/shape/byte offset per
/// ParamSet; the payload is every ParamSet in index order.
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t seed);

struct LoadedCheckpoint {
  Model model;
  std::uint64_t seed = 0;
};

/// Rejects unknown architecture kinds and any name/shape mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
nlohmann::json checkpoint_header(const Model& model, std::uint64_t seed);
Model model_from_blob(const Blob& blob);

/// Reads a whole file; throws FormatError when it cannot be opened.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace purview
