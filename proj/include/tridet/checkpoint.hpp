#pragma once

#include <filesystem>
#include <string>

#include "tridet/detector.hpp"

namespace tridet {

/// A checkpoint is a directory holding `manifest.json` (layer names, shapes,
/// class count, seed, architecture) and `params.bin` (little-endian float64
/// buffers in manifest order).
void save_checkpoint(const DetectorModel& model, const std::filesystem::path& dir);
DetectorModel load_checkpoint(const std::filesystem::path& dir);

/// Hex SHA-256 over the serialised manifest and parameter bytes.
std::string model_hash(const DetectorModel& model);
std::string checkpoint_hash(const std::filesystem::path& dir);

std::string sha256_hex(std::string_view bytes);

}  // namespace tridet
