#pragma once

#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "scoregrade/model.hpp"

namespace scoregrade {

// Checkpoint layout:
//   "SGCK" | u32 header_len (LE) | JSON header | raw little-endian float32 blob
// The header records format_version, the GptConfig, head specs and a
// directory name -> {shape, offset} with offsets in bytes from blob start.
inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const GptConfig& config);
GptConfig config_from_json(const nlohmann::json& j);

template <typename T>
void save_checkpoint(const GptModel<T>& model, const std::filesystem::path& path);

/// Throws ParseError for malformed files and CheckpointError for version,
/// parameter, shape or encoder mismatches.
template <typename T>
GptModel<T> load_checkpoint(const std::filesystem::path& path,
                            std::optional<EncoderKind> expected_encoder = std::nullopt);

}  // namespace scoregrade
