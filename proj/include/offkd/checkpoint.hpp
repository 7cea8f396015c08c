#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "offkd/encoder.hpp"

namespace offkd {

// Binary checkpoint layout (all integers little-endian):
//   "GKDM" | u32 version | u64 header length | UTF-8 JSON header | payloads
// The header holds the encoder config and an ordered tensor manifest
// (name, dtype, shape); payloads follow in manifest order.
inline constexpr char kCheckpointMagic[4] = {'G', 'K', 'D', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParameters<T>& params);

// Throws CheckpointMagicError, CheckpointVersionError or
// CheckpointManifestError (covers truncation and malformed headers).
// f32 payloads may be loaded as double; the reverse is refused.
template <typename T>
ModelParameters<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                          const std::string& source = "<memory>");

template <typename T>
void save_checkpoint(const ModelParameters<T>& params, const std::filesystem::path& path);

template <typename T>
ModelParameters<T> load_checkpoint(const std::filesystem::path& path);

// As above, but also throws ShapeMismatchError when any tensor shape differs
// from what `expected` implies.
template <typename T>
ModelParameters<T> load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

std::string config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const std::string& json);

}  // namespace offkd
