#pragma once

#include <filesystem>

#include "fimode/model.hpp"
#include "fimode/training.hpp"

// Checkpoint container: the 8-byte magic "FIMODECK", a little-endian u32
// format version, a little-endian u64 header length, a JSON header
// describing configs, counters and tensors (name, shape), then every tensor
// as row-major little-endian IEEE-754 doubles in header order.

namespace fimode {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes to a temporary sibling and renames it into place, so an
/// interrupted write never leaves a truncated checkpoint behind.
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);

/// Throws ParseError for malformed files or tensors that do not match the
/// stored model configuration.
TrainingState load_checkpoint(const std::filesystem::path& path);

/// As above, and throws std::invalid_argument when the stored model
/// configuration differs from `expected`.
TrainingState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

FimModel load_model(const std::filesystem::path& path);

} // namespace fimode
