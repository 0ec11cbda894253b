#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "mmdg/model.hpp"

namespace mmdg {

inline constexpr int kCheckpointFormatVersion = 1;

/// Model dimensions plus a student section, a teacher section, or both.
/// See docs/checkpoint_format.md for the byte layout.
struct Checkpoint {
  ModelConfig config;
  std::optional<ModelParams> student;
  std::optional<FusedParams> teacher;
};

void write_checkpoint(const Checkpoint& checkpoint, std::ostream& out);
/// Throws ModelError on a malformed file, unknown names, or shape mismatches.
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmdg
