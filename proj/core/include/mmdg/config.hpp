#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmdg/experiment.hpp"

namespace mmdg {

/// Every key accepted in a config file, as "section.key".
const std::vector<std::string>& config_keys();

/// Sets one field from its text form. Unknown keys and malformed values throw
/// ConfigError. Model input dims, class count and modality count follow the
/// data section.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);

/// INI-style text: a top-level `format_version = 1`, then [experiment], [data],
/// [model], [train], [flatness], [robustness] sections. Missing keys keep their
/// defaults; unknown keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Inverse of parse_config (every key written).
std::string serialize_config(const ExperimentConfig& config);

/// "D2" or "2" -> 1
std::size_t parse_domain(const std::string& text);

}  // namespace mmdg
