#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmdg/experiment.hpp"

namespace mmdg {

/// summary.json: everything in a RunSummary except parameters and wall-clock
/// time, so identical runs produce identical bytes.
std::string summary_to_json(const RunSummary& summary);
RunSummary summary_from_json(const std::string& text);
RunSummary load_summary(const std::filesystem::path& path);

enum class PlotKind { flatness, robustness, modality_accuracy, training_curves };
std::string to_string(PlotKind kind);
PlotKind parse_plot_kind(const std::string& text);
std::vector<std::string> plot_columns(PlotKind kind);

/// Tidy CSV, one row per (method, x, seed) followed by rows with seed = "mean".
/// Throws ConfigError when the summaries use different protocols.
void emit_plot_data(const std::vector<RunSummary>& summaries, PlotKind kind, std::ostream& out);

}  // namespace mmdg
