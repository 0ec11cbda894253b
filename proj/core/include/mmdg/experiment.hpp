#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmdg/flatness.hpp"
#include "mmdg/mbcd.hpp"
#include "mmdg/model.hpp"
#include "mmdg/synthdata.hpp"

namespace mmdg {

inline constexpr int kFormatVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { mbcd, erm, ema_only };
std::string to_string(Method m);
Method parse_method(const std::string& text);

struct FlatnessSettings {
  bool enabled = false;
  std::vector<double> radii = default_radii();
  std::size_t n_directions = 32;
  /// Evaluation set the loss is measured on: "test" (first target) or "val".
  std::string split = "test";
};

/// Test-time Gaussian noise on one modality of the primary evaluation set,
/// applied to the selected checkpoint.
struct RobustnessSettings {
  std::size_t modality = 0;
  std::vector<double> variances;
};

struct ExperimentConfig {
  std::string name = "run";
  DataGenConfig data;
  ModelConfig model;
  MbcdConfig train;
  Method method = Method::mbcd;
  Protocol protocol = Protocol::multi_source;
  /// Target for multi_source, source for single_source, the domain for in_domain (0-based).
  std::size_t domain = 0;
  std::vector<std::uint64_t> seeds{0};
  FlatnessSettings flatness;
  RobustnessSettings robustness;
  std::string output_dir = "runs";

  /// Desk-scale defaults: 3 modalities, 4 classes, 3 domains, 600/150/750 rows.
  static ExperimentConfig defaults();
  void validate() const;
};

/// Per-seed streams. Each is derive_seed(seed, stream), so runs for one seed do
/// not depend on which other seeds are configured.
enum class SeedStream : std::uint64_t { data = 1, init = 2, trainer = 3, batches = 4, flatness = 5, perturb = 6 };
std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream);

/// One row of metrics.csv. Optional fields are written as empty cells.
struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string split;
  double loss_total = 0.0;
  double loss_mm = 0.0;
  std::vector<double> loss_uni;
  std::optional<double> loss_dis;
  double acc_mm = 0.0;
  std::vector<double> acc_uni;
  std::vector<double> s, r, p, dropped;  // empty on evaluation rows
};

std::vector<std::string> metrics_columns(std::size_t modalities);
void write_metrics_csv(const std::vector<MetricsRow>& rows, std::size_t modalities,
                       std::ostream& out);

struct TestMetrics {
  std::string name;
  std::size_t domain_id = 0;
  double acc_mm = 0.0;
  double loss_mm = 0.0;
  std::vector<double> acc_uni;
};

/// Accuracy of the selected checkpoint with noise added to one test modality.
/// Uni-modal accuracies come from the student (the teacher has no uni heads).
struct RobustnessPoint {
  double variance = 0.0;
  double acc_mm = 0.0;
  std::vector<double> acc_uni;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  std::size_t selected_epoch = 0;
  double selected_val_acc = 0.0;
  std::vector<TestMetrics> tests;          // eval model at the selected epoch
  std::vector<TestMetrics> tests_student;  // filled when eval_model = both
  std::optional<FlatnessCurve> flatness;
  std::vector<RobustnessPoint> robustness;
  ModelParams selected_student;
  FusedParams selected_teacher;
};

struct AggregateStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for one seed
};
AggregateStat aggregate(const std::vector<double>& values);

struct RunSummary {
  int format_version = kFormatVersion;
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  double wall_clock_seconds = 0.0;

  std::string method_label() const;
  /// Selected-epoch accuracy on the primary evaluation set, one per seed.
  std::vector<double> test_accuracies() const;
};

/// The dataset of one seed, split by the configured protocol; leakage-checked.
ProtocolSplits seed_splits(const ExperimentConfig& config, std::uint64_t seed);

/// Generates data, trains, selects the best-validation epoch, evaluates, and
/// optionally probes flatness and robustness for one seed.
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed);

/// All seeds of a config. Writes outputs under `out_dir` when given.
RunSummary run_experiment(const ExperimentConfig& config,
                          const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// One run per value of `axis` (a config key, e.g. "train.ema_beta").
/// "robustness.variance" trains once and returns a single run whose
/// robustness points hold one entry per value.
std::vector<RunSummary> run_sweep(const ExperimentConfig& base, const std::string& axis,
                                  const std::vector<std::string>& values,
                                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Combined sweep table: axis,value,method,seed,acc_mm,acc_uni_1..M plus
/// aggregate rows (seed = "mean"/"std"). For "robustness.variance" the values
/// come from the robustness points of the single run.
void write_sweep_csv(const std::string& axis, const std::vector<std::string>& values,
                     const std::vector<RunSummary>& runs, std::ostream& out);

/// metrics.csv per seed, summary.json, aggregate.csv, checkpoints, flatness.csv.
void write_run_outputs(const RunSummary& summary, const std::filesystem::path& dir);

}  // namespace mmdg
