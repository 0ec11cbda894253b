#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator settings. Per-modality lists have one entry per modality.
///
/// Sample model for domain d, modality k:
///   y ~ Uniform{0..C-1},  z = centroid_y + N(0, I_latent)
///   x_k = snr_k * R_{d,k} (A_k z) + shift_{d,k} + N(0, noise_std_k^2)
/// A_k is a fixed random projection shared by all domains. R_{d,k} is an
/// orthogonal rotation whose distance from the identity grows with
/// domain_shift_k, and shift_{d,k} is a mean offset of norm
/// domain_shift_k * mean_shift_scale * sqrt(input_dim_k).
struct DataGenConfig {
  std::size_t modalities = 3;
  std::size_t num_domains = 3;
  std::size_t num_classes = 4;
  std::size_t latent_dim = 8;
  std::size_t train_per_domain = 600;
  std::size_t val_per_domain = 150;
  std::size_t test_per_domain = 750;
  std::vector<std::size_t> input_dims{16, 16, 16};
  std::vector<double> snr{1.0, 1.0, 1.0};
  std::vector<double> noise_std{1.0, 1.0, 1.0};
  std::vector<double> domain_shift{0.0, 0.0, 0.0};
  double mean_shift_scale = 0.5;
  /// Distance of class centroids from the origin; pairwise distance is scale * sqrt(2).
  double centroid_scale = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DomainSpec {
  std::size_t domain_id = 0;
  std::vector<Tensor> mean_shift;  // [input_dim_k] per modality
  std::vector<Tensor> mixing;      // [input_dim_k, input_dim_k], orthogonal
  std::vector<double> noise_std;
};

/// Rows aligned across modalities.
struct SplitData {
  std::vector<Tensor> modalities;  // [rows, input_dim_k]
  std::vector<int> labels;
  std::size_t rows() const { return labels.size(); }
};

enum class SplitKind { train, val, test };
std::string to_string(SplitKind kind);

struct DomainData {
  DomainSpec spec;
  SplitData train;
  SplitData val;
  SplitData test;

  const SplitData& split(SplitKind kind) const;
};

struct MultiModalDataset {
  DataGenConfig config;
  std::vector<DomainData> domains;
};

/// Orthogonal factor of I + strength * G / sqrt(dim) (Gram-Schmidt), G standard
/// Gaussian. strength 0 gives the identity.
Tensor random_rotation(std::size_t dim, double strength, std::uint64_t seed);
Tensor class_centroids(std::size_t num_classes, std::size_t latent_dim, double scale);
std::vector<DomainSpec> make_domain_specs(const DataGenConfig& config);

/// Deterministic in config (including config.seed).
MultiModalDataset generate(const DataGenConfig& config);

/// Copy with x_k += N(0, variance) elementwise; other modalities untouched.
MultiModalDataset perturb_modality(const MultiModalDataset& dataset, std::size_t k,
                                   double variance, std::uint64_t seed);
SplitData perturb_modality(const SplitData& split, std::size_t k, double variance,
                           std::uint64_t seed);

SplitData concat_splits(const std::vector<const SplitData*>& parts);
/// All splits of one domain (train, val, test) as one evaluation set.
SplitData full_domain(const DomainData& domain);
SplitData take_rows(const SplitData& split, std::span<const std::size_t> rows);

enum class Protocol { multi_source, single_source, in_domain };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& text);

struct EvalSet {
  std::size_t domain_id = 0;
  std::string name;  // "test" or "test_D<j>"
  SplitData data;
};

/// Train and model-selection data plus one or more evaluation sets.
struct ProtocolSplits {
  Protocol protocol = Protocol::multi_source;
  std::vector<std::size_t> train_domains;
  SplitData train;
  SplitData val;
  std::vector<EvalSet> tests;
};

/// Leave-one-domain-out: train/val from every other domain, test on all rows
/// (train+val+test) of the target.
ProtocolSplits protocol_splits(const MultiModalDataset& dataset, std::size_t target_domain);
/// Train/val on one source domain; each remaining domain is a separate target.
ProtocolSplits single_source_splits(const MultiModalDataset& dataset, std::size_t source_domain);
/// Train/val/test all drawn from one domain.
ProtocolSplits in_domain_splits(const MultiModalDataset& dataset, std::size_t domain);
ProtocolSplits make_splits(const MultiModalDataset& dataset, Protocol protocol, std::size_t domain);

/// FNV-1a over the bytes of every modality value in a row.
std::uint64_t row_hash(const SplitData& split, std::size_t row);
/// Checksum of one modality's values across the whole dataset.
std::uint64_t modality_checksum(const MultiModalDataset& dataset, std::size_t k);
/// Throws DataError if any evaluation row also appears in train or val.
void assert_no_leakage(const ProtocolSplits& splits);

/// Softmax regression on one modality (full batch, fixed schedule); returns the
/// accuracy on `test`. Used to validate generated data.
double linear_probe_accuracy(const SplitData& train, const SplitData& test, std::size_t k,
                             std::size_t num_classes, std::size_t epochs = 300);

/// Directory layout: manifest.txt plus D<j>_<split>_m<k>.csv and
/// D<j>_<split>_labels.csv, one CSV row per sample in canonical order.
void export_dataset(const MultiModalDataset& dataset, const std::filesystem::path& dir);
MultiModalDataset import_dataset(const std::filesystem::path& dir);

/// key=value lines; also used inside experiment config echoes.
std::string serialize_datagen(const DataGenConfig& config);

}  // namespace mmdg
