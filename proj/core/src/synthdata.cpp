#include "mmdg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "mmdg/optim.hpp"
#include "mmdg/rng.hpp"
#include "mmdg/tape.hpp"

namespace mmdg {

namespace {

constexpr std::uint64_t kProjectionStream = 0;
constexpr std::uint64_t kDomainSpecStream = 100;
constexpr std::uint64_t kDomainSampleStream = 200;

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.values()) v = rng.normal();
  return t;
}

SplitData sample_split(const DataGenConfig& config, const DomainSpec& spec,
                       const std::vector<Tensor>& projections, const Tensor& centroids,
                       std::size_t rows, Rng& rng) {
  SplitData split;
  split.labels.resize(rows);
  std::vector<std::vector<double>> values(config.modalities);
  std::vector<double> z(config.latent_dim);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t y = rng.index(config.num_classes);
    split.labels[i] = static_cast<int>(y);
    for (std::size_t l = 0; l < config.latent_dim; ++l) z[l] = centroids.at(y, l) + rng.normal();
    for (std::size_t k = 0; k < config.modalities; ++k) {
      const std::size_t dim = config.input_dims[k];
      const Tensor& a = projections[k];    // [dim, latent]
      const Tensor& r = spec.mixing[k];    // [dim, dim]
      std::vector<double> view(dim, 0.0);  // A_k z
      for (std::size_t j = 0; j < dim; ++j) {
        for (std::size_t l = 0; l < config.latent_dim; ++l) view[j] += a.at(j, l) * z[l];
      }
      for (std::size_t j = 0; j < dim; ++j) {
        double rotated = 0.0;
        for (std::size_t m = 0; m < dim; ++m) rotated += r.at(j, m) * view[m];
        values[k].push_back(config.snr[k] * rotated + spec.mean_shift[k][j] +
                            spec.noise_std[k] * rng.normal());
      }
    }
  }
  for (std::size_t k = 0; k < config.modalities; ++k) {
    split.modalities.emplace_back(Shape{rows, config.input_dims[k]}, std::move(values[k]));
  }
  return split;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

}  // namespace

void DataGenConfig::validate() const {
  if (modalities < 1) throw DataError("datagen: at least one modality required");
  if (num_domains < 1) throw DataError("datagen: at least one domain required");
  if (num_classes < 2) throw DataError("datagen: at least two classes required");
  if (latent_dim + 1 < num_classes) {
    throw DataError("datagen: latent_dim " + std::to_string(latent_dim) +
                    " cannot hold a simplex of " + std::to_string(num_classes) +
                    " class centroids (needs >= " + std::to_string(num_classes - 1) + ")");
  }
  if (train_per_domain == 0 || val_per_domain == 0 || test_per_domain == 0) {
    throw DataError("datagen: per-domain split sizes must be positive");
  }
  if (input_dims.size() != modalities || snr.size() != modalities ||
      noise_std.size() != modalities || domain_shift.size() != modalities) {
    throw DataError("datagen: per-modality lists must have " + std::to_string(modalities) +
                    " entries");
  }
  for (std::size_t k = 0; k < modalities; ++k) {
    if (input_dims[k] == 0) throw DataError("datagen: input dims must be positive");
    if (!(snr[k] >= 0.0)) throw DataError("datagen: snr must be non-negative");
    if (!(noise_std[k] > 0.0)) throw DataError("datagen: noise_std must be positive");
    if (!(domain_shift[k] >= 0.0)) throw DataError("datagen: domain_shift must be non-negative");
  }
  if (!(centroid_scale > 0.0)) throw DataError("datagen: centroid_scale must be positive");
}

std::string to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::train: return "train";
    case SplitKind::val: return "val";
    case SplitKind::test: return "test";
  }
  return "?";
}

const SplitData& DomainData::split(SplitKind kind) const {
  switch (kind) {
    case SplitKind::train: return train;
    case SplitKind::val: return val;
    case SplitKind::test: return test;
  }
  return test;
}

Tensor random_rotation(std::size_t dim, double strength, std::uint64_t seed) {
  Rng rng(seed);
  // Columns of I + strength * G / sqrt(dim), orthonormalized by two passes of
  // modified Gram-Schmidt. The scaling keeps the rotation angle roughly
  // independent of dim.
  const double scale = strength / std::sqrt(static_cast<double>(dim));
  std::vector<std::vector<double>> cols(dim, std::vector<double>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) cols[j][i] = (i == j ? 1.0 : 0.0) + scale * rng.normal();
  }
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < dim; ++j) {
      for (std::size_t p = 0; p < j; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += cols[p][i] * cols[j][i];
        for (std::size_t i = 0; i < dim; ++i) cols[j][i] -= dot * cols[p][i];
      }
      double norm = 0.0;
      for (double v : cols[j]) norm += v * v;
      norm = std::sqrt(norm);
      for (double& v : cols[j]) v /= norm;
    }
  }
  Tensor q = Tensor::zeros({dim, dim});
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) q[i * dim + j] = cols[j][i];
  }
  return q;
}

Tensor class_centroids(std::size_t num_classes, std::size_t latent_dim, double scale) {
  if (latent_dim + 1 < num_classes) {
    throw DataError("class_centroids: latent_dim too small for a simplex");
  }
  Tensor c = Tensor::zeros({num_classes, latent_dim});
  for (std::size_t y = 0; y < num_classes && y < latent_dim; ++y) c[y * latent_dim + y] = scale;
  if (num_classes == latent_dim + 1) {
    // Last vertex of the regular simplex spanned by the one-hot corners.
    const double n = static_cast<double>(latent_dim);
    const double v = scale * (1.0 - std::sqrt(n + 1.0)) / n;
    for (std::size_t l = 0; l < latent_dim; ++l) c[latent_dim * latent_dim + l] = v;
  }
  return c;
}

std::vector<DomainSpec> make_domain_specs(const DataGenConfig& config) {
  config.validate();
  std::vector<DomainSpec> specs;
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    DomainSpec spec;
    spec.domain_id = d;
    spec.noise_std = config.noise_std;
    Rng rng(derive_seed(config.seed, kDomainSpecStream + d));
    for (std::size_t k = 0; k < config.modalities; ++k) {
      const std::size_t dim = config.input_dims[k];
      const double shift = config.domain_shift[k];
      spec.mixing.push_back(random_rotation(dim, shift, rng.next()));
      Tensor offset = Tensor::zeros({dim});
      for (double& v : offset.values()) v = shift * config.mean_shift_scale * rng.normal();
      spec.mean_shift.push_back(std::move(offset));
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

MultiModalDataset generate(const DataGenConfig& config) {
  config.validate();
  MultiModalDataset dataset;
  dataset.config = config;

  Rng projection_rng(derive_seed(config.seed, kProjectionStream));
  std::vector<Tensor> projections;
  for (std::size_t k = 0; k < config.modalities; ++k) {
    // Scaled so each coordinate of A_k z has unit variance per unit latent variance.
    Tensor a = gaussian_matrix(config.input_dims[k], config.latent_dim, projection_rng);
    const double s = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
    for (double& v : a.values()) v *= s;
    projections.push_back(std::move(a));
  }
  const Tensor centroids = class_centroids(config.num_classes, config.latent_dim,
                                           config.centroid_scale);

  for (DomainSpec& spec : make_domain_specs(config)) {
    Rng rng(derive_seed(config.seed, kDomainSampleStream + spec.domain_id));
    DomainData domain;
    domain.train = sample_split(config, spec, projections, centroids, config.train_per_domain, rng);
    domain.val = sample_split(config, spec, projections, centroids, config.val_per_domain, rng);
    domain.test = sample_split(config, spec, projections, centroids, config.test_per_domain, rng);
    domain.spec = std::move(spec);
    dataset.domains.push_back(std::move(domain));
  }
  return dataset;
}

SplitData perturb_modality(const SplitData& split, std::size_t k, double variance,
                           std::uint64_t seed) {
  if (k >= split.modalities.size()) throw DataError("perturb_modality: modality out of range");
  if (!(variance >= 0.0)) throw DataError("perturb_modality: variance must be non-negative");
  SplitData out = split;
  if (variance == 0.0) return out;
  Rng rng(seed);
  const double sd = std::sqrt(variance);
  for (double& v : out.modalities[k].values()) v += sd * rng.normal();
  return out;
}

MultiModalDataset perturb_modality(const MultiModalDataset& dataset, std::size_t k,
                                   double variance, std::uint64_t seed) {
  if (k >= dataset.config.modalities) throw DataError("perturb_modality: modality out of range");
  MultiModalDataset out = dataset;
  std::uint64_t stream = 0;
  for (DomainData& d : out.domains) {
    for (SplitData* s : {&d.train, &d.val, &d.test}) {
      *s = perturb_modality(*s, k, variance, derive_seed(seed, stream++));
    }
  }
  return out;
}

SplitData concat_splits(const std::vector<const SplitData*>& parts) {
  if (parts.empty()) throw DataError("concat_splits: nothing to concatenate");
  const std::size_t m = parts.front()->modalities.size();
  SplitData out;
  std::vector<std::vector<double>> values(m);
  std::size_t rows = 0;
  for (const SplitData* p : parts) {
    if (p->modalities.size() != m) throw DataError("concat_splits: modality count mismatch");
    for (std::size_t k = 0; k < m; ++k) {
      auto v = p->modalities[k].values();
      values[k].insert(values[k].end(), v.begin(), v.end());
    }
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    rows += p->rows();
  }
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t dim = parts.front()->modalities[k].shape()[1];
    out.modalities.emplace_back(Shape{rows, dim}, std::move(values[k]));
  }
  return out;
}

SplitData full_domain(const DomainData& domain) {
  return concat_splits({&domain.train, &domain.val, &domain.test});
}

SplitData take_rows(const SplitData& split, std::span<const std::size_t> rows) {
  SplitData out;
  for (const Tensor& t : split.modalities) out.modalities.push_back(gather_rows(t, rows));
  for (std::size_t r : rows) out.labels.push_back(split.labels.at(r));
  return out;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::multi_source: return "multi_source";
    case Protocol::single_source: return "single_source";
    case Protocol::in_domain: return "in_domain";
  }
  return "?";
}

Protocol parse_protocol(const std::string& text) {
  if (text == "multi_source") return Protocol::multi_source;
  if (text == "single_source") return Protocol::single_source;
  if (text == "in_domain") return Protocol::in_domain;
  throw DataError("unknown protocol '" + text + "'");
}

namespace {
void check_domain(const MultiModalDataset& dataset, std::size_t d) {
  if (d >= dataset.domains.size()) {
    throw DataError("unknown domain D" + std::to_string(d + 1) + " (dataset has " +
                    std::to_string(dataset.domains.size()) + " domains)");
  }
}
}  // namespace

ProtocolSplits protocol_splits(const MultiModalDataset& dataset, std::size_t target_domain) {
  check_domain(dataset, target_domain);
  if (dataset.domains.size() < 2) throw DataError("multi-source protocol needs >= 2 domains");
  ProtocolSplits out;
  out.protocol = Protocol::multi_source;
  std::vector<const SplitData*> train, val;
  for (std::size_t d = 0; d < dataset.domains.size(); ++d) {
    if (d == target_domain) continue;
    out.train_domains.push_back(d);
    train.push_back(&dataset.domains[d].train);
    val.push_back(&dataset.domains[d].val);
  }
  out.train = concat_splits(train);
  out.val = concat_splits(val);
  out.tests.push_back({target_domain, "test", full_domain(dataset.domains[target_domain])});
  return out;
}

ProtocolSplits single_source_splits(const MultiModalDataset& dataset, std::size_t source_domain) {
  check_domain(dataset, source_domain);
  if (dataset.domains.size() < 2) throw DataError("single-source protocol needs >= 2 domains");
  ProtocolSplits out;
  out.protocol = Protocol::single_source;
  out.train_domains = {source_domain};
  out.train = dataset.domains[source_domain].train;
  out.val = dataset.domains[source_domain].val;
  for (std::size_t d = 0; d < dataset.domains.size(); ++d) {
    if (d == source_domain) continue;
    out.tests.push_back({d, "test_D" + std::to_string(d + 1), full_domain(dataset.domains[d])});
  }
  return out;
}

ProtocolSplits in_domain_splits(const MultiModalDataset& dataset, std::size_t domain) {
  check_domain(dataset, domain);
  ProtocolSplits out;
  out.protocol = Protocol::in_domain;
  out.train_domains = {domain};
  out.train = dataset.domains[domain].train;
  out.val = dataset.domains[domain].val;
  out.tests.push_back({domain, "test", dataset.domains[domain].test});
  return out;
}

ProtocolSplits make_splits(const MultiModalDataset& dataset, Protocol protocol, std::size_t domain) {
  switch (protocol) {
    case Protocol::multi_source: return protocol_splits(dataset, domain);
    case Protocol::single_source: return single_source_splits(dataset, domain);
    case Protocol::in_domain: return in_domain_splits(dataset, domain);
  }
  throw DataError("unknown protocol");
}

std::uint64_t row_hash(const SplitData& split, std::size_t row) {
  std::uint64_t h = kFnvOffset;
  for (const Tensor& t : split.modalities) {
    auto r = t.row(row);
    h = fnv1a(h, r.data(), r.size() * sizeof(double));
  }
  return h;
}

std::uint64_t modality_checksum(const MultiModalDataset& dataset, std::size_t k) {
  std::uint64_t h = kFnvOffset;
  for (const DomainData& d : dataset.domains) {
    for (const SplitData* s : {&d.train, &d.val, &d.test}) {
      auto v = s->modalities.at(k).values();
      h = fnv1a(h, v.data(), v.size() * sizeof(double));
    }
  }
  return h;
}

void assert_no_leakage(const ProtocolSplits& splits) {
  std::set<std::uint64_t> seen;
  for (const SplitData* s : {&splits.train, &splits.val}) {
    for (std::size_t r = 0; r < s->rows(); ++r) seen.insert(row_hash(*s, r));
  }
  for (const EvalSet& t : splits.tests) {
    if (splits.protocol != Protocol::in_domain &&
        std::find(splits.train_domains.begin(), splits.train_domains.end(), t.domain_id) !=
            splits.train_domains.end()) {
      throw DataError("leakage: evaluation domain D" + std::to_string(t.domain_id + 1) +
                      " is also a training domain");
    }
    for (std::size_t r = 0; r < t.data.rows(); ++r) {
      if (seen.count(row_hash(t.data, r)) != 0) {
        throw DataError("leakage: row " + std::to_string(r) + " of " + t.name +
                        " also appears in train/val");
      }
    }
  }
}

double linear_probe_accuracy(const SplitData& train, const SplitData& test, std::size_t k,
                             std::size_t num_classes, std::size_t epochs) {
  const Tensor& x = train.modalities.at(k);
  const std::size_t dim = x.shape()[1];
  Tensor w = Tensor::zeros({dim, num_classes});
  Tensor b = Tensor::zeros({1, num_classes});
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  std::vector<const Tensor*> ptrs{&w, &b};
  AdamState state = AdamState::for_params(ptrs, cfg);
  for (std::size_t e = 0; e < epochs; ++e) {
    Tape tape;
    Var wv = tape.leaf(w), bv = tape.leaf(b);
    Var xv = tape.constant(x);
    Var ones = tape.constant(Tensor::filled({x.shape()[0], 1}, 1.0));
    Var logits = add(matmul(xv, wv), matmul(ones, bv));
    Var loss = cross_entropy(logits, train.labels);
    Gradients g = tape.backward(loss);
    std::vector<Tensor*> params{&w, &b};
    std::vector<Tensor> grads{g[wv], g[bv]};
    adam_step(params, grads, state);
  }
  const Tensor& xt = test.modalities.at(k);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.rows(); ++r) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < num_classes; ++c) {
      double v = b[c];
      for (std::size_t j = 0; j < dim; ++j) v += xt.at(r, j) * w.at(j, c);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    if (static_cast<int>(best) == test.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.rows());
}

}  // namespace mmdg
