#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "mmdg/mbcd.hpp"
#include "mmdg/synthdata.hpp"
#include "test_support.hpp"

using namespace mmdg;

namespace {

DataGenConfig small_gen(std::uint64_t seed = 5) {
  DataGenConfig c;
  c.modalities = 2;
  c.num_domains = 3;
  c.num_classes = 4;
  c.latent_dim = 6;
  c.train_per_domain = 40;
  c.val_per_domain = 10;
  c.test_per_domain = 30;
  c.input_dims = {5, 7};
  c.snr = {2.0, 0.5};
  c.noise_std = {1.0, 1.0};
  c.domain_shift = {0.5, 0.2};
  c.seed = seed;
  return c;
}

bool same_split(const SplitData& a, const SplitData& b) {
  return a.labels == b.labels && a.modalities == b.modalities;
}

double max_orthogonality_error(const Tensor& q) {
  const std::size_t n = q.shape()[0];
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += q.at(r, i) * q.at(r, j);
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mmdg_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic in config and seed") {
  const MultiModalDataset a = generate(small_gen(5));
  const MultiModalDataset b = generate(small_gen(5));
  const MultiModalDataset c = generate(small_gen(6));
  REQUIRE(a.domains.size() == 3);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(same_split(a.domains[d].train, b.domains[d].train));
    CHECK(same_split(a.domains[d].test, b.domains[d].test));
    CHECK(a.domains[d].spec.mixing == b.domains[d].spec.mixing);
  }
  CHECK_FALSE(same_split(a.domains[0].train, c.domains[0].train));
}

TEST_CASE("dataset shapes, alignment and label range") {
  const DataGenConfig cfg = small_gen();
  const MultiModalDataset ds = generate(cfg);
  for (const DomainData& d : ds.domains) {
    for (SplitKind kind : {SplitKind::train, SplitKind::val, SplitKind::test}) {
      const SplitData& s = d.split(kind);
      const std::size_t rows = kind == SplitKind::train ? 40 : kind == SplitKind::val ? 10 : 30;
      REQUIRE(s.rows() == rows);
      for (std::size_t k = 0; k < 2; ++k) {
        CHECK(s.modalities[k].shape() == Shape{rows, cfg.input_dims[k]});
        CHECK(s.modalities[k].all_finite());
      }
      for (int y : s.labels) {
        CHECK(y >= 0);
        CHECK(y < 4);
      }
    }
  }
}

TEST_CASE("mixing matrices are orthogonal") {
  for (double strength : {0.1, 0.5, 1.0, 3.0}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CHECK(max_orthogonality_error(random_rotation(16, strength, seed)) < 1e-8);
    }
  }
  const MultiModalDataset ds = generate(small_gen());
  for (const DomainData& d : ds.domains) {
    for (const Tensor& q : d.spec.mixing) CHECK(max_orthogonality_error(q) < 1e-8);
  }
}

TEST_CASE("rotation strength 0 is the identity and distance grows with strength") {
  const Tensor id = random_rotation(6, 0.0, 9);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) CHECK(id.at(i, j) == (i == j ? 1.0 : 0.0));
  }
  auto dist = [](const Tensor& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.shape()[0]; ++i) {
      for (std::size_t j = 0; j < q.shape()[1]; ++j) {
        const double e = q.at(i, j) - (i == j ? 1.0 : 0.0);
        s += e * e;
      }
    }
    return std::sqrt(s);
  };
  double mean_small = 0.0, mean_large = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    mean_small += dist(random_rotation(16, 0.2, seed));
    mean_large += dist(random_rotation(16, 1.5, seed));
  }
  CHECK(mean_small < mean_large);
}

TEST_CASE("class centroids sit at scaled one-hot corners") {
  const Tensor c = class_centroids(4, 6, 2.0);
  REQUIRE(c.shape() == Shape{4, 6});
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < 6; ++j) d2 += (c.at(a, j) - c.at(b, j)) * (c.at(a, j) - c.at(b, j));
      if (a != b) CHECK(std::sqrt(d2) >= 2.0);
    }
  }
  CHECK(c.at(2, 2) == 2.0);
  CHECK(c.at(2, 0) == 0.0);
}

TEST_CASE("too small a latent space is rejected") {
  DataGenConfig cfg = small_gen();
  cfg.latent_dim = 2;
  CHECK_THROWS_AS(generate(cfg), DataError);
  cfg = small_gen();
  cfg.snr = {1.0};
  CHECK_THROWS_AS(generate(cfg), DataError);
  cfg = small_gen();
  cfg.train_per_domain = 0;
  CHECK_THROWS_AS(generate(cfg), DataError);
}

TEST_CASE("high snr without shift is linearly separable on each modality") {
  DataGenConfig cfg = small_gen(11);
  cfg.snr = {3.0, 3.0};
  cfg.input_dims = {16, 16};
  cfg.domain_shift = {0.0, 0.0};
  cfg.centroid_scale = 3.5;
  cfg.train_per_domain = 500;
  cfg.test_per_domain = 500;
  const MultiModalDataset ds = generate(cfg);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(linear_probe_accuracy(ds.domains[0].train, ds.domains[0].test, k, 4) > 0.9);
  }
}

TEST_CASE("zero snr leaves a modality at chance") {
  DataGenConfig cfg = small_gen(12);
  cfg.snr = {3.0, 0.0};
  cfg.domain_shift = {0.0, 0.0};
  cfg.train_per_domain = 500;
  cfg.test_per_domain = 2000;
  const MultiModalDataset ds = generate(cfg);
  const double acc = linear_probe_accuracy(ds.domains[0].train, ds.domains[0].test, 1, 4);
  CHECK(std::abs(acc - 0.25) <= 0.05);
}

TEST_CASE("perturbation with zero variance is an exact copy") {
  const MultiModalDataset ds = generate(small_gen());
  const MultiModalDataset p = perturb_modality(ds, 0, 0.0, 3);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(same_split(ds.domains[d].train, p.domains[d].train));
    CHECK(same_split(ds.domains[d].test, p.domains[d].test));
  }
}

TEST_CASE("perturbation only touches the chosen modality") {
  const MultiModalDataset ds = generate(small_gen());
  const MultiModalDataset p = perturb_modality(ds, 1, 0.7, 3);
  CHECK(modality_checksum(p, 0) == modality_checksum(ds, 0));
  CHECK(modality_checksum(p, 1) != modality_checksum(ds, 1));
  CHECK_THROWS_AS(perturb_modality(ds, 2, 0.5, 3), DataError);
  CHECK_THROWS_AS(perturb_modality(ds, 0, -1.0, 3), DataError);
}

TEST_CASE("perturbation noise has the requested variance") {
  DataGenConfig cfg = small_gen();
  cfg.train_per_domain = 400;
  const MultiModalDataset ds = generate(cfg);
  const SplitData& s = ds.domains[0].train;
  const SplitData p = perturb_modality(s, 0, 2.0, 8);
  double sum = 0.0, sq = 0.0;
  const auto a = s.modalities[0].values();
  const auto b = p.modalities[0].values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = b[i] - a[i];
    sum += e;
    sq += e * e;
  }
  const double n = static_cast<double>(a.size());
  CHECK(std::abs(sum / n) < 0.1);
  CHECK(std::abs(sq / n - 2.0) < 0.15);
}

TEST_CASE("probe accuracy falls as perturbation variance grows") {
  const std::vector<double> variances{0.0, 0.5, 1.0, 2.0};
  std::vector<double> mean_acc(variances.size(), 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DataGenConfig cfg = small_gen(100 + seed);
    cfg.snr = {1.0, 1.0};
    cfg.domain_shift = {0.0, 0.0};
    cfg.train_per_domain = 300;
    cfg.test_per_domain = 600;
    const MultiModalDataset ds = generate(cfg);
    for (std::size_t v = 0; v < variances.size(); ++v) {
      const SplitData noisy = perturb_modality(ds.domains[0].test, 0, variances[v], seed);
      mean_acc[v] += linear_probe_accuracy(ds.domains[0].train, noisy, 0, 4) / 5.0;
    }
  }
  for (std::size_t v = 1; v < variances.size(); ++v) CHECK(mean_acc[v] < mean_acc[v - 1]);
}

TEST_CASE("leave-one-domain-out split") {
  const MultiModalDataset ds = generate(small_gen());
  const ProtocolSplits s = protocol_splits(ds, 0);
  CHECK(s.train_domains == std::vector<std::size_t>{1, 2});
  CHECK(s.train.rows() == 80);
  CHECK(s.val.rows() == 20);
  REQUIRE(s.tests.size() == 1);
  CHECK(s.tests[0].name == "test");
  CHECK(s.tests[0].domain_id == 0);
  CHECK(s.tests[0].data.rows() == 80);
  CHECK_NOTHROW(assert_no_leakage(s));
}

TEST_CASE("single-source split evaluates every other domain separately") {
  const MultiModalDataset ds = generate(small_gen());
  const ProtocolSplits s = single_source_splits(ds, 0);
  CHECK(s.train_domains == std::vector<std::size_t>{0});
  REQUIRE(s.tests.size() == 2);
  CHECK(s.tests[0].name == "test_D2");
  CHECK(s.tests[1].name == "test_D3");
  CHECK_NOTHROW(assert_no_leakage(s));
  CHECK_NOTHROW(assert_no_leakage(in_domain_splits(ds, 2)));
}

TEST_CASE("train and test rows are disjoint") {
  const MultiModalDataset ds = generate(small_gen());
  for (Protocol p : {Protocol::multi_source, Protocol::single_source, Protocol::in_domain}) {
    for (std::size_t d = 0; d < 3; ++d) {
      const ProtocolSplits s = make_splits(ds, p, d);
      std::set<std::uint64_t> train;
      for (std::size_t r = 0; r < s.train.rows(); ++r) train.insert(row_hash(s.train, r));
      for (const EvalSet& t : s.tests) {
        for (std::size_t r = 0; r < t.data.rows(); ++r) CHECK(train.count(row_hash(t.data, r)) == 0);
      }
    }
  }
}

TEST_CASE("unknown domains are rejected") {
  const MultiModalDataset ds = generate(small_gen());
  CHECK_THROWS_WITH_AS(protocol_splits(ds, 3), "unknown domain D4 (dataset has 3 domains)", DataError);
  CHECK_THROWS_AS(single_source_splits(ds, 7), DataError);
  CHECK_THROWS_AS(parse_protocol("leave_two_out"), DataError);
}

TEST_CASE("leakage is detected") {
  const MultiModalDataset ds = generate(small_gen());
  ProtocolSplits s = protocol_splits(ds, 0);
  SplitData& t = s.tests[0].data;
  for (std::size_t k = 0; k < 2; ++k) {
    auto src = s.train.modalities[k].row(3);
    std::copy(src.begin(), src.end(), t.modalities[k].row(5).begin());
  }
  CHECK_THROWS_WITH_AS(assert_no_leakage(s), "leakage: row 5 of test also appears in train/val",
                       DataError);

  ProtocolSplits overlap = protocol_splits(ds, 0);
  overlap.train_domains.push_back(0);
  CHECK_THROWS_AS(assert_no_leakage(overlap), DataError);
}

TEST_CASE("export and import round trip") {
  const MultiModalDataset ds = generate(small_gen());
  const auto dir = scratch_dir("dataset");
  export_dataset(ds, dir);
  CHECK(std::filesystem::exists(dir / "manifest.txt"));
  CHECK(std::filesystem::exists(dir / "D2_val_m1.csv"));
  CHECK(std::filesystem::exists(dir / "D3_test_labels.csv"));
  const MultiModalDataset back = import_dataset(dir);
  CHECK(serialize_datagen(back.config) == serialize_datagen(ds.config));
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(same_split(back.domains[d].train, ds.domains[d].train));
    CHECK(same_split(back.domains[d].test, ds.domains[d].test));
    CHECK(back.domains[d].spec.mixing == ds.domains[d].spec.mixing);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("import rejects damaged datasets") {
  const MultiModalDataset ds = generate(small_gen());
  const auto dir = scratch_dir("dataset_bad");
  export_dataset(ds, dir);
  {
    std::ofstream out(dir / "D1_train_labels.csv", std::ios::app);
    out << "1\n";
  }
  CHECK_THROWS_AS(import_dataset(dir), DataError);
  export_dataset(ds, dir);
  {
    std::ofstream out(dir / "D1_train_labels.csv");
    for (std::size_t r = 0; r < 40; ++r) out << (r == 0 ? "9" : "0") << "\n";
  }
  CHECK_THROWS_WITH_AS(import_dataset(dir), "D1_train_labels.csv: label out of range", DataError);
  std::filesystem::remove(dir / "manifest.txt");
  CHECK_THROWS_AS(import_dataset(dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("the high-snr modality learns faster") {
  double loss_strong = 0.0, loss_weak = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DataGenConfig cfg = small_gen(200 + seed);
    cfg.snr = {3.0, 0.6};
    cfg.input_dims = {8, 8};
    cfg.train_per_domain = 320;
    const MultiModalDataset ds = generate(cfg);
    const SplitData& train = ds.domains[0].train;
    TrainerState state = TrainerState::create(
        init_params(mmdg::testing::model_for(cfg, seed)), 1e-3, seed);
    // first epoch only
    for (std::size_t b = 0; b < 20; ++b) {
      std::vector<std::size_t> rows(16);
      std::iota(rows.begin(), rows.end(), b * 16);
      const StepMetrics m = train_step_erm(state, take_rows(train, rows));
      loss_strong += m.loss_uni[0];
      loss_weak += m.loss_uni[1];
    }
  }
  CHECK(loss_strong < loss_weak);
}
