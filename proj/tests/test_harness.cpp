#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mmdg/config.hpp"
#include "mmdg/experiment.hpp"
#include "mmdg/format.hpp"
#include "mmdg/summary_io.hpp"

using namespace mmdg;

namespace {

ExperimentConfig tiny(Method method = Method::mbcd) {
  ExperimentConfig c = ExperimentConfig::defaults();
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"data.modalities", "2"},
           {"data.input_dims", "4,6"},
           {"data.snr", "2,0.5"},
           {"data.noise_std", "1,1"},
           {"data.domain_shift", "0.5,0.1"},
           {"data.train_per_domain", "32"},
           {"data.val_per_domain", "16"},
           {"data.test_per_domain", "16"},
           {"model.hidden_dims", "6,6"},
           {"model.feature_dims", "4,4"},
           {"train.epochs", "3"},
           {"train.learning_rate", "1e-3"},
           {"flatness.enabled", "true"},
           {"flatness.n_directions", "2"},
           {"flatness.radii", "0,0.1,0.2"},
           {"robustness.variances", "0,1"},
           {"experiment.seeds", "3,4"}}) {
    apply_setting(c, k, v);
  }
  c.method = method;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) rows.push_back(split(line, ','));
  return rows;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mmdg_harness_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config text round trip") {
  const ExperimentConfig c = tiny();
  const std::string text = serialize_config(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.data.input_dims == std::vector<std::size_t>{4, 6});
  CHECK(back.model.input_dims == std::vector<std::size_t>{4, 6});
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 4});
}

TEST_CASE("config parsing") {
  const ExperimentConfig c = parse_config(
      "format_version = 1\n[experiment]\nmethod = erm\ndomain = D2\n[train]\nema_beta = 0.99\n");
  CHECK(c.method == Method::erm);
  CHECK(c.domain == 1);
  CHECK(c.train.ema_beta == 0.99);
  CHECK(c.data.train_per_domain == 600);
}

TEST_CASE("config errors") {
  CHECK_THROWS_WITH_AS(parse_config("[train]\nlambda = 1\n"), "config is missing format_version",
                       ConfigError);
  CHECK_THROWS_AS(parse_config("format_version = 2\n"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("format_version = 1\n[train]\nlamda = 1\n"),
                       "unknown config key 'train.lamda'", ConfigError);
  CHECK_THROWS_AS(parse_config("format_version = 1\n[train]\nepochs = many\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("format_version = 1\n[experiment]\nmethod = sgd\n"), ConfigError);
  ExperimentConfig c = tiny();
  CHECK_THROWS_AS(apply_setting(c, "train.amd", "maybe"), ConfigError);
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.domain = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  apply_setting(c, "train.ema_beta", "1.0");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_domain("D3") == 2);
  CHECK_THROWS_AS(parse_domain("D0"), ConfigError);
}

TEST_CASE("metrics csv columns") {
  const auto cols = metrics_columns(2);
  std::string header;
  for (std::size_t i = 0; i < cols.size(); ++i) header += (i ? "," : "") + cols[i];
  CHECK(header ==
        "step,epoch,split,loss_total,loss_mm,loss_uni_1,loss_uni_2,loss_dis,acc_mm,acc_uni_1,"
        "acc_uni_2,s_1,s_2,r_1,r_2,p_1,p_2,dropped_1,dropped_2");
  MetricsRow row;
  row.step = 4;
  row.epoch = 1;
  row.split = "val";
  row.loss_total = 1.5;
  row.loss_mm = 0.5;
  row.loss_uni = {0.25, 0.75};
  row.acc_mm = 0.5;
  row.acc_uni = {0.25, 1.0};
  std::ostringstream out;
  write_metrics_csv({row}, 2, out);
  CHECK(read_csv(out.str())[1].size() == cols.size());
  CHECK(out.str().substr(out.str().find('\n') + 1) == "4,1,val,1.5,0.5,0.25,0.75,,0.5,0.25,1,,,,,,,,\n");
}

TEST_CASE("aggregate uses the sample standard deviation") {
  const AggregateStat a = aggregate({1.0, 2.0, 4.0});
  CHECK(a.mean == doctest::Approx(7.0 / 3.0));
  CHECK(a.std == doctest::Approx(std::sqrt(((16.0 + 1.0 + 25.0) / 9.0) / 2.0)));
  CHECK(aggregate({3.0}).std == 0.0);
}

TEST_CASE("seed streams are independent of the seed list") {
  CHECK(stream_seed(3, SeedStream::data) != stream_seed(3, SeedStream::init));
  CHECK(stream_seed(3, SeedStream::data) != stream_seed(4, SeedStream::data));
  ExperimentConfig a = tiny(Method::erm);
  a.flatness.enabled = false;
  a.seeds = {4};
  ExperimentConfig b = a;
  b.seeds = {3, 4};
  const RunSummary ra = run_experiment(a);
  const RunSummary rb = run_experiment(b);
  CHECK(ra.seeds[0].tests[0].acc_mm == rb.seeds[1].tests[0].acc_mm);
  CHECK(ra.seeds[0].selected_epoch == rb.seeds[1].selected_epoch);
}

TEST_CASE("multi-source run uses the other domains and selects the best validation epoch") {
  ExperimentConfig c = tiny();
  c.seeds = {5};
  const ProtocolSplits s = seed_splits(c, 5);
  CHECK(s.train_domains == std::vector<std::size_t>{1, 2});
  const RunSummary r = run_experiment(c);
  const SeedResult& seed = r.seeds[0];
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const MetricsRow& row : seed.rows) {
    if (row.split == "val" && row.acc_mm > best) {
      best = row.acc_mm;
      best_epoch = row.epoch;
    }
  }
  CHECK(seed.selected_epoch == best_epoch);
  CHECK(seed.selected_val_acc == best);
  for (const MetricsRow& row : seed.rows) {
    if (row.split == "test" && row.epoch == best_epoch) CHECK(row.acc_mm == seed.tests[0].acc_mm);
  }
  REQUIRE(seed.flatness);
  CHECK(seed.flatness->mean_loss_increase[0] == 0.0);
  REQUIRE(seed.robustness.size() == 2);
  CHECK(seed.robustness[0].acc_mm == seed.tests[0].acc_mm);
}

TEST_CASE("single-source run reports every target") {
  ExperimentConfig c = tiny(Method::erm);
  c.protocol = Protocol::single_source;
  c.seeds = {1};
  c.flatness.enabled = false;
  const RunSummary r = run_experiment(c);
  REQUIRE(r.seeds[0].tests.size() == 2);
  CHECK(r.seeds[0].tests[0].name == "test_D2");
  CHECK(r.seeds[0].tests[1].name == "test_D3");
}

TEST_CASE("run outputs are byte-identical across identical runs") {
  const ExperimentConfig c = tiny();
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  run_experiment(c, a);
  run_experiment(c, b);
  for (const char* f : {"summary.json", "aggregate.csv", "config.ini", "seed_3/metrics.csv",
                        "seed_4/flatness.csv", "seed_4/selected.ckpt"}) {
    INFO(f);
    REQUIRE(std::filesystem::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(std::filesystem::exists(a / "timing.json"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("aggregate.csv matches a recomputation from the per-seed files") {
  const ExperimentConfig c = tiny(Method::ema_only);
  const auto dir = scratch("agg");
  const RunSummary r = run_experiment(c, dir);
  std::vector<double> fused;
  for (std::uint64_t seed : c.seeds) {
    const auto rows = read_csv(slurp(dir / ("seed_" + std::to_string(seed)) / "metrics.csv"));
    const std::size_t epoch = r.seeds[fused.size()].selected_epoch;
    for (const auto& row : rows) {
      if (row[2] == "test" && row[1] == std::to_string(epoch)) fused.push_back(parse_double(row[8]));
    }
  }
  REQUIRE(fused.size() == 2);
  const AggregateStat expect = aggregate(fused);
  std::map<std::string, std::pair<double, double>> agg;
  for (const auto& row : read_csv(slurp(dir / "aggregate.csv"))) {
    if (row[0] != "metric") agg[row[0]] = {parse_double(row[1]), parse_double(row[2])};
  }
  CHECK(agg.at("acc_mm").first == doctest::Approx(expect.mean).epsilon(1e-15));
  CHECK(agg.at("acc_mm").second == doctest::Approx(expect.std).epsilon(1e-15));
  std::filesystem::remove_all(dir);
}

TEST_CASE("summary json round trip") {
  ExperimentConfig c = tiny();
  c.seeds = {2};
  c.train.eval_model = EvalModel::both;
  const RunSummary r = run_experiment(c);
  const std::string json = summary_to_json(r);
  const RunSummary back = summary_from_json(json);
  CHECK(summary_to_json(back) == json);
  CHECK(back.seeds[0].tests_student.size() == 1);
  CHECK(back.method_label() == "mbcd");
  CHECK_THROWS_AS(summary_from_json("{\"format_version\": 99}"), ConfigError);
  CHECK_THROWS_AS(summary_from_json("not json"), ConfigError);
}

TEST_CASE("plot data schemas and mean rows") {
  const RunSummary mbcd = run_experiment(tiny(Method::mbcd));
  const RunSummary erm = run_experiment(tiny(Method::erm));
  const std::vector<RunSummary> runs{mbcd, erm};
  for (PlotKind kind : {PlotKind::flatness, PlotKind::robustness, PlotKind::modality_accuracy,
                        PlotKind::training_curves}) {
    std::ostringstream out;
    emit_plot_data(runs, kind, out);
    const auto rows = read_csv(out.str());
    CHECK(rows[0] == plot_columns(kind));
    // recompute every mean row from the per-seed rows with the same key
    const std::size_t ncol = rows[0].size();
    std::map<std::string, std::vector<double>> per_key;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      REQUIRE(rows[i].size() == ncol);
      const std::size_t key_cols = kind == PlotKind::training_curves ? 3 : ncol - 2;
      std::string key;
      for (std::size_t j = 0; j < key_cols; ++j) key += rows[i][j] + ",";
      if (rows[i].back() != "mean") {
        per_key[key].push_back(parse_double(rows[i][ncol - 2]));
      } else {
        REQUIRE(per_key.count(key) == 1);
        CHECK(parse_double(rows[i][ncol - 2]) == doctest::Approx(aggregate(per_key[key]).mean).epsilon(1e-15));
      }
    }
  }
  std::ostringstream mod;
  emit_plot_data(runs, PlotKind::modality_accuracy, mod);
  CHECK(mod.str().find("\nerm,uni_2,") != std::string::npos);
  CHECK(mod.str().find("\nmbcd,fused,") != std::string::npos);

  RunSummary other = erm;
  other.config.protocol = Protocol::in_domain;
  std::ostringstream sink;
  CHECK_THROWS_AS(emit_plot_data({mbcd, other}, PlotKind::flatness, sink), ConfigError);
  CHECK_THROWS_AS(parse_plot_kind("scatter"), ConfigError);
}

TEST_CASE("sweeps") {
  ExperimentConfig c = tiny(Method::erm);
  c.seeds = {1};
  c.flatness.enabled = false;
  const std::vector<std::string> betas{"0.9", "0.99"};
  ExperimentConfig ema = c;
  ema.method = Method::ema_only;
  const auto runs = run_sweep(ema, "train.ema_beta", betas);
  REQUIRE(runs.size() == 2);
  CHECK(runs[1].config.train.ema_beta == 0.99);
  std::ostringstream out;
  write_sweep_csv("train.ema_beta", betas, runs, out);
  const auto rows = read_csv(out.str());
  CHECK(rows[0] == std::vector<std::string>{"axis", "value", "method", "seed", "acc_mm", "acc_uni_1", "acc_uni_2"});
  CHECK(rows.size() == 1 + 2 * 3);
  CHECK(rows[1][1] == "0.9");
  CHECK(rows[2][3] == "mean");

  const std::vector<std::string> variances{"0", "0.5", "2"};
  const auto noise = run_sweep(c, "robustness.variance", variances);
  REQUIRE(noise.size() == 1);
  REQUIRE(noise[0].seeds[0].robustness.size() == 3);
  std::ostringstream nout;
  write_sweep_csv("robustness.variance", variances, noise, nout);
  CHECK(read_csv(nout.str()).size() == 1 + 3 * 3);
  CHECK(noise[0].seeds[0].robustness[0].acc_mm == noise[0].seeds[0].tests[0].acc_mm);

  CHECK_THROWS_AS(run_sweep(c, "train.momentum", betas), ConfigError);
  std::ostringstream sink;
  CHECK_THROWS_AS(write_sweep_csv("train.ema_beta", variances, runs, sink), ConfigError);
}

TEST_CASE("a failing run leaves partial outputs and a marker") {
  ExperimentConfig c = tiny(Method::erm);
  c.seeds = {1};
  c.flatness.enabled = false;
  apply_setting(c, "train.learning_rate", "1e300");
  const auto dir = scratch("fail");
  CHECK_THROWS(run_experiment(c, dir));
  CHECK(std::filesystem::exists(dir / "FAILED"));
  std::filesystem::remove_all(dir);
}
