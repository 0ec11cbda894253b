#include "mmdg/summary_io.hpp"

#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmdg/checkpoint.hpp"
#include "mmdg/config.hpp"
#include "mmdg/format.hpp"

namespace mmdg {

using nlohmann::json;

namespace {

json test_json(const TestMetrics& t) {
  return {{"name", t.name}, {"domain", t.domain_id + 1}, {"acc_mm", t.acc_mm},
          {"loss_mm", t.loss_mm}, {"acc_uni", t.acc_uni}};
}

TestMetrics test_from(const json& j) {
  TestMetrics t;
  t.name = j.at("name").get<std::string>();
  t.domain_id = j.at("domain").get<std::size_t>() - 1;
  t.acc_mm = j.at("acc_mm").get<double>();
  t.loss_mm = j.at("loss_mm").get<double>();
  t.acc_uni = j.at("acc_uni").get<std::vector<double>>();
  return t;
}

json row_json(const MetricsRow& r) {
  json j = {{"step", r.step},       {"epoch", r.epoch},     {"split", r.split},
            {"loss_total", r.loss_total}, {"loss_mm", r.loss_mm}, {"loss_uni", r.loss_uni},
            {"acc_mm", r.acc_mm},   {"acc_uni", r.acc_uni}, {"s", r.s},
            {"r", r.r},             {"p", r.p},             {"dropped", r.dropped}};
  j["loss_dis"] = r.loss_dis ? json(*r.loss_dis) : json(nullptr);
  return j;
}

MetricsRow row_from(const json& j) {
  MetricsRow r;
  r.step = j.at("step").get<std::size_t>();
  r.epoch = j.at("epoch").get<std::size_t>();
  r.split = j.at("split").get<std::string>();
  r.loss_total = j.at("loss_total").get<double>();
  r.loss_mm = j.at("loss_mm").get<double>();
  r.loss_uni = j.at("loss_uni").get<std::vector<double>>();
  if (!j.at("loss_dis").is_null()) r.loss_dis = j.at("loss_dis").get<double>();
  r.acc_mm = j.at("acc_mm").get<double>();
  r.acc_uni = j.at("acc_uni").get<std::vector<double>>();
  r.s = j.at("s").get<std::vector<double>>();
  r.r = j.at("r").get<std::vector<double>>();
  r.p = j.at("p").get<std::vector<double>>();
  r.dropped = j.at("dropped").get<std::vector<double>>();
  return r;
}

}  // namespace

std::string summary_to_json(const RunSummary& summary) {
  json j;
  j["format_version"] = summary.format_version;
  j["name"] = summary.config.name;
  j["method"] = summary.method_label();
  j["protocol"] = to_string(summary.config.protocol);
  j["config"] = serialize_config(summary.config);
  json seeds = json::array();
  std::vector<double> acc;
  const std::size_t m = summary.config.data.modalities;
  std::vector<std::vector<double>> uni(m);
  for (const SeedResult& s : summary.seeds) {
    json js;
    js["seed"] = s.seed;
    js["selected_epoch"] = s.selected_epoch;
    js["selected_val_acc"] = s.selected_val_acc;
    js["tests"] = json::array();
    for (const TestMetrics& t : s.tests) js["tests"].push_back(test_json(t));
    js["tests_student"] = json::array();
    for (const TestMetrics& t : s.tests_student) js["tests_student"].push_back(test_json(t));
    if (s.flatness) {
      js["flatness"] = {{"radii", s.flatness->radii},
                        {"mean_loss_increase", s.flatness->mean_loss_increase},
                        {"nan_directions", s.flatness->nan_directions},
                        {"n_directions", s.flatness->n_directions},
                        {"seed", s.flatness->seed}};
    }
    js["robustness"] = json::array();
    for (const RobustnessPoint& p : s.robustness) {
      js["robustness"].push_back({{"variance", p.variance}, {"acc_mm", p.acc_mm}, {"acc_uni", p.acc_uni}});
    }
    js["rows"] = json::array();
    for (const MetricsRow& r : s.rows) js["rows"].push_back(row_json(r));
    seeds.push_back(std::move(js));
    if (!s.tests.empty()) {
      acc.push_back(s.tests.front().acc_mm);
      for (std::size_t k = 0; k < m && k < s.tests.front().acc_uni.size(); ++k) {
        uni[k].push_back(s.tests.front().acc_uni[k]);
      }
    }
  }
  j["seeds"] = std::move(seeds);
  const AggregateStat a = aggregate(acc);
  j["aggregate"]["acc_mm"] = {{"mean", a.mean}, {"std", a.std}};
  for (std::size_t k = 0; k < m; ++k) {
    const AggregateStat u = aggregate(uni[k]);
    j["aggregate"]["acc_uni_" + std::to_string(k + 1)] = {{"mean", u.mean}, {"std", u.std}};
  }
  return j.dump(2) + "\n";
}

RunSummary summary_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("summary: ") + e.what());
  }
  try {
    RunSummary s;
    s.format_version = j.at("format_version").get<int>();
    if (s.format_version != kFormatVersion) {
      throw ConfigError("summary: unsupported format_version " + std::to_string(s.format_version));
    }
    s.config = parse_config(j.at("config").get<std::string>());
    for (const json& js : j.at("seeds")) {
      SeedResult r;
      r.seed = js.at("seed").get<std::uint64_t>();
      r.selected_epoch = js.at("selected_epoch").get<std::size_t>();
      r.selected_val_acc = js.at("selected_val_acc").get<double>();
      for (const json& t : js.at("tests")) r.tests.push_back(test_from(t));
      for (const json& t : js.at("tests_student")) r.tests_student.push_back(test_from(t));
      if (js.contains("flatness")) {
        const json& f = js.at("flatness");
        FlatnessCurve c;
        c.radii = f.at("radii").get<std::vector<double>>();
        c.mean_loss_increase = f.at("mean_loss_increase").get<std::vector<double>>();
        c.nan_directions = f.at("nan_directions").get<std::vector<std::size_t>>();
        c.n_directions = f.at("n_directions").get<std::size_t>();
        c.seed = f.at("seed").get<std::uint64_t>();
        r.flatness = std::move(c);
      }
      for (const json& p : js.at("robustness")) {
        r.robustness.push_back({p.at("variance").get<double>(), p.at("acc_mm").get<double>(),
                                p.at("acc_uni").get<std::vector<double>>()});
      }
      for (const json& row : js.at("rows")) r.rows.push_back(row_from(row));
      s.seeds.push_back(std::move(r));
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("summary: ") + e.what());
  }
}

RunSummary load_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read summary " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return summary_from_json(buf.str());
}

void write_run_outputs(const RunSummary& summary, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t m = summary.config.data.modalities;
  const bool teacher = summary.config.method != Method::erm;
  for (const SeedResult& s : summary.seeds) {
    const auto seed_dir = dir / ("seed_" + std::to_string(s.seed));
    std::filesystem::create_directories(seed_dir);
    std::ofstream metrics(seed_dir / "metrics.csv");
    write_metrics_csv(s.rows, m, metrics);
    if (s.flatness) {
      std::ofstream flat(seed_dir / "flatness.csv");
      write_curve_csv(*s.flatness, flat);
    }
    Checkpoint cp;
    cp.config = summary.config.model;
    cp.config.init_seed = stream_seed(s.seed, SeedStream::init);
    cp.student = s.selected_student;
    if (teacher) cp.teacher = s.selected_teacher;
    if (!s.selected_student.encoders.empty()) save_checkpoint(cp, seed_dir / "selected.ckpt");
  }
  std::ofstream(dir / "summary.json") << summary_to_json(summary);
  std::ofstream(dir / "config.ini") << serialize_config(summary.config);
  std::ofstream agg(dir / "aggregate.csv");
  agg << "metric,mean,std\n";
  std::vector<double> fused;
  std::vector<std::vector<double>> uni(m);
  for (const SeedResult& s : summary.seeds) {
    if (s.tests.empty()) continue;
    fused.push_back(s.tests.front().acc_mm);
    for (std::size_t k = 0; k < m; ++k) uni[k].push_back(s.tests.front().acc_uni.at(k));
  }
  const AggregateStat a = aggregate(fused);
  agg << "acc_mm," << format_double(a.mean) << ',' << format_double(a.std) << '\n';
  for (std::size_t k = 0; k < m; ++k) {
    const AggregateStat u = aggregate(uni[k]);
    agg << "acc_uni_" << k + 1 << ',' << format_double(u.mean) << ',' << format_double(u.std) << '\n';
  }
  std::ofstream(dir / "timing.json") << json{{"wall_clock_seconds", summary.wall_clock_seconds}}.dump() << '\n';
}

// ---------------------------------------------------------------------------

std::string to_string(PlotKind kind) {
  switch (kind) {
    case PlotKind::flatness: return "flatness";
    case PlotKind::robustness: return "robustness";
    case PlotKind::modality_accuracy: return "modality_accuracy";
    case PlotKind::training_curves: return "training_curves";
  }
  return "?";
}

PlotKind parse_plot_kind(const std::string& text) {
  for (PlotKind k : {PlotKind::flatness, PlotKind::robustness, PlotKind::modality_accuracy,
                     PlotKind::training_curves}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown plot kind '" + text + "'");
}

std::vector<std::string> plot_columns(PlotKind kind) {
  switch (kind) {
    case PlotKind::flatness: return {"method", "radius", "mean_loss_increase", "seed"};
    case PlotKind::robustness: return {"method", "variance", "accuracy", "seed"};
    case PlotKind::modality_accuracy: return {"method", "branch", "accuracy", "seed"};
    case PlotKind::training_curves: return {"method", "epoch", "split", "loss_total", "acc_mm", "seed"};
  }
  return {};
}

void emit_plot_data(const std::vector<RunSummary>& summaries, PlotKind kind, std::ostream& out) {
  if (summaries.empty()) throw ConfigError("emit_plot_data: no summaries");
  for (const RunSummary& s : summaries) {
    if (s.config.protocol != summaries.front().config.protocol) {
      throw ConfigError("emit_plot_data: summaries mix protocols " +
                        to_string(summaries.front().config.protocol) + " and " +
                        to_string(s.config.protocol));
    }
  }
  const std::vector<std::string> cols = plot_columns(kind);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';

  // (method, x...) -> values across seeds, in first-seen order for the mean rows.
  std::vector<std::pair<std::string, std::vector<double>>> groups;
  std::map<std::string, std::size_t> index;
  auto record = [&](const std::string& key, double v) {
    auto [it, inserted] = index.emplace(key, groups.size());
    if (inserted) groups.push_back({key, {}});
    groups[it->second].second.push_back(v);
  };

  for (const RunSummary& run : summaries) {
    const std::string method = run.method_label();
    for (const SeedResult& s : run.seeds) {
      const std::string seed = std::to_string(s.seed);
      switch (kind) {
        case PlotKind::flatness:
          if (!s.flatness) break;
          for (std::size_t i = 0; i < s.flatness->radii.size(); ++i) {
            const std::string x = method + "," + format_double(s.flatness->radii[i]);
            out << x << ',' << format_double(s.flatness->mean_loss_increase[i]) << ',' << seed << '\n';
            record(x, s.flatness->mean_loss_increase[i]);
          }
          break;
        case PlotKind::robustness:
          for (const RobustnessPoint& p : s.robustness) {
            const std::string x = method + "," + format_double(p.variance);
            out << x << ',' << format_double(p.acc_mm) << ',' << seed << '\n';
            record(x, p.acc_mm);
          }
          break;
        case PlotKind::modality_accuracy: {
          if (s.tests.empty()) break;
          const TestMetrics& t = s.tests.front();
          const std::string fx = method + ",fused";
          out << fx << ',' << format_double(t.acc_mm) << ',' << seed << '\n';
          record(fx, t.acc_mm);
          for (std::size_t k = 0; k < t.acc_uni.size(); ++k) {
            const std::string x = method + ",uni_" + std::to_string(k + 1);
            out << x << ',' << format_double(t.acc_uni[k]) << ',' << seed << '\n';
            record(x, t.acc_uni[k]);
          }
          break;
        }
        case PlotKind::training_curves:
          for (const MetricsRow& r : s.rows) {
            const std::string x = method + "," + std::to_string(r.epoch) + "," + r.split;
            out << x << ',' << format_double(r.loss_total) << ',' << format_double(r.acc_mm) << ','
                << seed << '\n';
            // Mean rows carry the mean accuracy; the loss column repeats the mean loss.
            record(x + "|loss", r.loss_total);
            record(x, r.acc_mm);
          }
          break;
      }
    }
  }

  if (kind == PlotKind::training_curves) {
    for (const auto& [key, values] : groups) {
      if (key.size() > 5 && key.compare(key.size() - 5, 5, "|loss") == 0) continue;
      const auto& losses = groups[index.at(key + "|loss")].second;
      out << key << ',' << format_double(aggregate(losses).mean) << ','
          << format_double(aggregate(values).mean) << ",mean\n";
    }
    return;
  }
  for (const auto& [key, values] : groups) {
    out << key << ',' << format_double(aggregate(values).mean) << ",mean\n";
  }
}

}  // namespace mmdg
