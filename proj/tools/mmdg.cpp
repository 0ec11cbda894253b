// Command-line driver: generate-data, train, evaluate, flatness, sweep, emit-plots.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmdg/checkpoint.hpp"
#include "mmdg/config.hpp"
#include "mmdg/experiment.hpp"
#include "mmdg/format.hpp"
#include "mmdg/summary_io.hpp"

namespace fs = std::filesystem;
using namespace mmdg;

namespace {

constexpr const char* kOutputRootEnv = "MMDG_OUTPUT_ROOT";

/// Config file, then MMDG_OUTPUT_ROOT, then --set, then per-key flags.
struct ConfigOptions {
  std::string path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", path, "experiment config file (INI)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override as section.key=value (repeatable)");
    for (const std::string& key : config_keys()) {
      std::string names = "--" + key;
      const std::string leaf = key.substr(key.find('.') + 1);
      if (key.rfind("experiment.", 0) == 0) names += ",--" + leaf;
      app->add_option_function<std::string>(
          names, [this, key](const std::string& v) { flags[key] = v; }, "config key " + key);
    }
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig::defaults() : load_config(path);
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
      cfg.output_dir = root;
    }
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      apply_setting(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    for (const auto& [key, value] : flags) apply_setting(cfg, key, value);
    cfg.validate();
    return cfg;
  }
};

fs::path output_root(const ExperimentConfig& cfg) { return fs::path(cfg.output_dir); }

void print_run(const RunSummary& run, const fs::path& dir) {
  std::vector<double> acc = run.test_accuracies();
  const AggregateStat a = aggregate(acc);
  std::cout << run.method_label() << " " << to_string(run.config.protocol) << " seeds=" << run.seeds.size()
            << " acc_mm=" << format_double(a.mean) << " std=" << format_double(a.std) << " -> "
            << dir.string() << '\n';
}

/// Run directory written by `train`: config.ini plus seed_<s>/selected.ckpt.
struct LoadedRun {
  RunSummary summary;
  fs::path dir;
};

LoadedRun load_run(const fs::path& dir) {
  if (!fs::exists(dir / "summary.json")) throw ConfigError("no summary.json in " + dir.string());
  return {load_summary(dir / "summary.json"), dir};
}

FusedParams reported_model(const Checkpoint& cp) {
  if (cp.teacher) return *cp.teacher;
  if (cp.student) return fused_part(*cp.student);
  throw ModelError("checkpoint has no parameters");
}

Checkpoint seed_checkpoint(const LoadedRun& run, std::uint64_t seed) {
  return load_checkpoint(run.dir / ("seed_" + std::to_string(seed)) / "selected.ckpt");
}

int cmd_generate(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out) {
  DataGenConfig d = cfg.data;
  d.seed = stream_seed(seed, SeedStream::data);
  const fs::path dir = out.empty() ? output_root(cfg) / (cfg.name + "_data_seed" + std::to_string(seed)) : fs::path(out);
  const MultiModalDataset ds = generate(d);
  export_dataset(ds, dir);
  std::cout << "dataset seed=" << seed << " domains=" << ds.domains.size() << " -> " << dir.string() << '\n';
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  const fs::path dir = output_root(cfg) / cfg.name;
  const RunSummary run = run_experiment(cfg, dir);
  print_run(run, dir);
  return 0;
}

int cmd_evaluate(const std::string& run_dir, const std::string& noise) {
  const LoadedRun run = load_run(run_dir);
  const ExperimentConfig& cfg = run.summary.config;
  const std::size_t m = cfg.data.modalities;
  std::optional<std::pair<std::size_t, double>> perturb;
  if (!noise.empty()) {
    const auto parts = split(noise, ':');
    if (parts.size() != 2) throw ConfigError("--noise expects <modality>:<variance>");
    const std::size_t k = std::stoul(parts[0]);
    if (k < 1 || k > m) throw ConfigError("--noise modality out of range");
    perturb = {{k - 1, parse_double(parts[1])}};
  }
  const fs::path out_path = run.dir / "evaluation.csv";
  std::ofstream out(out_path);
  out << "seed,split,domain,acc_mm,loss_mm";
  for (std::size_t k = 1; k <= m; ++k) out << ",acc_uni_" << k;
  out << '\n';
  std::vector<double> fused;
  for (const SeedResult& s : run.summary.seeds) {
    const Checkpoint cp = seed_checkpoint(run, s.seed);
    const ProtocolSplits splits = seed_splits(cfg, s.seed);
    const FusedParams model = reported_model(cp);
    for (const EvalSet& set : splits.tests) {
      SplitData data = set.data;
      if (perturb) {
        data = perturb_modality(data, perturb->first, perturb->second,
                                stream_seed(s.seed, SeedStream::perturb));
      }
      const EvalResult e = evaluate(model, data);
      out << s.seed << ',' << set.name << ",D" << set.domain_id + 1 << ',' << format_double(e.accuracy_fused)
          << ',' << format_double(e.loss_fused);
      if (cp.student) {
        const EvalResult u = evaluate(*cp.student, data);
        for (double a : u.accuracy_uni) out << ',' << format_double(a);
      } else {
        for (std::size_t k = 0; k < m; ++k) out << ',';
      }
      out << '\n';
      if (&set == &splits.tests.front()) fused.push_back(e.accuracy_fused);
    }
  }
  const AggregateStat a = aggregate(fused);
  std::cout << "evaluated " << fused.size() << " seeds acc_mm=" << format_double(a.mean)
            << " std=" << format_double(a.std) << " -> " << out_path.string() << '\n';
  return 0;
}

int cmd_flatness(const std::string& run_dir, const std::string& radii_text, std::size_t directions,
                 const std::string& split_name) {
  const LoadedRun run = load_run(run_dir);
  const ExperimentConfig& cfg = run.summary.config;
  std::vector<double> radii = cfg.flatness.radii;
  if (!radii_text.empty()) {
    radii.clear();
    for (const std::string& r : split(radii_text, ',')) radii.push_back(parse_double(trim(r)));
  }
  if (split_name != "test" && split_name != "val") throw ConfigError("--split must be test or val");
  for (const SeedResult& s : run.summary.seeds) {
    FusedParams params = reported_model(seed_checkpoint(run, s.seed));
    const ProtocolSplits splits = seed_splits(cfg, s.seed);
    const SplitData& data = split_name == "val" ? splits.val : splits.tests.front().data;
    std::vector<Tensor*> ptrs = param_pointers(params);
    const FlatnessCurve curve = probe(ptrs, [&] { return fused_loss(params, data); }, radii, directions,
                                      stream_seed(s.seed, SeedStream::flatness));
    const fs::path path = run.dir / ("seed_" + std::to_string(s.seed)) / "flatness.csv";
    std::ofstream out(path);
    write_curve_csv(curve, out);
    std::cout << "seed " << s.seed << " -> " << path.string() << '\n';
  }
  return 0;
}

int cmd_sweep(ExperimentConfig cfg, const std::string& axis, const std::string& values_text,
              const std::string& methods_text) {
  std::vector<std::string> values;
  for (const std::string& v : split(values_text, ',')) values.push_back(trim(v));
  std::vector<Method> methods{cfg.method};
  if (!methods_text.empty()) {
    methods.clear();
    for (const std::string& m : split(methods_text, ',')) methods.push_back(parse_method(trim(m)));
  }
  const fs::path root = output_root(cfg) / (cfg.name + "_sweep");
  fs::create_directories(root);
  std::ofstream out(root / "sweep.csv");
  bool header = true;
  for (Method method : methods) {
    ExperimentConfig c = cfg;
    c.method = method;
    const fs::path dir = root / to_string(method);
    const std::vector<RunSummary> runs = run_sweep(c, axis, values, dir);
    std::ostringstream table;
    write_sweep_csv(axis, values, runs, table);
    std::string text = table.str();
    if (!header) text = text.substr(text.find('\n') + 1);
    header = false;
    out << text;
  }
  std::cout << "sweep " << axis << " over " << values.size() << " values -> " << (root / "sweep.csv").string()
            << '\n';
  return 0;
}

int cmd_emit(const std::vector<std::string>& run_dirs, const std::string& kind_text, const std::string& out_path) {
  const PlotKind kind = parse_plot_kind(kind_text);
  std::vector<RunSummary> summaries;
  for (const std::string& d : run_dirs) summaries.push_back(load_run(d).summary);
  if (out_path.empty() || out_path == "-") {
    emit_plot_data(summaries, kind, std::cout);
  } else {
    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot write " + out_path);
    emit_plot_data(summaries, kind, out);
  }
  return 0;
}

int fail(const char* type, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", type}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal domain generalization lab"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-data", "write a synthetic dataset as CSV");
  ConfigOptions gen_cfg;
  gen_cfg.attach(gen);
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "experiment seed (the data stream is derived from it)");
  gen->add_option("-o,--out", gen_out, "output directory");

  auto* train = app.add_subcommand("train", "train every configured seed and write a run directory");
  ConfigOptions train_cfg;
  train_cfg.attach(train);

  auto* eval = app.add_subcommand("evaluate", "re-evaluate the checkpoints of a run");
  std::string eval_run, eval_noise;
  eval->add_option("run", eval_run, "run directory")->required();
  eval->add_option("--noise", eval_noise, "test-time noise as <modality>:<variance> (1-based)");

  auto* flat = app.add_subcommand("flatness", "probe loss flatness around the checkpoints of a run");
  std::string flat_run, flat_radii, flat_split = "test";
  std::size_t flat_dirs = 32;
  flat->add_option("run", flat_run, "run directory")->required();
  flat->add_option("--radii", flat_radii, "comma-separated radii");
  flat->add_option("--directions", flat_dirs, "random directions per radius")->check(CLI::PositiveNumber);
  flat->add_option("--split", flat_split, "test or val");

  auto* sweep = app.add_subcommand("sweep", "one run per value of a config key");
  ConfigOptions sweep_cfg;
  sweep_cfg.attach(sweep);
  std::string sweep_axis, sweep_values, sweep_methods;
  sweep->add_option("--axis", sweep_axis, "config key, or robustness.variance")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep->add_option("--methods", sweep_methods, "comma-separated methods (default: the config's)");

  auto* emit = app.add_subcommand("emit-plots", "tidy CSV for one plot from run summaries");
  std::vector<std::string> emit_runs;
  std::string emit_kind, emit_out;
  emit->add_option("runs", emit_runs, "run directories")->required();
  emit->add_option("--kind", emit_kind, "flatness, robustness, modality_accuracy or training_curves")->required();
  emit->add_option("-o,--out", emit_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*gen) return cmd_generate(gen_cfg.resolve(), gen_seed, gen_out);
    if (*train) return cmd_train(train_cfg.resolve());
    if (*eval) return cmd_evaluate(eval_run, eval_noise);
    if (*flat) return cmd_flatness(flat_run, flat_radii, flat_dirs, flat_split);
    if (*sweep) return cmd_sweep(sweep_cfg.resolve(), sweep_axis, sweep_values, sweep_methods);
    if (*emit) return cmd_emit(emit_runs, emit_kind, emit_out);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const DataError& e) {
    return fail("data", e.what(), 3);
  } catch (const TrainingError& e) {
    return fail("training", e.what(), 4);
  } catch (const OptimizerError& e) {
    return fail("training", e.what(), 4);
  } catch (const ModelError& e) {
    return fail("model", e.what(), 5);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
