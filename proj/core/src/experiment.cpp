#include "mmdg/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "mmdg/config.hpp"
#include "mmdg/format.hpp"
#include "mmdg/rng.hpp"

namespace mmdg {

std::string to_string(Method m) {
  switch (m) {
    case Method::mbcd: return "mbcd";
    case Method::erm: return "erm";
    case Method::ema_only: return "ema_only";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "mbcd") return Method::mbcd;
  if (text == "erm") return Method::erm;
  if (text == "ema_only") return Method::ema_only;
  throw ConfigError("unknown method '" + text + "' (expected mbcd, erm or ema_only)");
}

std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.data.modalities = 3;
  c.data.num_domains = 3;
  c.data.num_classes = 4;
  c.data.latent_dim = 8;
  c.data.train_per_domain = 600;
  c.data.val_per_domain = 150;
  c.data.test_per_domain = 750;
  c.data.input_dims = {16, 16, 16};
  // Modality 1 dominates on the sources but is the only one that shifts
  // across domains.
  c.data.snr = {3.0, 0.6, 0.6};
  c.data.noise_std = {1.0, 1.0, 1.0};
  c.data.domain_shift = {1.5, 0.0, 0.0};
  c.data.centroid_scale = 3.5;
  c.data.mean_shift_scale = 1.0;
  c.model.modalities = 3;
  c.model.input_dims = {16, 16, 16};
  c.model.hidden_dims = {32, 32, 32};
  c.model.feature_dims = {16, 16, 16};
  c.model.num_classes = 4;
  // 1e-4 leaves every method underfit after 30 epochs at this scale
  c.train.learning_rate = 3e-3;
  return c;
}

void ExperimentConfig::validate() const {
  try {
    data.validate();
    model.validate();
    train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (model.modalities != data.modalities) {
    throw ConfigError("model.modalities (" + std::to_string(model.modalities) +
                      ") differs from data.modalities (" + std::to_string(data.modalities) + ")");
  }
  if (model.num_classes != data.num_classes) {
    throw ConfigError("model.num_classes differs from data.num_classes");
  }
  if (model.input_dims != data.input_dims) {
    throw ConfigError("model.input_dims differs from data.input_dims");
  }
  if (domain >= data.num_domains) {
    throw ConfigError("domain D" + std::to_string(domain + 1) + " does not exist (" +
                      std::to_string(data.num_domains) + " domains)");
  }
  if (protocol != Protocol::in_domain && data.num_domains < 2) {
    throw ConfigError("cross-domain protocols need at least two domains");
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (flatness.enabled) {
    if (flatness.n_directions < 1) throw ConfigError("flatness.n_directions must be >= 1");
    if (flatness.split != "test" && flatness.split != "val") {
      throw ConfigError("flatness.split must be 'test' or 'val'");
    }
    for (std::size_t i = 0; i < flatness.radii.size(); ++i) {
      if (!(flatness.radii[i] >= 0.0) || (i > 0 && flatness.radii[i] < flatness.radii[i - 1])) {
        throw ConfigError("flatness.radii must be non-negative and ascending");
      }
    }
  }
  if (robustness.modality >= data.modalities) {
    throw ConfigError("robustness.modality out of range");
  }
  for (double v : robustness.variances) {
    if (!(v >= 0.0)) throw ConfigError("robustness.variances must be non-negative");
  }
}

AggregateStat aggregate(const std::vector<double>& values) {
  AggregateStat out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

std::string RunSummary::method_label() const {
  std::string label = to_string(config.method);
  if (config.method == Method::mbcd) {
    const MbcdConfig& t = config.train;
    if (!t.amd_enabled) label += "-amd";
    if (!t.gcc_enabled) label += "-gcc";
    if (!t.distill_enabled) label += "-dis";
    if (!t.ema_enabled) label += "-ema";
  }
  return label;
}

std::vector<double> RunSummary::test_accuracies() const {
  std::vector<double> out;
  for (const SeedResult& s : seeds) out.push_back(s.tests.at(0).acc_mm);
  return out;
}

namespace {

/// Training flags actually in force for a method.
MbcdConfig effective_train_config(const ExperimentConfig& config) {
  MbcdConfig t = config.train;
  switch (config.method) {
    case Method::mbcd: break;
    case Method::erm:
      t.amd_enabled = t.gcc_enabled = t.distill_enabled = t.ema_enabled = false;
      if (t.eval_model != EvalModel::student) t.eval_model = EvalModel::student;
      break;
    case Method::ema_only:
      t.amd_enabled = t.gcc_enabled = t.distill_enabled = false;
      t.ema_enabled = true;
      break;
  }
  return t;
}

StepMetrics run_step(Method method, TrainerState& state, const MultiModalBatch& batch,
                     const MbcdConfig& t) {
  switch (method) {
    case Method::mbcd: return train_step_mbcd(state, batch, t);
    case Method::erm: return train_step_erm(state, batch);
    case Method::ema_only: return train_step_ema_only(state, batch, t.ema_beta);
  }
  throw TrainingError("unknown method");
}

/// Evaluation of whichever model is being reported. Uni-modal branches exist only
/// on the student, so their numbers always come from it.
struct Evaluation {
  EvalResult fused;
  EvalResult student;
};

Evaluation evaluate_model(const TrainerState& state, bool teacher, const SplitData& split) {
  Evaluation e;
  e.student = evaluate(state.student, split);
  e.fused = teacher ? evaluate(state.teacher, split) : e.student;
  return e;
}

MetricsRow eval_row(std::size_t step, std::size_t epoch, const std::string& split,
                    const Evaluation& e) {
  MetricsRow row;
  row.step = step;
  row.epoch = epoch;
  row.split = split;
  row.loss_mm = e.fused.loss_fused;
  row.loss_uni = e.student.loss_uni;
  row.loss_total = row.loss_mm;
  for (double l : row.loss_uni) row.loss_total += l;
  row.acc_mm = e.fused.accuracy_fused;
  row.acc_uni = e.student.accuracy_uni;
  return row;
}

TestMetrics test_metrics(const EvalSet& set, const Evaluation& e) {
  return TestMetrics{set.name, set.domain_id, e.fused.accuracy_fused, e.fused.loss_fused,
                     e.student.accuracy_uni};
}

}  // namespace

ProtocolSplits seed_splits(const ExperimentConfig& config, std::uint64_t seed) {
  DataGenConfig data_cfg = config.data;
  data_cfg.seed = stream_seed(seed, SeedStream::data);
  ProtocolSplits splits = make_splits(generate(data_cfg), config.protocol, config.domain);
  assert_no_leakage(splits);
  return splits;
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  const MbcdConfig t = effective_train_config(config);
  const EvalModel eval_model = t.resolved_eval_model();
  const bool primary_teacher = eval_model == EvalModel::teacher || eval_model == EvalModel::both;

  const ProtocolSplits splits = seed_splits(config, seed);

  ModelConfig model_cfg = config.model;
  model_cfg.init_seed = stream_seed(seed, SeedStream::init);
  TrainerState state = TrainerState::create(init_params(model_cfg), t.learning_rate,
                                            stream_seed(seed, SeedStream::trainer));
  Rng batch_rng(stream_seed(seed, SeedStream::batches));

  SeedResult result;
  result.seed = seed;
  const std::size_t m = config.data.modalities;
  std::vector<std::size_t> order(splits.train.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_val = -1.0;

  for (std::size_t epoch = 1; epoch <= t.epochs; ++epoch) {
    batch_rng.shuffle(order);
    MetricsRow train;
    train.split = "train";
    train.epoch = epoch;
    train.loss_uni.assign(m, 0.0);
    train.s.assign(m, 0.0);
    train.r.assign(m, 0.0);
    train.p.assign(m, 0.0);
    train.dropped.assign(m, 0.0);
    double loss_dis = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += t.batch_size) {
      const std::size_t end = std::min(order.size(), begin + t.batch_size);
      const MultiModalBatch batch =
          take_rows(splits.train, std::span<const std::size_t>(order).subspan(begin, end - begin));
      const StepMetrics sm = run_step(config.method, state, batch, t);
      train.loss_total += sm.loss_total;
      train.loss_mm += sm.loss_mm;
      loss_dis += sm.loss_dis;
      for (std::size_t k = 0; k < m; ++k) {
        train.loss_uni[k] += sm.loss_uni[k];
        if (!sm.stats.s.empty()) {
          train.s[k] += sm.stats.s[k];
          train.r[k] += sm.stats.r[k];
          train.p[k] += sm.stats.drop_prob[k];
        }
        train.dropped[k] += 1.0 - sm.stats.mask[k];
      }
      ++steps;
    }
    const double n = static_cast<double>(steps);
    train.step = state.step;
    train.loss_total /= n;
    train.loss_mm /= n;
    train.loss_dis = loss_dis / n;
    for (std::size_t k = 0; k < m; ++k) {
      train.loss_uni[k] /= n;
      train.s[k] /= n;
      train.r[k] /= n;
      train.p[k] /= n;
      train.dropped[k] /= n;
    }
    const EvalResult train_eval = evaluate(state.student, splits.train);
    train.acc_mm = train_eval.accuracy_fused;
    train.acc_uni = train_eval.accuracy_uni;
    result.rows.push_back(train);

    const Evaluation val = evaluate_model(state, primary_teacher, splits.val);
    result.rows.push_back(eval_row(state.step, epoch, "val", val));
    std::vector<TestMetrics> tests, tests_student;
    for (const EvalSet& set : splits.tests) {
      const Evaluation e = evaluate_model(state, primary_teacher, set.data);
      result.rows.push_back(eval_row(state.step, epoch, set.name, e));
      tests.push_back(test_metrics(set, e));
    }
    if (eval_model == EvalModel::both) {
      const Evaluation sv = evaluate_model(state, false, splits.val);
      result.rows.push_back(eval_row(state.step, epoch, "val_student", sv));
      for (const EvalSet& set : splits.tests) {
        const Evaluation e = evaluate_model(state, false, set.data);
        result.rows.push_back(eval_row(state.step, epoch, set.name + "_student", e));
        tests_student.push_back(test_metrics(set, e));
      }
    }

    if (val.fused.accuracy_fused > best_val) {
      best_val = val.fused.accuracy_fused;
      result.selected_epoch = epoch;
      result.selected_val_acc = best_val;
      result.tests = std::move(tests);
      result.tests_student = std::move(tests_student);
      result.selected_student = state.student;
      result.selected_teacher = state.teacher;
    }
  }

  const FusedParams probed =
      primary_teacher ? result.selected_teacher : fused_part(result.selected_student);
  const SplitData& primary_test = splits.tests.front().data;

  const std::uint64_t perturb_seed = stream_seed(seed, SeedStream::perturb);
  for (double variance : config.robustness.variances) {
    // Same draws for every variance, scaled by its standard deviation.
    const SplitData noisy =
        perturb_modality(primary_test, config.robustness.modality, variance, perturb_seed);
    result.robustness.push_back({variance, evaluate(probed, noisy).accuracy_fused,
                                 evaluate(result.selected_student, noisy).accuracy_uni});
  }

  if (config.flatness.enabled) {
    FusedParams params = probed;
    const SplitData& split = config.flatness.split == "val" ? splits.val : primary_test;
    std::vector<Tensor*> ptrs = param_pointers(params);
    result.flatness = probe(ptrs, [&] { return fused_loss(params, split); }, config.flatness.radii,
                            config.flatness.n_directions, stream_seed(seed, SeedStream::flatness));
  }
  return result;
}

RunSummary run_experiment(const ExperimentConfig& config,
                          const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunSummary summary;
  summary.config = config;
  try {
    for (std::uint64_t seed : config.seeds) summary.seeds.push_back(run_seed(config, seed));
  } catch (const std::exception& e) {
    if (out_dir) {
      summary.wall_clock_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_run_outputs(summary, *out_dir);
      std::ofstream(*out_dir / "FAILED") << e.what() << '\n';
    }
    throw;
  }
  summary.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (out_dir) write_run_outputs(summary, *out_dir);
  return summary;
}

std::vector<RunSummary> run_sweep(const ExperimentConfig& base, const std::string& axis,
                                  const std::vector<std::string>& values,
                                  const std::optional<std::filesystem::path>& out_dir) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<RunSummary> runs;
  if (axis == "robustness.variance") {
    ExperimentConfig cfg = base;
    cfg.robustness.variances.clear();
    for (const std::string& v : values) cfg.robustness.variances.push_back(parse_double(v));
    cfg.name = base.name + "_" + axis;
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / axis;
    runs.push_back(run_experiment(cfg, dir));
    return runs;
  }
  for (const std::string& v : values) {
    ExperimentConfig cfg = base;
    apply_setting(cfg, axis, v);
    cfg.name = base.name + "_" + axis + "=" + v;
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / (axis + "=" + v);
    runs.push_back(run_experiment(cfg, dir));
  }
  return runs;
}

void write_sweep_csv(const std::string& axis, const std::vector<std::string>& values,
                     const std::vector<RunSummary>& runs, std::ostream& out) {
  const bool noise_axis = axis == "robustness.variance";
  if (noise_axis ? runs.size() != 1 : runs.size() != values.size()) {
    throw ConfigError("write_sweep_csv: run count does not match the sweep values");
  }
  const std::size_t m = runs.front().config.data.modalities;
  out << "axis,value,method,seed,acc_mm";
  for (std::size_t k = 1; k <= m; ++k) out << ",acc_uni_" << k;
  out << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) {
    const RunSummary& run = noise_axis ? runs.front() : runs[i];
    std::vector<double> fused;
    std::vector<std::vector<double>> uni(m);
    for (const SeedResult& s : run.seeds) {
      double acc_mm = 0.0;
      std::vector<double> acc_uni;
      if (noise_axis) {
        acc_mm = s.robustness.at(i).acc_mm;
        acc_uni = s.robustness.at(i).acc_uni;
      } else {
        acc_mm = s.tests.front().acc_mm;
        acc_uni = s.tests.front().acc_uni;
      }
      out << axis << ',' << values[i] << ',' << run.method_label() << ',' << s.seed << ','
          << format_double(acc_mm);
      for (std::size_t k = 0; k < m; ++k) {
        out << ',' << format_double(acc_uni.at(k));
        uni[k].push_back(acc_uni[k]);
      }
      out << '\n';
      fused.push_back(acc_mm);
    }
    for (const char* stat : {"mean", "std"}) {
      const bool mean = std::string(stat) == "mean";
      auto pick = [&](const std::vector<double>& v) {
        const AggregateStat a = aggregate(v);
        return mean ? a.mean : a.std;
      };
      out << axis << ',' << values[i] << ',' << run.method_label() << ',' << stat << ','
          << format_double(pick(fused));
      for (std::size_t k = 0; k < m; ++k) out << ',' << format_double(pick(uni[k]));
      out << '\n';
    }
  }
}

std::vector<std::string> metrics_columns(std::size_t modalities) {
  std::vector<std::string> cols{"step", "epoch", "split", "loss_total", "loss_mm"};
  auto per_modality = [&](const std::string& prefix) {
    for (std::size_t k = 1; k <= modalities; ++k) cols.push_back(prefix + std::to_string(k));
  };
  per_modality("loss_uni_");
  cols.push_back("loss_dis");
  cols.push_back("acc_mm");
  per_modality("acc_uni_");
  per_modality("s_");
  per_modality("r_");
  per_modality("p_");
  per_modality("dropped_");
  return cols;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::size_t modalities,
                       std::ostream& out) {
  const std::vector<std::string> cols = metrics_columns(modalities);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  auto list = [&](const std::vector<double>& v) {
    for (std::size_t k = 0; k < modalities; ++k) {
      out << ',';
      if (k < v.size()) out << format_double(v[k]);
    }
  };
  for (const MetricsRow& r : rows) {
    out << r.step << ',' << r.epoch << ',' << r.split << ',' << format_double(r.loss_total) << ','
        << format_double(r.loss_mm);
    list(r.loss_uni);
    out << ',';
    if (r.loss_dis) out << format_double(*r.loss_dis);
    out << ',' << format_double(r.acc_mm);
    list(r.acc_uni);
    list(r.s);
    list(r.r);
    list(r.p);
    list(r.dropped);
    out << '\n';
  }
}

}  // namespace mmdg
