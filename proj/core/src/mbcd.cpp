#include "mmdg/mbcd.hpp"

#include <algorithm>
#include <cmath>

namespace mmdg {

std::string to_string(EvalModel m) {
  switch (m) {
    case EvalModel::automatic: return "auto";
    case EvalModel::teacher: return "teacher";
    case EvalModel::student: return "student";
    case EvalModel::both: return "both";
  }
  return "?";
}

EvalModel parse_eval_model(const std::string& text) {
  if (text == "auto") return EvalModel::automatic;
  if (text == "teacher") return EvalModel::teacher;
  if (text == "student") return EvalModel::student;
  if (text == "both") return EvalModel::both;
  throw std::invalid_argument("unknown eval model '" + text + "'");
}

void MbcdConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("mbcd: lambda must be >= 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("mbcd: alpha must be > 0");
  if (!(ema_beta >= 0.0 && ema_beta < 1.0)) {
    throw std::invalid_argument("mbcd: ema_beta must lie in [0, 1)");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("mbcd: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("mbcd: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("mbcd: epochs must be >= 1");
  if (!ema_enabled && eval_model == EvalModel::teacher) {
    throw std::invalid_argument("mbcd: eval_model=teacher requires ema_enabled");
  }
}

EvalModel MbcdConfig::resolved_eval_model() const {
  if (eval_model != EvalModel::automatic) return eval_model;
  return ema_enabled ? EvalModel::teacher : EvalModel::student;
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------

std::vector<double> confidence_scores(std::span<const Tensor> uni_logits) {
  std::vector<double> s;
  for (const Tensor& logits : uni_logits) {
    if (logits.rank() != 2 || logits.shape()[0] == 0) {
      throw TrainingError("confidence_scores: expected non-empty [batch, classes] logits");
    }
    if (!logits.all_finite()) throw TrainingError("confidence_scores: non-finite logits");
    const Tensor probs = softmax_rows(logits);
    double total = 0.0;
    for (std::size_t r = 0; r < probs.row_count(); ++r) {
      auto row = probs.row(r);
      total += *std::max_element(row.begin(), row.end());
    }
    s.push_back(total);
  }
  return s;
}

std::vector<double> relative_speed(std::span<const double> s) {
  const std::size_t m = s.size();
  if (m < 2) throw TrainingError("relative_speed: needs at least two modalities");
  for (double v : s) {
    if (!(v > 0.0)) throw TrainingError("relative_speed: confidence scores must be positive");
  }
  std::vector<double> r(m, 0.0);
  for (std::size_t k = 0; k < m; ++k) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != k) total += s[k] / s[j];
    }
    r[k] = total / static_cast<double>(m - 1);
  }
  return r;
}

std::vector<double> drop_probabilities(std::span<const double> r) {
  std::vector<double> p;
  p.reserve(r.size());
  for (double v : r) p.push_back(std::tanh(std::max(v - 1.0, 0.0)));
  return p;
}

std::vector<double> sample_dropout_mask(std::span<const double> r, Rng& rng) {
  const std::vector<double> p = drop_probabilities(r);
  std::vector<double> mask(p.size(), 1.0);
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (rng.bernoulli(p[k])) mask[k] = 0.0;
  }
  return mask;
}

ConfidenceStats confidence_stats(std::span<const Tensor> uni_logits, Rng& rng) {
  ConfidenceStats stats;
  stats.s = confidence_scores(uni_logits);
  stats.r = relative_speed(stats.s);
  stats.drop_prob = drop_probabilities(stats.r);
  stats.mask = sample_dropout_mask(stats.r, rng);
  return stats;
}

// ---------------------------------------------------------------------------

namespace {

LinearT<Tensor> step_linear(const LinearT<Tensor>& p, const Tensor& gw, const Tensor& gb,
                            double alpha) {
  LinearT<Tensor> out = p;
  for (std::size_t i = 0; i < out.weight.size(); ++i) out.weight[i] -= alpha * gw[i];
  for (std::size_t i = 0; i < out.bias.size(); ++i) out.bias[i] -= alpha * gb[i];
  return out;
}

/// Runs the forward pass of one loss term; tensor errors (non-finite inputs to
/// softmax and friends) are reported against the term.
template <class F>
Var loss_term(const std::string& term, F&& forward) {
  try {
    return forward();
  } catch (const TensorError& e) {
    throw TrainingError("non-finite " + term + ": " + e.what());
  }
}

void check_finite(double v, const std::string& term) {
  if (!std::isfinite(v)) throw TrainingError("non-finite " + term + " (" + std::to_string(v) + ")");
}

std::vector<Tensor> collect_grads(const ModelVars& vars, const Gradients& g) {
  std::vector<Tensor> out;
  visit_params(vars, [&](const std::string&, const Var& v) { out.push_back(g[v]); });
  return out;
}

void apply_adam(TrainerState& state, const ModelVars& vars, const Gradients& g) {
  std::vector<Tensor*> params = param_pointers(state.student);
  std::vector<Tensor> grads = collect_grads(vars, g);
  const std::vector<std::string> names = param_names(state.student);
  try {
    adam_step(params, grads, state.optimizer, names);
  } catch (const OptimizerError& e) {
    throw TrainingError(e.what());
  }
}

Var sum_all(std::span<const Var> terms) {
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

/// Teacher fused probabilities with every modality kept, as plain values.
Tensor teacher_probs(const FusedParams& teacher, const MultiModalBatch& batch) {
  Tape tape;
  FusedVars tv = bind(tape, teacher, false);
  std::vector<Var> feats;
  for (std::size_t k = 0; k < tv.encoders.size(); ++k) {
    feats.push_back(encode(tv.encoders[k], tape.constant(batch.modalities[k])));
  }
  const std::vector<double> ones(feats.size(), 1.0);
  return softmax_rows(fused_logits(tv.fused_head, feats, ones).value());
}

void check_batch(const ModelParams& student, const MultiModalBatch& batch) {
  if (batch.rows() == 0) throw TrainingError("empty batch");
  if (batch.modalities.size() != student.encoders.size()) {
    throw TrainingError("batch has " + std::to_string(batch.modalities.size()) +
                        " modalities, model has " + std::to_string(student.encoders.size()));
  }
}

}  // namespace

EncoderT<Tensor> inner_update(const ModelParams& student, std::size_t k,
                              const MultiModalBatch& batch, double alpha) {
  if (k >= student.encoders.size()) throw TrainingError("inner_update: modality out of range");
  if (!(alpha >= 0.0)) throw TrainingError("inner_update: alpha must be non-negative");
  Tape tape;
  EncoderT<Var> enc{{tape.leaf(student.encoders[k].hidden.weight),
                     tape.leaf(student.encoders[k].hidden.bias)},
                    {tape.leaf(student.encoders[k].output.weight),
                     tape.leaf(student.encoders[k].output.bias)}};
  LinearVars head{tape.constant(student.uni_heads[k].weight),
                  tape.constant(student.uni_heads[k].bias)};
  Var loss = cross_entropy(uni_logits(head, encode(enc, tape.constant(batch.modalities[k]))),
                           batch.labels);
  const Gradients g = tape.backward(loss);
  for (const Var& v : {enc.hidden.weight, enc.hidden.bias, enc.output.weight, enc.output.bias}) {
    if (!g[v].all_finite()) {
      throw TrainingError("inner_update: non-finite gradient for encoder " + std::to_string(k));
    }
  }
  const EncoderT<Tensor>& e = student.encoders[k];
  return {step_linear(e.hidden, g[enc.hidden.weight], g[enc.hidden.bias], alpha),
          step_linear(e.output, g[enc.output.weight], g[enc.output.bias], alpha)};
}

double taylor_residual(const BlockObjective& inner, const BlockObjective& outer,
                       std::span<const Tensor> blocks, double alpha) {
  const BlockEval g_inner = inner(blocks);
  const BlockEval at_theta = outer(blocks);
  if (g_inner.grad.size() != blocks.size() || at_theta.grad.size() != blocks.size()) {
    throw TrainingError("taylor_residual: objective returned wrong number of gradient blocks");
  }
  std::vector<Tensor> stepped(blocks.begin(), blocks.end());
  double inner_product = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < stepped[b].size(); ++i) {
      stepped[b][i] -= alpha * g_inner.grad[b][i];
      inner_product += g_inner.grad[b][i] * at_theta.grad[b][i];
    }
  }
  const double at_stepped = outer(stepped).value;
  return std::abs(at_stepped - (at_theta.value - alpha * inner_product));
}

double taylor_residual(const ModelParams& student, const MultiModalBatch& batch, double alpha) {
  check_batch(student, batch);
  const std::size_t m = student.encoders.size();
  // Blocks: the four encoder tensors of every modality, in visit order.
  std::vector<Tensor> blocks;
  for (const auto& e : student.encoders) {
    blocks.insert(blocks.end(), {e.hidden.weight, e.hidden.bias, e.output.weight, e.output.bias});
  }
  auto bind_encoders = [m](Tape& tape, std::span<const Tensor> b) {
    std::vector<EncoderVars> encs;
    for (std::size_t k = 0; k < m; ++k) {
      encs.push_back({{tape.leaf(b[4 * k]), tape.leaf(b[4 * k + 1])},
                      {tape.leaf(b[4 * k + 2]), tape.leaf(b[4 * k + 3])}});
    }
    return encs;
  };
  auto grads_of = [](const std::vector<EncoderVars>& encs, const Gradients& g) {
    std::vector<Tensor> out;
    for (const auto& e : encs) {
      for (const Var& v : {e.hidden.weight, e.hidden.bias, e.output.weight, e.output.bias}) {
        out.push_back(g[v]);
      }
    }
    return out;
  };

  BlockObjective inner = [&](std::span<const Tensor> b) {
    Tape tape;
    auto encs = bind_encoders(tape, b);
    std::vector<Var> losses;
    for (std::size_t k = 0; k < m; ++k) {
      LinearVars head{tape.constant(student.uni_heads[k].weight),
                      tape.constant(student.uni_heads[k].bias)};
      Var feat = encode(encs[k], tape.constant(batch.modalities[k]));
      losses.push_back(cross_entropy(uni_logits(head, feat), batch.labels));
    }
    Var total = sum_all(losses);
    return BlockEval{total.value().item(), grads_of(encs, tape.backward(total))};
  };
  BlockObjective outer = [&](std::span<const Tensor> b) {
    Tape tape;
    auto encs = bind_encoders(tape, b);
    std::vector<Var> feats;
    for (std::size_t k = 0; k < m; ++k) {
      feats.push_back(encode(encs[k], tape.constant(batch.modalities[k])));
    }
    LinearVars head{tape.constant(student.fused_head.weight), tape.constant(student.fused_head.bias)};
    const std::vector<double> ones(m, 1.0);
    Var loss = cross_entropy(fused_logits(head, feats, ones), batch.labels);
    return BlockEval{loss.value().item(), grads_of(encs, tape.backward(loss))};
  };
  return taylor_residual(inner, outer, blocks, alpha);
}

// ---------------------------------------------------------------------------

void ema_update(FusedParams& teacher, const ModelParams& student, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw TrainingError("ema_update: beta must lie in [0, 1)");
  const FusedParams tracked = fused_part(student);
  std::vector<Tensor*> dst = param_pointers(teacher);
  std::vector<const Tensor*> src = param_pointers(tracked);
  if (dst.size() != src.size()) throw TrainingError("ema_update: teacher/student layout differs");
  const std::vector<std::string> names = param_names(teacher);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != src[i]->shape()) {
      throw TrainingError("ema_update: shape drift in " + names[i] + ": teacher " +
                          to_string(dst[i]->shape()) + " vs student " +
                          to_string(src[i]->shape()));
    }
    Tensor& t = *dst[i];
    const Tensor& s = *src[i];
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = beta * t[j] + (1.0 - beta) * s[j];
  }
}

namespace {
void check_distribution_rows(const Tensor& probs, const std::string& what) {
  for (std::size_t r = 0; r < probs.row_count(); ++r) {
    double sum = 0.0;
    for (double v : probs.row(r)) {
      if (v < 0.0 || !std::isfinite(v)) {
        throw TrainingError("distillation_loss: " + what + " has an invalid probability");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw TrainingError("distillation_loss: " + what + " row " + std::to_string(r) +
                          " sums to " + std::to_string(sum));
    }
  }
}
}  // namespace

Var distillation_loss(const Tensor& teacher_probs, Var student_fused_probs,
                      std::span<const Var> student_uni_probs) {
  check_distribution_rows(teacher_probs, "teacher");
  check_distribution_rows(student_fused_probs.value(), "student fused");
  for (const Var& p : student_uni_probs) check_distribution_rows(p.value(), "student uni");
  Tape& tape = student_fused_probs.tape();
  Var target = tape.constant(teacher_probs);
  Var total = kl_divergence(target, student_fused_probs);
  for (const Var& p : student_uni_probs) total = add(total, kl_divergence(target, p));
  return total;
}

double distillation_loss(const Tensor& teacher_probs, const Tensor& student_fused_probs,
                         std::span<const Tensor> student_uni_probs) {
  Tape tape;
  Var fused = tape.constant(student_fused_probs);
  std::vector<Var> uni;
  for (const Tensor& p : student_uni_probs) uni.push_back(tape.constant(p));
  return distillation_loss(teacher_probs, fused, uni).value().item();
}

// ---------------------------------------------------------------------------

TrainerState TrainerState::create(ModelParams student, double learning_rate, std::uint64_t seed) {
  TrainerState state;
  state.teacher = fused_part(student);
  AdamConfig cfg;
  cfg.learning_rate = learning_rate;
  state.optimizer = AdamState::for_params(param_pointers(std::as_const(student)), cfg);
  state.student = std::move(student);
  state.rng = Rng(seed);
  return state;
}

StepMetrics train_step_mbcd(TrainerState& state, const MultiModalBatch& batch,
                            const MbcdConfig& config) {
  check_batch(state.student, batch);
  const std::size_t m = state.student.encoders.size();
  StepMetrics metrics;

  Tape tape;
  const ModelVars sv = bind(tape, state.student, true);
  std::vector<Var> inputs, feats, uni_logit_vars, uni_losses;
  for (std::size_t k = 0; k < m; ++k) {
    inputs.push_back(tape.constant(batch.modalities[k]));
    uni_losses.push_back(loss_term("loss_uni_" + std::to_string(k + 1), [&] {
      feats.push_back(encode(sv.encoders[k], inputs[k]));
      uni_logit_vars.push_back(uni_logits(sv.uni_heads[k], feats[k]));
      return cross_entropy(uni_logit_vars[k], batch.labels);
    }));
  }

  // (1) confidence at the pre-step encoders, then the dropout mask.
  std::vector<Tensor> logit_values;
  for (const Var& v : uni_logit_vars) logit_values.push_back(v.value());
  if (m >= 2) {
    metrics.stats.s = confidence_scores(logit_values);
    metrics.stats.r = relative_speed(metrics.stats.s);
    metrics.stats.drop_prob = drop_probabilities(metrics.stats.r);
  } else {
    metrics.stats.s = confidence_scores(logit_values);
    metrics.stats.r = {1.0};
    metrics.stats.drop_prob = {0.0};
  }
  metrics.stats.mask = config.amd_enabled ? sample_dropout_mask(metrics.stats.r, state.rng)
                                          : std::vector<double>(m, 1.0);

  // (2) inner step. theta'_k = theta_k - alpha * g_k with g_k held constant, so the
  // outer gradient reaches theta_k through an identity edge.
  std::vector<Var> fused_feats = feats;
  if (config.gcc_enabled) {
    const Gradients inner = tape.backward(sum_all(uni_losses));
    for (std::size_t k = 0; k < m; ++k) {
      const EncoderVars& e = sv.encoders[k];
      auto shift = [&](Var p) {
        Tensor step = inner[p];
        if (!step.all_finite()) {
          throw TrainingError("non-finite inner gradient for encoder " + std::to_string(k + 1));
        }
        for (double& v : step.values()) v *= config.alpha;
        return sub(p, tape.constant(std::move(step)));
      };
      EncoderVars stepped{{shift(e.hidden.weight), shift(e.hidden.bias)},
                          {shift(e.output.weight), shift(e.output.bias)}};
      fused_feats[k] = encode(stepped, inputs[k]);
    }
  }

  // (3) fused loss with the dropout mask.
  Var fused = loss_term("loss_mm", [&] { return fused_logits(sv.fused_head, fused_feats, metrics.stats.mask); });
  Var loss_mm = loss_term("loss_mm", [&] { return cross_entropy(fused, batch.labels); });

  // (5) total = L_mm + sum_k L_uni_k [+ lambda * L_dis]
  std::vector<Var> terms{loss_mm};
  terms.insert(terms.end(), uni_losses.begin(), uni_losses.end());
  Var total = sum_all(terms);
  metrics.loss_mm = loss_mm.value().item();
  for (const Var& l : uni_losses) metrics.loss_uni.push_back(l.value().item());
  check_finite(metrics.loss_mm, "loss_mm");
  for (std::size_t k = 0; k < m; ++k) check_finite(metrics.loss_uni[k], "loss_uni_" + std::to_string(k + 1));
  if (config.distill_enabled) {
    // (4) teacher prediction, recorded as a constant.
    Var loss_dis = loss_term("loss_dis", [&] {
      const Tensor target = teacher_probs(state.teacher, batch);
      std::vector<Var> uni_probs;
      for (const Var& v : uni_logit_vars) uni_probs.push_back(softmax_last_axis(v));
      return distillation_loss(target, softmax_last_axis(fused), uni_probs);
    });
    metrics.loss_dis = loss_dis.value().item();
    total = add(total, scalar_mul(loss_dis, config.lambda));
  }

  metrics.loss_total = total.value().item();
  check_finite(metrics.loss_dis, "loss_dis");
  check_finite(metrics.loss_total, "loss_total");

  // (6) optimizer, (7) EMA.
  apply_adam(state, sv, tape.backward(total));
  if (config.ema_enabled) ema_update(state.teacher, state.student, config.ema_beta);
  state.step += 1;
  return metrics;
}

StepMetrics train_step_erm(TrainerState& state, const MultiModalBatch& batch) {
  check_batch(state.student, batch);
  const std::size_t m = state.student.encoders.size();
  Tape tape;
  const ModelVars sv = bind(tape, state.student, true);
  std::vector<Var> feats, uni_losses;
  for (std::size_t k = 0; k < m; ++k) {
    uni_losses.push_back(loss_term("loss_uni_" + std::to_string(k + 1), [&] {
      feats.push_back(encode(sv.encoders[k], tape.constant(batch.modalities[k])));
      return cross_entropy(uni_logits(sv.uni_heads[k], feats[k]), batch.labels);
    }));
  }
  const std::vector<double> ones(m, 1.0);
  Var loss_mm = loss_term("loss_mm", [&] {
    return cross_entropy(fused_logits(sv.fused_head, feats, ones), batch.labels);
  });
  Var total = loss_mm;
  for (const Var& l : uni_losses) total = add(total, l);

  StepMetrics metrics;
  metrics.loss_mm = loss_mm.value().item();
  for (const Var& l : uni_losses) metrics.loss_uni.push_back(l.value().item());
  metrics.loss_total = total.value().item();
  check_finite(metrics.loss_mm, "loss_mm");
  for (std::size_t k = 0; k < m; ++k) check_finite(metrics.loss_uni[k], "loss_uni_" + std::to_string(k + 1));
  check_finite(metrics.loss_total, "loss_total");
  metrics.stats.mask = ones;
  apply_adam(state, sv, tape.backward(total));
  state.step += 1;
  return metrics;
}

StepMetrics train_step_ema_only(TrainerState& state, const MultiModalBatch& batch, double beta) {
  StepMetrics metrics = train_step_erm(state, batch);
  ema_update(state.teacher, state.student, beta);
  return metrics;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kEvalChunk = 500;

struct Tally {
  std::size_t correct = 0;
  double loss_sum = 0.0;

  void add(const Tensor& logits, std::span<const int> labels) {
    for (std::size_t r = 0; r < labels.size(); ++r) {
      auto row = logits.row(r);
      if (static_cast<int>(argmax(row)) == labels[r]) ++correct;
      const double mx = *std::max_element(row.begin(), row.end());
      double sum = 0.0;
      for (double v : row) sum += std::exp(v - mx);
      loss_sum += mx + std::log(sum) - row[static_cast<std::size_t>(labels[r])];
    }
  }
};

template <class Fn>
void for_each_chunk(const SplitData& split, Fn&& fn) {
  if (split.rows() == 0) throw TrainingError("evaluate: empty split");
  for (std::size_t begin = 0; begin < split.rows(); begin += kEvalChunk) {
    const std::size_t end = std::min(split.rows(), begin + kEvalChunk);
    std::vector<Tensor> xs;
    for (const Tensor& t : split.modalities) xs.push_back(slice_rows(t, begin, end));
    fn(xs, std::span<const int>(split.labels).subspan(begin, end - begin));
  }
}

}  // namespace

EvalResult evaluate(const ModelParams& params, const SplitData& split) {
  const std::size_t m = params.encoders.size();
  Tally fused;
  std::vector<Tally> uni(m);
  for_each_chunk(split, [&](const std::vector<Tensor>& xs, std::span<const int> labels) {
    Tape tape;
    const ModelVars vars = bind(tape, params, false);
    std::vector<Var> feats;
    for (std::size_t k = 0; k < m; ++k) {
      feats.push_back(encode(vars.encoders[k], tape.constant(xs[k])));
      uni[k].add(uni_logits(vars.uni_heads[k], feats[k]).value(), labels);
    }
    const std::vector<double> ones(m, 1.0);
    fused.add(fused_logits(vars.fused_head, feats, ones).value(), labels);
  });
  const double n = static_cast<double>(split.rows());
  EvalResult out;
  out.rows = split.rows();
  out.accuracy_fused = static_cast<double>(fused.correct) / n;
  out.loss_fused = fused.loss_sum / n;
  for (const Tally& t : uni) {
    out.accuracy_uni.push_back(static_cast<double>(t.correct) / n);
    out.loss_uni.push_back(t.loss_sum / n);
  }
  return out;
}

EvalResult evaluate(const FusedParams& params, const SplitData& split) {
  const std::size_t m = params.encoders.size();
  Tally fused;
  for_each_chunk(split, [&](const std::vector<Tensor>& xs, std::span<const int> labels) {
    Tape tape;
    const FusedVars vars = bind(tape, params, false);
    std::vector<Var> feats;
    for (std::size_t k = 0; k < m; ++k) feats.push_back(encode(vars.encoders[k], tape.constant(xs[k])));
    const std::vector<double> ones(m, 1.0);
    fused.add(fused_logits(vars.fused_head, feats, ones).value(), labels);
  });
  const double n = static_cast<double>(split.rows());
  EvalResult out;
  out.rows = split.rows();
  out.accuracy_fused = static_cast<double>(fused.correct) / n;
  out.loss_fused = fused.loss_sum / n;
  return out;
}

double fused_loss(const FusedParams& params, const SplitData& split) {
  return evaluate(params, split).loss_fused;
}

}  // namespace mmdg
