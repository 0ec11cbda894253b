#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmdg/model.hpp"
#include "mmdg/optim.hpp"
#include "mmdg/rng.hpp"
#include "mmdg/synthdata.hpp"
#include "mmdg/tape.hpp"

namespace mmdg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Aligned per-modality rows plus labels for one optimizer step.
using MultiModalBatch = SplitData;

enum class EvalModel { automatic, teacher, student, both };
std::string to_string(EvalModel m);
EvalModel parse_eval_model(const std::string& text);

struct MbcdConfig {
  double lambda = 1.0;      // distillation weight
  double alpha = 1e-4;      // inner-loop step
  double ema_beta = 0.999;
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  EvalModel eval_model = EvalModel::automatic;
  bool amd_enabled = true;
  bool gcc_enabled = true;
  bool distill_enabled = true;
  bool ema_enabled = true;

  void validate() const;
  /// `automatic` resolves to teacher when EMA is on, student otherwise.
  EvalModel resolved_eval_model() const;
};

// ---------------------------------------------------------------------------
// Adaptive modality dropout

/// Per-batch confidence bookkeeping. `mask` is the keep-mask fed to fusion
/// (1 = kept, 0 = dropped).
struct ConfidenceStats {
  std::vector<double> s;
  std::vector<double> r;
  std::vector<double> drop_prob;
  std::vector<double> mask;
};

/// s_k = sum over rows of the largest softmax probability of modality k's logits.
std::vector<double> confidence_scores(std::span<const Tensor> uni_logits);
/// r_k = mean over j != k of s_k / s_j.
std::vector<double> relative_speed(std::span<const double> s);
/// p_k = tanh(max(r_k - 1, 0)).
std::vector<double> drop_probabilities(std::span<const double> r);
/// Drops modality k with probability p_k. Draws one uniform per modality.
std::vector<double> sample_dropout_mask(std::span<const double> r, Rng& rng);
ConfidenceStats confidence_stats(std::span<const Tensor> uni_logits, Rng& rng);

// ---------------------------------------------------------------------------
// Gradient-consistency inner step

/// theta'_k = theta_k - alpha * grad_{theta_k} CE(uni head k, encoder k; x_k).
/// The head is used but not changed.
EncoderT<Tensor> inner_update(const ModelParams& student, std::size_t k,
                              const MultiModalBatch& batch, double alpha);

/// Value and per-block gradient of an objective over a list of parameter blocks.
struct BlockEval {
  double value = 0.0;
  std::vector<Tensor> grad;
};
using BlockObjective = std::function<BlockEval(std::span<const Tensor>)>;

/// |F(theta') - [F(theta) - alpha * sum_k <g_k, grad_k F(theta)>]| with
/// theta' = theta - alpha * g and g the gradient of `inner` at theta.
double taylor_residual(const BlockObjective& inner, const BlockObjective& outer,
                       std::span<const Tensor> blocks, double alpha);

/// The same quantity for a student model: inner = sum of uni-modal losses with
/// respect to the encoders, outer = fused loss (all modalities kept).
double taylor_residual(const ModelParams& student, const MultiModalBatch& batch, double alpha);

// ---------------------------------------------------------------------------
// EMA teacher and distillation

/// teacher = beta * teacher + (1 - beta) * student, over encoders and the
/// fusion head. Throws TrainingError on shape drift.
void ema_update(FusedParams& teacher, const ModelParams& student, double beta);

/// KL(p_ema || p_mm) + sum_m KL(p_ema || p_m), each averaged over rows.
/// `teacher_probs` is recorded as a constant.
Var distillation_loss(const Tensor& teacher_probs, Var student_fused_probs,
                      std::span<const Var> student_uni_probs);
/// Value-only version. Throws TrainingError if a row does not sum to 1 within 1e-6.
double distillation_loss(const Tensor& teacher_probs, const Tensor& student_fused_probs,
                         std::span<const Tensor> student_uni_probs);

// ---------------------------------------------------------------------------
// Training

struct TrainerState {
  ModelParams student;
  FusedParams teacher;
  AdamState optimizer;
  std::uint64_t step = 0;
  Rng rng;

  /// Teacher starts as an exact copy of the tracked student parameters.
  static TrainerState create(ModelParams student, double learning_rate, std::uint64_t seed);
};

struct StepMetrics {
  double loss_total = 0.0;
  double loss_mm = 0.0;
  std::vector<double> loss_uni;
  double loss_dis = 0.0;
  ConfidenceStats stats;
};

/// One MBCD update: confidence and dropout mask, inner step, fused loss at the
/// inner-stepped encoders, teacher prediction, total loss, Adam, EMA.
StepMetrics train_step_mbcd(TrainerState& state, const MultiModalBatch& batch,
                            const MbcdConfig& config);
/// Fused plus uni-modal cross-entropy on all modalities, one Adam step.
StepMetrics train_step_erm(TrainerState& state, const MultiModalBatch& batch);
/// ERM followed by an EMA update of the teacher.
StepMetrics train_step_ema_only(TrainerState& state, const MultiModalBatch& batch, double beta);

struct EvalResult {
  std::size_t rows = 0;
  double accuracy_fused = 0.0;
  double loss_fused = 0.0;
  std::vector<double> accuracy_uni;  // empty for fused-only models
  std::vector<double> loss_uni;
};

/// Argmax accuracy with ties going to the lowest class index; all modalities kept.
EvalResult evaluate(const ModelParams& params, const SplitData& split);
EvalResult evaluate(const FusedParams& params, const SplitData& split);

/// Fused cross-entropy over a split; the objective probed for flatness.
double fused_loss(const FusedParams& params, const SplitData& split);

/// Index of the largest entry; the first one on ties.
std::size_t argmax(std::span<const double> row);

}  // namespace mmdg
