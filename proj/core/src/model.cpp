#include "mmdg/model.hpp"

#include <cmath>
#include <stdexcept>

#include "mmdg/rng.hpp"

namespace mmdg {

void ModelConfig::validate() const {
  if (modalities < 1) throw std::invalid_argument("model: at least one modality required");
  if (input_dims.size() != modalities || hidden_dims.size() != modalities ||
      feature_dims.size() != modalities) {
    throw std::invalid_argument("model: input/hidden/feature dim lists must have " +
                                std::to_string(modalities) + " entries");
  }
  for (std::size_t k = 0; k < modalities; ++k) {
    if (input_dims[k] == 0 || hidden_dims[k] == 0 || feature_dims[k] == 0) {
      throw std::invalid_argument("model: dimension of modality " + std::to_string(k + 1) +
                                  " must be positive");
    }
  }
  if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
}

std::size_t ModelConfig::fused_dim() const {
  std::size_t total = 0;
  for (std::size_t d : feature_dims) total += d;
  return total;
}

namespace {

LinearT<Tensor> glorot_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w = Tensor::zeros({in, out});
  for (double& v : w.values()) v = rng.uniform(-a, a);
  return {std::move(w), Tensor::zeros({1, out})};
}

LinearVars bind_linear(Tape& tape, const LinearT<Tensor>& layer, bool trainable) {
  if (trainable) return {tape.leaf(layer.weight), tape.leaf(layer.bias)};
  return {tape.constant(layer.weight), tape.constant(layer.bias)};
}

EncoderVars bind_encoder(Tape& tape, const EncoderT<Tensor>& enc, bool trainable) {
  return {bind_linear(tape, enc.hidden, trainable), bind_linear(tape, enc.output, trainable)};
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.init_seed);
  ModelParams params;
  for (std::size_t k = 0; k < config.modalities; ++k) {
    EncoderT<Tensor> enc;
    enc.hidden = glorot_linear(config.input_dims[k], config.hidden_dims[k], rng);
    enc.output = glorot_linear(config.hidden_dims[k], config.feature_dims[k], rng);
    params.encoders.push_back(std::move(enc));
  }
  for (std::size_t k = 0; k < config.modalities; ++k) {
    params.uni_heads.push_back(glorot_linear(config.feature_dims[k], config.num_classes, rng));
  }
  params.fused_head = glorot_linear(config.fused_dim(), config.num_classes, rng);
  return params;
}

std::size_t parameter_count(const ModelConfig& config) {
  config.validate();
  const std::size_t c = config.num_classes;
  std::size_t total = 0;
  for (std::size_t k = 0; k < config.modalities; ++k) {
    const std::size_t in = config.input_dims[k];
    const std::size_t h = config.hidden_dims[k];
    const std::size_t f = config.feature_dims[k];
    total += (in + 1) * h + (h + 1) * f + (f + 1) * c;
  }
  return total + (config.fused_dim() + 1) * c;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t total = 0;
  visit_params(params, [&](const std::string&, const Tensor& t) { total += t.size(); });
  return total;
}

FusedParams fused_part(const ModelParams& params) {
  return FusedParams{params.encoders, params.fused_head};
}

ModelVars bind(Tape& tape, const ModelParams& params, bool trainable) {
  ModelVars vars;
  for (const auto& enc : params.encoders) vars.encoders.push_back(bind_encoder(tape, enc, trainable));
  for (const auto& head : params.uni_heads) vars.uni_heads.push_back(bind_linear(tape, head, trainable));
  vars.fused_head = bind_linear(tape, params.fused_head, trainable);
  return vars;
}

FusedVars bind(Tape& tape, const FusedParams& params, bool trainable) {
  FusedVars vars;
  for (const auto& enc : params.encoders) vars.encoders.push_back(bind_encoder(tape, enc, trainable));
  vars.fused_head = bind_linear(tape, params.fused_head, trainable);
  return vars;
}

Var linear(const LinearVars& layer, Var x) {
  // Row-broadcast of the bias is expressed as ones[B,1] x b[1,out].
  Tape& tape = x.tape();
  const std::size_t rows = x.shape().at(0);
  Var ones = tape.constant(Tensor::filled({rows, 1}, 1.0));
  return add(matmul(x, layer.weight), matmul(ones, layer.bias));
}

Var encode(const EncoderVars& encoder, Var x) {
  return layer_norm_last_axis(linear(encoder.output, relu(linear(encoder.hidden, x))));
}

Var uni_logits(const LinearVars& head, Var feature) { return linear(head, feature); }

Var fused_logits(const LinearVars& fused_head, std::span<const Var> features,
                 std::span<const double> mask) {
  if (mask.size() != features.size()) {
    throw ModelError("fused_logits: mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(features.size()) + " modalities");
  }
  std::vector<Var> gated;
  gated.reserve(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) {
    if (mask[k] != 0.0 && mask[k] != 1.0) {
      throw ModelError("fused_logits: mask entry " + std::to_string(k) + " is " +
                       std::to_string(mask[k]) + ", expected 0 or 1");
    }
    gated.push_back(masked_scale(features[k], mask[k]));
  }
  Var fused = features[0].tape().concat_last_axis(gated);
  return linear(fused_head, fused);
}

Var encode(const ModelVars& model, Var x, std::size_t k) {
  if (k >= model.encoders.size()) throw ModelError("encode: modality index out of range");
  return encode(model.encoders[k], x);
}

Var uni_logits(const ModelVars& model, Var feature, std::size_t k) {
  if (k >= model.uni_heads.size()) throw ModelError("uni_logits: modality index out of range");
  return uni_logits(model.uni_heads[k], feature);
}

Var fused_logits(const ModelVars& model, std::span<const Var> features,
                 std::span<const double> mask) {
  return fused_logits(model.fused_head, features, mask);
}

}  // namespace mmdg
