#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmdg/tape.hpp"
#include "mmdg/tensor.hpp"

namespace mmdg {

struct ModelConfig {
  std::size_t modalities = 3;
  std::vector<std::size_t> input_dims;
  std::vector<std::size_t> hidden_dims;
  std::vector<std::size_t> feature_dims;
  std::size_t num_classes = 4;
  std::uint64_t init_seed = 0;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::size_t fused_dim() const;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The parameter structs are templated on the element so the same layout holds
// plain tensors (storage) and tape handles (one forward pass).

/// y = x W + b, with W [in, out] and b [1, out].
template <class T>
struct LinearT {
  T weight;
  T bias;
};

/// linear -> relu -> linear; layer norm is applied by encode().
template <class T>
struct EncoderT {
  LinearT<T> hidden;
  LinearT<T> output;
};

/// Full student: per-modality encoders and heads plus the fusion head.
template <class T>
struct ModelT {
  std::vector<EncoderT<T>> encoders;
  std::vector<LinearT<T>> uni_heads;
  LinearT<T> fused_head;
};

/// Encoders and fusion head only. This is the parameter set an EMA teacher tracks.
template <class T>
struct FusedModelT {
  std::vector<EncoderT<T>> encoders;
  LinearT<T> fused_head;
};

using ModelParams = ModelT<Tensor>;
using ModelVars = ModelT<Var>;
using FusedParams = FusedModelT<Tensor>;
using FusedVars = FusedModelT<Var>;
using LinearVars = LinearT<Var>;
using EncoderVars = EncoderT<Var>;

namespace detail {
template <class L, class F>
void visit_linear(L& layer, const std::string& prefix, F& f) {
  f(prefix + ".weight", layer.weight);
  f(prefix + ".bias", layer.bias);
}
}  // namespace detail

/// Calls f(name, param) for every parameter in a fixed canonical order:
/// encoders, then uni heads (full models only), then the fusion head.
template <class Model, class F>
void visit_params(Model& model, F&& f) {
  for (std::size_t k = 0; k < model.encoders.size(); ++k) {
    const std::string p = "encoder." + std::to_string(k);
    detail::visit_linear(model.encoders[k].hidden, p + ".hidden", f);
    detail::visit_linear(model.encoders[k].output, p + ".output", f);
  }
  if constexpr (requires { model.uni_heads; }) {
    for (std::size_t k = 0; k < model.uni_heads.size(); ++k) {
      detail::visit_linear(model.uni_heads[k], "uni_head." + std::to_string(k), f);
    }
  }
  detail::visit_linear(model.fused_head, "fused_head", f);
}

template <class Model>
std::vector<std::string> param_names(const Model& model) {
  std::vector<std::string> names;
  visit_params(model, [&](const std::string& n, const auto&) { names.push_back(n); });
  return names;
}

template <class Model>
std::vector<Tensor*> param_pointers(Model& model) {
  std::vector<Tensor*> out;
  visit_params(model, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

template <class Model>
std::vector<const Tensor*> param_pointers(const Model& model) {
  std::vector<const Tensor*> out;
  visit_params(model, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

/// Glorot-uniform weights, zero biases, reproducible from config.init_seed.
ModelParams init_params(const ModelConfig& config);

/// Closed-form parameter count implied by the config dimensions.
std::size_t parameter_count(const ModelConfig& config);
std::size_t parameter_count(const ModelParams& params);

/// Copy of the parameters an EMA teacher tracks.
FusedParams fused_part(const ModelParams& params);

/// Student parameters become tape leaves when trainable, constants otherwise.
ModelVars bind(Tape& tape, const ModelParams& params, bool trainable);
FusedVars bind(Tape& tape, const FusedParams& params, bool trainable);

Var linear(const LinearVars& layer, Var x);
/// Encoder MLP followed by affine-free layer norm over the feature axis.
Var encode(const EncoderVars& encoder, Var x);
Var uni_logits(const LinearVars& head, Var feature);
/// Concatenation fusion. Each feature block is multiplied by its keep-mask
/// entry (0 or 1) before concatenation; a zero entry removes the modality's
/// contribution and its gradient.
Var fused_logits(const LinearVars& fused_head, std::span<const Var> features,
                 std::span<const double> mask);

// Index-based spellings over a bound model.
Var encode(const ModelVars& model, Var x, std::size_t k);
Var uni_logits(const ModelVars& model, Var feature, std::size_t k);
Var fused_logits(const ModelVars& model, std::span<const Var> features,
                 std::span<const double> mask);

}  // namespace mmdg
