#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

enum class OpKind {
  leaf,
  constant,
  matmul,
  add,
  sub,
  scalar_mul,
  relu,
  concat_last_axis,
  reduce_mean,
  reduce_sum,
  softmax_last_axis,
  log_softmax_last_axis,
  layer_norm_last_axis,
  cross_entropy,
  kl_divergence,
  max_last_axis,
  masked_scale,
};

std::string_view op_name(OpKind kind);

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kKlProbabilityFloor = 1e-12;

using NodeId = std::size_t;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  NodeId id() const noexcept { return id_; }
  Tape& tape() const;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradients of a scalar with respect to every leaf on the tape.
class Gradients {
 public:
  const Tensor& operator[](Var v) const { return at(v.id()); }
  const Tensor& at(NodeId id) const;
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<NodeId, Tensor> grads_;
};

/// Append-only record of forward operations. Nodes are stored in creation order,
/// which is a topological order, so the reverse pass is a single backwards sweep.
///
/// A tape is single-threaded. Independent tapes may be used from different threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input; backward() reports a gradient for it.
  Var leaf(Tensor value);
  /// Input that never receives or propagates gradient.
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scalar_mul(Var x, double factor);
  Var relu(Var x);
  Var concat_last_axis(std::span<const Var> parts);
  Var reduce_mean(Var x);
  Var reduce_sum(Var x);
  Var softmax_last_axis(Var x);
  Var log_softmax_last_axis(Var x);
  Var layer_norm_last_axis(Var x);
  /// Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::span<const int> labels);
  /// Mean over rows of sum_j p_j (ln p_j - ln max(q_j, 1e-12)); p_j = 0 terms are 0.
  Var kl_divergence(Var p, Var q);
  Var max_last_axis(Var x);
  /// x * mask with mask in {0, 1}.
  Var masked_scale(Var x, double mask);

  /// Reverse sweep from a scalar node. Leaves that `loss` does not depend on
  /// get zero tensors.
  Gradients backward(Var loss) const;

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
    double factor = 0.0;
    std::vector<int> labels;
    Tensor saved;  // softmax probabilities, inverse std, etc.
  };

  Var push(Node node);
  void check(Var v, std::string_view op) const;
  void accumulate(std::vector<Tensor>& grads, std::vector<bool>& has, NodeId id,
                  const Tensor& g) const;

  std::vector<Node> nodes_;
};

// Free-function spellings, so graph code reads like arithmetic.
inline Var matmul(Var a, Var b) { return a.tape().matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape().add(a, b); }
inline Var sub(Var a, Var b) { return a.tape().sub(a, b); }
inline Var scalar_mul(Var x, double f) { return x.tape().scalar_mul(x, f); }
inline Var relu(Var x) { return x.tape().relu(x); }
inline Var reduce_mean(Var x) { return x.tape().reduce_mean(x); }
inline Var reduce_sum(Var x) { return x.tape().reduce_sum(x); }
inline Var softmax_last_axis(Var x) { return x.tape().softmax_last_axis(x); }
inline Var log_softmax_last_axis(Var x) { return x.tape().log_softmax_last_axis(x); }
inline Var layer_norm_last_axis(Var x) { return x.tape().layer_norm_last_axis(x); }
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  return logits.tape().cross_entropy(logits, labels);
}
inline Var kl_divergence(Var p, Var q) { return p.tape().kl_divergence(p, q); }
inline Var max_last_axis(Var x) { return x.tape().max_last_axis(x); }
inline Var masked_scale(Var x, double mask) { return x.tape().masked_scale(x, mask); }

// Value-level helpers for code paths that need no gradient.
Tensor softmax_rows(const Tensor& logits);
double kl_divergence_value(std::span<const double> p, std::span<const double> q);

}  // namespace mmdg
