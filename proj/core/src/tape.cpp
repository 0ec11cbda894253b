#include "mmdg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mmdg {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::relu: return "relu";
    case OpKind::concat_last_axis: return "concat_last_axis";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::softmax_last_axis: return "softmax_last_axis";
    case OpKind::log_softmax_last_axis: return "log_softmax_last_axis";
    case OpKind::layer_norm_last_axis: return "layer_norm_last_axis";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::kl_divergence: return "kl_divergence";
    case OpKind::max_last_axis: return "max_last_axis";
    case OpKind::masked_scale: return "masked_scale";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
  throw TensorError(std::string(op_name(kind)) + ": shape mismatch " + to_string(a) + " vs " +
                    to_string(b));
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

void log_softmax_row(std::span<const double> x, std::span<double> out) {
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - lse;
}

void softmax_row(std::span<const double> x, std::span<double> out) {
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = std::exp(x[j] - m);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
}

// c[n,m] += a[n,k] * b[k,m] with optional transposes expressed through strides.
void gemm(const double* a, std::size_t a_row, std::size_t a_col, const double* b,
          std::size_t b_row, std::size_t b_col, double* c, std::size_t n, std::size_t k,
          std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * a_row + p * a_col];
      if (av == 0.0) continue;
      const double* bp = b + p * b_row;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * bp[j * b_col];
    }
  }
}

}  // namespace

Tape& Var::tape() const {
  if (tape_ == nullptr) throw TensorError("var: not attached to a tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

const Tensor& Gradients::at(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    throw TensorError("gradients: node " + std::to_string(id) + " is not a leaf of this tape");
  }
  return it->second;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check(Var v, std::string_view op) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw TensorError(std::string(op) + ": operand belongs to a different tape");
  }
}

Var Tape::leaf(Tensor value) {
  return push(Node{OpKind::leaf, {}, std::move(value), true, 0.0, {}, {}});
}

Var Tape::constant(Tensor value) {
  return push(Node{OpKind::constant, {}, std::move(value), false, 0.0, {}, {}});
}

Var Tape::matmul(Var a, Var b) {
  check(a, "matmul");
  check(b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
    shape_error(OpKind::matmul, x.shape(), y.shape());
  }
  const std::size_t n = x.shape()[0], k = x.shape()[1], m = y.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  gemm(x.values().data(), k, 1, y.values().data(), m, 1, out.values().data(), n, k, m);
  return push(Node{OpKind::matmul, {a.id(), b.id()}, std::move(out),
                   requires_grad(a.id()) || requires_grad(b.id()), 0.0, {}, {}});
}

Var Tape::add(Var a, Var b) {
  check(a, "add");
  check(b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out;
  if (x.shape() == y.shape()) {
    out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  } else if (is_scalar(y)) {
    out = x;
    for (double& v : out.values()) v += y[0];
  } else if (is_scalar(x)) {
    out = y;
    for (double& v : out.values()) v += x[0];
  } else {
    shape_error(OpKind::add, x.shape(), y.shape());
  }
  return push(Node{OpKind::add, {a.id(), b.id()}, std::move(out),
                   requires_grad(a.id()) || requires_grad(b.id()), 0.0, {}, {}});
}

Var Tape::sub(Var a, Var b) {
  check(a, "sub");
  check(b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out;
  if (x.shape() == y.shape()) {
    out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  } else if (is_scalar(y)) {
    out = x;
    for (double& v : out.values()) v -= y[0];
  } else if (is_scalar(x)) {
    out = y;
    for (double& v : out.values()) v = x[0] - v;
  } else {
    shape_error(OpKind::sub, x.shape(), y.shape());
  }
  return push(Node{OpKind::sub, {a.id(), b.id()}, std::move(out),
                   requires_grad(a.id()) || requires_grad(b.id()), 0.0, {}, {}});
}

Var Tape::scalar_mul(Var x, double factor) {
  check(x, "scalar_mul");
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return push(Node{OpKind::scalar_mul, {x.id()}, std::move(out), requires_grad(x.id()), factor,
                   {}, {}});
}

Var Tape::masked_scale(Var x, double mask) {
  check(x, "masked_scale");
  if (mask != 0.0 && mask != 1.0) {
    throw TensorError("masked_scale: mask must be 0 or 1, got " + std::to_string(mask));
  }
  Tensor out = x.value();
  for (double& v : out.values()) v *= mask;
  return push(Node{OpKind::masked_scale, {x.id()}, std::move(out), requires_grad(x.id()), mask,
                   {}, {}});
}

Var Tape::relu(Var x) {
  check(x, "relu");
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push(Node{OpKind::relu, {x.id()}, std::move(out), requires_grad(x.id()), 0.0, {}, {}});
}

Var Tape::concat_last_axis(std::span<const Var> parts) {
  if (parts.empty()) throw TensorError("concat_last_axis: no inputs");
  for (const Var& p : parts) check(p, "concat_last_axis");
  const Tensor& first = parts[0].value();
  const std::size_t rows = first.row_count();
  std::size_t width = 0;
  bool grad = false;
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    if (t.rank() != first.rank() || t.row_count() != rows || t.rank() == 0 ||
        !std::equal(t.shape().begin(), t.shape().end() - 1, first.shape().begin())) {
      shape_error(OpKind::concat_last_axis, first.shape(), t.shape());
    }
    width += t.last_dim();
    grad = grad || requires_grad(p.id());
    ids.push_back(p.id());
  }
  Shape shape = first.shape();
  shape.back() = width;
  Tensor out = Tensor::zeros(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row(r);
    std::size_t offset = 0;
    for (const Var& p : parts) {
      auto src = p.value().row(r);
      std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += src.size();
    }
  }
  return push(Node{OpKind::concat_last_axis, std::move(ids), std::move(out), grad, 0.0, {}, {}});
}

Var Tape::reduce_sum(Var x) {
  check(x, "reduce_sum");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return push(Node{OpKind::reduce_sum, {x.id()}, Tensor::scalar(s), requires_grad(x.id()), 0.0,
                   {}, {}});
}

Var Tape::reduce_mean(Var x) {
  check(x, "reduce_mean");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  s /= static_cast<double>(x.value().size());
  return push(Node{OpKind::reduce_mean, {x.id()}, Tensor::scalar(s), requires_grad(x.id()), 0.0,
                   {}, {}});
}

Var Tape::softmax_last_axis(Var x) {
  check(x, "softmax_last_axis");
  const Tensor& in = x.value();
  if (!in.all_finite()) throw TensorError("softmax_last_axis: non-finite input");
  Tensor out = Tensor::zeros(in.shape());
  for (std::size_t r = 0; r < in.row_count(); ++r) softmax_row(in.row(r), out.row(r));
  return push(Node{OpKind::softmax_last_axis, {x.id()}, std::move(out), requires_grad(x.id()),
                   0.0, {}, {}});
}

Var Tape::log_softmax_last_axis(Var x) {
  check(x, "log_softmax_last_axis");
  const Tensor& in = x.value();
  if (!in.all_finite()) throw TensorError("log_softmax_last_axis: non-finite input");
  Tensor out = Tensor::zeros(in.shape());
  for (std::size_t r = 0; r < in.row_count(); ++r) log_softmax_row(in.row(r), out.row(r));
  return push(Node{OpKind::log_softmax_last_axis, {x.id()}, std::move(out),
                   requires_grad(x.id()), 0.0, {}, {}});
}

Var Tape::layer_norm_last_axis(Var x) {
  check(x, "layer_norm_last_axis");
  const Tensor& in = x.value();
  const std::size_t rows = in.row_count();
  const double width = static_cast<double>(in.last_dim());
  Tensor out = Tensor::zeros(in.shape());
  Tensor inv_std = Tensor::zeros({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = in.row(r);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= width;
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= width;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    inv_std[r] = inv;
    auto dst = out.row(r);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = (src[j] - mean) * inv;
  }
  return push(Node{OpKind::layer_norm_last_axis, {x.id()}, std::move(out), requires_grad(x.id()),
                   0.0, {}, std::move(inv_std)});
}

Var Tape::cross_entropy(Var logits, std::span<const int> labels) {
  check(logits, "cross_entropy");
  const Tensor& in = logits.value();
  if (in.rank() != 2 || in.shape()[0] != labels.size()) {
    throw TensorError("cross_entropy: shape mismatch " + to_string(in.shape()) + " vs labels [" +
                      std::to_string(labels.size()) + "]");
  }
  const std::size_t rows = in.shape()[0];
  const std::size_t classes = in.shape()[1];
  Tensor probs = Tensor::zeros(in.shape());
  std::vector<double> logp(classes);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw TensorError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                        std::to_string(classes) + ")");
    }
    log_softmax_row(in.row(r), logp);
    total -= logp[static_cast<std::size_t>(y)];
    auto pr = probs.row(r);
    for (std::size_t j = 0; j < classes; ++j) pr[j] = std::exp(logp[j]);
  }
  return push(Node{OpKind::cross_entropy, {logits.id()},
                   Tensor::scalar(total / static_cast<double>(rows)), requires_grad(logits.id()),
                   0.0, std::vector<int>(labels.begin(), labels.end()), std::move(probs)});
}

Var Tape::kl_divergence(Var p, Var q) {
  check(p, "kl_divergence");
  check(q, "kl_divergence");
  const Tensor& pt = p.value();
  const Tensor& qt = q.value();
  if (pt.shape() != qt.shape() || pt.rank() == 0) {
    shape_error(OpKind::kl_divergence, pt.shape(), qt.shape());
  }
  double total = 0.0;
  for (std::size_t r = 0; r < pt.row_count(); ++r) total += kl_divergence_value(pt.row(r), qt.row(r));
  return push(Node{OpKind::kl_divergence, {p.id(), q.id()},
                   Tensor::scalar(total / static_cast<double>(pt.row_count())),
                   requires_grad(p.id()) || requires_grad(q.id()), 0.0, {}, {}});
}

Var Tape::max_last_axis(Var x) {
  check(x, "max_last_axis");
  const Tensor& in = x.value();
  if (in.rank() == 0) throw TensorError("max_last_axis: empty axis on scalar input");
  Shape shape(in.shape().begin(), in.shape().end() - 1);
  Tensor out = Tensor::zeros(shape);
  Tensor argmax = Tensor::zeros({in.row_count()});
  for (std::size_t r = 0; r < in.row_count(); ++r) {
    auto src = in.row(r);
    const auto it = std::max_element(src.begin(), src.end());
    out[r] = *it;
    argmax[r] = static_cast<double>(it - src.begin());
  }
  return push(Node{OpKind::max_last_axis, {x.id()}, std::move(out), requires_grad(x.id()), 0.0,
                   {}, std::move(argmax)});
}

void Tape::accumulate(std::vector<Tensor>& grads, std::vector<bool>& has, NodeId id,
                      const Tensor& g) const {
  if (!nodes_[id].requires_grad) return;
  if (!has[id]) {
    grads[id] = g;
    has[id] = true;
    return;
  }
  Tensor& dst = grads[id];
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

Gradients Tape::backward(Var loss) const {
  check(loss, "backward");
  if (loss.value().size() != 1) {
    throw TensorError("backward: loss must be scalar, shape is " + to_string(loss.shape()));
  }
  std::vector<Tensor> grads(loss.id() + 1);
  std::vector<bool> has(loss.id() + 1, false);
  if (nodes_[loss.id()].requires_grad) {
    grads[loss.id()] = Tensor::filled(loss.shape(), 1.0);
    has[loss.id()] = true;
  }

  for (NodeId id = loss.id() + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& node = nodes_[id];
    const Tensor& g = grads[id];
    switch (node.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::matmul: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        const Tensor& b = nodes_[node.inputs[1]].value;
        const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
        if (nodes_[node.inputs[0]].requires_grad) {
          Tensor ga = Tensor::zeros(a.shape());  // g[n,m] * b^T[m,k]
          gemm(g.values().data(), m, 1, b.values().data(), 1, m, ga.values().data(), n, m, k);
          accumulate(grads, has, node.inputs[0], ga);
        }
        if (nodes_[node.inputs[1]].requires_grad) {
          Tensor gb = Tensor::zeros(b.shape());  // a^T[k,n] * g[n,m]
          gemm(a.values().data(), 1, k, g.values().data(), m, 1, gb.values().data(), k, n, m);
          accumulate(grads, has, node.inputs[1], gb);
        }
        break;
      }
      case OpKind::add:
      case OpKind::sub: {
        const double sign_b = node.kind == OpKind::add ? 1.0 : -1.0;
        for (std::size_t side = 0; side < 2; ++side) {
          const NodeId in = node.inputs[side];
          const double sign = side == 0 ? 1.0 : sign_b;
          const Tensor& v = nodes_[in].value;
          if (v.shape() == g.shape()) {
            Tensor gi = g;
            if (sign < 0) for (double& x : gi.values()) x = -x;
            accumulate(grads, has, in, gi);
          } else {
            double s = 0.0;
            for (double x : g.values()) s += x;
            accumulate(grads, has, in, Tensor::scalar(sign * s));
          }
        }
        break;
      }
      case OpKind::scalar_mul:
      case OpKind::masked_scale: {
        Tensor gi = g;
        for (double& x : gi.values()) x *= node.factor;
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::relu: {
        const Tensor& x = nodes_[node.inputs[0]].value;
        Tensor gi = g;
        for (std::size_t i = 0; i < gi.size(); ++i) {
          if (!(x[i] > 0.0)) gi[i] = 0.0;
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::concat_last_axis: {
        std::size_t offset = 0;
        for (NodeId in : node.inputs) {
          const Tensor& part = nodes_[in].value;
          const std::size_t w = part.last_dim();
          if (nodes_[in].requires_grad) {
            Tensor gi = Tensor::zeros(part.shape());
            for (std::size_t r = 0; r < part.row_count(); ++r) {
              auto src = g.row(r).subspan(offset, w);
              std::copy(src.begin(), src.end(), gi.row(r).begin());
            }
            accumulate(grads, has, in, gi);
          }
          offset += w;
        }
        break;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        const Tensor& x = nodes_[node.inputs[0]].value;
        double v = g[0];
        if (node.kind == OpKind::reduce_mean) v /= static_cast<double>(x.size());
        accumulate(grads, has, node.inputs[0], Tensor::filled(x.shape(), v));
        break;
      }
      case OpKind::softmax_last_axis: {
        const Tensor& y = node.value;
        Tensor gi = Tensor::zeros(y.shape());
        for (std::size_t r = 0; r < y.row_count(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
          auto out = gi.row(r);
          for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - dot);
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::log_softmax_last_axis: {
        const Tensor& y = node.value;
        Tensor gi = Tensor::zeros(y.shape());
        for (std::size_t r = 0; r < y.row_count(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          double sum = 0.0;
          for (double v : gr) sum += v;
          auto out = gi.row(r);
          for (std::size_t j = 0; j < yr.size(); ++j) out[j] = gr[j] - std::exp(yr[j]) * sum;
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::layer_norm_last_axis: {
        const Tensor& y = node.value;
        const double width = static_cast<double>(y.last_dim());
        Tensor gi = Tensor::zeros(y.shape());
        for (std::size_t r = 0; r < y.row_count(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          double mean_g = 0.0, mean_gy = 0.0;
          for (std::size_t j = 0; j < yr.size(); ++j) {
            mean_g += gr[j];
            mean_gy += gr[j] * yr[j];
          }
          mean_g /= width;
          mean_gy /= width;
          const double inv = node.saved[r];
          auto out = gi.row(r);
          for (std::size_t j = 0; j < yr.size(); ++j) {
            out[j] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
          }
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::cross_entropy: {
        const Tensor& probs = node.saved;
        const double scale = g[0] / static_cast<double>(probs.shape()[0]);
        Tensor gi = probs;
        for (std::size_t r = 0; r < probs.shape()[0]; ++r) {
          auto row = gi.row(r);
          row[static_cast<std::size_t>(node.labels[r])] -= 1.0;
          for (double& v : row) v *= scale;
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
      case OpKind::kl_divergence: {
        const Tensor& p = nodes_[node.inputs[0]].value;
        const Tensor& q = nodes_[node.inputs[1]].value;
        const double scale = g[0] / static_cast<double>(p.row_count());
        if (nodes_[node.inputs[0]].requires_grad) {
          Tensor gp = Tensor::zeros(p.shape());
          for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] > 0.0) {
              gp[i] = scale * (std::log(p[i]) - std::log(std::max(q[i], kKlProbabilityFloor)) + 1.0);
            }
          }
          accumulate(grads, has, node.inputs[0], gp);
        }
        if (nodes_[node.inputs[1]].requires_grad) {
          Tensor gq = Tensor::zeros(q.shape());
          for (std::size_t i = 0; i < q.size(); ++i) {
            if (p[i] > 0.0 && q[i] > kKlProbabilityFloor) gq[i] = -scale * p[i] / q[i];
          }
          accumulate(grads, has, node.inputs[1], gq);
        }
        break;
      }
      case OpKind::max_last_axis: {
        const Tensor& x = nodes_[node.inputs[0]].value;
        Tensor gi = Tensor::zeros(x.shape());
        for (std::size_t r = 0; r < x.row_count(); ++r) {
          gi.row(r)[static_cast<std::size_t>(node.saved[r])] = g[r];
        }
        accumulate(grads, has, node.inputs[0], gi);
        break;
      }
    }
  }

  Gradients out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].kind != OpKind::leaf) continue;
    if (id < has.size() && has[id]) {
      out.grads_.emplace(id, std::move(grads[id]));
    } else {
      out.grads_.emplace(id, Tensor::zeros(nodes_[id].value.shape()));
    }
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = Tensor::zeros(logits.shape());
  for (std::size_t r = 0; r < logits.row_count(); ++r) softmax_row(logits.row(r), out.row(r));
  return out;
}

double kl_divergence_value(std::span<const double> p, std::span<const double> q) {
  double total = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) total += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kKlProbabilityFloor)));
  }
  return total;
}

}  // namespace mmdg
