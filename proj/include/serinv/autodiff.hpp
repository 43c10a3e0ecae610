#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors of
// doubles. A forward pass records a dynamic tape: every op output keeps
// shared ownership of its inputs plus a closure that maps the output gradient
// onto input gradients. The tape lives exactly as long as the tensors that
// reference it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "serinv/errors.hpp"

namespace serinv::ad {

using Shape = std::vector<std::size_t>;

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSum,
  kMatMul,
  kLinear,
  kRelu,
  kGradReverse,
  kCrossEntropy,
  kConv1d,
  kBiLstm,
  kBatchNorm,
  kDropout,
  kStatsPool,
  kReshape,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kRelu: return "relu";
    case OpKind::kGradReverse: return "grad_reverse";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kConv1d: return "conv1d_dilated";
    case OpKind::kBiLstm: return "bilstm";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kDropout: return "dropout";
    case OpKind::kStatsPool: return "stats_pool";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// One vertex of the tape. `grad` stays empty until a backward pass writes
/// into it, and is never allocated when `requires_grad` is false.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  OpKind op = OpKind::kLeaf;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

/// Gradient buffer of `n`, zero-allocated on first use; nullptr for
/// constants.
inline double* grad_buffer(Node& n) {
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
  return n.grad.data();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->data.assign(numel_of(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ContractError("tensor shape " + shape_str(shape) + " holds " +
                          std::to_string(numel_of(shape)) + " values, got " +
                          std::to_string(values.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return {grad_buffer(*node_), node_->grad.size()}; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  bool is_leaf() const { return node_->is_leaf(); }
  OpKind op() const { return node_->op; }

  /// Copy of the values with no tape history.
  Tensor detach() const { return from(shape(), node_->data, false); }

  void backward() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op output. The tape edge is only recorded when some input
/// requires a gradient; otherwise the result is a plain constant.
inline Tensor make_op(Shape shape, std::vector<double> data, OpKind op,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool any = false;
  for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
  if (any) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->inputs.push_back(t->defined() ? t->node_ptr() : nullptr);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

namespace detail {

// Reverse topological order of the requires_grad sub-graph reachable from
// `root`: the returned vector lists children before parents.
inline std::vector<Node*> topo_order(Node* root) {
  enum class Mark : unsigned char { kOpen, kDone };
  std::unordered_map<Node*, Mark> marks;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  marks[root] = Mark::kOpen;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* in = node->inputs[next++].get();
      if (in == nullptr || !in->requires_grad) continue;
      auto it = marks.find(in);
      if (it == marks.end()) {
        marks[in] = Mark::kOpen;
        stack.emplace_back(in, 0);
      } else if (it->second == Mark::kOpen) {
        throw GraphError("cycle detected in tape at op '" + std::string(op_name(in->op)) + "'");
      }
    } else {
      marks[node] = Mark::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

// Single reverse sweep. Interior gradients are reset first so that repeated
// sweeps over the same tape only accumulate into leaves.
inline void run_backward(Node& loss) {
  if (loss.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape));
  }
  if (!loss.requires_grad) throw ContractError("backward() on a tensor that does not require grad");
  const auto order = topo_order(&loss);
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  grad_buffer(loss)[0] += 1.0;
  for (Node* n : order) {
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

}  // namespace detail

inline void Tensor::backward() const { detail::run_backward(*node_); }

/// d(loss)/d(wrt[i]) for each requested tensor, leaving every `.grad`
/// buffer on the tape exactly as it was.
inline std::vector<std::vector<double>> gradients(const Tensor& loss, std::span<const Tensor> wrt) {
  const auto order = detail::topo_order(&loss.node());
  std::vector<std::pair<Node*, std::vector<double>>> saved;
  for (Node* n : order) {
    if (n->is_leaf()) {
      saved.emplace_back(n, std::move(n->grad));
      n->grad.clear();
    }
  }
  detail::run_backward(loss.node());
  std::vector<std::vector<double>> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    if (t.has_grad()) {
      out.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      out.emplace_back(t.numel(), 0.0);
    }
  }
  for (auto& [n, g] : saved) n->grad = std::move(g);
  return out;
}

// ---------------------------------------------------------------------------
// Kink monitor for piecewise-linear ops. While active, every ReLU reports the
// smallest |input| it saw so a gradient check can reject sample points that sit
// on a kink.

struct KinkMonitor {
  bool active = false;
  double min_abs = std::numeric_limits<double>::infinity();
};

inline KinkMonitor& kink_monitor() {
  thread_local KinkMonitor m;
  return m;
}

inline void report_kink_distance(std::span<const double> values) {
  auto& m = kink_monitor();
  if (!m.active) return;
  for (double v : values) m.min_abs = std::min(m.min_abs, std::abs(v));
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(out), OpKind::kAdd, {&a, &b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (double* g = grad_buffer(*in)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), std::move(out), OpKind::kSub, {&a, &b}, [](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_buffer(*self.inputs[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), std::move(out), OpKind::kMul, {&a, &b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (double* g = grad_buffer(x)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (double* g = grad_buffer(y)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.data()[i];
  return make_op(a.shape(), std::move(out), OpKind::kScale, {&a}, [s](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op({}, {total}, OpKind::kSum, {&a}, [](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0])) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ContractError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op(std::move(shape), a.values(), OpKind::kReshape, {&a}, [](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor relu(const Tensor& a) {
  report_kink_distance(a.data());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op(a.shape(), std::move(out), OpKind::kRelu, {&a}, [](Node& self) {
    Node& x = *self.inputs[0];
    if (double* g = grad_buffer(x)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (x.data[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

/// Identity forward; multiplies the incoming gradient by -lambda on the way
/// back.
inline Tensor grad_reverse(const Tensor& x, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("grad_reverse: lambda must be >= 0");
  return make_op(x.shape(), x.values(), OpKind::kGradReverse, {&x}, [lambda](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += -lambda * self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense linear algebra.

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMajor>;
using ConstMapRM = Eigen::Map<const RowMajor>;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ContractError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapRM(out.data(), m, n).noalias() = ConstMapRM(a.data().data(), m, k) * ConstMapRM(b.data().data(), k, n);
  return make_op({a.dim(0), b.dim(1)}, std::move(out), OpKind::kMatMul, {&a, &b},
                 [m, k, n](Node& self) {
                   ConstMapRM up(self.grad.data(), m, n);
                   Node& x = *self.inputs[0];
                   Node& y = *self.inputs[1];
                   if (double* g = grad_buffer(x)) {
                     MapRM(g, m, k).noalias() += up * ConstMapRM(y.data.data(), k, n).transpose();
                   }
                   if (double* g = grad_buffer(y)) {
                     MapRM(g, k, n).noalias() += ConstMapRM(x.data.data(), m, k).transpose() * up;
                   }
                 });
}

/// y = x * W^T + b for x: B x D_in, W: D_out x D_in, b: D_out (optional).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ContractError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                        shape_str(weight.shape()));
  }
  const auto batch = static_cast<Eigen::Index>(x.dim(0));
  const auto din = static_cast<Eigen::Index>(x.dim(1));
  const auto dout = static_cast<Eigen::Index>(weight.dim(0));
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(dout)) {
    throw ContractError("linear: bias size mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(batch * dout));
  MapRM y(out.data(), batch, dout);
  y.noalias() = ConstMapRM(x.data().data(), batch, din) *
                ConstMapRM(weight.data().data(), dout, din).transpose();
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), dout);
  }
  return make_op({x.dim(0), weight.dim(0)}, std::move(out), OpKind::kLinear, {&x, &weight, &bias},
                 [batch, din, dout](Node& self) {
                   ConstMapRM up(self.grad.data(), batch, dout);
                   Node& xin = *self.inputs[0];
                   Node& w = *self.inputs[1];
                   if (double* g = grad_buffer(xin)) {
                     MapRM(g, batch, din).noalias() += up * ConstMapRM(w.data.data(), dout, din);
                   }
                   if (double* g = grad_buffer(w)) {
                     MapRM(g, dout, din).noalias() += up.transpose() * ConstMapRM(xin.data.data(), batch, din);
                   }
                   if (self.inputs[2]) {
                     if (double* g = grad_buffer(*self.inputs[2])) {
                       Eigen::Map<Eigen::RowVectorXd>(g, dout) += up.colwise().sum();
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Loss.

/// Mean over the batch of -log softmax(logits)[target]. `targets` must be a
/// one-hot B x C matrix.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    throw ContractError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                        shape_str(targets.shape()));
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (classes < 2) throw ContractError("cross_entropy: need at least 2 classes");
  if (batch == 0) throw ContractError("cross_entropy: empty batch");
  std::vector<std::size_t> label(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double t = targets.data()[b * classes + c];
      if (t == 1.0) {
        ++ones;
        label[b] = c;
      } else if (t != 0.0) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) {
      throw ContractError("cross_entropy: target row " + std::to_string(b) + " is not one-hot");
    }
  }
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * classes;
    const double mx = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(z[c] - mx - log_denom);
    total += -(z[label[b]] - mx - log_denom);
  }
  return make_op({}, {total / static_cast<double>(batch)}, OpKind::kCrossEntropy, {&logits},
                 [probs = std::move(probs), label = std::move(label), batch, classes](Node& self) {
                   double* g = grad_buffer(*self.inputs[0]);
                   if (!g) return;
                   const double up = self.grad[0] / static_cast<double>(batch);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t c = 0; c < classes; ++c) {
                       const double target = c == label[b] ? 1.0 : 0.0;
                       g[b * classes + c] += up * (probs[b * classes + c] - target);
                     }
                   }
                 });
}

/// One-hot matrix for integer labels.
inline Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw ContractError("one_hot: label out of range");
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor::from({labels.size(), classes}, std::move(v));
}

}  // namespace serinv::ad
