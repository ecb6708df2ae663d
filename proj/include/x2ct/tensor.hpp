#pragma once

// Dense 64-bit tensors and a tape-based reverse-mode differentiator covering
// the fixed op vocabulary needed by the contrastive objective and the linear
// probe. Nothing here broadcasts beyond a row-vector bias.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "x2ct/error.hpp"

namespace x2ct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  double item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  bool operator==(const Tensor&) const = default;
};

enum class OpKind {
  Leaf,
  MatMul,
  AddBias,
  Add,
  Scale,
  Relu,
  MeanPool,
  L2Normalize,
  Similarity,
  Transpose,
  SoftmaxXent,
  SigmoidBce,
  Sum,
  Mul,
};

enum class Reduction { Mean, Sum };

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;  // empty until touched by backward()
    bool requires_grad = false;
    double scalar = 0.0;              // Scale factor, eps, group size, reduction flag...
    std::vector<std::size_t> index;   // cross-entropy targets
    std::vector<double> aux;          // cached softmax / sigmoid / norms / mask
  };

  Var leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  // Gradient of the last backward() root wrt v; zeros if v received none.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.data.empty()) return Tensor(n.value.shape);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  Var push(Node n) {
    for (auto in : n.inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // Visits nodes in exact reverse recording order starting at root.
  void backward(Var root);

 private:
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  void backprop(std::size_t id);

  std::vector<Node> nodes_;
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape));
}

inline Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ShapeError("operands recorded on different tapes");
  return *a.tape;
}

// C += A * B (A: m x k, B: k x n)
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A * B^T (A: m x k, B: n x k)
inline void gemm_abt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                         std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C += A^T * B (A: k x m, B: k x n)
inline void gemm_atb_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                         std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

// ---- forward ops ----------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  if (A.cols() != B.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tape::Node n;
  n.kind = OpKind::MatMul;
  n.inputs = {a.id, b.id};
  n.value = Tensor({A.rows(), B.cols()});
  detail::gemm_acc(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.cols());
  return tape.push(std::move(n));
}

// x: m x n, bias: n (or 1 x n) added to every row.
inline Var add_bias(Var x, Var bias) {
  Tape& tape = detail::same_tape(x, bias);
  const Tensor& X = tape.value(x);
  const Tensor& b = tape.value(bias);
  detail::require_matrix(X, "add_bias");
  if (b.size() != X.cols())
    throw ShapeError("add_bias: bias " + shape_str(b.shape) + " does not fit " + shape_str(X.shape));
  Tape::Node n;
  n.kind = OpKind::AddBias;
  n.inputs = {x.id, bias.id};
  n.value = X;
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < X.cols(); ++c) n.value(r, c) += b.data[c];
  return tape.push(std::move(n));
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape != B.shape) throw ShapeError("add: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tape::Node n;
  n.kind = OpKind::Add;
  n.inputs = {a.id, b.id};
  n.value = A;
  for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] += B.data[i];
  return tape.push(std::move(n));
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape != B.shape) throw ShapeError("mul: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tape::Node n;
  n.kind = OpKind::Mul;
  n.inputs = {a.id, b.id};
  n.value = A;
  for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] *= B.data[i];
  return tape.push(std::move(n));
}

inline Var scale(Var a, double s) {
  Tape& tape = *a.tape;
  Tape::Node n;
  n.kind = OpKind::Scale;
  n.inputs = {a.id};
  n.scalar = s;
  n.value = tape.value(a);
  for (auto& v : n.value.data) v *= s;
  return tape.push(std::move(n));
}

inline Var relu(Var a) {
  Tape& tape = *a.tape;
  Tape::Node n;
  n.kind = OpKind::Relu;
  n.inputs = {a.id};
  n.value = tape.value(a);
  for (auto& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return tape.push(std::move(n));
}

inline Var sum(Var a) {
  Tape& tape = *a.tape;
  Tape::Node n;
  n.kind = OpKind::Sum;
  n.inputs = {a.id};
  const auto& d = tape.value(a).data;
  n.value = Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0));
  return tape.push(std::move(n));
}

// Averages consecutive groups of `group` rows: (n*group) x h -> n x h.
inline Var mean_pool_rows(Var a, std::size_t group) {
  Tape& tape = *a.tape;
  const Tensor& A = tape.value(a);
  detail::require_matrix(A, "mean_pool_rows");
  if (group == 0 || A.rows() % group != 0)
    throw ShapeError("mean_pool_rows: " + std::to_string(A.rows()) + " rows not divisible into groups of " +
                     std::to_string(group));
  Tape::Node n;
  n.kind = OpKind::MeanPool;
  n.inputs = {a.id};
  n.scalar = static_cast<double>(group);
  n.value = Tensor({A.rows() / group, A.cols()});
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) n.value(r / group, c) += A(r, c) * inv;
  return tape.push(std::move(n));
}

// Each row divided by max(||row||, eps).
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
  Tape& tape = *a.tape;
  const Tensor& A = tape.value(a);
  detail::require_matrix(A, "l2_normalize_rows");
  Tape::Node n;
  n.kind = OpKind::L2Normalize;
  n.inputs = {a.id};
  n.scalar = eps;
  n.value = A;
  n.aux.resize(A.rows());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double ss = 0.0;
    for (double v : A.row(r)) ss += v * v;
    const double norm = std::sqrt(ss);
    n.aux[r] = norm;
    const double denom = std::max(norm, eps);
    for (auto& v : n.value.row(r)) v /= denom;
  }
  return tape.push(std::move(n));
}

// S[i][j] = a_i . b_j
inline Var similarity(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require_matrix(A, "similarity");
  detail::require_matrix(B, "similarity");
  if (A.cols() != B.cols())
    throw ShapeError("similarity: embedding widths differ, " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tape::Node n;
  n.kind = OpKind::Similarity;
  n.inputs = {a.id, b.id};
  n.value = Tensor({A.rows(), B.rows()});
  detail::gemm_abt_acc(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.rows());
  return tape.push(std::move(n));
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape;
  const Tensor& A = tape.value(a);
  detail::require_matrix(A, "transpose");
  Tape::Node n;
  n.kind = OpKind::Transpose;
  n.inputs = {a.id};
  n.value = Tensor({A.cols(), A.rows()});
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) n.value(c, r) = A(r, c);
  return tape.push(std::move(n));
}

// Reduction over rows of -log softmax(logits[i])[targets[i]], row-max stabilized.
inline Var softmax_cross_entropy_rows(Var logits, std::span<const std::size_t> targets,
                                      Reduction reduction = Reduction::Mean) {
  Tape& tape = *logits.tape;
  const Tensor& Z = tape.value(logits);
  detail::require_matrix(Z, "softmax_cross_entropy_rows");
  if (targets.size() != Z.rows())
    throw ShapeError("softmax_cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(Z.rows()) + " rows");
  Tape::Node n;
  n.kind = OpKind::SoftmaxXent;
  n.inputs = {logits.id};
  n.index.assign(targets.begin(), targets.end());
  n.scalar = reduction == Reduction::Mean ? 1.0 : 0.0;
  n.aux.resize(Z.size());
  double total = 0.0;
  for (std::size_t r = 0; r < Z.rows(); ++r) {
    if (targets[r] >= Z.cols())
      throw ShapeError("softmax_cross_entropy_rows: target " + std::to_string(targets[r]) +
                       " out of range for " + std::to_string(Z.cols()) + " classes");
    const auto row = Z.row(r);
    const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double mx = row[arg];
    double rest = 0.0;  // denominator minus the max term, which is exactly 1
    for (std::size_t c = 0; c < Z.cols(); ++c)
      if (c != arg) rest += std::exp(row[c] - mx);
    const double log_denom = std::log1p(rest);
    for (std::size_t c = 0; c < Z.cols(); ++c) n.aux[r * Z.cols() + c] = std::exp(row[c] - mx - log_denom);
    total += (mx - row[targets[r]]) + log_denom;
  }
  if (reduction == Reduction::Mean) total /= static_cast<double>(Z.rows());
  n.value = Tensor::scalar(total);
  return tape.push(std::move(n));
}

// Mean over unmasked entries of the logistic loss softplus(z) - y*z.
// targets and mask share the logits' layout; mask entries are 0 or 1.
inline Var sigmoid_bce(Var logits, std::span<const double> targets, std::span<const double> mask) {
  Tape& tape = *logits.tape;
  const Tensor& Z = tape.value(logits);
  if (targets.size() != Z.size() || mask.size() != Z.size())
    throw ShapeError("sigmoid_bce: targets/mask do not match logits " + shape_str(Z.shape));
  Tape::Node n;
  n.kind = OpKind::SigmoidBce;
  n.inputs = {logits.id};
  n.aux.resize(3 * Z.size());
  double total = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const double z = Z.data[i];
    n.aux[i] = 1.0 / (1.0 + std::exp(-z));
    n.aux[Z.size() + i] = targets[i];
    n.aux[2 * Z.size() + i] = mask[i];
    if (mask[i] == 0.0) continue;
    total += std::max(z, 0.0) - targets[i] * z + std::log1p(std::exp(-std::abs(z)));
    count += 1.0;
  }
  n.scalar = count;
  n.value = Tensor::scalar(count > 0.0 ? total / count : 0.0);
  return tape.push(std::move(n));
}

// ---- backward -------------------------------------------------------------

inline void Tape::backward(Var root) {
  if (root.tape != this) throw ShapeError("backward: root belongs to another tape");
  if (nodes_.at(root.id).value.size() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(nodes_[root.id].value.shape));
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(root.id).data[0] = 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.data.empty() || n.kind == OpKind::Leaf) continue;
    backprop(id);
  }
}

inline void Tape::backprop(std::size_t id) {
  const Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

  switch (n.kind) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      const Tensor& A = nodes_[n.inputs[0]].value;
      const Tensor& B = nodes_[n.inputs[1]].value;
      if (wants(0)) {
        Tensor& dA = grad_buffer(n.inputs[0]);
        detail::gemm_abt_acc(g.data.data(), B.data.data(), dA.data.data(), A.rows(), B.cols(), A.cols());
      }
      if (wants(1)) {
        Tensor& dB = grad_buffer(n.inputs[1]);
        detail::gemm_atb_acc(A.data.data(), g.data.data(), dB.data.data(), A.rows(), A.cols(), B.cols());
      }
      break;
    }
    case OpKind::AddBias: {
      if (wants(0)) {
        Tensor& dX = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dX.data[i] += g.data[i];
      }
      if (wants(1)) {
        Tensor& db = grad_buffer(n.inputs[1]);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) db.data[c] += g(r, c);
      }
      break;
    }
    case OpKind::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        Tensor& d = grad_buffer(n.inputs[k]);
        for (std::size_t i = 0; i < g.size(); ++i) d.data[i] += g.data[i];
      }
      break;
    }
    case OpKind::Mul: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& other = nodes_[n.inputs[1 - k]].value;
        Tensor& d = grad_buffer(n.inputs[k]);
        for (std::size_t i = 0; i < g.size(); ++i) d.data[i] += g.data[i] * other.data[i];
      }
      break;
    }
    case OpKind::Scale: {
      if (!wants(0)) break;
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) d.data[i] += n.scalar * g.data[i];
      break;
    }
    case OpKind::Relu: {
      if (!wants(0)) break;
      const Tensor& A = nodes_[n.inputs[0]].value;
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A.data[i] > 0.0) d.data[i] += g.data[i];
      break;
    }
    case OpKind::Sum: {
      if (!wants(0)) break;
      Tensor& d = grad_buffer(n.inputs[0]);
      for (auto& v : d.data) v += g.data[0];
      break;
    }
    case OpKind::MeanPool: {
      if (!wants(0)) break;
      const auto group = static_cast<std::size_t>(n.scalar);
      Tensor& d = grad_buffer(n.inputs[0]);
      const double inv = 1.0 / n.scalar;
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += g(r / group, c) * inv;
      break;
    }
    case OpKind::L2Normalize: {
      if (!wants(0)) break;
      const Tensor& Y = n.value;
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t r = 0; r < Y.rows(); ++r) {
        const double norm = n.aux[r];
        const auto y = Y.row(r);
        const auto gy = g.row(r);
        auto dx = d.row(r);
        if (norm > n.scalar) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.size(); ++c) dot += y[c] * gy[c];
          for (std::size_t c = 0; c < y.size(); ++c) dx[c] += (gy[c] - y[c] * dot) / norm;
        } else {
          for (std::size_t c = 0; c < y.size(); ++c) dx[c] += gy[c] / n.scalar;
        }
      }
      break;
    }
    case OpKind::Similarity: {
      const Tensor& A = nodes_[n.inputs[0]].value;
      const Tensor& B = nodes_[n.inputs[1]].value;
      if (wants(0)) {
        Tensor& dA = grad_buffer(n.inputs[0]);
        detail::gemm_acc(g.data.data(), B.data.data(), dA.data.data(), A.rows(), B.rows(), A.cols());
      }
      if (wants(1)) {
        Tensor& dB = grad_buffer(n.inputs[1]);
        detail::gemm_atb_acc(g.data.data(), A.data.data(), dB.data.data(), A.rows(), B.rows(), A.cols());
      }
      break;
    }
    case OpKind::Transpose: {
      if (!wants(0)) break;
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) d(c, r) += g(r, c);
      break;
    }
    case OpKind::SoftmaxXent: {
      if (!wants(0)) break;
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t rows = d.rows();
      const std::size_t cols = d.cols();
      const double w = g.data[0] * (n.scalar != 0.0 ? 1.0 / static_cast<double>(rows) : 1.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          d(r, c) += w * (n.aux[r * cols + c] - (c == n.index[r] ? 1.0 : 0.0));
      break;
    }
    case OpKind::SigmoidBce: {
      if (!wants(0) || n.scalar == 0.0) break;
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t m = d.size();
      const double w = g.data[0] / n.scalar;
      for (std::size_t i = 0; i < m; ++i)
        d.data[i] += w * n.aux[2 * m + i] * (n.aux[i] - n.aux[m + i]);
      break;
    }
  }
}

// ---- gradient checking ----------------------------------------------------

// Compares backward() gradients of a scalar computation against central
// differences. `fn(tape, inputs)` must record the computation on `tape` and
// return a scalar Var. Returns the worst relative error over all input
// elements; where both gradients are below 1e-8 in magnitude the absolute
// error is used instead.
template <class Fn>
double grad_check(Fn&& fn, const std::vector<Tensor>& inputs, double step = 1e-4) {
  if (!(step > 0.0)) throw NumericError("grad_check: step must be positive");
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    Var out = fn(tape, std::span<const Var>(vars));
    if (tape.value(out).size() != 1)
      throw ShapeError("grad_check: computation output must be scalar, got " + shape_str(tape.value(out).shape));
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (auto v : vars) grads->push_back(tape.grad(v));
    }
    return tape.value(out).data[0];
  };

  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    for (std::size_t i = 0; i < probe[t].size(); ++i) {
      const double orig = probe[t].data[i];
      probe[t].data[i] = orig + step;
      const double up = evaluate(probe, nullptr);
      probe[t].data[i] = orig - step;
      const double down = evaluate(probe, nullptr);
      probe[t].data[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[t].data[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < 1e-8 ? std::abs(a - numeric) : std::abs(a - numeric) / scale;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace x2ct
