#pragma once

// Dense 64-bit tensors and a define-by-run reverse-mode tape.
//
// Ops execute eagerly and record a node on the Graph; backward() replays the
// tape in reverse and writes exact gradients into every gradient-requiring
// leaf's bound Tensor. Single-threaded per graph; Tensors without grad are
// plain values and safe to share.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace disparse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense n-dimensional array of doubles, row-major, with an optional grad
// slot of the same length. grad is empty until populated by backward().
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
  }

  static Tensor zeros(Shape s) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape s, double v) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t numel() const { return data.size(); }
  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    for (double v : grad)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

enum class Op {
  Leaf,
  Const,
  MatMul,
  Add,
  Mul,
  AddBias,
  Relu,
  Tanh,
  Scale,
  Sum,
  Mean,
  Mse,
  L1,
  CosineLoss,
  SoftmaxCrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::AddBias: return "add_bias";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Mse: return "mse";
    case Op::L1: return "l1";
    case Op::CosineLoss: return "cosine_loss";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

class Graph {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct Var {
    std::size_t id = npos;
    bool valid() const { return id != npos; }
  };

  // Gradient-requiring leaf bound to external storage; backward() assigns
  // the leaf's gradient into t.grad.
  Var leaf(Tensor& t) {
    Node n;
    n.op = Op::Leaf;
    n.shape = t.shape;
    n.value = t.data;
    n.bound = &t;
    n.needs_grad = true;
    return push(std::move(n));
  }

  Var constant(const Tensor& t) {
    Node n;
    n.op = Op::Const;
    n.shape = t.shape;
    n.value = t.data;
    return push(std::move(n));
  }

  Var constant(Tensor&& t) {
    Node n;
    n.op = Op::Const;
    n.shape = std::move(t.shape);
    n.value = std::move(t.data);
    return push(std::move(n));
  }

  // a [M,K] x b [K,N] -> [M,N]
  Var matmul(Var a, Var b) {
    const Node& na = at(a, "matmul");
    const Node& nb = at(b, "matmul");
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
      reject("matmul", na.shape, nb.shape);
    std::size_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
    Node out = make(Op::MatMul, a, b, {m, n});
    const double* pa = na.value.data();
    const double* pb = nb.value.data();
    double* pc = out.value.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        double av = pa[i * k + l];
        if (av == 0.0) continue;
        const double* brow = pb + l * n;
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    return push(std::move(out));
  }

  // Elementwise add, identical shapes.
  Var add(Var a, Var b) {
    const Node& na = at(a, "add");
    const Node& nb = at(b, "add");
    if (na.shape != nb.shape) reject("add", na.shape, nb.shape);
    Node out = make(Op::Add, a, b, na.shape);
    for (std::size_t i = 0; i < out.value.size(); ++i)
      out.value[i] = na.value[i] + nb.value[i];
    return push(std::move(out));
  }

  // Elementwise multiply, identical shapes.
  Var mul(Var a, Var b) {
    const Node& na = at(a, "mul");
    const Node& nb = at(b, "mul");
    if (na.shape != nb.shape) reject("mul", na.shape, nb.shape);
    Node out = make(Op::Mul, a, b, na.shape);
    for (std::size_t i = 0; i < out.value.size(); ++i)
      out.value[i] = na.value[i] * nb.value[i];
    return push(std::move(out));
  }

  // x [N,F] + b [F], broadcast over rows.
  Var add_bias(Var x, Var b) {
    const Node& nx = at(x, "add_bias");
    const Node& nb = at(b, "add_bias");
    if (nx.shape.size() != 2 || nb.shape.size() != 1 || nx.shape[1] != nb.shape[0])
      reject("add_bias", nx.shape, nb.shape);
    std::size_t rows = nx.shape[0], cols = nx.shape[1];
    Node out = make(Op::AddBias, x, b, nx.shape);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        out.value[i * cols + j] = nx.value[i * cols + j] + nb.value[j];
    return push(std::move(out));
  }

  Var relu(Var x) {
    const Node& nx = at(x, "relu");
    Node out = make(Op::Relu, x, Var{}, nx.shape);
    for (std::size_t i = 0; i < out.value.size(); ++i)
      out.value[i] = nx.value[i] > 0.0 ? nx.value[i] : 0.0;
    return push(std::move(out));
  }

  Var tanh(Var x) {
    const Node& nx = at(x, "tanh");
    Node out = make(Op::Tanh, x, Var{}, nx.shape);
    for (std::size_t i = 0; i < out.value.size(); ++i)
      out.value[i] = std::tanh(nx.value[i]);
    return push(std::move(out));
  }

  Var scale(Var x, double c) {
    const Node& nx = at(x, "scale");
    Node out = make(Op::Scale, x, Var{}, nx.shape);
    out.c = c;
    for (std::size_t i = 0; i < out.value.size(); ++i) out.value[i] = c * nx.value[i];
    return push(std::move(out));
  }

  Var sum(Var x) {
    const Node& nx = at(x, "sum");
    Node out = make(Op::Sum, x, Var{}, {1});
    double s = 0.0;
    for (double v : nx.value) s += v;
    out.value[0] = s;
    return push(std::move(out));
  }

  Var mean(Var x) {
    const Node& nx = at(x, "mean");
    Node out = make(Op::Mean, x, Var{}, {1});
    double s = 0.0;
    for (double v : nx.value) s += v;
    out.value[0] = s / static_cast<double>(nx.value.size());
    return push(std::move(out));
  }

  // Mean squared error over all elements.
  Var mse(Var pred, Var target) {
    const Node& np = at(pred, "mse");
    const Node& nt = at(target, "mse");
    if (np.shape != nt.shape) reject("mse", np.shape, nt.shape);
    Node out = make(Op::Mse, pred, target, {1});
    double s = 0.0;
    for (std::size_t i = 0; i < np.value.size(); ++i) {
      double d = np.value[i] - nt.value[i];
      s += d * d;
    }
    out.value[0] = s / static_cast<double>(np.value.size());
    return push(std::move(out));
  }

  // Mean absolute error over all elements; subgradient 0 at zero residual.
  Var l1(Var pred, Var target) {
    const Node& np = at(pred, "l1");
    const Node& nt = at(target, "l1");
    if (np.shape != nt.shape) reject("l1", np.shape, nt.shape);
    Node out = make(Op::L1, pred, target, {1});
    double s = 0.0;
    for (std::size_t i = 0; i < np.value.size(); ++i)
      s += std::abs(np.value[i] - nt.value[i]);
    out.value[0] = s / static_cast<double>(np.value.size());
    return push(std::move(out));
  }

  // Mean over rows of the negative cosine similarity between prediction and
  // target rows. Row norms are floored at 1e-12.
  Var cosine_loss(Var pred, Var target) {
    const Node& np = at(pred, "cosine_loss");
    const Node& nt = at(target, "cosine_loss");
    if (np.shape.size() != 2 || np.shape != nt.shape)
      reject("cosine_loss", np.shape, nt.shape);
    std::size_t rows = np.shape[0], cols = np.shape[1];
    Node out = make(Op::CosineLoss, pred, target, {1});
    out.aux.resize(rows * 3);  // per row: dot, |p|, |t|
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double* p = np.value.data() + i * cols;
      const double* t = nt.value.data() + i * cols;
      double dot = 0.0, pp = 0.0, tt = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        dot += p[j] * t[j];
        pp += p[j] * p[j];
        tt += t[j] * t[j];
      }
      double npn = std::max(std::sqrt(pp), 1e-12);
      double ntn = std::max(std::sqrt(tt), 1e-12);
      out.aux[i * 3] = dot;
      out.aux[i * 3 + 1] = npn;
      out.aux[i * 3 + 2] = ntn;
      total += -dot / (npn * ntn);
    }
    out.value[0] = total / static_cast<double>(rows);
    return push(std::move(out));
  }

  // logits [N,C], labels [N] holding integral class ids. Mean over rows of
  // the stable log-sum-exp cross-entropy. aux caches softmax probabilities.
  Var softmax_cross_entropy(Var logits, Var labels) {
    const Node& nz = at(logits, "softmax_cross_entropy");
    const Node& ny = at(labels, "softmax_cross_entropy");
    if (nz.shape.size() != 2 || ny.shape.size() != 1 || nz.shape[0] != ny.shape[0])
      reject("softmax_cross_entropy", nz.shape, ny.shape);
    std::size_t rows = nz.shape[0], cols = nz.shape[1];
    Node out = make(Op::SoftmaxCrossEntropy, logits, labels, {1});
    out.aux.resize(rows * cols);
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double* z = nz.value.data() + i * cols;
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < cols; ++j) zmax = std::max(zmax, z[j]);
      double se = 0.0;
      for (std::size_t j = 0; j < cols; ++j) se += std::exp(z[j] - zmax);
      double lse = zmax + std::log(se);
      auto y = static_cast<std::size_t>(ny.value[i]);
      if (ny.value[i] < 0.0 || y >= cols)
        throw std::invalid_argument(
            "softmax_cross_entropy: label out of range at row " + std::to_string(i));
      total += lse - z[y];
      for (std::size_t j = 0; j < cols; ++j)
        out.aux[i * cols + j] = std::exp(z[j] - lse);
    }
    out.value[0] = total / static_cast<double>(rows);
    return push(std::move(out));
  }

  // Reverse pass from `output` with an explicit seed tensor of the same
  // shape. Writes gradients into every bound leaf's grad slot.
  void backward(Var output, const Tensor& seed) {
    if (nodes_.empty()) throw std::logic_error("backward: empty graph, run forward first");
    const Node& no = at(output, "backward");
    if (no.shape != seed.shape)
      throw std::invalid_argument("backward: seed shape " + shape_str(seed.shape) +
                                  " does not match output shape " + shape_str(no.shape));
    for (Node& n : nodes_) n.grad.assign(n.needs_grad ? n.value.size() : 0, 0.0);
    nodes_[output.id].grad = seed.data;
    if (!nodes_[output.id].needs_grad)
      nodes_[output.id].grad.assign(no.value.size(), 0.0);

    for (std::size_t idx = output.id + 1; idx-- > 0;) {
      Node& n = nodes_[idx];
      if (!n.needs_grad || n.grad.empty()) continue;
      propagate(n);
    }
    for (Node& n : nodes_)
      if (n.op == Op::Leaf && n.bound) n.bound->grad = n.grad;
  }

  // Scalar convenience: seed with 1.
  void backward(Var output) {
    const Node& no = at(output, "backward");
    if (no.value.size() != 1)
      throw std::invalid_argument("backward: implicit seed requires a scalar output");
    backward(output, Tensor(no.shape, {1.0}));
  }

  const Shape& shape(Var v) const { return at(v, "shape").shape; }
  std::span<const double> value(Var v) const { return at(v, "value").value; }
  std::span<const double> grad(Var v) const { return at(v, "grad").grad; }
  Tensor value_tensor(Var v) const {
    const Node& n = at(v, "value_tensor");
    return Tensor(n.shape, n.value);
  }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::Const;
    std::size_t a = npos, b = npos;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> aux;
    double c = 0.0;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Node make(Op op, Var a, Var b, Shape shape) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.shape = std::move(shape);
    n.value.assign(shape_numel(n.shape), 0.0);
    bool ng = false;
    if (a.valid()) ng = ng || nodes_[a.id].needs_grad;
    if (b.valid()) ng = ng || nodes_[b.id].needs_grad;
    n.needs_grad = ng;
    return n;
  }

  const Node& at(Var v, const char* who) const {
    if (!v.valid() || v.id >= nodes_.size())
      throw std::invalid_argument(std::string(who) + ": invalid graph variable");
    return nodes_[v.id];
  }

  [[noreturn]] static void reject(const char* who, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
  }

  void accum(std::size_t id, std::size_t i, double v) {
    Node& n = nodes_[id];
    if (n.needs_grad) n.grad[i] += v;
  }

  void propagate(Node& n) {
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::MatMul: {
        Node& na = nodes_[n.a];
        Node& nb = nodes_[n.b];
        std::size_t m = na.shape[0], k = na.shape[1], cols = nb.shape[1];
        if (na.needs_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double s = 0.0;
              const double* grow = n.grad.data() + i * cols;
              const double* brow = nb.value.data() + l * cols;
              for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
              na.grad[i * k + l] += s;
            }
        if (nb.needs_grad)
          for (std::size_t l = 0; l < k; ++l)
            for (std::size_t i = 0; i < m; ++i) {
              double av = na.value[i * k + l];
              if (av == 0.0) continue;
              const double* grow = n.grad.data() + i * cols;
              double* brow = nb.grad.data() + l * cols;
              for (std::size_t j = 0; j < cols; ++j) brow[j] += av * grow[j];
            }
        break;
      }
      case Op::Add:
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          accum(n.a, i, n.grad[i]);
          accum(n.b, i, n.grad[i]);
        }
        break;
      case Op::Mul: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          accum(n.a, i, n.grad[i] * nb.value[i]);
          accum(n.b, i, n.grad[i] * na.value[i]);
        }
        break;
      }
      case Op::AddBias: {
        std::size_t rows = n.shape[0], cols = n.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            accum(n.a, i * cols + j, n.grad[i * cols + j]);
            accum(n.b, j, n.grad[i * cols + j]);
          }
        break;
      }
      case Op::Relu: {
        const Node& na = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          accum(n.a, i, na.value[i] > 0.0 ? n.grad[i] : 0.0);
        break;
      }
      case Op::Tanh:
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          accum(n.a, i, n.grad[i] * (1.0 - n.value[i] * n.value[i]));
        break;
      case Op::Scale:
        for (std::size_t i = 0; i < n.grad.size(); ++i) accum(n.a, i, n.c * n.grad[i]);
        break;
      case Op::Sum: {
        const Node& na = nodes_[n.a];
        for (std::size_t i = 0; i < na.value.size(); ++i) accum(n.a, i, n.grad[0]);
        break;
      }
      case Op::Mean: {
        const Node& na = nodes_[n.a];
        double inv = 1.0 / static_cast<double>(na.value.size());
        for (std::size_t i = 0; i < na.value.size(); ++i)
          accum(n.a, i, n.grad[0] * inv);
        break;
      }
      case Op::Mse: {
        const Node& np = nodes_[n.a];
        const Node& nt = nodes_[n.b];
        double inv = 2.0 / static_cast<double>(np.value.size());
        for (std::size_t i = 0; i < np.value.size(); ++i) {
          double d = np.value[i] - nt.value[i];
          accum(n.a, i, n.grad[0] * inv * d);
          accum(n.b, i, -n.grad[0] * inv * d);
        }
        break;
      }
      case Op::L1: {
        const Node& np = nodes_[n.a];
        const Node& nt = nodes_[n.b];
        double inv = 1.0 / static_cast<double>(np.value.size());
        for (std::size_t i = 0; i < np.value.size(); ++i) {
          double d = np.value[i] - nt.value[i];
          double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
          accum(n.a, i, n.grad[0] * inv * s);
          accum(n.b, i, -n.grad[0] * inv * s);
        }
        break;
      }
      case Op::CosineLoss: {
        const Node& np = nodes_[n.a];
        const Node& nt = nodes_[n.b];
        std::size_t rows = np.shape[0], cols = np.shape[1];
        double inv = n.grad[0] / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i) {
          double dot = n.aux[i * 3], pn = n.aux[i * 3 + 1], tn = n.aux[i * 3 + 2];
          const double* p = np.value.data() + i * cols;
          const double* t = nt.value.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            // d(-cos)/dp = -(t/(|p||t|) - dot * p / (|p|^3 |t|))
            accum(n.a, i * cols + j,
                  inv * -(t[j] / (pn * tn) - dot * p[j] / (pn * pn * pn * tn)));
            if (nodes_[n.b].needs_grad)
              accum(n.b, i * cols + j,
                    inv * -(p[j] / (pn * tn) - dot * t[j] / (tn * tn * tn * pn)));
          }
        }
        break;
      }
      case Op::SoftmaxCrossEntropy: {
        const Node& nz = nodes_[n.a];
        const Node& ny = nodes_[n.b];
        std::size_t rows = nz.shape[0], cols = nz.shape[1];
        double inv = n.grad[0] / static_cast<double>(rows);
        if (nodes_[n.a].needs_grad)
          for (std::size_t i = 0; i < rows; ++i) {
            auto y = static_cast<std::size_t>(ny.value[i]);
            for (std::size_t j = 0; j < cols; ++j) {
              double p = n.aux[i * cols + j];
              accum(n.a, i * cols + j, inv * (p - (j == y ? 1.0 : 0.0)));
            }
          }
        break;
      }
    }
  }
};

}  // namespace disparse
