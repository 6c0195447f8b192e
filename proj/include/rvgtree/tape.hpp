#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rvgtree/numeric.hpp"
#include "rvgtree/tensor.hpp"

namespace rvg {

// Handle into a Tape. Only valid for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Records primitive ops in execution order and replays them backward once per
// backward() call. Leaf nodes bound to a parameter Tensor flush their
// accumulated gradient into the tensor's grad slot, so repeated backward
// passes (or several tapes over the same parameters) accumulate until the
// caller zeroes the grads.
class Tape {
 public:
  Var constant(std::vector<double> v, std::vector<int> shape = {}) {
    if (shape.empty()) shape = {static_cast<int>(v.size())};
    if (Tensor::numel(shape) != static_cast<long long>(v.size()))
      throw DataError("constant: shape does not match value count");
    check_finite(v, "constant");
    Node n;
    n.op = Op::Constant;
    n.shape = std::move(shape);
    n.value = std::move(v);
    return push(std::move(n));
  }

  Var scalar_const(double v) { return constant({v}, {1}); }

  // Parameter leaf. The tensor must outlive the tape; its grad receives the
  // accumulated gradient at the end of backward().
  Var leaf(Tensor& t) {
    Node n;
    n.op = Op::Leaf;
    n.shape = t.shape;
    n.value = t.value;
    n.param = &t;
    return push(std::move(n));
  }

  Var add(Var a, Var b) { return binary_elementwise(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary_elementwise(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary_elementwise(Op::Mul, a, b); }

  Var scale(Var a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.scalar = c;
    n.shape = node(a).shape;
    n.value = node(a).value;
    for (double& x : n.value) x *= c;
    return push(std::move(n), "scale");
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // W: {r, c} matrix, x: {c} vector -> {r} vector
  Var matvec(Var W, Var x) {
    const Node& w = node(W);
    const Node& v = node(x);
    if (w.shape.size() != 2 || static_cast<int>(v.value.size()) != w.shape[1])
      throw DataError("matvec: shape mismatch");
    int r = w.shape[0], c = w.shape[1];
    Node n;
    n.op = Op::MatVec;
    n.a = W.id;
    n.b = x.id;
    n.shape = {r};
    n.value.assign(r, 0.0);
    for (int i = 0; i < r; ++i) {
      double s = 0.0;
      const double* row = w.value.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) s += row[j] * v.value[j];
      n.value[i] = s;
    }
    return push(std::move(n), "matvec");
  }

  Var dot(Var a, Var b) {
    const Node& x = node(a);
    const Node& y = node(b);
    if (x.value.size() != y.value.size()) throw DataError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < x.value.size(); ++i) s += x.value[i] * y.value[i];
    Node n;
    n.op = Op::Dot;
    n.a = a.id;
    n.b = b.id;
    n.shape = {1};
    n.value = {s};
    return push(std::move(n), "dot");
  }

  Var concat(Var a, Var b) {
    const Node& x = node(a);
    const Node& y = node(b);
    Node n;
    n.op = Op::Concat;
    n.a = a.id;
    n.b = b.id;
    n.shape = {static_cast<int>(x.value.size() + y.value.size())};
    n.value = x.value;
    n.value.insert(n.value.end(), y.value.begin(), y.value.end());
    return push(std::move(n), "concat");
  }

  Var slice(Var a, int offset, int len) {
    const Node& x = node(a);
    if (offset < 0 || len <= 0 ||
        offset + len > static_cast<int>(x.value.size()))
      throw DataError("slice: range out of bounds");
    Node n;
    n.op = Op::Slice;
    n.a = a.id;
    n.i0 = offset;
    n.i1 = len;
    n.shape = {len};
    n.value.assign(x.value.begin() + offset, x.value.begin() + offset + len);
    return push(std::move(n), "slice");
  }

  Var sigmoid(Var a) {
    Node n = unary_init(Op::Sigmoid, a);
    for (double& x : n.value) x = 1.0 / (1.0 + std::exp(-x));
    return push(std::move(n), "sigmoid");
  }

  Var tanh(Var a) {
    Node n = unary_init(Op::Tanh, a);
    for (double& x : n.value) x = std::tanh(x);
    return push(std::move(n), "tanh");
  }

  Var log(Var a) {
    Node n = unary_init(Op::Log, a);
    for (double& x : n.value) {
      if (x <= 0.0) throw NumericError("log: non-positive input");
      x = std::log(x);
    }
    return push(std::move(n), "log");
  }

  Var softmax(Var a, const std::vector<std::uint8_t>* mask = nullptr) {
    const Node& x = node(a);
    Node n;
    n.op = Op::Softmax;
    n.a = a.id;
    n.shape = x.shape;
    if (mask) n.mask = *mask;
    n.value = softmax_values(x.value, mask);
    return push(std::move(n), "softmax");
  }

  Var log_softmax(Var a) {
    const Node& x = node(a);
    Node n;
    n.op = Op::LogSoftmax;
    n.a = a.id;
    n.shape = x.shape;
    n.value = log_softmax_values(x.value);
    return push(std::move(n), "log_softmax");
  }

  Var pick(Var a, int index) {
    const Node& x = node(a);
    if (index < 0 || index >= static_cast<int>(x.value.size()))
      throw DataError("pick: index out of range");
    Node n;
    n.op = Op::Pick;
    n.a = a.id;
    n.i0 = index;
    n.shape = {1};
    n.value = {x.value[index]};
    return push(std::move(n), "pick");
  }

  Var stack(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw DataError("stack: no inputs");
    Node n;
    n.op = Op::Stack;
    n.shape = {static_cast<int>(scalars.size())};
    n.value.reserve(scalars.size());
    for (Var s : scalars) {
      const Node& x = node(s);
      if (x.value.size() != 1) throw DataError("stack: inputs must be scalars");
      n.multi.push_back(s.id);
      n.value.push_back(x.value[0]);
    }
    return push(std::move(n), "stack");
  }

  Var sum(Var a) {
    const Node& x = node(a);
    double s = 0.0;
    for (double v : x.value) s += v;
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    n.shape = {1};
    n.value = {s};
    return push(std::move(n), "sum");
  }

  Var l2_normalize(Var a) {
    const Node& x = node(a);
    Node n;
    n.op = Op::L2Norm;
    n.a = a.id;
    n.shape = x.shape;
    n.value = l2_normalize_values(x.value);
    return push(std::move(n), "l2_normalize");
  }

  // weights: {k}; items: k same-length vectors -> weighted sum of items
  Var convex_combine(Var weights, const std::vector<Var>& items) {
    const Node& w = node(weights);
    if (w.value.size() != items.size())
      throw DataError("convex_combine: weight/item count mismatch");
    if (items.empty()) throw DataError("convex_combine: no items");
    std::size_t dim = node(items[0]).value.size();
    Node n;
    n.op = Op::ConvexCombine;
    n.a = weights.id;
    n.shape = node(items[0]).shape;
    n.value.assign(dim, 0.0);
    for (std::size_t j = 0; j < items.size(); ++j) {
      const Node& it = node(items[j]);
      if (it.value.size() != dim)
        throw DataError("convex_combine: item length mismatch");
      n.multi.push_back(items[j].id);
      for (std::size_t i = 0; i < dim; ++i)
        n.value[i] += w.value[j] * it.value[i];
    }
    return push(std::move(n), "convex_combine");
  }

  // Straight-through selection: forward emits the one-hot of `index`,
  // backward passes the incoming gradient to `soft` unchanged.
  Var st_onehot(Var soft, int index) {
    const Node& x = node(soft);
    if (index < 0 || index >= static_cast<int>(x.value.size()))
      throw DataError("st_onehot: index out of range");
    Node n;
    n.op = Op::StOneHot;
    n.a = soft.id;
    n.i0 = index;
    n.shape = x.shape;
    n.value.assign(x.value.size(), 0.0);
    n.value[static_cast<std::size_t>(index)] = 1.0;
    return push(std::move(n), "st_onehot");
  }

  Var affine(Var W, Var x, Var b) { return add(matvec(W, x), b); }

  const std::vector<double>& value(Var v) const { return node(v).value; }
  const std::vector<double>& grad(Var v) const { return node(v).grad; }

  double scalar(Var v) const {
    const Node& n = node(v);
    if (n.value.size() != 1) throw DataError("scalar: variable is not scalar");
    return n.value[0];
  }

  int numel(Var v) const { return static_cast<int>(node(v).value.size()); }
  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Reverse sweep from `output` (must be scalar). Node grads are reset first;
  // parameter grads are accumulated, never reset.
  void backward(Var output) {
    if (!output.valid() || output.id >= static_cast<int>(nodes_.size()))
      throw DataError("backward: unknown output");
    if (nodes_[output.id].value.size() != 1)
      throw NumericError("backward: output is not scalar");
    for (Node& n : nodes_) {
      n.grad.assign(n.value.size(), 0.0);
    }
    nodes_[output.id].grad[0] = 1.0;
    for (int id = output.id; id >= 0; --id) backprop(nodes_[id]);
    for (Node& n : nodes_)
      if (n.op == Op::Leaf && n.param)
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          n.param->grad[i] += n.grad[i];
  }

 private:
  enum class Op {
    Constant,
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatVec,
    Dot,
    Concat,
    Slice,
    Sigmoid,
    Tanh,
    Log,
    Softmax,
    LogSoftmax,
    Pick,
    Stack,
    Sum,
    L2Norm,
    ConvexCombine,
    StOneHot,
  };

  struct Node {
    Op op = Op::Constant;
    int a = -1;
    int b = -1;
    int i0 = 0;
    int i1 = 0;
    double scalar = 0.0;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<int> multi;
    std::vector<std::uint8_t> mask;
    Tensor* param = nullptr;
  };

  Node& node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw DataError("tape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    return const_cast<Tape*>(this)->node(v);
  }

  Var push(Node n, const char* what = nullptr) {
    if (what) check_finite(n.value, what);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var binary_elementwise(Op op, Var a, Var b) {
    const Node& x = node(a);
    const Node& y = node(b);
    if (x.value.size() != y.value.size())
      throw DataError("elementwise op: shape mismatch");
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.shape = x.shape;
    n.value.resize(x.value.size());
    for (std::size_t i = 0; i < x.value.size(); ++i) {
      switch (op) {
        case Op::Add: n.value[i] = x.value[i] + y.value[i]; break;
        case Op::Sub: n.value[i] = x.value[i] - y.value[i]; break;
        case Op::Mul: n.value[i] = x.value[i] * y.value[i]; break;
        default: throw DataError("not an elementwise op");
      }
    }
    return push(std::move(n), "elementwise");
  }

  Node unary_init(Op op, Var a) {
    const Node& x = node(a);
    Node n;
    n.op = op;
    n.a = a.id;
    n.shape = x.shape;
    n.value = x.value;
    return n;
  }

  void backprop(Node& n) {
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case Op::Constant:
      case Op::Leaf:
        break;
      case Op::Add: {
        accum(n.a, g);
        accum(n.b, g);
        break;
      }
      case Op::Sub: {
        accum(n.a, g);
        Node& b = nodes_[n.b];
        for (std::size_t i = 0; i < g.size(); ++i) b.grad[i] -= g[i];
        break;
      }
      case Op::Mul: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        for (std::size_t i = 0; i < g.size(); ++i) {
          a.grad[i] += g[i] * b.value[i];
          b.grad[i] += g[i] * a.value[i];
        }
        break;
      }
      case Op::Scale: {
        Node& a = nodes_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += n.scalar * g[i];
        break;
      }
      case Op::MatVec: {
        Node& w = nodes_[n.a];
        Node& x = nodes_[n.b];
        int r = w.shape[0], c = w.shape[1];
        for (int i = 0; i < r; ++i) {
          double gi = g[static_cast<std::size_t>(i)];
          if (gi == 0.0) continue;
          double* wrow_g = w.grad.data() + static_cast<std::size_t>(i) * c;
          const double* wrow = w.value.data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            wrow_g[j] += gi * x.value[j];
            x.grad[j] += gi * wrow[j];
          }
        }
        break;
      }
      case Op::Dot: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        double g0 = g[0];
        for (std::size_t i = 0; i < a.value.size(); ++i) {
          a.grad[i] += g0 * b.value[i];
          b.grad[i] += g0 * a.value[i];
        }
        break;
      }
      case Op::Concat: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        std::size_t na = a.value.size();
        for (std::size_t i = 0; i < na; ++i) a.grad[i] += g[i];
        for (std::size_t i = 0; i < b.value.size(); ++i) b.grad[i] += g[na + i];
        break;
      }
      case Op::Slice: {
        Node& a = nodes_[n.a];
        for (int i = 0; i < n.i1; ++i)
          a.grad[static_cast<std::size_t>(n.i0 + i)] += g[static_cast<std::size_t>(i)];
        break;
      }
      case Op::Sigmoid: {
        Node& a = nodes_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::Tanh: {
        Node& a = nodes_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::Log: {
        Node& a = nodes_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] / a.value[i];
        break;
      }
      case Op::Softmax: {
        Node& a = nodes_[n.a];
        double gy = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * n.value[i];
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!n.mask.empty() && !n.mask[i]) continue;
          a.grad[i] += n.value[i] * (g[i] - gy);
        }
        break;
      }
      case Op::LogSoftmax: {
        Node& a = nodes_[n.a];
        double gs = 0.0;
        for (double gi : g) gs += gi;
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] - std::exp(n.value[i]) * gs;
        break;
      }
      case Op::Pick: {
        nodes_[n.a].grad[static_cast<std::size_t>(n.i0)] += g[0];
        break;
      }
      case Op::Stack: {
        for (std::size_t i = 0; i < n.multi.size(); ++i)
          nodes_[n.multi[i]].grad[0] += g[i];
        break;
      }
      case Op::Sum: {
        Node& a = nodes_[n.a];
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g[0];
        break;
      }
      case Op::L2Norm: {
        Node& a = nodes_[n.a];
        double sq = 0.0;
        for (double x : a.value) sq += x * x;
        double norm = std::sqrt(sq);
        if (norm <= kL2NormEps) break;  // guarded zero output, zero gradient
        double vg = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) vg += a.value[i] * g[i];
        double n3 = norm * norm * norm;
        for (std::size_t i = 0; i < g.size(); ++i)
          a.grad[i] += g[i] / norm - a.value[i] * vg / n3;
        break;
      }
      case Op::ConvexCombine: {
        Node& w = nodes_[n.a];
        for (std::size_t j = 0; j < n.multi.size(); ++j) {
          Node& it = nodes_[n.multi[j]];
          double wg = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) {
            it.grad[i] += w.value[j] * g[i];
            wg += it.value[i] * g[i];
          }
          w.grad[j] += wg;
        }
        break;
      }
      case Op::StOneHot: {
        accum(n.a, g);
        break;
      }
    }
  }

  void accum(int id, const std::vector<double>& g) {
    Node& t = nodes_[static_cast<std::size_t>(id)];
    for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace rvg
