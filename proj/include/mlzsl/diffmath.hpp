#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Graph records nodes in construction order, which is always a topological
// order. Values are computed lazily by evaluate(); backward() sweeps the
// evaluated tape numerically, while grad_as_graph() appends the adjoint
// computation as ordinary nodes so the resulting gradient can itself be
// differentiated (one extra order, enough for gradient penalties).

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlzsl/tensor.hpp"

namespace mlzsl::diff {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Sum,
  SumAxis,
  MeanAxis,
  SoftmaxRows,
  LeakyRelu,
  LeakyReluGrad,  // g * leaky_relu'(x); the adjoint of LeakyRelu
  Sigmoid,
  Log,
  Exp,
  Square,
  Sqrt,
  ConcatRows,
  SliceRows,
  NormAxis,
  BroadcastRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::SumAxis: return "sum_axis";
    case Op::MeanAxis: return "mean_axis";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::LeakyReluGrad: return "leaky_relu_grad";
    case Op::Sigmoid: return "sigmoid";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::ConcatRows: return "concat_rows";
    case Op::SliceRows: return "slice_rows";
    case Op::NormAxis: return "norm_axis";
    case Op::BroadcastRows: return "broadcast_rows";
  }
  return "?";
}

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();
inline constexpr double kDefaultLeakySlope = 0.2;

struct Node {
  Op op = Op::Leaf;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  Shape shape;
  double scalar = 0.0;  // scale factor or leaky slope
  std::size_t axis = 0;
  std::size_t begin = 0;  // slice start; broadcast row count
  std::size_t end = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool depends_on_leaf = false;
  std::string name;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Shape& shape() const;
  std::size_t rows() const { return shape()[0]; }
  std::size_t cols() const { return shape()[1]; }
  const Tensor& value() const;

 private:
  friend class Graph;
  Var(Graph* g, NodeId id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  NodeId id_ = kNoNode;
};

/// Gradient of a scalar with respect to every leaf of the graph.
class Gradients {
 public:
  const Tensor& operator[](Var leaf) const { return at(leaf.id()); }
  const Tensor& at(NodeId leaf) const {
    auto it = grads_.find(leaf);
    if (it == grads_.end()) throw Error("gradient requested for node " + std::to_string(leaf) + ", which is not a leaf");
    return it->second;
  }
  const std::map<NodeId, Tensor>& all() const noexcept { return grads_; }

 private:
  friend class Graph;
  std::map<NodeId, Tensor> grads_;
};

using Bindings = std::vector<std::pair<Var, Tensor>>;

namespace kernels {

/// C = op(A) * op(B) where op transposes when the flag is set.
inline Tensor matmul(const Tensor& A, const Tensor& B, bool ta, bool tb) {
  const std::size_t m = ta ? A.cols() : A.rows();
  const std::size_t k = ta ? A.rows() : A.cols();
  const std::size_t kb = tb ? B.cols() : B.rows();
  const std::size_t n = tb ? B.rows() : B.cols();
  if (k != kb) throw ShapeError("matmul inner dimension mismatch");
  Tensor C(m, n);
  const double* a = A.data().data();
  const double* b = B.data().data();
  double* c = C.data().data();
  const std::size_t lda = A.cols();
  const std::size_t ldb = B.cols();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * lda + p];
        if (av == 0.0) continue;
        const double* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a[p * lda + i];
        if (av == 0.0) continue;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * lda;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * ldb;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] = s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * lda + i] * b[j * ldb + p];
        c[i * n + j] = s;
      }
    }
  }
  return C;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kernels

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves -------------------------------------------------------------

  /// Differentiable input or parameter with an initial binding.
  Var leaf(Tensor value, std::string name = {}) {
    require_rank2(value.shape(), "leaf");
    Var v = push(make_leaf(Op::Leaf, value.shape(), std::move(name)));
    values_.back() = std::move(value);
    return v;
  }

  /// Differentiable input whose value is supplied later through evaluate().
  Var placeholder(Shape shape, std::string name = {}) {
    require_rank2(shape, "placeholder");
    for (auto d : shape)
      if (d == 0) throw ShapeError("placeholder dimensions must be positive");
    return push(make_leaf(Op::Leaf, std::move(shape), std::move(name)));
  }

  Var constant(Tensor value, std::string name = {}) {
    require_rank2(value.shape(), "constant");
    Var v = push(make_leaf(Op::Constant, value.shape(), std::move(name)));
    values_.back() = std::move(value);
    return v;
  }

  Var ones(std::size_t r, std::size_t c) { return constant(Tensor(r, c, 1.0)); }
  Var zeros(std::size_t r, std::size_t c) { return constant(Tensor(r, c, 0.0)); }

  // ---- primitives ---------------------------------------------------------

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Shape& sa = shape_of(a);
    const Shape& sb = shape_of(b);
    const std::size_t m = trans_a ? sa[1] : sa[0];
    const std::size_t k = trans_a ? sa[0] : sa[1];
    const std::size_t kb = trans_b ? sb[1] : sb[0];
    const std::size_t n = trans_b ? sb[0] : sb[1];
    if (k != kb) fail_shape("matmul", a, b);
    return push(binary(Op::MatMul, a, b, {m, n}, [&](Node& nd) {
      nd.trans_a = trans_a;
      nd.trans_b = trans_b;
    }));
  }

  Var add(Var a, Var b) { return elementwise(Op::Add, a, b); }
  Var sub(Var a, Var b) { return elementwise(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return elementwise(Op::Mul, a, b); }

  Var scale(Var a, double s) {
    return push(unary(Op::Scale, a, shape_of(a), [&](Node& nd) { nd.scalar = s; }));
  }

  /// Sum of all entries, as a 1x1 tensor.
  Var sum(Var a) { return push(unary(Op::Sum, a, {1, 1})); }

  /// Sum along `axis` keeping the reduced dimension (axis 0 -> 1xn, axis 1 -> mx1).
  Var sum_axis(Var a, std::size_t axis) { return reduce(Op::SumAxis, a, axis); }
  Var mean_axis(Var a, std::size_t axis) { return reduce(Op::MeanAxis, a, axis); }
  Var norm_axis(Var a, std::size_t axis) { return reduce(Op::NormAxis, a, axis); }

  Var softmax_rows(Var a) { return push(unary(Op::SoftmaxRows, a, shape_of(a))); }

  Var leaky_relu(Var a, double slope = kDefaultLeakySlope) {
    return push(unary(Op::LeakyRelu, a, shape_of(a), [&](Node& nd) { nd.scalar = slope; }));
  }

  /// g * d/dx leaky_relu(x); exposed so adjoint graphs stay closed under the primitive set.
  Var leaky_relu_grad(Var g, Var x, double slope) {
    if (shape_of(g) != shape_of(x)) fail_shape("leaky_relu_grad", g, x);
    return push(binary(Op::LeakyReluGrad, g, x, shape_of(g), [&](Node& nd) { nd.scalar = slope; }));
  }

  Var sigmoid(Var a) { return push(unary(Op::Sigmoid, a, shape_of(a))); }
  Var log(Var a) { return push(unary(Op::Log, a, shape_of(a))); }
  Var exp(Var a) { return push(unary(Op::Exp, a, shape_of(a))); }
  Var square(Var a) { return push(unary(Op::Square, a, shape_of(a))); }
  Var sqrt(Var a) { return push(unary(Op::Sqrt, a, shape_of(a))); }

  /// Stack b below a.
  Var concat_rows(Var a, Var b) {
    const Shape& sa = shape_of(a);
    const Shape& sb = shape_of(b);
    if (sa[1] != sb[1]) fail_shape("concat_rows", a, b);
    return push(binary(Op::ConcatRows, a, b, {sa[0] + sb[0], sa[1]}));
  }

  /// Rows [begin, end) of a.
  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Shape& sa = shape_of(a);
    if (begin >= end || end > sa[0]) {
      throw ShapeError("node " + std::to_string(nodes_.size()) + " (slice_rows): range [" + std::to_string(begin) +
                       ", " + std::to_string(end) + ") invalid for " + shape_string(sa));
    }
    return push(unary(Op::SliceRows, a, {end - begin, sa[1]}, [&](Node& nd) {
      nd.begin = begin;
      nd.end = end;
    }));
  }

  /// Repeat a 1xn row vector `rows` times.
  Var broadcast_rows(Var a, std::size_t rows) {
    const Shape& sa = shape_of(a);
    if (sa[0] != 1 || rows == 0) {
      throw ShapeError("node " + std::to_string(nodes_.size()) + " (broadcast_rows): expected a 1xn row vector, got " +
                       shape_string(sa));
    }
    return push(unary(Op::BroadcastRows, a, {rows, sa[1]}, [&](Node& nd) { nd.begin = rows; }));
  }

  // ---- evaluation ---------------------------------------------------------

  /// Rebind a leaf; invalidates previously computed values.
  void bind(Var leaf_var, Tensor value) {
    check_owned(leaf_var);
    const Node& nd = nodes_[leaf_var.id()];
    if (nd.op != Op::Leaf) throw Error("node " + std::to_string(leaf_var.id()) + " is not a leaf and cannot be bound");
    if (value.shape() != nd.shape) {
      throw ShapeError("binding for leaf " + std::to_string(leaf_var.id()) + " has shape " +
                       shape_string(value.shape()) + ", expected " + shape_string(nd.shape));
    }
    values_[leaf_var.id()] = std::move(value);
    evaluated_ = 0;
  }

  /// Compute every node up to and including `output`; returns its value.
  const Tensor& evaluate(Var output, const Bindings& bindings = {}) {
    check_owned(output);
    for (const auto& [v, t] : bindings) bind(v, t);
    for (std::size_t i = evaluated_; i <= output.id(); ++i) compute(static_cast<NodeId>(i));
    evaluated_ = std::max<std::size_t>(evaluated_, output.id() + 1);
    return values_[output.id()];
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    if (!is_available(v.id())) throw Error("node " + std::to_string(v.id()) + " has not been evaluated");
    return values_[v.id()];
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the scalar `output` with respect to every leaf.
  Gradients backward(Var output) {
    check_owned(output);
    const NodeId out = output.id();
    if (shape_size(nodes_[out].shape) != 1) {
      throw Error("backward: output node " + std::to_string(out) + " is not scalar (shape " +
                  shape_string(nodes_[out].shape) + ")");
    }
    if (out >= evaluated_) throw Error("backward: graph has not been evaluated up to node " + std::to_string(out));

    std::vector<Tensor> adj(out + 1);
    adj[out] = Tensor(1, 1, 1.0);
    for (std::size_t idx = out + 1; idx-- > 0;) {
      if (adj[idx].empty() || !nodes_[idx].depends_on_leaf) continue;
      backprop_numeric(static_cast<NodeId>(idx), adj);
    }
    Gradients grads;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op != Op::Leaf) continue;
      if (i <= out && !adj[i].empty()) {
        grads.grads_.emplace(static_cast<NodeId>(i), std::move(adj[i]));
      } else {
        grads.grads_.emplace(static_cast<NodeId>(i), Tensor(nodes_[i].shape, 0.0));
      }
    }
    return grads;
  }

  /// Append nodes computing d(output)/d(wrt) and return the gradient node.
  /// The appended nodes use only primitives, so the result can be fed to
  /// backward() again.
  Var grad_as_graph(Var output, Var wrt) {
    check_owned(output);
    check_owned(wrt);
    if (nodes_[wrt.id()].op != Op::Leaf) {
      throw Error("grad_as_graph: node " + std::to_string(wrt.id()) + " (" + op_name(nodes_[wrt.id()].op) +
                  ") is not a leaf");
    }
    const NodeId out = output.id();
    if (shape_size(nodes_[out].shape) != 1) {
      throw Error("grad_as_graph: output node " + std::to_string(out) + " is not scalar");
    }
    std::vector<std::optional<Var>> adj(out + 1);
    adj[out] = ones(1, 1);
    for (std::size_t idx = out + 1; idx-- > 0;) {
      if (!adj[idx] || !nodes_[idx].depends_on_leaf) continue;
      backprop_symbolic(static_cast<NodeId>(idx), adj);
    }
    if (wrt.id() <= out && adj[wrt.id()]) return *adj[wrt.id()];
    const Shape& s = nodes_[wrt.id()].shape;
    return zeros(s[0], s[1]);
  }

 private:
  friend class Var;

  static Node make_leaf(Op op, Shape shape, std::string name) {
    Node nd;
    nd.op = op;
    nd.shape = std::move(shape);
    nd.depends_on_leaf = op == Op::Leaf;
    nd.name = std::move(name);
    return nd;
  }

  template <typename F = void (*)(Node&)>
  Node unary(Op op, Var a, Shape shape, F&& extra = [](Node&) {}) {
    check_owned(a);
    Node nd;
    nd.op = op;
    nd.a = a.id();
    nd.shape = std::move(shape);
    nd.depends_on_leaf = nodes_[a.id()].depends_on_leaf;
    extra(nd);
    return nd;
  }

  template <typename F = void (*)(Node&)>
  Node binary(Op op, Var a, Var b, Shape shape, F&& extra = [](Node&) {}) {
    check_owned(a);
    check_owned(b);
    Node nd;
    nd.op = op;
    nd.a = a.id();
    nd.b = b.id();
    nd.shape = std::move(shape);
    nd.depends_on_leaf = nodes_[a.id()].depends_on_leaf || nodes_[b.id()].depends_on_leaf;
    extra(nd);
    return nd;
  }

  Var elementwise(Op op, Var a, Var b) {
    if (shape_of(a) != shape_of(b)) fail_shape(op_name(op), a, b);
    return push(binary(op, a, b, shape_of(a)));
  }

  Var reduce(Op op, Var a, std::size_t axis) {
    if (axis > 1) throw ShapeError(std::string(op_name(op)) + ": axis must be 0 or 1");
    const Shape& s = shape_of(a);
    Shape out = axis == 0 ? Shape{1, s[1]} : Shape{s[0], 1};
    return push(unary(op, a, std::move(out), [&](Node& nd) { nd.axis = axis; }));
  }

  Var push(Node nd) {
    if (nodes_.size() >= kNoNode) throw Error("graph too large");
    nodes_.push_back(std::move(nd));
    values_.emplace_back();
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  const Shape& shape_of(Var v) const {
    check_owned(v);
    return nodes_[v.id()].shape;
  }

  void check_owned(Var v) const {
    if (v.graph_ != this || v.id() >= nodes_.size()) throw Error("variable does not belong to this graph");
  }

  [[noreturn]] void fail_shape(const char* what, Var a, Var b) const {
    throw ShapeError("node " + std::to_string(nodes_.size()) + " (" + what + "): incompatible shapes " +
                     shape_string(nodes_[a.id()].shape) + " and " + shape_string(nodes_[b.id()].shape));
  }

  static void require_rank2(const Shape& s, const char* what) {
    if (s.size() != 2) throw ShapeError(std::string(what) + ": graph tensors must be rank 2, got " + shape_string(s));
  }

  bool is_available(NodeId id) const {
    const Op op = nodes_[id].op;
    if (op == Op::Leaf || op == Op::Constant) return !values_[id].empty();
    return id < evaluated_;
  }

  void compute(NodeId id) {
    const Node& nd = nodes_[id];
    Tensor out;
    auto A = [&]() -> const Tensor& { return values_[nd.a]; };
    auto B = [&]() -> const Tensor& { return values_[nd.b]; };
    auto map_unary = [&](auto f) {
      Tensor r = A();
      for (auto& x : r.data()) x = f(x);
      return r;
    };
    switch (nd.op) {
      case Op::Leaf:
        if (values_[id].empty()) {
          throw Error("evaluate: leaf node " + std::to_string(id) +
                      (nd.name.empty() ? std::string() : " '" + nd.name + "'") + " is unbound");
        }
        check_finite(id, values_[id]);
        return;
      case Op::Constant:
        return;
      case Op::MatMul:
        out = kernels::matmul(A(), B(), nd.trans_a, nd.trans_b);
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::LeakyReluGrad: {
        out = A();
        auto o = out.data();
        auto b = B().data();
        for (std::size_t i = 0; i < o.size(); ++i) {
          switch (nd.op) {
            case Op::Add: o[i] += b[i]; break;
            case Op::Sub: o[i] -= b[i]; break;
            case Op::Mul: o[i] *= b[i]; break;
            default: o[i] *= (b[i] > 0.0 ? 1.0 : nd.scalar); break;
          }
        }
        break;
      }
      case Op::Scale:
        out = map_unary([s = nd.scalar](double x) { return s * x; });
        break;
      case Op::Sum: {
        double s = 0.0;
        for (double x : A().data()) s += x;
        out = Tensor::scalar(s);
        break;
      }
      case Op::SumAxis:
      case Op::MeanAxis:
      case Op::NormAxis: {
        const Tensor& a = A();
        out = Tensor(nd.shape, 0.0);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) {
            const double x = nd.op == Op::NormAxis ? a(i, j) * a(i, j) : a(i, j);
            if (nd.axis == 0) out(0, j) += x;
            else out(i, 0) += x;
          }
        }
        if (nd.op == Op::MeanAxis) {
          const double count = static_cast<double>(nd.axis == 0 ? a.rows() : a.cols());
          for (auto& x : out.data()) x /= count;
        } else if (nd.op == Op::NormAxis) {
          for (auto& x : out.data()) x = std::sqrt(x);
        }
        break;
      }
      case Op::SoftmaxRows: {
        out = A();
        for (std::size_t i = 0; i < out.rows(); ++i) {
          auto r = out.row(i);
          const double mx = *std::max_element(r.begin(), r.end());
          double z = 0.0;
          for (auto& x : r) {
            x = std::exp(x - mx);
            z += x;
          }
          for (auto& x : r) x /= z;
        }
        break;
      }
      case Op::LeakyRelu:
        out = map_unary([s = nd.scalar](double x) { return x > 0.0 ? x : s * x; });
        break;
      case Op::Sigmoid:
        out = map_unary([](double x) { return kernels::sigmoid(x); });
        break;
      case Op::Log:
        out = map_unary([](double x) { return std::log(x); });
        break;
      case Op::Exp:
        out = map_unary([](double x) { return std::exp(x); });
        break;
      case Op::Square:
        out = map_unary([](double x) { return x * x; });
        break;
      case Op::Sqrt:
        out = map_unary([](double x) { return std::sqrt(x); });
        break;
      case Op::ConcatRows: {
        std::vector<double> data(A().values());
        data.insert(data.end(), B().values().begin(), B().values().end());
        out = Tensor(nd.shape, std::move(data));
        break;
      }
      case Op::SliceRows: {
        const Tensor& a = A();
        const std::size_t c = a.cols();
        out = Tensor(nd.shape, std::vector<double>(a.values().begin() + nd.begin * c, a.values().begin() + nd.end * c));
        break;
      }
      case Op::BroadcastRows: {
        const Tensor& a = A();
        out = Tensor(nd.shape, 0.0);
        for (std::size_t i = 0; i < nd.begin; ++i) std::copy(a.data().begin(), a.data().end(), out.row(i).begin());
        break;
      }
    }
    check_finite(id, out);
    values_[id] = std::move(out);
  }

  void check_finite(NodeId id, const Tensor& t) const {
    if (!t.all_finite()) {
      throw NumericError("node " + std::to_string(id) + " (" + op_name(nodes_[id].op) + "): non-finite result");
    }
  }

  static void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
      dst = src;
      return;
    }
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  static void accumulate(Tensor& dst, Tensor&& src) {
    if (dst.empty()) {
      dst = std::move(src);
      return;
    }
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  void backprop_numeric(NodeId id, std::vector<Tensor>& adj) {
    const Node& nd = nodes_[id];
    const Tensor& g = adj[id];
    auto wants = [&](NodeId p) { return p != kNoNode && nodes_[p].depends_on_leaf; };
    auto elementwise_map = [&](const Tensor& base, auto f) {
      Tensor r(base.shape(), 0.0);
      auto rd = r.data();
      auto gd = g.data();
      auto bd = base.data();
      for (std::size_t i = 0; i < rd.size(); ++i) rd[i] = f(gd[i], bd[i], i);
      return r;
    };
    const Tensor& y = values_[id];

    switch (nd.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::MatMul: {
        const Tensor& A = values_[nd.a];
        const Tensor& B = values_[nd.b];
        if (wants(nd.a)) {
          Tensor da = !nd.trans_a ? kernels::matmul(g, B, false, !nd.trans_b) : kernels::matmul(B, g, nd.trans_b, true);
          accumulate(adj[nd.a], std::move(da));
        }
        if (wants(nd.b)) {
          Tensor db = !nd.trans_b ? kernels::matmul(A, g, !nd.trans_a, false) : kernels::matmul(g, A, true, nd.trans_a);
          accumulate(adj[nd.b], std::move(db));
        }
        break;
      }
      case Op::Add:
        if (wants(nd.a)) accumulate(adj[nd.a], g);
        if (wants(nd.b)) accumulate(adj[nd.b], g);
        break;
      case Op::Sub:
        if (wants(nd.a)) accumulate(adj[nd.a], g);
        if (wants(nd.b)) accumulate(adj[nd.b], elementwise_map(g, [](double gv, double, std::size_t) { return -gv; }));
        break;
      case Op::Mul: {
        const Tensor& A = values_[nd.a];
        const Tensor& B = values_[nd.b];
        if (wants(nd.a)) accumulate(adj[nd.a], elementwise_map(B, [](double gv, double bv, std::size_t) { return gv * bv; }));
        if (wants(nd.b)) accumulate(adj[nd.b], elementwise_map(A, [](double gv, double av, std::size_t) { return gv * av; }));
        break;
      }
      case Op::Scale:
        accumulate(adj[nd.a], elementwise_map(g, [s = nd.scalar](double gv, double, std::size_t) { return s * gv; }));
        break;
      case Op::Sum:
        accumulate(adj[nd.a], Tensor(nodes_[nd.a].shape, g[0]));
        break;
      case Op::SumAxis:
      case Op::MeanAxis: {
        const Shape& s = nodes_[nd.a].shape;
        Tensor da(s, 0.0);
        const double f = nd.op == Op::SumAxis ? 1.0 : 1.0 / static_cast<double>(s[nd.axis]);
        for (std::size_t i = 0; i < s[0]; ++i)
          for (std::size_t j = 0; j < s[1]; ++j) da(i, j) = f * (nd.axis == 0 ? g(0, j) : g(i, 0));
        accumulate(adj[nd.a], std::move(da));
        break;
      }
      case Op::NormAxis: {
        const Tensor& A = values_[nd.a];
        Tensor da(A.shape(), 0.0);
        for (std::size_t i = 0; i < A.rows(); ++i) {
          for (std::size_t j = 0; j < A.cols(); ++j) {
            const double n = nd.axis == 0 ? y(0, j) : y(i, 0);
            const double gv = nd.axis == 0 ? g(0, j) : g(i, 0);
            // Subgradient 0 at the origin.
            da(i, j) = n > 0.0 ? gv * A(i, j) / n : 0.0;
          }
        }
        accumulate(adj[nd.a], std::move(da));
        break;
      }
      case Op::SoftmaxRows: {
        Tensor da(y.shape(), 0.0);
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) da(i, j) = y(i, j) * (g(i, j) - dot);
        }
        accumulate(adj[nd.a], std::move(da));
        break;
      }
      case Op::LeakyRelu:
      case Op::LeakyReluGrad: {
        const Tensor& x = nd.op == Op::LeakyRelu ? values_[nd.a] : values_[nd.b];
        if (wants(nd.a)) {
          accumulate(adj[nd.a], elementwise_map(x, [s = nd.scalar](double gv, double xv, std::size_t) {
                       return xv > 0.0 ? gv : s * gv;
                     }));
        }
        break;
      }
      case Op::Sigmoid:
        accumulate(adj[nd.a], elementwise_map(y, [](double gv, double yv, std::size_t) { return gv * yv * (1.0 - yv); }));
        break;
      case Op::Log:
        accumulate(adj[nd.a], elementwise_map(values_[nd.a], [](double gv, double xv, std::size_t) { return gv / xv; }));
        break;
      case Op::Exp:
        accumulate(adj[nd.a], elementwise_map(y, [](double gv, double yv, std::size_t) { return gv * yv; }));
        break;
      case Op::Square:
        accumulate(adj[nd.a],
                   elementwise_map(values_[nd.a], [](double gv, double xv, std::size_t) { return 2.0 * gv * xv; }));
        break;
      case Op::Sqrt:
        accumulate(adj[nd.a], elementwise_map(y, [](double gv, double yv, std::size_t) { return 0.5 * gv / yv; }));
        break;
      case Op::ConcatRows: {
        const std::size_t ra = nodes_[nd.a].shape[0];
        const std::size_t c = nd.shape[1];
        const auto& gv = g.values();
        if (wants(nd.a))
          accumulate(adj[nd.a], Tensor(nodes_[nd.a].shape, std::vector<double>(gv.begin(), gv.begin() + ra * c)));
        if (wants(nd.b))
          accumulate(adj[nd.b], Tensor(nodes_[nd.b].shape, std::vector<double>(gv.begin() + ra * c, gv.end())));
        break;
      }
      case Op::SliceRows: {
        Tensor da(nodes_[nd.a].shape, 0.0);
        std::copy(g.data().begin(), g.data().end(), da.data().begin() + nd.begin * da.cols());
        accumulate(adj[nd.a], std::move(da));
        break;
      }
      case Op::BroadcastRows: {
        Tensor da(nodes_[nd.a].shape, 0.0);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) da(0, j) += g(i, j);
        accumulate(adj[nd.a], std::move(da));
        break;
      }
    }
  }

  Var reciprocal(Var x) { return exp(scale(log(x), -1.0)); }

  void backprop_symbolic(NodeId id, std::vector<std::optional<Var>>& adj) {
    // Copy: pushing nodes may reallocate nodes_.
    const Node nd = nodes_[id];
    const Var g = *adj[id];
    const Var self(this, id);
    auto wants = [&](NodeId p) { return p != kNoNode && nodes_[p].depends_on_leaf; };
    auto give = [&](NodeId p, Var contribution) {
      adj[p] = adj[p] ? add(*adj[p], contribution) : contribution;
    };
    const Var a = nd.a != kNoNode ? Var(this, nd.a) : Var();
    const Var b = nd.b != kNoNode ? Var(this, nd.b) : Var();

    switch (nd.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::MatMul:
        if (wants(nd.a)) give(nd.a, !nd.trans_a ? matmul(g, b, false, !nd.trans_b) : matmul(b, g, nd.trans_b, true));
        if (wants(nd.b)) give(nd.b, !nd.trans_b ? matmul(a, g, !nd.trans_a, false) : matmul(g, a, true, nd.trans_a));
        break;
      case Op::Add:
        if (wants(nd.a)) give(nd.a, g);
        if (wants(nd.b)) give(nd.b, g);
        break;
      case Op::Sub:
        if (wants(nd.a)) give(nd.a, g);
        if (wants(nd.b)) give(nd.b, scale(g, -1.0));
        break;
      case Op::Mul:
        if (wants(nd.a)) give(nd.a, mul(g, b));
        if (wants(nd.b)) give(nd.b, mul(g, a));
        break;
      case Op::Scale:
        give(nd.a, scale(g, nd.scalar));
        break;
      case Op::Sum: {
        const Shape& s = nodes_[nd.a].shape;
        give(nd.a, broadcast_rows(matmul(g, ones(1, s[1])), s[0]));
        break;
      }
      case Op::SumAxis:
      case Op::MeanAxis: {
        const Shape s = nodes_[nd.a].shape;
        Var spread = nd.axis == 0 ? broadcast_rows(g, s[0]) : matmul(g, ones(1, s[1]));
        if (nd.op == Op::MeanAxis) spread = scale(spread, 1.0 / static_cast<double>(s[nd.axis]));
        give(nd.a, spread);
        break;
      }
      case Op::NormAxis: {
        const Shape s = nodes_[nd.a].shape;
        Var coeff = mul(g, reciprocal(self));
        Var spread = nd.axis == 0 ? broadcast_rows(coeff, s[0]) : matmul(coeff, ones(1, s[1]));
        give(nd.a, mul(spread, a));
        break;
      }
      case Op::SoftmaxRows: {
        Var dot = sum_axis(mul(g, self), 1);
        give(nd.a, mul(self, sub(g, matmul(dot, ones(1, nd.shape[1])))));
        break;
      }
      case Op::LeakyRelu:
        give(nd.a, leaky_relu_grad(g, a, nd.scalar));
        break;
      case Op::LeakyReluGrad:
        // Piecewise constant in x: only the incoming-gradient operand carries a derivative.
        if (wants(nd.a)) give(nd.a, leaky_relu_grad(g, b, nd.scalar));
        break;
      case Op::Sigmoid:
        give(nd.a, mul(g, mul(self, sub(ones(nd.shape[0], nd.shape[1]), self))));
        break;
      case Op::Log:
        give(nd.a, mul(g, reciprocal(a)));
        break;
      case Op::Exp:
        give(nd.a, mul(g, self));
        break;
      case Op::Square:
        give(nd.a, scale(mul(g, a), 2.0));
        break;
      case Op::Sqrt:
        give(nd.a, scale(mul(g, reciprocal(self)), 0.5));
        break;
      case Op::ConcatRows: {
        const std::size_t ra = nodes_[nd.a].shape[0];
        if (wants(nd.a)) give(nd.a, slice_rows(g, 0, ra));
        if (wants(nd.b)) give(nd.b, slice_rows(g, ra, nd.shape[0]));
        break;
      }
      case Op::SliceRows: {
        const Shape s = nodes_[nd.a].shape;
        Var padded = g;
        if (nd.begin > 0) padded = concat_rows(zeros(nd.begin, s[1]), padded);
        if (nd.end < s[0]) padded = concat_rows(padded, zeros(s[0] - nd.end, s[1]));
        give(nd.a, padded);
        break;
      }
      case Op::BroadcastRows:
        give(nd.a, sum_axis(g, 0));
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::size_t evaluated_ = 0;
};

inline const Shape& Var::shape() const { return graph_->shape_of(*this); }
inline const Tensor& Var::value() const { return graph_->value(*this); }

// ---- operator sugar -------------------------------------------------------

inline Var operator+(Var a, Var b) { return a.graph().add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph().sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph().mul(a, b); }
inline Var operator*(double s, Var a) { return a.graph().scale(a, s); }
inline Var operator*(Var a, double s) { return a.graph().scale(a, s); }
inline Var operator-(Var a) { return a.graph().scale(a, -1.0); }

inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) { return a.graph().matmul(a, b, ta, tb); }
inline Var sum(Var a) { return a.graph().sum(a); }
inline Var sum_axis(Var a, std::size_t axis) { return a.graph().sum_axis(a, axis); }
inline Var mean_axis(Var a, std::size_t axis) { return a.graph().mean_axis(a, axis); }
inline Var norm_axis(Var a, std::size_t axis) { return a.graph().norm_axis(a, axis); }
inline Var softmax_rows(Var a) { return a.graph().softmax_rows(a); }
inline Var leaky_relu(Var a, double slope = kDefaultLeakySlope) { return a.graph().leaky_relu(a, slope); }
inline Var sigmoid(Var a) { return a.graph().sigmoid(a); }
inline Var log(Var a) { return a.graph().log(a); }
inline Var exp(Var a) { return a.graph().exp(a); }
inline Var square(Var a) { return a.graph().square(a); }
inline Var sqrt(Var a) { return a.graph().sqrt(a); }
inline Var concat_rows(Var a, Var b) { return a.graph().concat_rows(a, b); }
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) { return a.graph().slice_rows(a, begin, end); }
inline Var broadcast_rows(Var a, std::size_t rows) { return a.graph().broadcast_rows(a, rows); }

/// Mean of all entries as a 1x1 node.
inline Var mean(Var a) { return a.graph().scale(a.graph().sum(a), 1.0 / static_cast<double>(a.rows() * a.cols())); }

/// Repeat an mx1 column across `cols` columns (expressed as a product with ones).
inline Var broadcast_cols(Var column, std::size_t cols) { return matmul(column, column.graph().ones(1, cols)); }

/// Clamp into [lo, hi] using two rectifiers; zero derivative outside the range.
inline Var clamp(Var x, double lo, double hi) {
  Graph& g = x.graph();
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Var lo_t = g.constant(Tensor(r, c, lo));
  Var hi_t = g.constant(Tensor(r, c, hi));
  return lo_t + g.leaky_relu(x - lo_t, 0.0) - g.leaky_relu(x - hi_t, 0.0);
}

}  // namespace mlzsl::diff
