#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mlzsl/diffmath.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::nn {

using diff::Var;

enum class Activation { None, LeakyRelu, Sigmoid };

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

struct Mlp {
  Linear layer1;
  Linear layer2;
  Activation hidden = Activation::LeakyRelu;
  Activation output = Activation::None;
  double slope = diff::kDefaultLeakySlope;

  std::size_t in() const { return layer1.in(); }
  std::size_t hidden_width() const { return layer1.out(); }
  std::size_t out() const { return layer2.out(); }
};

/// A named, mutable reference to one parameter tensor.
struct ParamSlot {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<ParamSlot>;

inline void append_params(ParamList& list, Linear& l, const std::string& prefix) {
  list.push_back({prefix + ".weight", &l.weight});
  list.push_back({prefix + ".bias", &l.bias});
}

inline void append_params(ParamList& list, Mlp& m, const std::string& prefix) {
  append_params(list, m.layer1, prefix + ".layer1");
  append_params(list, m.layer2, prefix + ".layer2");
}

/// Glorot-uniform weights in (-a, a), a = sqrt(6 / (fan_in + fan_out)); zero bias.
inline Linear init_linear(std::size_t in, std::size_t out, Rng& rng) {
  if (in == 0 || out == 0) throw ConfigError("layer dimensions must be positive");
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-a, a);
  Linear l{Tensor(in, out), Tensor(1, out)};
  for (auto& w : l.weight.data()) w = dist(rng);
  return l;
}

inline Mlp init_mlp(std::size_t in, std::size_t hidden, std::size_t out, Activation hidden_act, Activation output_act,
                    std::uint64_t seed) {
  if (in == 0 || hidden == 0 || out == 0) {
    throw ConfigError("init_mlp: dimensions must be positive (got " + std::to_string(in) + ", " +
                      std::to_string(hidden) + ", " + std::to_string(out) + ")");
  }
  Rng rng(seed);
  Mlp m;
  m.layer1 = init_linear(in, hidden, rng);
  m.layer2 = init_linear(hidden, out, rng);
  m.hidden = hidden_act;
  m.output = output_act;
  return m;
}

/// Binds parameter tensors into a graph, remembering which leaf holds which
/// tensor so gradients can be routed back after backward().
class ParamBinder {
 public:
  explicit ParamBinder(diff::Graph& g) : graph_(g) {}

  diff::Graph& graph() { return graph_; }

  Var bind(const Tensor& t, bool trainable) {
    if (auto it = bound_.find(&t); it != bound_.end()) return it->second;
    Var v = trainable ? graph_.leaf(t) : graph_.constant(t);
    bound_.emplace(&t, v);
    return v;
  }

  /// Gradients for `params` in list order; parameters never bound get zeros.
  std::vector<Tensor> gradients(const ParamList& params, const diff::Gradients& grads) const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) {
      auto it = bound_.find(p.tensor);
      if (it == bound_.end() || graph_.node(it->second.id()).op != diff::Op::Leaf) {
        out.emplace_back(p.tensor->shape(), 0.0);
      } else {
        out.push_back(grads[it->second]);
      }
    }
    return out;
  }

 private:
  diff::Graph& graph_;
  std::unordered_map<const Tensor*, Var> bound_;
};

struct BoundLinear {
  Var weight;
  Var bias;
};

struct BoundMlp {
  BoundLinear layer1;
  BoundLinear layer2;
  Activation hidden;
  Activation output;
  double slope;
};

inline BoundLinear bind(ParamBinder& b, const Linear& l, bool trainable) {
  return {b.bind(l.weight, trainable), b.bind(l.bias, trainable)};
}

inline BoundMlp bind(ParamBinder& b, const Mlp& m, bool trainable) {
  return {bind(b, m.layer1, trainable), bind(b, m.layer2, trainable), m.hidden, m.output, m.slope};
}

inline Var activate(Var x, Activation act, double slope) {
  switch (act) {
    case Activation::None: return x;
    case Activation::LeakyRelu: return diff::leaky_relu(x, slope);
    case Activation::Sigmoid: return diff::sigmoid(x);
  }
  return x;
}

inline Var linear_forward(const BoundLinear& l, Var x) {
  return diff::matmul(x, l.weight) + diff::broadcast_rows(l.bias, x.rows());
}

/// act2(act1(x W1 + b1) W2 + b2)
inline Var mlp_forward(const BoundMlp& m, Var x) {
  Var h = activate(linear_forward(m.layer1, x), m.hidden, m.slope);
  return activate(linear_forward(m.layer2, h), m.output, m.slope);
}

/// Forward pass on the column-wise concatenation [parts_0 | parts_1 | ...].
/// The first layer multiplies each part by its own row block of W1, which is
/// the same product as concatenating first.
inline Var mlp_forward_concat(const BoundMlp& m, std::span<const Var> parts) {
  diff::Graph& g = m.layer1.weight.graph();
  const std::size_t in = m.layer1.weight.rows();
  std::size_t width = 0;
  for (const Var& p : parts) width += p.cols();
  if (width != in) {
    throw ShapeError("mlp_forward_concat: input widths sum to " + std::to_string(width) + ", layer expects " +
                     std::to_string(in));
  }
  if (parts.size() == 1) return mlp_forward(m, parts[0]);
  std::size_t offset = 0;
  Var pre;
  for (const Var& p : parts) {
    Var block = g.slice_rows(m.layer1.weight, offset, offset + p.cols());
    Var term = diff::matmul(p, block);
    pre = pre.valid() ? pre + term : term;
    offset += p.cols();
  }
  pre = pre + diff::broadcast_rows(m.layer1.bias, parts[0].rows());
  Var h = activate(pre, m.hidden, m.slope);
  return activate(linear_forward(m.layer2, h), m.output, m.slope);
}

/// Value-level forward pass.
inline Tensor mlp_forward(const Mlp& m, const Tensor& input) {
  if (input.cols() != m.in()) {
    throw ShapeError("mlp_forward: input width " + std::to_string(input.cols()) + " != " + std::to_string(m.in()));
  }
  diff::Graph g;
  ParamBinder b(g);
  BoundMlp bm = bind(b, m, false);
  return g.evaluate(mlp_forward(bm, g.constant(input)));
}

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

inline AdamState make_adam(const ParamList& params, AdamConfig config) {
  AdamState s{config, {}, {}, 0};
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor->shape(), 0.0);
    s.second_moment.emplace_back(p.tensor->shape(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update of every parameter in `params`.
inline void adam_step(AdamState& state, const ParamList& params, std::span<const Tensor> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor->shape() != grads[i].shape() || grads[i].shape() != state.first_moment[i].shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter '" + params[i].name + "'");
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor->data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace mlzsl::nn
