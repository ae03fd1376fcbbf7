#pragma once

#include <span>
#include <string>
#include <vector>

#include "mlzsl/data.hpp"
#include "mlzsl/diffmath.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::loss {

using diff::Var;

/// Default lower bound delta for probabilities entering a logarithm.
inline constexpr double kProbabilityClamp = 1e-12;

/// log(p) for p >= delta, continued below delta by its tangent line
/// log(delta) + (p - delta) / delta. Finite with bounded slope for any p.
inline Var extended_log(Var p, double delta) {
  diff::Graph& g = p.graph();
  Var d = g.constant(Tensor(p.rows(), p.cols(), delta));
  Var floor = d + g.leaky_relu(p - d, 0.0);  // max(p, delta)
  return diff::log(floor) + (p - floor) * (1.0 / delta);
}

/// Elementwise -[y log p + (1 - y) log(1 - p)], same shape as p. Both
/// logarithms use extended_log, so p outside (0, 1) still has a gradient.
inline Var binary_cross_entropy(Var p, const Tensor& targets, double delta = kProbabilityClamp) {
  if (p.shape() != targets.shape()) {
    throw ShapeError("binary_cross_entropy: predictions " + shape_string(p.shape()) + " vs targets " +
                     shape_string(targets.shape()));
  }
  diff::Graph& g = p.graph();
  Tensor complement = targets;
  for (double& v : complement.data()) v = 1.0 - v;
  Var one = g.ones(p.rows(), p.cols());
  return -(g.constant(targets) * extended_log(p, delta) + g.constant(complement) * extended_log(one - p, delta));
}

/// Mean over every entry (instances and classes).
inline Var bce_mean(Var p, const Tensor& targets) { return diff::mean(binary_cross_entropy(p, targets)); }

/// Summed over feature dimensions, averaged over rows.
inline Var bce_rows(Var p, const Tensor& targets, double delta = kProbabilityClamp) {
  return diff::sum(binary_cross_entropy(p, targets, delta)) * (1.0 / static_cast<double>(p.rows()));
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions, averaged over rows.
inline Var kl_divergence(Var mu, Var logvar) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl_divergence: mu and logvar shapes differ");
  diff::Graph& g = mu.graph();
  Var terms = diff::square(mu) + diff::exp(logvar) - logvar - g.ones(mu.rows(), mu.cols());
  return diff::sum(terms) * (0.5 / static_cast<double>(mu.rows()));
}

/// b x K multi-hot matrix; label k maps to column k - offset.
inline Tensor multi_hot(std::span<const std::vector<data::ClassId>> label_sets, std::size_t classes,
                        std::size_t offset = 0) {
  if (label_sets.empty()) throw ShapeError("multi_hot: no label sets");
  if (classes == 0) throw ShapeError("multi_hot: zero classes");
  Tensor y(label_sets.size(), classes);
  for (std::size_t i = 0; i < label_sets.size(); ++i) {
    for (auto k : label_sets[i]) {
      if (k < offset || k - offset >= classes) {
        throw ConfigError("label " + std::to_string(k) + " of instance " + std::to_string(i) +
                          " is outside the class range [" + std::to_string(offset) + ", " +
                          std::to_string(offset + classes) + ")");
      }
      y(i, k - offset) = 1.0;
    }
  }
  return y;
}

}  // namespace mlzsl::loss
