#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "mlzsl/data.hpp"
#include "mlzsl/diffmath.hpp"
#include "mlzsl/losses.hpp"
#include "mlzsl/nn.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::zslcls {

using diff::Var;

struct ClassifierConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 300;
  double learning_rate = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
};

/// Linear map d -> K with per-class logistic outputs. Column j scores
/// class `classes[j]` of the class space.
struct MultiLabelClassifier {
  nn::Linear layer;
  std::vector<data::ClassId> classes;

  std::size_t input_dim() const { return layer.in(); }
  std::size_t width() const { return layer.out(); }
};

/// Zero weights, so an untrained classifier scores every class at exactly 0.5.
inline MultiLabelClassifier make_classifier(std::size_t d, std::vector<data::ClassId> classes) {
  if (d == 0 || classes.empty()) throw ConfigError("classifier needs a positive input width and at least one class");
  const std::size_t K = classes.size();
  return {{Tensor(d, K), Tensor(1, K)}, std::move(classes)};
}

inline Tensor predict_logits(const MultiLabelClassifier& clf, const Tensor& features) {
  if (features.cols() != clf.input_dim()) {
    throw ShapeError("predict: feature width " + std::to_string(features.cols()) + " != classifier input " +
                     std::to_string(clf.input_dim()));
  }
  Tensor z = diff::kernels::matmul(features, clf.layer.weight, false, false);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += clf.layer.bias(0, j);
  return z;
}

/// b x K logistic scores, row order preserved.
inline Tensor predict_scores(const MultiLabelClassifier& clf, const Tensor& features) {
  Tensor s = predict_logits(clf, features);
  for (double& v : s.data()) v = diff::kernels::sigmoid(v);
  return s;
}

/// Mean per-class binary cross-entropy of `clf` on (X, Y).
inline double mean_bce(const MultiLabelClassifier& clf, const Tensor& X, const Tensor& Y) {
  diff::Graph g;
  nn::ParamBinder b(g);
  Var p = diff::sigmoid(nn::linear_forward(nn::bind(b, clf.layer, false), g.constant(X)));
  return g.evaluate(loss::bce_mean(p, Y))[0];
}

/// Minimize mean per-class BCE with Adam over minibatches. Batches are drawn
/// from a per-epoch shuffle; a batch covering the whole set is used as is.
inline void fit(MultiLabelClassifier& clf, const Tensor& X, const Tensor& Y, const ClassifierConfig& cfg) {
  if (X.rows() != Y.rows() || X.cols() != clf.input_dim() || Y.cols() != clf.width()) {
    throw ShapeError("fit: features " + shape_string(X.shape()) + " / targets " + shape_string(Y.shape()) +
                     " do not match classifier " + std::to_string(clf.input_dim()) + " -> " +
                     std::to_string(clf.width()));
  }
  if (cfg.batch_size == 0) throw ConfigError("classifier batch size must be positive");
  const std::size_t n = X.rows();
  nn::ParamList params;
  nn::append_params(params, clf.layer, "layer");
  auto adam = nn::make_adam(params, {.learning_rate = cfg.learning_rate, .beta1 = cfg.beta1, .beta2 = cfg.beta2});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const bool full_batch = cfg.batch_size >= n;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      Tensor xb(end - start, X.cols()), yb(end - start, Y.cols());
      for (std::size_t r = start; r < end; ++r) {
        std::copy(X.row(order[r]).begin(), X.row(order[r]).end(), xb.row(r - start).begin());
        std::copy(Y.row(order[r]).begin(), Y.row(order[r]).end(), yb.row(r - start).begin());
      }
      diff::Graph g;
      nn::ParamBinder b(g);
      Var p = diff::sigmoid(nn::linear_forward(nn::bind(b, clf.layer, true), g.constant(xb)));
      Var l = loss::bce_mean(p, yb);
      g.evaluate(l);
      nn::adam_step(adam, params, b.gradients(params, g.backward(l)));
    }
  }
}

namespace detail {

inline void require_labels_in(const data::Split& split, const char* what, auto allowed) {
  for (std::size_t i = 0; i < split.size(); ++i)
    for (auto k : split[i].labels)
      if (!allowed(k))
        throw ConfigError(std::string(what) + " instance " + std::to_string(i) + " carries label " +
                          std::to_string(k) + " outside its universe");
}

}  // namespace detail

/// f_z over the U unseen classes, trained on synthesized unseen features.
inline MultiLabelClassifier train_zsl(const data::Split& synth_unseen, const data::ClassSpace& classes,
                                      const ClassifierConfig& cfg) {
  if (synth_unseen.empty()) throw ConfigError("train_zsl: no synthesized instances");
  detail::require_labels_in(synth_unseen, "synthesized", [&](auto k) { return classes.is_unseen(k); });
  auto clf = make_classifier(synth_unseen.front().feature.size(), classes.unseen_ids());
  std::vector<std::vector<data::ClassId>> labels;
  for (const auto& inst : synth_unseen) labels.push_back(inst.labels);
  fit(clf, data::feature_matrix(synth_unseen), loss::multi_hot(labels, classes.unseen_count, classes.seen_count), cfg);
  return clf;
}

/// f_gz over all C classes, trained on real seen plus synthesized unseen features.
inline MultiLabelClassifier train_gzsl(const data::Split& synth_unseen, const data::Split& real_seen,
                                       const data::ClassSpace& classes, const ClassifierConfig& cfg) {
  if (classes.unseen_count > 0 && synth_unseen.empty()) throw ConfigError("train_gzsl: no synthesized instances");
  if (real_seen.empty()) throw ConfigError("train_gzsl: no real seen instances");
  detail::require_labels_in(synth_unseen, "synthesized", [&](auto k) { return classes.is_unseen(k); });
  detail::require_labels_in(real_seen, "real seen", [&](auto k) { return classes.is_seen(k); });
  std::vector<bool> present(classes.total(), false);
  for (const auto& inst : synth_unseen)
    for (auto k : inst.labels) present[k] = true;
  for (auto k : classes.unseen_ids())
    if (!present[k]) throw ConfigError("train_gzsl: unseen class " + std::to_string(k) + " has no synthesized instance");

  data::Split all = real_seen;
  all.insert(all.end(), synth_unseen.begin(), synth_unseen.end());
  auto clf = make_classifier(all.front().feature.size(), classes.all_ids());
  std::vector<std::vector<data::ClassId>> labels;
  for (const auto& inst : all) labels.push_back(inst.labels);
  fit(clf, data::feature_matrix(all), loss::multi_hot(labels, classes.total()), cfg);
  return clf;
}

}  // namespace mlzsl::zslcls
