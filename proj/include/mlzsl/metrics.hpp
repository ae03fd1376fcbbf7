#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlzsl/data.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::metrics {

/// Scores for b images over K labels plus each image's positive label columns.
struct EvalTable {
  Tensor scores;                               // b x K
  std::vector<std::vector<std::size_t>> truths;  // column indices, per image

  std::size_t images() const { return scores.rows(); }
  std::size_t labels() const { return scores.cols(); }
};

inline void validate(const EvalTable& t) {
  if (t.truths.size() != t.images()) {
    throw ShapeError("eval table: " + std::to_string(t.truths.size()) + " truth sets for " +
                     std::to_string(t.images()) + " images");
  }
  for (std::size_t i = 0; i < t.truths.size(); ++i)
    for (auto k : t.truths[i])
      if (k >= t.labels())
        throw ShapeError("eval table: image " + std::to_string(i) + " has truth label " + std::to_string(k) +
                         " >= " + std::to_string(t.labels()));
}

/// Re-index class ids into the columns of `universe` (the classifier's class order).
inline EvalTable make_table(Tensor scores, const data::Split& split, std::span<const data::ClassId> universe) {
  if (scores.rows() != split.size() || scores.cols() != universe.size()) {
    throw ShapeError("make_table: scores " + shape_string(scores.shape()) + " for " + std::to_string(split.size()) +
                     " images over " + std::to_string(universe.size()) + " classes");
  }
  EvalTable t{std::move(scores), {}};
  for (std::size_t i = 0; i < split.size(); ++i) {
    std::vector<std::size_t> cols;
    for (auto k : split[i].labels) {
      const auto it = std::find(universe.begin(), universe.end(), k);
      if (it == universe.end()) {
        throw ShapeError("make_table: image " + std::to_string(i) + " label " + std::to_string(k) +
                         " is outside the evaluated universe");
      }
      cols.push_back(static_cast<std::size_t>(it - universe.begin()));
    }
    t.truths.push_back(std::move(cols));
  }
  return t;
}

/// Indices sorted by descending score; equal scores keep ascending index order.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// (1/P) * sum over positives at rank r of precision@r, with truth a 0/1
/// vector. nullopt when there are no positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const int> truth) {
  if (scores.size() != truth.size()) throw ShapeError("average_precision: scores and truths differ in length");
  const auto order = rank_descending(scores);
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (truth[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

/// Per-label AP; labels without positives are nullopt.
inline std::vector<std::optional<double>> per_label_ap(const EvalTable& t) {
  validate(t);
  std::vector<std::optional<double>> out;
  std::vector<double> column(t.images());
  std::vector<int> truth(t.images());
  for (std::size_t k = 0; k < t.labels(); ++k) {
    for (std::size_t i = 0; i < t.images(); ++i) {
      column[i] = t.scores(i, k);
      truth[i] = std::find(t.truths[i].begin(), t.truths[i].end(), k) != t.truths[i].end();
    }
    out.push_back(average_precision(column, truth));
  }
  return out;
}

/// Unweighted mean of AP over labels with at least one positive image.
inline double mean_ap(const EvalTable& t) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ap : per_label_ap(t)) {
    if (ap) sum += *ap, ++n;
  }
  if (n == 0) throw ConfigError("mean_ap: no label has a positive image");
  return sum / static_cast<double>(n);
}

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

/// Corpus-aggregated precision/recall of each image's K highest-scoring labels.
inline Prf topk_prf(const EvalTable& t, std::size_t K) {
  validate(t);
  if (K == 0 || K > t.labels()) {
    throw ConfigError("top-K: K = " + std::to_string(K) + " must be in [1, " + std::to_string(t.labels()) + "]");
  }
  std::size_t hits = 0, positives = 0;
  for (std::size_t i = 0; i < t.images(); ++i) {
    const auto order = rank_descending(t.scores.row(i));
    const auto& truth = t.truths[i];
    positives += truth.size();
    for (std::size_t r = 0; r < K; ++r) hits += std::find(truth.begin(), truth.end(), order[r]) != truth.end();
  }
  if (positives == 0) throw ConfigError("top-K: table has no positive labels");
  Prf out;
  out.precision = static_cast<double>(hits) / static_cast<double>(t.images() * K);
  out.recall = static_cast<double>(hits) / static_cast<double>(positives);
  out.f1 = f1_score(out.precision, out.recall);
  return out;
}

/// Same truths with score rows assigned to images by a random permutation:
/// the chance baseline for a table.
inline EvalTable shuffled_scores(const EvalTable& t, std::uint64_t seed) {
  std::vector<std::size_t> perm(t.images());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  EvalTable out{Tensor(t.scores.shape()), t.truths};
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(t.scores.row(perm[i]).begin(), t.scores.row(perm[i]).end(), out.scores.row(i).begin());
  return out;
}

}  // namespace mlzsl::metrics
