#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlzsl/data.hpp"
#include "mlzsl/diffmath.hpp"
#include "mlzsl/nn.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::fusion {

using diff::Graph;
using diff::Var;

enum class Mode { ALF, FLF, CLF };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::ALF: return "ALF";
    case Mode::FLF: return "FLF";
    case Mode::CLF: return "CLF";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "ALF" || s == "alf") return Mode::ALF;
  if (s == "FLF" || s == "flf") return Mode::FLF;
  if (s == "CLF" || s == "clf") return Mode::CLF;
  throw ConfigError("unknown fusion mode '" + s + "' (expected ALF, FLF or CLF)");
}

// ---- embedding sets ---------------------------------------------------------

/// The embeddings of one label set, one row per label. Rows are kept in
/// lexicographic order so every reduction over the set sums in the same order
/// no matter how the labels were listed.
using EmbeddingSet = Tensor;

inline EmbeddingSet canonical_set(std::span<const std::vector<double>> embeddings) {
  if (embeddings.empty()) throw ShapeError("embedding set is empty");
  const std::size_t de = embeddings.front().size();
  if (de == 0) throw ShapeError("embedding set has zero-width vectors");
  std::vector<const std::vector<double>*> order;
  for (const auto& e : embeddings) {
    if (e.size() != de) throw ShapeError("embedding set mixes widths " + std::to_string(de) + " and " + std::to_string(e.size()));
    order.push_back(&e);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return *a < *b; });
  Tensor t(order.size(), de);
  for (std::size_t i = 0; i < order.size(); ++i) std::copy(order[i]->begin(), order[i]->end(), t.row(i).begin());
  return t;
}

inline EmbeddingSet embedding_set(const data::EmbeddingTable& table, std::span<const data::ClassId> labels) {
  std::vector<std::vector<double>> rows;
  for (auto k : labels) {
    if (k >= table.count()) throw ShapeError("label " + std::to_string(k) + " has no embedding");
    const auto r = table.row(k);
    rows.emplace_back(r.begin(), r.end());
  }
  return canonical_set(rows);
}

/// e_mu = (1/n) sum_j e(y_j), summed in canonical order.
inline std::vector<double> alf_fuse(std::span<const std::vector<double>> embeddings) {
  const EmbeddingSet s = canonical_set(embeddings);
  std::vector<double> mean(s.cols(), 0.0);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) mean[j] += s(i, j);
  for (double& v : mean) v /= static_cast<double>(s.rows());
  return mean;
}

/// Constant operands describing a batch of label sets.
struct ConditionBatch {
  Tensor mean_embeddings;  // b x d_e, row i = e_mu of set i
  Tensor pair_embeddings;  // P x d_e, one row per (instance, label) pair
  Tensor replicate;        // P x b, 0/1: pair p belongs to instance i
  Tensor average;          // b x P, 1/n_i on the pairs of instance i

  std::size_t batch() const { return mean_embeddings.rows(); }
  std::size_t pairs() const { return pair_embeddings.rows(); }
};

inline ConditionBatch make_condition_batch(std::span<const EmbeddingSet> sets) {
  if (sets.empty()) throw ShapeError("condition batch is empty");
  const std::size_t b = sets.size();
  const std::size_t de = sets.front().cols();
  std::size_t P = 0;
  for (const auto& s : sets) {
    if (s.cols() != de) throw ShapeError("condition batch mixes embedding widths");
    P += s.rows();
  }
  ConditionBatch cb{Tensor(b, de), Tensor(P, de), Tensor(P, b), Tensor(b, P)};
  std::size_t p = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = sets[i];
    const double inv_n = 1.0 / static_cast<double>(s.rows());
    for (std::size_t r = 0; r < s.rows(); ++r, ++p) {
      for (std::size_t j = 0; j < de; ++j) {
        cb.mean_embeddings(i, j) += s(r, j);
        cb.pair_embeddings(p, j) = s(r, j);
      }
      cb.replicate(p, i) = 1.0;
      cb.average(i, p) = inv_n;
    }
    for (std::size_t j = 0; j < de; ++j) cb.mean_embeddings(i, j) /= static_cast<double>(s.rows());
  }
  return cb;
}

inline ConditionBatch make_condition_batch(const data::EmbeddingTable& table,
                                           std::span<const std::vector<data::ClassId>> label_sets) {
  std::vector<EmbeddingSet> sets;
  sets.reserve(label_sets.size());
  for (const auto& ls : label_sets) sets.push_back(embedding_set(table, ls));
  return make_condition_batch(sets);
}

// ---- cross-level fusion parameters -----------------------------------------

struct ClfParams {
  std::vector<Tensor> query;  // H tensors, d x d'
  std::vector<Tensor> key;
  std::vector<Tensor> value;
  Tensor output;  // W^O, d x d
  nn::Mlp residual;  // d -> hidden -> d, leaky hidden, linear output

  std::size_t heads() const { return query.size(); }
  std::size_t dim() const { return output.rows(); }
  std::size_t head_dim() const { return query.empty() ? 0 : query.front().cols(); }
};

inline ClfParams init_clf(std::size_t d, std::size_t heads, std::size_t hidden, std::uint64_t seed) {
  if (heads == 0 || d == 0 || d % heads != 0) {
    throw ConfigError("CLF head count " + std::to_string(heads) + " must divide feature dimension " + std::to_string(d));
  }
  const std::size_t dh = d / heads;
  Rng rng(seed);
  ClfParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.query.push_back(nn::init_linear(d, dh, rng).weight);
    p.key.push_back(nn::init_linear(d, dh, rng).weight);
    p.value.push_back(nn::init_linear(d, dh, rng).weight);
  }
  // W^O and the last layer of f start at zero, so an untrained block returns
  // the mean of its two inputs and attention is learned on top of that.
  p.output = Tensor(d, d);
  p.residual = nn::init_mlp(d, hidden, d, nn::Activation::LeakyRelu, nn::Activation::None, rng());
  p.residual.layer2.weight = Tensor(hidden, d);
  return p;
}

inline void validate(const ClfParams& p) {
  const std::size_t H = p.heads();
  if (H == 0 || p.key.size() != H || p.value.size() != H) throw ShapeError("CLF parameters need H query/key/value triplets");
  const std::size_t d = p.dim();
  if (p.output.cols() != d || d % H != 0) throw ShapeError("CLF output projection must be d x d with H | d");
  for (std::size_t h = 0; h < H; ++h) {
    for (const Tensor* w : {&p.query[h], &p.key[h], &p.value[h]}) {
      if (w->rows() != d || w->cols() != d / H) {
        throw ShapeError("CLF head " + std::to_string(h) + " projection is " + shape_string(w->shape()) +
                         ", expected " + std::to_string(d) + "x" + std::to_string(d / H));
      }
    }
  }
  if (p.residual.in() != d || p.residual.out() != d) throw ShapeError("CLF residual network must map d -> d");
}

inline void append_params(nn::ParamList& list, ClfParams& p, const std::string& prefix) {
  for (std::size_t h = 0; h < p.heads(); ++h) {
    const std::string hs = std::to_string(h);
    list.push_back({prefix + ".query." + hs, &p.query[h]});
    list.push_back({prefix + ".key." + hs, &p.key[h]});
    list.push_back({prefix + ".value." + hs, &p.value[h]});
  }
  list.push_back({prefix + ".output", &p.output});
  nn::append_params(list, p.residual, prefix + ".residual");
}

struct BoundClf {
  std::vector<Var> query, key, value;
  Var output;
  nn::BoundMlp residual;
};

inline BoundClf bind(nn::ParamBinder& b, const ClfParams& p, bool trainable) {
  validate(p);
  BoundClf out;
  for (std::size_t h = 0; h < p.heads(); ++h) {
    out.query.push_back(b.bind(p.query[h], trainable));
    out.key.push_back(b.bind(p.key[h], trainable));
    out.value.push_back(b.bind(p.value[h], trainable));
  }
  out.output = b.bind(p.output, trainable);
  out.residual = nn::bind(b, p.residual, trainable);
  return out;
}

/// Graph nodes of one batched cross-level fusion. Row f of the stacked 2 x d
/// matrix is the feature-level input, row a the attribute-level input.
struct ClfTrace {
  std::vector<Var> relation_f;  // per head, b x 2: softmax over keys (f, a) for query f
  std::vector<Var> relation_a;  // per head, b x 2: same for query a
  Var o_f, o_a;                 // b x d
  Var fused_f, fused_a;         // rows of o~, b x d
  Var output;                   // b x d
};

inline ClfTrace clf_forward(const BoundClf& p, Var x_f, Var x_a) {
  Graph& g = x_f.graph();
  const std::size_t d = p.output.rows();
  if (x_f.shape() != x_a.shape() || x_f.cols() != d) {
    throw ShapeError("clf_forward: inputs " + shape_string(x_f.shape()) + " and " + shape_string(x_a.shape()) +
                     " must both be b x " + std::to_string(d));
  }
  const std::size_t H = p.query.size();
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var e0_row = g.constant(Tensor::matrix({{1.0, 0.0}}));
  Var e1_row = g.constant(Tensor::matrix({{0.0, 1.0}}));
  Var e0_col = g.constant(Tensor::matrix({{1.0}, {0.0}}));
  Var e1_col = g.constant(Tensor::matrix({{0.0}, {1.0}}));

  auto dot = [&](Var q, Var k) { return diff::sum_axis(q * k, 1) * inv_sqrt; };  // b x 1
  auto logits = [&](Var s0, Var s1) { return diff::matmul(s0, e0_row) + diff::matmul(s1, e1_row); };

  ClfTrace t;
  for (std::size_t h = 0; h < H; ++h) {
    Var qf = diff::matmul(x_f, p.query[h]), qa = diff::matmul(x_a, p.query[h]);
    Var kf = diff::matmul(x_f, p.key[h]), ka = diff::matmul(x_a, p.key[h]);
    Var vf = diff::matmul(x_f, p.value[h]), va = diff::matmul(x_a, p.value[h]);
    Var rf = diff::softmax_rows(logits(dot(qf, kf), dot(qf, ka)));
    Var ra = diff::softmax_rows(logits(dot(qa, kf), dot(qa, ka)));
    t.relation_f.push_back(rf);
    t.relation_a.push_back(ra);
    Var alpha_f = diff::broadcast_cols(diff::matmul(rf, e0_col), dh) * vf +
                  diff::broadcast_cols(diff::matmul(rf, e1_col), dh) * va;
    Var alpha_a = diff::broadcast_cols(diff::matmul(ra, e0_col), dh) * vf +
                  diff::broadcast_cols(diff::matmul(ra, e1_col), dh) * va;
    Var wo_h = diff::slice_rows(p.output, h * dh, (h + 1) * dh);
    Var of = diff::matmul(alpha_f, wo_h), oa = diff::matmul(alpha_a, wo_h);
    t.o_f = t.o_f.valid() ? t.o_f + of : of;
    t.o_a = t.o_a.valid() ? t.o_a + oa : oa;
  }
  Var u_f = x_f + t.o_f;
  Var u_a = x_a + t.o_a;
  t.fused_f = nn::mlp_forward(p.residual, u_f) + u_f;
  t.fused_a = nn::mlp_forward(p.residual, u_a) + u_a;
  t.output = (t.fused_f + t.fused_a) * 0.5;
  return t;
}

// ---- synthesizer ------------------------------------------------------------

/// Generator parameters for one fusion mode. ALF uses only `alf`, FLF only
/// `flf`; CLF uses both generators plus `clf`.
struct SynthesizerParams {
  Mode mode = Mode::CLF;
  std::size_t noise_dim = 0;
  std::optional<nn::Mlp> alf;
  std::optional<nn::Mlp> flf;
  std::optional<ClfParams> clf;

  std::size_t feature_dim() const {
    if (alf) return alf->out();
    if (flf) return flf->out();
    return 0;
  }
};

struct SynthesizerShape {
  std::size_t noise_dim;
  std::size_t embedding_dim;
  std::size_t feature_dim;
  std::size_t hidden;
  std::size_t clf_hidden;
  std::size_t heads;
};

/// Generators map [z | e] -> features in (0, 1) through a sigmoid output.
inline SynthesizerParams init_synthesizer(Mode mode, const SynthesizerShape& s, std::uint64_t seed) {
  SynthesizerParams p;
  p.mode = mode;
  p.noise_dim = s.noise_dim;
  const std::size_t in = s.noise_dim + s.embedding_dim;
  if (mode == Mode::ALF || mode == Mode::CLF)
    p.alf = nn::init_mlp(in, s.hidden, s.feature_dim, nn::Activation::LeakyRelu, nn::Activation::Sigmoid,
                         derive_seed(seed, "alf"));
  if (mode == Mode::FLF || mode == Mode::CLF)
    p.flf = nn::init_mlp(in, s.hidden, s.feature_dim, nn::Activation::LeakyRelu, nn::Activation::Sigmoid,
                         derive_seed(seed, "flf"));
  if (mode == Mode::CLF) p.clf = init_clf(s.feature_dim, s.heads, s.clf_hidden, derive_seed(seed, "clf"));
  return p;
}

inline void append_params(nn::ParamList& list, SynthesizerParams& p, const std::string& prefix) {
  if (p.alf) nn::append_params(list, *p.alf, prefix + ".alf");
  if (p.flf) nn::append_params(list, *p.flf, prefix + ".flf");
  if (p.clf) append_params(list, *p.clf, prefix + ".clf");
}

struct BoundSynthesizer {
  Mode mode;
  std::optional<nn::BoundMlp> alf;
  std::optional<nn::BoundMlp> flf;
  std::optional<BoundClf> clf;
};

inline BoundSynthesizer bind(nn::ParamBinder& b, const SynthesizerParams& p, bool trainable) {
  const bool need_alf = p.mode != Mode::FLF, need_flf = p.mode != Mode::ALF, need_clf = p.mode == Mode::CLF;
  if ((need_alf && !p.alf) || (need_flf && !p.flf) || (need_clf && !p.clf)) {
    throw ConfigError("synthesizer is missing parameters for mode " + mode_name(p.mode));
  }
  BoundSynthesizer out{p.mode, {}, {}, {}};
  if (need_alf) out.alf = nn::bind(b, *p.alf, trainable);
  if (need_flf) out.flf = nn::bind(b, *p.flf, trainable);
  if (need_clf) out.clf = bind(b, *p.clf, trainable);
  return out;
}

struct SynthesisTrace {
  Var x_a;     // attribute-level branch (ALF, CLF)
  Var x_f;     // feature-level branch (FLF, CLF)
  Var latent;  // P x d per-pair features of the FLF branch
  std::optional<ClfTrace> clf;
  Var output;  // b x d
};

/// x~^a = G^a([z | e_mu])
inline Var alf_forward(const nn::BoundMlp& ga, Var z, const ConditionBatch& cb) {
  Graph& g = z.graph();
  const std::vector<Var> parts{z, g.constant(cb.mean_embeddings)};
  return nn::mlp_forward_concat(ga, parts);
}

/// x~^f = mean_j G^f([z | e(y_j)]); returns (x~^f, per-pair latents).
inline std::pair<Var, Var> flf_forward(const nn::BoundMlp& gf, Var z, const ConditionBatch& cb) {
  Graph& g = z.graph();
  Var z_pairs = diff::matmul(g.constant(cb.replicate), z);
  const std::vector<Var> parts{z_pairs, g.constant(cb.pair_embeddings)};
  Var latent = nn::mlp_forward_concat(gf, parts);
  return {diff::matmul(g.constant(cb.average), latent), latent};
}

/// One shared noise row per instance feeds every branch.
inline SynthesisTrace synthesize(const BoundSynthesizer& s, Var z, const ConditionBatch& cb) {
  if (z.rows() != cb.batch()) {
    throw ShapeError("synthesize: " + std::to_string(z.rows()) + " noise rows for " + std::to_string(cb.batch()) +
                     " label sets");
  }
  SynthesisTrace t;
  if (s.mode != Mode::FLF) t.x_a = alf_forward(*s.alf, z, cb);
  if (s.mode != Mode::ALF) std::tie(t.x_f, t.latent) = flf_forward(*s.flf, z, cb);
  switch (s.mode) {
    case Mode::ALF: t.output = t.x_a; break;
    case Mode::FLF: t.output = t.x_f; break;
    case Mode::CLF:
      t.clf = clf_forward(*s.clf, t.x_f, t.x_a);
      t.output = t.clf->output;
      break;
  }
  return t;
}

// ---- value-level single-instance API ---------------------------------------

namespace detail {
inline Tensor row_tensor(std::span<const double> v) { return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end())); }
inline std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline void check_generator(const nn::Mlp& gen, std::size_t dz, std::size_t de) {
  if (gen.in() != dz + de) {
    throw ShapeError("generator input width " + std::to_string(gen.in()) + " != noise " + std::to_string(dz) +
                     " + embedding " + std::to_string(de));
  }
}
}  // namespace detail

inline std::vector<double> alf_generate(const nn::Mlp& ga, std::span<const double> z,
                                        std::span<const std::vector<double>> embeddings) {
  const EmbeddingSet set = canonical_set(embeddings);
  detail::check_generator(ga, z.size(), set.cols());
  Graph g;
  nn::ParamBinder b(g);
  const ConditionBatch cb = make_condition_batch(std::span(&set, 1));
  return detail::to_vector(g.evaluate(alf_forward(nn::bind(b, ga, false), g.constant(detail::row_tensor(z)), cb)));
}

inline std::vector<double> flf_generate(const nn::Mlp& gf, std::span<const double> z,
                                        std::span<const std::vector<double>> embeddings) {
  const EmbeddingSet set = canonical_set(embeddings);
  detail::check_generator(gf, z.size(), set.cols());
  Graph g;
  nn::ParamBinder b(g);
  const ConditionBatch cb = make_condition_batch(std::span(&set, 1));
  return detail::to_vector(
      g.evaluate(flf_forward(nn::bind(b, gf, false), g.constant(detail::row_tensor(z)), cb).first));
}

struct FusionOutput {
  std::vector<double> feature;
  Mode mode = Mode::CLF;
  std::vector<double> x_a;
  std::vector<double> x_f;
  std::vector<Tensor> relation;  // per head, 2 x 2 (rows: query f, a; cols: key f, a)
  Tensor o;                      // 2 x d (rows f, a)
  Tensor fused;                  // o~, 2 x d
};

inline FusionOutput clf_fuse(const ClfParams& params, std::span<const double> x_a, std::span<const double> x_f) {
  validate(params);
  if (x_a.size() != params.dim() || x_f.size() != params.dim()) {
    throw ShapeError("clf_fuse: inputs of width " + std::to_string(x_a.size()) + " and " +
                     std::to_string(x_f.size()) + ", expected " + std::to_string(params.dim()));
  }
  Graph g;
  nn::ParamBinder b(g);
  const ClfTrace t =
      clf_forward(bind(b, params, false), g.constant(detail::row_tensor(x_f)), g.constant(detail::row_tensor(x_a)));
  auto stack = [&](Var top, Var bottom) { return g.evaluate(g.concat_rows(top, bottom)); };
  FusionOutput out;
  out.mode = Mode::CLF;
  out.feature = detail::to_vector(g.evaluate(t.output));
  out.x_a.assign(x_a.begin(), x_a.end());
  out.x_f.assign(x_f.begin(), x_f.end());
  for (std::size_t h = 0; h < t.relation_f.size(); ++h) out.relation.push_back(stack(t.relation_f[h], t.relation_a[h]));
  out.o = stack(t.o_f, t.o_a);
  out.fused = stack(t.fused_f, t.fused_a);
  return out;
}

/// Dispatch over the three modes for one instance.
inline std::vector<double> synthesize(const SynthesizerParams& params, std::span<const double> z,
                                      std::span<const std::vector<double>> embeddings) {
  const EmbeddingSet set = canonical_set(embeddings);
  for (const auto* gen : {&params.alf, &params.flf})
    if (*gen) detail::check_generator(**gen, z.size(), set.cols());
  Graph g;
  nn::ParamBinder b(g);
  const ConditionBatch cb = make_condition_batch(std::span(&set, 1));
  const auto t = synthesize(bind(b, params, false), g.constant(detail::row_tensor(z)), cb);
  return detail::to_vector(g.evaluate(t.output));
}

}  // namespace mlzsl::fusion
