#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mlzsl/data.hpp"
#include "mlzsl/diffmath.hpp"
#include "mlzsl/fusion.hpp"
#include "mlzsl/losses.hpp"
#include "mlzsl/nn.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/zslcls.hpp"

namespace mlzsl::gan {

using diff::Graph;
using diff::Var;

enum class Objective { CLSWGAN, VAEGAN };

inline std::string objective_name(Objective o) { return o == Objective::CLSWGAN ? "CLSWGAN" : "VAEGAN"; }

inline Objective parse_objective(const std::string& s) {
  if (s == "CLSWGAN" || s == "clswgan") return Objective::CLSWGAN;
  if (s == "VAEGAN" || s == "vaegan") return Objective::VAEGAN;
  throw ConfigError("unknown objective '" + s + "' (expected CLSWGAN or VAEGAN)");
}

struct TrainConfig {
  double lambda = 10.0;  // gradient-penalty weight
  double alpha = 0.1;    // seen-classifier regularizer weight
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::size_t critic_steps = 5;
  std::size_t noise_dim = 0;  // 0 selects the embedding dimension
  std::size_t hidden = 64;
  std::size_t clf_hidden = 128;
  std::size_t heads = 8;
  double kl_weight = 1.0;
  double reconstruction_weight = 1.0;
  // seen classifier f_cls, trained once on real seen features and then frozen
  std::size_t cls_epochs = 30;
  double cls_learning_rate = 1e-3;
  std::size_t cls_batch_size = 64;
  Objective objective = Objective::CLSWGAN;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lambda >= 0.0) || !(c.alpha >= 0.0)) throw ConfigError("lambda and alpha must be non-negative");
  if (!(c.learning_rate > 0.0) || !(c.cls_learning_rate > 0.0)) throw ConfigError("learning rates must be positive");
  if (c.batch_size == 0 || c.critic_steps == 0 || c.hidden == 0 || c.clf_hidden == 0 || c.heads == 0 ||
      c.cls_batch_size == 0) {
    throw ConfigError("batch size, critic steps, layer widths and head count must be positive");
  }
  if (!(c.kl_weight >= 0.0) || !(c.reconstruction_weight >= 0.0)) throw ConfigError("VAE weights must be non-negative");
}

struct ModelDims {
  std::size_t seen = 0;
  std::size_t embedding = 0;
  std::size_t feature = 0;
};

struct Models {
  fusion::SynthesizerParams generator;
  nn::Mlp critic;                  // [x | e_mu] -> 1, linear output
  std::optional<nn::Mlp> encoder;  // [x | e_mu] -> [mu | logvar], VAEGAN only
  nn::Linear seen_classifier;      // d -> S, logistic outputs

  std::size_t noise_dim() const { return generator.noise_dim; }
};

inline Models init_models(fusion::Mode mode, const TrainConfig& cfg, const ModelDims& dims, std::uint64_t seed) {
  validate(cfg);
  if (dims.seen == 0 || dims.embedding == 0 || dims.feature == 0) throw ConfigError("model dimensions must be positive");
  const std::size_t dz = cfg.noise_dim ? cfg.noise_dim : dims.embedding;
  Models m;
  m.generator = fusion::init_synthesizer(
      mode, {dz, dims.embedding, dims.feature, cfg.hidden, cfg.clf_hidden, cfg.heads}, derive_seed(seed, "generator"));
  m.critic = nn::init_mlp(dims.feature + dims.embedding, cfg.hidden, 1, nn::Activation::LeakyRelu,
                          nn::Activation::None, derive_seed(seed, "critic"));
  if (cfg.objective == Objective::VAEGAN) {
    m.encoder = nn::init_mlp(dims.feature + dims.embedding, cfg.hidden, 2 * dz, nn::Activation::LeakyRelu,
                             nn::Activation::None, derive_seed(seed, "encoder"));
  }
  m.seen_classifier = {Tensor(dims.feature, dims.seen), Tensor(1, dims.seen)};
  return m;
}

/// Parameters updated by the generator step (generator stack and encoder).
inline nn::ParamList generator_params(Models& m) {
  nn::ParamList p;
  fusion::append_params(p, m.generator, "generator");
  if (m.encoder) nn::append_params(p, *m.encoder, "encoder");
  return p;
}

inline nn::ParamList critic_params(Models& m) {
  nn::ParamList p;
  nn::append_params(p, m.critic, "critic");
  return p;
}

inline nn::ParamList all_params(Models& m) {
  nn::ParamList p = generator_params(m);
  nn::append_params(p, m.critic, "critic");
  nn::append_params(p, m.seen_classifier, "seen_classifier");
  return p;
}

struct BoundModels {
  fusion::BoundSynthesizer generator;
  nn::BoundMlp critic;
  std::optional<nn::BoundMlp> encoder;
  nn::BoundLinear seen_classifier;
};

inline BoundModels bind(nn::ParamBinder& b, const Models& m, bool train_generator, bool train_critic) {
  BoundModels out{fusion::bind(b, m.generator, train_generator), nn::bind(b, m.critic, train_critic), {},
                  nn::bind(b, m.seen_classifier, false)};
  if (m.encoder) out.encoder = nn::bind(b, *m.encoder, train_generator);
  return out;
}

// ---- critic -----------------------------------------------------------------

/// D([x | condition]) as a b x 1 column.
inline Var critic_forward(const nn::BoundMlp& D, Var x, Var condition) {
  const std::vector<Var> parts{x, condition};
  return nn::mlp_forward_concat(D, parts);
}

/// x_hat = eps * real + (1 - eps) * synth, one eps per row.
inline Tensor interpolate(const Tensor& real, const Tensor& synth, const Tensor& eps) {
  if (real.shape() != synth.shape() || eps.rows() != real.rows() || eps.cols() != 1) {
    throw ShapeError("interpolate: real " + shape_string(real.shape()) + ", synth " + shape_string(synth.shape()) +
                     ", eps " + shape_string(eps.shape()));
  }
  Tensor x(real.shape());
  for (std::size_t i = 0; i < real.rows(); ++i)
    for (std::size_t j = 0; j < real.cols(); ++j) x(i, j) = eps(i, 0) * real(i, j) + (1.0 - eps(i, 0)) * synth(i, j);
  return x;
}

inline Tensor sample_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = uniform01(rng);
  return t;
}

inline Tensor sample_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = standard_normal(rng);
  return t;
}

/// E[(||grad_x D(x_hat, e)||_2 - 1)^2], differentiable in D's parameters.
inline Var gradient_penalty(const nn::BoundMlp& D, const Tensor& real, const Tensor& synth, const Tensor& condition,
                            const Tensor& eps) {
  Graph& g = D.layer1.weight.graph();
  Var x_hat = g.leaf(interpolate(real, synth, eps), "x_hat");
  Var grad = g.grad_as_graph(diff::sum(critic_forward(D, x_hat, g.constant(condition))), x_hat);
  Var norms = diff::norm_axis(grad, 1);
  return diff::mean(diff::square(norms - g.ones(norms.rows(), 1)));
}

inline Var gradient_penalty(const nn::BoundMlp& D, const Tensor& real, const Tensor& synth, const Tensor& condition,
                            Rng& rng) {
  return gradient_penalty(D, real, synth, condition, sample_uniform(real.rows(), 1, rng));
}

struct CriticTerms {
  Var objective;   // L_W, maximized over the critic
  Var real_mean;   // E[D(real)]
  Var synth_mean;  // E[D(synth)]
  Var penalty;     // gradient penalty before lambda
};

inline CriticTerms critic_loss(const nn::BoundMlp& D, const Tensor& real, const Tensor& synth, const Tensor& condition,
                               double lambda, const Tensor& eps) {
  if (real.rows() == 0) throw ShapeError("critic_loss: empty batch");
  if (real.shape() != synth.shape() || condition.rows() != real.rows()) {
    throw ShapeError("critic_loss: real " + shape_string(real.shape()) + ", synth " + shape_string(synth.shape()) +
                     ", condition " + shape_string(condition.shape()));
  }
  Graph& g = D.layer1.weight.graph();
  Var cond = g.constant(condition);
  CriticTerms t;
  t.real_mean = diff::mean(critic_forward(D, g.constant(real), cond));
  t.synth_mean = diff::mean(critic_forward(D, g.constant(synth), cond));
  t.penalty = gradient_penalty(D, real, synth, condition, eps);
  t.objective = t.real_mean - t.synth_mean - t.penalty * lambda;
  return t;
}

// ---- generator-side terms ---------------------------------------------------

/// Mean per-class BCE of the frozen seen classifier on synthesized features.
inline Var classifier_regularizer(const nn::BoundLinear& f_cls, Var x_synth, const Tensor& targets) {
  if (targets.cols() != f_cls.weight.cols()) {
    throw ShapeError("classifier_regularizer: " + std::to_string(targets.cols()) + " target columns for " +
                     std::to_string(f_cls.weight.cols()) + " seen classes");
  }
  return loss::bce_mean(diff::sigmoid(nn::linear_forward(f_cls, x_synth)), targets);
}

/// Log floor for the reconstruction BCE. CLF outputs are not confined to
/// (0, 1); below the floor the loss continues linearly with slope 1/delta,
/// so a coarse floor keeps reconstruction gradients moderate.
inline constexpr double kReconstructionDelta = 1e-2;

struct VaeTerms {
  Var kl;
  Var reconstruction;
  Var mu;
  Var logvar;
  Var recon;  // reconstructed features
};

/// Encode (x, e_mu), sample z = mu + exp(logvar / 2) * eta, decode with the
/// shared generator stack and score the reconstruction with summed BCE.
inline VaeTerms vae_losses(const nn::BoundMlp& E, const fusion::BoundSynthesizer& G, const Tensor& x_real,
                           const fusion::ConditionBatch& cb, const Tensor& eta) {
  for (std::size_t i = 0; i < x_real.size(); ++i) {
    if (!(x_real[i] >= 0.0 && x_real[i] <= 1.0)) {
      throw ConfigError("vae_losses: real feature " + std::to_string(x_real[i]) + " at row " +
                        std::to_string(i / x_real.cols()) + " is outside [0, 1]");
    }
  }
  Graph& g = E.layer1.weight.graph();
  const std::size_t dz = E.layer2.weight.cols() / 2;
  if (eta.rows() != x_real.rows() || eta.cols() != dz) {
    throw ShapeError("vae_losses: noise " + shape_string(eta.shape()) + " for " + std::to_string(x_real.rows()) +
                     " rows of latent width " + std::to_string(dz));
  }
  Tensor sel_mu(2 * dz, dz), sel_lv(2 * dz, dz);
  for (std::size_t j = 0; j < dz; ++j) sel_mu(j, j) = 1.0, sel_lv(dz + j, j) = 1.0;
  const std::vector<Var> parts{g.constant(x_real), g.constant(cb.mean_embeddings)};
  Var stats = nn::mlp_forward_concat(E, parts);
  VaeTerms t;
  t.mu = diff::matmul(stats, g.constant(sel_mu));
  t.logvar = diff::matmul(stats, g.constant(sel_lv));
  Var z = t.mu + diff::exp(t.logvar * 0.5) * g.constant(eta);
  t.recon = fusion::synthesize(G, z, cb).output;
  t.kl = loss::kl_divergence(t.mu, t.logvar);
  t.reconstruction = loss::bce_rows(t.recon, x_real, kReconstructionDelta);
  return t;
}

struct GeneratorBatch {
  fusion::ConditionBatch conditions;
  Tensor x_real;   // used by the VAE terms
  Tensor targets;  // b x S multi-hot over seen classes
  Tensor z;        // prior noise for the adversarial branch
  Tensor eta;      // reparameterization noise (VAEGAN)
};

struct GeneratorTerms {
  Var total;
  Var adversarial;  // -E[D(x~, e_mu)]
  Var classifier;   // BCE of f_cls on x~ (before alpha)
  Var kl;
  Var reconstruction;
};

/// -E[D(x~)] + alpha * BCE(f_cls(x~), y) [+ w_kl * KL + w_rec * BCE(recon, x)].
inline GeneratorTerms generator_objective(const BoundModels& m, const GeneratorBatch& batch, const TrainConfig& cfg) {
  Graph& g = m.critic.layer1.weight.graph();
  GeneratorTerms t;
  Var x_synth = fusion::synthesize(m.generator, g.constant(batch.z), batch.conditions).output;
  t.adversarial = -diff::mean(critic_forward(m.critic, x_synth, g.constant(batch.conditions.mean_embeddings)));
  t.classifier = classifier_regularizer(m.seen_classifier, x_synth, batch.targets);
  t.total = t.adversarial + t.classifier * cfg.alpha;
  if (cfg.objective == Objective::VAEGAN) {
    if (!m.encoder) throw ConfigError("VAEGAN objective requires an encoder");
    const auto v = vae_losses(*m.encoder, m.generator, batch.x_real, batch.conditions, batch.eta);
    t.kl = v.kl;
    t.reconstruction = v.reconstruction;
    t.total = t.total + v.kl * cfg.kl_weight + v.reconstruction * cfg.reconstruction_weight;
  }
  return t;
}

// ---- value-level synthesis --------------------------------------------------

/// Evaluate the generator stack on explicit noise rows, one per label set.
inline Tensor generate_features(const fusion::SynthesizerParams& gen, const Tensor& z,
                                const fusion::ConditionBatch& conditions) {
  Graph g;
  nn::ParamBinder b(g);
  return g.evaluate(fusion::synthesize(fusion::bind(b, gen, false), g.constant(z), conditions).output);
}

struct SynthesisConfig {
  std::size_t per_class = 100;  // instances anchored on each unseen class
  std::size_t max_labels = 3;
  std::size_t chunk = 256;
};

/// For each unseen class k, `per_class` label sets that contain k plus
/// n - 1 other unseen classes (n uniform in [1, max_labels]), each with its
/// own noise draw. Output order: class-major, then draw index.
inline data::Split synthesize_unseen(const fusion::SynthesizerParams& gen, const data::ClassSpace& classes,
                                     const data::EmbeddingTable& table, const SynthesisConfig& cfg,
                                     std::uint64_t seed) {
  if (classes.unseen_count == 0) throw ConfigError("synthesize_unseen: no unseen classes");
  if (cfg.max_labels == 0 || cfg.max_labels > classes.unseen_count) {
    throw ConfigError("synthesize_unseen: max_labels " + std::to_string(cfg.max_labels) + " must be in [1, " +
                      std::to_string(classes.unseen_count) + "]");
  }
  if (cfg.per_class == 0 || cfg.chunk == 0) throw ConfigError("synthesize_unseen: counts must be positive");
  Rng rng(seed);
  std::vector<std::vector<data::ClassId>> sets;
  const auto unseen = classes.unseen_ids();
  std::uniform_int_distribution<std::size_t> size_dist(1, cfg.max_labels);
  for (auto k : unseen) {
    for (std::size_t r = 0; r < cfg.per_class; ++r) {
      const std::size_t n = size_dist(rng);
      std::vector<data::ClassId> pool;
      for (auto j : unseen)
        if (j != k) pool.push_back(j);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      std::vector<data::ClassId> labels(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n - 1));
      labels.push_back(k);
      std::sort(labels.begin(), labels.end());
      sets.push_back(std::move(labels));
    }
  }
  const Tensor z = sample_normal(sets.size(), gen.noise_dim, rng);
  data::Split out;
  out.reserve(sets.size());
  for (std::size_t start = 0; start < sets.size(); start += cfg.chunk) {
    const std::size_t end = std::min(sets.size(), start + cfg.chunk);
    const std::span<const std::vector<data::ClassId>> chunk_sets(sets.data() + start, end - start);
    Tensor zc(end - start, gen.noise_dim);
    for (std::size_t i = start; i < end; ++i) std::copy(z.row(i).begin(), z.row(i).end(), zc.row(i - start).begin());
    const Tensor x = generate_features(gen, zc, fusion::make_condition_batch(table, chunk_sets));
    for (std::size_t i = start; i < end; ++i) {
      const auto row = x.row(i - start);
      out.push_back({std::vector<double>(row.begin(), row.end()), sets[i]});
    }
  }
  return out;
}

// ---- training ---------------------------------------------------------------

/// Fit the seen-class regularizer f_cls on real seen features.
inline nn::Linear pretrain_seen_classifier(const data::Split& train_seen, std::size_t seen_count,
                                           const TrainConfig& cfg, std::uint64_t seed) {
  if (train_seen.empty()) throw ConfigError("pretrain_seen_classifier: no training instances");
  std::vector<data::ClassId> ids(seen_count);
  std::iota(ids.begin(), ids.end(), 0);
  auto clf = zslcls::make_classifier(train_seen.front().feature.size(), ids);
  std::vector<std::vector<data::ClassId>> labels;
  for (const auto& inst : train_seen) labels.push_back(inst.labels);
  zslcls::fit(clf, data::feature_matrix(train_seen), loss::multi_hot(labels, seen_count),
              {cfg.cls_epochs, cfg.cls_batch_size, cfg.cls_learning_rate, cfg.beta1, cfg.beta2, seed});
  return clf.layer;
}

struct EpochStats {
  std::size_t epoch = 0;
  double critic_loss = 0.0;     // mean L_W over critic steps
  double generator_loss = 0.0;  // mean total generator objective
  double kl = 0.0;
  double reconstruction = 0.0;
  double classifier = 0.0;
  double critic_gap = 0.0;  // |E[D(real)] - E[D(synth)]| averaged over critic steps
};

struct TrainResult {
  Models models;
  std::vector<EpochStats> trace;
};

namespace detail {

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng& rng) : order_(n), batch_(std::min(batch, n)), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> idx;
    idx.reserve(batch_);
    while (idx.size() < batch_) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      idx.push_back(order_[cursor_++]);
    }
    return idx;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  Rng& rng_;
};

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
  Tensor out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(m.row(idx[i]).begin(), m.row(idx[i]).end(), out.row(i).begin());
  return out;
}

inline double scalar_or_zero(const Var& v) { return v.valid() ? v.value()[0] : 0.0; }

inline void guard(double v, const char* what, std::size_t epoch) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("training diverged: ") + what + " is non-finite in epoch " + std::to_string(epoch));
  }
}

}  // namespace detail

/// Alternating WGAN-GP training: per iteration `critic_steps` critic updates on
/// fresh batches, then one generator update. One epoch is
/// floor(N / batch_size) iterations (at least one). The seen classifier in
/// `models` is used frozen.
inline TrainResult train(Models models, const data::Corpus& corpus, const TrainConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  TrainResult result{std::move(models), {}};
  if (cfg.epochs == 0) return result;
  Models& m = result.models;
  const auto& train = corpus.train_seen;
  if (train.empty()) throw ConfigError("train: no seen training instances");
  if ((cfg.objective == Objective::VAEGAN) != m.encoder.has_value()) {
    throw ConfigError("train: encoder presence does not match objective " + objective_name(cfg.objective));
  }

  const Tensor X = data::feature_matrix(train);
  std::vector<fusion::EmbeddingSet> sets;
  std::vector<std::vector<data::ClassId>> labels;
  for (const auto& inst : train) {
    sets.push_back(fusion::embedding_set(corpus.embeddings, inst.labels));
    labels.push_back(inst.labels);
  }
  const Tensor Y = loss::multi_hot(labels, corpus.classes.seen_count);
  const std::size_t dz = m.noise_dim();

  nn::ParamList gen_params = generator_params(m);
  nn::ParamList crit_params = critic_params(m);
  const nn::AdamConfig adam_cfg{.learning_rate = cfg.learning_rate, .beta1 = cfg.beta1, .beta2 = cfg.beta2};
  auto gen_adam = nn::make_adam(gen_params, adam_cfg);
  auto crit_adam = nn::make_adam(crit_params, adam_cfg);

  Rng rng(seed);
  detail::BatchSampler sampler(train.size(), cfg.batch_size, rng);
  const std::size_t iterations = std::max<std::size_t>(1, train.size() / cfg.batch_size);

  auto conditions_for = [&](const std::vector<std::size_t>& idx) {
    std::vector<fusion::EmbeddingSet> chosen;
    chosen.reserve(idx.size());
    for (auto i : idx) chosen.push_back(sets[i]);
    return fusion::make_condition_batch(chosen);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    double gap_sum = 0.0;
    std::size_t critic_updates = 0;
    for (std::size_t it = 0; it < iterations; ++it) {
      for (std::size_t c = 0; c < cfg.critic_steps; ++c) {
        const auto idx = sampler.next();
        const auto cb = conditions_for(idx);
        const Tensor real = detail::gather_rows(X, idx);
        const Tensor synth = generate_features(m.generator, sample_normal(idx.size(), dz, rng), cb);
        const Tensor eps = sample_uniform(idx.size(), 1, rng);
        Graph g;
        nn::ParamBinder b(g);
        const auto D = nn::bind(b, m.critic, true);
        const auto terms = critic_loss(D, real, synth, cb.mean_embeddings, cfg.lambda, eps);
        Var minimized = -terms.objective;
        g.evaluate(minimized);
        const double lw = terms.objective.value()[0];
        detail::guard(lw, "critic loss", epoch);
        stats.critic_loss += lw;
        gap_sum += terms.real_mean.value()[0] - terms.synth_mean.value()[0];
        ++critic_updates;
        nn::adam_step(crit_adam, crit_params, b.gradients(crit_params, g.backward(minimized)));
      }

      const auto idx = sampler.next();
      GeneratorBatch batch{conditions_for(idx), detail::gather_rows(X, idx), detail::gather_rows(Y, idx),
                           sample_normal(idx.size(), dz, rng), Tensor()};
      if (cfg.objective == Objective::VAEGAN) batch.eta = sample_normal(idx.size(), dz, rng);
      Graph g;
      nn::ParamBinder b(g);
      const auto bm = bind(b, m, true, false);
      const auto terms = generator_objective(bm, batch, cfg);
      g.evaluate(terms.total);
      const double total = terms.total.value()[0];
      detail::guard(total, "generator loss", epoch);
      stats.generator_loss += total;
      stats.classifier += detail::scalar_or_zero(terms.classifier);
      stats.kl += detail::scalar_or_zero(terms.kl);
      stats.reconstruction += detail::scalar_or_zero(terms.reconstruction);
      nn::adam_step(gen_adam, gen_params, b.gradients(gen_params, g.backward(terms.total)));
    }
    const double n_it = static_cast<double>(iterations);
    stats.critic_loss /= static_cast<double>(critic_updates);
    stats.critic_gap = std::abs(gap_sum / static_cast<double>(critic_updates));
    stats.generator_loss /= n_it;
    stats.classifier /= n_it;
    stats.kl /= n_it;
    stats.reconstruction /= n_it;
    result.trace.push_back(stats);
  }
  return result;
}

/// One line per epoch: epoch, critic loss, generator loss, KL, reconstruction, classifier term.
inline void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochStats>& trace) {
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "epoch,critic_loss,generator_loss,kl,reconstruction,classifier,critic_gap\n";
  out << std::setprecision(10);
  for (const auto& s : trace) {
    out << s.epoch << ',' << s.critic_loss << ',' << s.generator_loss << ',' << s.kl << ',' << s.reconstruction << ','
        << s.classifier << ',' << s.critic_gap << '\n';
  }
}

}  // namespace mlzsl::gan
