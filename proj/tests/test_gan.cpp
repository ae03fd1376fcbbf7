#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mlzsl/gan.hpp"
#include "fusion_oracle.hpp"
#include "test_support.hpp"

namespace gan = mlzsl::gan;
namespace fusion = mlzsl::fusion;
namespace nn = mlzsl::nn;
namespace diff = mlzsl::diff;
namespace data = mlzsl::data;
using mlzsl::Tensor;
using mlzsl::diff::Graph;
using mlzsl::diff::Var;
using mlzsl::testing::finite_difference;
using mlzsl::testing::random_tensor;

namespace {

/// Critic [x | e] -> 1 with an identity hidden layer: D = c * x_0 + 0 * e.
nn::Mlp linear_critic(std::size_t d, std::size_t de, double slope) {
  nn::Mlp m{{Tensor(d + de, 1), Tensor(1, 1)}, {Tensor::scalar(slope), Tensor(1, 1)}, nn::Activation::None,
            nn::Activation::None};
  m.layer1.weight(0, 0) = 1.0;
  return m;
}

nn::Mlp random_critic(std::size_t d, std::size_t de, std::size_t hidden, std::uint64_t seed) {
  auto m = nn::init_mlp(d + de, hidden, 1, nn::Activation::LeakyRelu, nn::Activation::None, seed);
  std::mt19937_64 rng(seed);
  m.layer1.bias = random_tensor(1, hidden, rng, -0.2, 0.2);
  m.layer2.bias = random_tensor(1, 1, rng);
  return m;
}

double max_error_vs_fd(Graph& g, Var loss, const std::vector<Var>& leaves) {
  g.evaluate(loss);
  const auto grads = g.backward(loss);
  double worst = 0.0;
  for (Var leaf : leaves) {
    const Tensor fd = finite_difference(g, loss, leaf, 1e-5);
    worst = std::max(worst, mlzsl::max_relative_error(grads[leaf].data(), fd.data()));
  }
  return worst;
}

data::Corpus tiny_corpus(std::uint64_t seed) {
  data::SyntheticConfig cfg;
  cfg.seen_count = 6;
  cfg.unseen_count = 3;
  cfg.embedding_dim = 4;
  cfg.feature_dim = 8;
  cfg.train_count = 48;
  cfg.test_seen_count = 10;
  cfg.test_unseen_count = 10;
  cfg.max_labels = 2;
  cfg.seed = seed;
  auto c = data::generate_synthetic(cfg).corpus;
  data::normalize_corpus(c);
  return c;
}

gan::TrainConfig tiny_train_config(gan::Objective objective) {
  gan::TrainConfig cfg;
  cfg.objective = objective;
  cfg.hidden = 8;
  cfg.clf_hidden = 8;
  cfg.heads = 2;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.critic_steps = 2;
  cfg.cls_epochs = 2;
  return cfg;
}

gan::Models tiny_models(fusion::Mode mode, const gan::TrainConfig& cfg, const data::Corpus& c) {
  return gan::init_models(mode, cfg, {c.classes.seen_count, c.embeddings.dim(), c.feature_dim()}, 5);
}

}  // namespace

// ---- critic loss ------------------------------------------------------------

TEST(CriticLoss, ZeroCriticGivesMinusLambda) {
  std::mt19937_64 rng(1);
  nn::Mlp zero{{Tensor(5, 4), Tensor(1, 4)}, {Tensor(4, 1), Tensor(1, 1)}, nn::Activation::LeakyRelu,
               nn::Activation::None};
  Graph g;
  nn::ParamBinder b(g);
  const auto t = gan::critic_loss(nn::bind(b, zero, true), random_tensor(6, 3, rng, 0, 1), random_tensor(6, 3, rng, 0, 1),
                                  random_tensor(6, 2, rng), 10.0, random_tensor(6, 1, rng, 0, 1));
  EXPECT_EQ(g.evaluate(t.objective)[0], -10.0);
  EXPECT_EQ(t.real_mean.value()[0], 0.0);
  EXPECT_EQ(t.synth_mean.value()[0], 0.0);
}

TEST(CriticLoss, IdenticalBatchesHaveZeroGap) {
  std::mt19937_64 rng(2);
  const auto D = random_critic(3, 2, 6, 3);
  const Tensor x = random_tensor(5, 3, rng, 0, 1);
  Graph g;
  nn::ParamBinder b(g);
  const auto t = gan::critic_loss(nn::bind(b, D, true), x, x, random_tensor(5, 2, rng), 10.0,
                                  random_tensor(5, 1, rng, 0, 1));
  EXPECT_EQ(g.evaluate(t.real_mean - t.synth_mean)[0], 0.0);
}

TEST(CriticLoss, MatchesTermByTermRecomputation) {
  std::mt19937_64 rng(3);
  const double lambda = 10.0, slope = 0.2;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 3, de = 2, b = 4;
    const auto D = random_critic(d, de, 1, 100 + trial);
    const Tensor real = random_tensor(b, d, rng, 0, 1), synth = random_tensor(b, d, rng, 0, 1);
    const Tensor cond = random_tensor(b, de, rng), eps = random_tensor(b, 1, rng, 0, 1);

    const auto& w1 = D.layer1.weight;
    const double b1 = D.layer1.bias[0], w2 = D.layer2.weight[0], b2 = D.layer2.bias[0];
    auto pre = [&](const double* x, std::size_t i) {
      double s = b1;
      for (std::size_t j = 0; j < d; ++j) s += x[j] * w1(j, 0);
      for (std::size_t j = 0; j < de; ++j) s += cond(i, j) * w1(d + j, 0);
      return s;
    };
    auto critic = [&](const double* x, std::size_t i) {
      const double p = pre(x, i);
      return w2 * (p > 0 ? p : slope * p) + b2;
    };
    double real_sum = 0, synth_sum = 0, gp_sum = 0;
    for (std::size_t i = 0; i < b; ++i) {
      real_sum += critic(real.row(i).data(), i);
      synth_sum += critic(synth.row(i).data(), i);
      double xh[3];
      for (std::size_t j = 0; j < d; ++j) xh[j] = eps(i, 0) * real(i, j) + (1 - eps(i, 0)) * synth(i, j);
      const double dact = pre(xh, i) > 0 ? 1.0 : slope;
      double n2 = 0;
      for (std::size_t j = 0; j < d; ++j) n2 += std::pow(w2 * dact * w1(j, 0), 2);
      gp_sum += std::pow(std::sqrt(n2) - 1.0, 2);
    }
    const double expect = real_sum / b - synth_sum / b - lambda * gp_sum / b;

    Graph g;
    nn::ParamBinder binder(g);
    const auto t = gan::critic_loss(nn::bind(binder, D, true), real, synth, cond, lambda, eps);
    EXPECT_NEAR(g.evaluate(t.objective)[0], expect, 1e-10);
  }
}

TEST(CriticLoss, DecomposesIntoItsThreeTerms) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto D = random_critic(4, 3, 7, 200 + trial);
    const Tensor real = random_tensor(6, 4, rng, 0, 1), synth = random_tensor(6, 4, rng, 0, 1);
    const Tensor cond = random_tensor(6, 3, rng), eps = random_tensor(6, 1, rng, 0, 1);
    Graph g;
    nn::ParamBinder b(g);
    const auto bd = nn::bind(b, D, true);
    const auto t = gan::critic_loss(bd, real, synth, cond, 10.0, eps);
    const double total = g.evaluate(t.objective)[0];
    const double real_mean = g.evaluate(diff::mean(gan::critic_forward(bd, g.constant(real), g.constant(cond))))[0];
    const double synth_mean = g.evaluate(diff::mean(gan::critic_forward(bd, g.constant(synth), g.constant(cond))))[0];
    const double gp = g.evaluate(gan::gradient_penalty(bd, real, synth, cond, eps))[0];
    EXPECT_NEAR(total, real_mean - synth_mean - 10.0 * gp, 1e-10);
  }
}

TEST(CriticLoss, RejectsEmptyAndMisalignedBatches) {
  const auto D = random_critic(3, 2, 4, 1);
  Graph g;
  nn::ParamBinder b(g);
  const auto bd = nn::bind(b, D, true);
  EXPECT_THROW(gan::critic_loss(bd, Tensor(2, 3), Tensor(3, 3), Tensor(2, 2), 1.0, Tensor(2, 1)), mlzsl::ShapeError);
  EXPECT_THROW(gan::critic_loss(bd, Tensor(2, 3), Tensor(2, 3), Tensor(3, 2), 1.0, Tensor(2, 1)), mlzsl::ShapeError);
}

TEST(CriticLoss, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto D = random_critic(4, 3, 6, 300 + trial);
    Graph g;
    nn::ParamBinder b(g);
    const auto bd = nn::bind(b, D, true);
    const auto t = gan::critic_loss(bd, random_tensor(5, 4, rng, 0, 1), random_tensor(5, 4, rng, 0, 1),
                                    random_tensor(5, 3, rng), 10.0, random_tensor(5, 1, rng, 0, 1));
    EXPECT_LT(max_error_vs_fd(g, t.objective, {bd.layer1.weight, bd.layer1.bias, bd.layer2.weight, bd.layer2.bias}),
              1e-3);
  }
}

// ---- gradient penalty -------------------------------------------------------

TEST(GradientPenalty, UnitSlopeLinearCriticHasZeroPenalty) {
  std::mt19937_64 rng(6);
  Graph g;
  nn::ParamBinder b(g);
  const Var gp = gan::gradient_penalty(nn::bind(b, linear_critic(1, 2, 1.0), true), random_tensor(5, 1, rng),
                                       random_tensor(5, 1, rng), random_tensor(5, 2, rng), rng);
  EXPECT_EQ(g.evaluate(gp)[0], 0.0);
}

TEST(GradientPenalty, SlopeCLinearCriticGivesSquaredDeviation) {
  std::mt19937_64 rng(7);
  for (double c : {2.0, 3.0, 0.5, -2.0, 0.0, 1.5}) {
    Graph g;
    nn::ParamBinder b(g);
    const Var gp = gan::gradient_penalty(nn::bind(b, linear_critic(1, 2, c), true), random_tensor(4, 1, rng),
                                         random_tensor(4, 1, rng), random_tensor(4, 2, rng), rng);
    EXPECT_EQ(g.evaluate(gp)[0], (std::abs(c) - 1.0) * (std::abs(c) - 1.0)) << c;
  }
}

TEST(GradientPenalty, NonNegativeAndDifferentiable) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto D = random_critic(3, 2, 5, 400 + trial);
    Graph g;
    nn::ParamBinder b(g);
    const auto bd = nn::bind(b, D, true);
    const Var gp = gan::gradient_penalty(bd, random_tensor(4, 3, rng), random_tensor(4, 3, rng),
                                         random_tensor(4, 2, rng), rng);
    EXPECT_GE(g.evaluate(gp)[0], 0.0);
    if (trial < 5) {
      EXPECT_LT(max_error_vs_fd(g, gp, {bd.layer1.weight, bd.layer1.bias, bd.layer2.weight}), 1e-3);
    }
  }
}

// ---- classifier regularizer -------------------------------------------------

namespace {
double regularizer_value(const Tensor& probabilities, const Tensor& targets) {
  // Identity classifier so sigmoid(logit) reproduces the requested probabilities.
  const std::size_t S = probabilities.cols();
  Tensor logits = probabilities;
  for (double& p : logits.data()) p = std::log(p / (1.0 - p));
  Graph g;
  nn::ParamBinder b(g);
  nn::Linear f{Tensor::identity(S), Tensor(1, S)};
  return g.evaluate(gan::classifier_regularizer(nn::bind(b, f, false), g.constant(logits), targets))[0];
}
}  // namespace

TEST(ClassifierRegularizer, UniformHalfGivesLn2) {
  const Tensor y = Tensor::matrix({{1, 0, 1}, {0, 0, 1}});
  EXPECT_NEAR(regularizer_value(Tensor(2, 3, 0.5), y), std::log(2.0), 1e-15);
}

TEST(ClassifierRegularizer, PerfectPredictionIsNearZero) {
  Graph g;
  nn::ParamBinder b(g);
  nn::Linear f{Tensor::identity(3), Tensor(1, 3)};
  const Tensor y = Tensor::matrix({{1, 0, 1}, {0, 1, 0}});
  Tensor logits = y;
  for (double& v : logits.data()) v = v > 0 ? 800.0 : -800.0;  // sigmoid saturates to exactly 0 / 1
  const double l = g.evaluate(gan::classifier_regularizer(nn::bind(b, f, false), g.constant(logits), y))[0];
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-11);
}

TEST(ClassifierRegularizer, MatchesHandExpandedFormula) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = random_tensor(2, 3, rng, 0.01, 0.99);
    Tensor y(2, 3);
    for (double& v : y.data()) v = rng() % 2;
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i) s += -(y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]));
    EXPECT_NEAR(regularizer_value(p, y), s / 6.0, 1e-12);
  }
}

TEST(ClassifierRegularizer, RejectsOutOfRangeLabels) {
  const std::vector<std::vector<data::ClassId>> sets{{0, 4}};
  EXPECT_THROW(mlzsl::loss::multi_hot(sets, 3), mlzsl::ConfigError);
}

// ---- VAE terms --------------------------------------------------------------

namespace {
double kl_value(const Tensor& mu, const Tensor& logvar) {
  Graph g;
  return g.evaluate(mlzsl::loss::kl_divergence(g.constant(mu), g.constant(logvar)))[0];
}
}  // namespace

TEST(KlDivergence, ClosedFormCases) {
  EXPECT_EQ(kl_value(Tensor(1, 3), Tensor(1, 3)), 0.0);
  EXPECT_EQ(kl_value(Tensor::matrix({{1.0, 0.0}}), Tensor(1, 2)), 0.5);
}

TEST(KlDivergence, MatchesMonteCarloEstimate) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor mu = random_tensor(1, 4, rng), logvar = random_tensor(1, 4, rng);
    const double closed = kl_value(mu, logvar);
    std::normal_distribution<double> n01(0.0, 1.0);
    const int samples = 1000000;
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
      double log_ratio = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double sigma = std::exp(0.5 * logvar[j]);
        const double eps = n01(rng);
        const double z = mu[j] + sigma * eps;
        // log q(z) - log p(z); the 2*pi terms cancel.
        log_ratio += -0.5 * eps * eps - 0.5 * logvar[j] + 0.5 * z * z;
      }
      acc += log_ratio;
    }
    const double mc = acc / samples;
    EXPECT_LT(std::abs(mc - closed) / closed, 0.01) << "closed " << closed << " mc " << mc;
  }
}

TEST(VaeLosses, RejectsFeaturesOutsideUnitInterval) {
  std::mt19937_64 rng(11);
  const auto gen = fusion::init_synthesizer(fusion::Mode::ALF, {3, 2, 4, 6, 6, 2}, 1);
  const auto enc = nn::init_mlp(6, 6, 6, nn::Activation::LeakyRelu, nn::Activation::None, 2);
  const std::vector<fusion::EmbeddingSet> sets{fusion::canonical_set(std::vector<std::vector<double>>{{0.6, 0.8}})};
  Graph g;
  nn::ParamBinder b(g);
  Tensor x(1, 4, 0.5);
  x[2] = 1.5;
  EXPECT_THROW(gan::vae_losses(nn::bind(b, enc, true), fusion::bind(b, gen, true), x,
                               fusion::make_condition_batch(sets), Tensor(1, 3)),
               mlzsl::ConfigError);
}

TEST(VaeLosses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (auto mode : {fusion::Mode::ALF, fusion::Mode::FLF, fusion::Mode::CLF}) {
    auto gen = fusion::init_synthesizer(mode, {3, 2, 4, 6, 6, 2}, 3);
    if (gen.clf) mlzsl::testing::randomize_clf(*gen.clf, rng);
    const auto enc = nn::init_mlp(6, 5, 6, nn::Activation::LeakyRelu, nn::Activation::None, 4);
    std::vector<fusion::EmbeddingSet> sets;
    for (int i = 0; i < 3; ++i) sets.push_back(fusion::canonical_set(std::vector<std::vector<double>>{
        {random_tensor(1, 2, rng)[0], 0.5}, {0.1, random_tensor(1, 2, rng)[1]}}));
    Graph g;
    nn::ParamBinder b(g);
    const auto be = nn::bind(b, enc, true);
    const auto bg = fusion::bind(b, gen, true);
    const auto v = gan::vae_losses(be, bg, random_tensor(3, 4, rng, 0.05, 0.95), fusion::make_condition_batch(sets),
                                   random_tensor(3, 3, rng));
    Var total = v.kl + v.reconstruction;
    std::vector<Var> leaves{be.layer1.weight, be.layer2.weight, be.layer2.bias};
    if (bg.alf) leaves.push_back(bg.alf->layer1.weight);
    if (bg.flf) leaves.push_back(bg.flf->layer2.weight);
    if (bg.clf) leaves.push_back(bg.clf->output);
    EXPECT_LT(max_error_vs_fd(g, total, leaves), 1e-3) << fusion::mode_name(mode);
  }
}

// ---- generator objective ----------------------------------------------------

namespace {
gan::GeneratorBatch random_generator_batch(const data::Corpus& c, std::size_t b, std::size_t dz, std::mt19937_64& rng) {
  std::vector<std::vector<data::ClassId>> labels;
  data::Split chosen;
  for (std::size_t i = 0; i < b; ++i) chosen.push_back(c.train_seen[(i * 7) % c.train_seen.size()]);
  for (const auto& inst : chosen) labels.push_back(inst.labels);
  return {fusion::make_condition_batch(c.embeddings, labels), data::feature_matrix(chosen),
          mlzsl::loss::multi_hot(labels, c.classes.seen_count), random_tensor(b, dz, rng), random_tensor(b, dz, rng)};
}
}  // namespace

TEST(GeneratorObjective, TotalGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const auto corpus = tiny_corpus(3);
  for (auto objective : {gan::Objective::CLSWGAN, gan::Objective::VAEGAN}) {
    for (auto mode : {fusion::Mode::ALF, fusion::Mode::FLF, fusion::Mode::CLF}) {
      auto cfg = tiny_train_config(objective);
      auto models = tiny_models(mode, cfg, corpus);
      models.seen_classifier.weight = random_tensor(8, 6, rng);
      if (models.generator.clf) mlzsl::testing::randomize_clf(*models.generator.clf, rng);
      const auto batch = random_generator_batch(corpus, 4, models.noise_dim(), rng);
      Graph g;
      nn::ParamBinder b(g);
      const auto bm = gan::bind(b, models, true, false);
      const auto terms = gan::generator_objective(bm, batch, cfg);
      std::vector<Var> leaves;
      if (bm.generator.alf) leaves.push_back(bm.generator.alf->layer1.weight);
      if (bm.generator.flf) leaves.push_back(bm.generator.flf->layer2.bias);
      if (bm.generator.clf) leaves.insert(leaves.end(), {bm.generator.clf->query[0], bm.generator.clf->value[1]});
      if (bm.encoder) leaves.push_back(bm.encoder->layer2.weight);
      EXPECT_LT(max_error_vs_fd(g, terms.total, leaves), 1e-3)
          << gan::objective_name(objective) << "/" << fusion::mode_name(mode);
    }
  }
}

TEST(GeneratorObjective, ZeroAlphaIgnoresSeenClassifier) {
  std::mt19937_64 rng(14);
  const auto corpus = tiny_corpus(4);
  auto cfg = tiny_train_config(gan::Objective::CLSWGAN);
  cfg.alpha = 0.0;
  auto models = tiny_models(fusion::Mode::CLF, cfg, corpus);
  const auto batch = random_generator_batch(corpus, 5, models.noise_dim(), rng);
  auto gradients_with = [&](const Tensor& w) {
    auto m = models;
    m.seen_classifier.weight = w;
    Graph g;
    nn::ParamBinder b(g);
    const auto terms = gan::generator_objective(gan::bind(b, m, true, false), batch, cfg);
    g.evaluate(terms.total);
    return b.gradients(gan::generator_params(m), g.backward(terms.total));
  };
  const auto a = gradients_with(random_tensor(8, 6, rng));
  const auto c = gradients_with(random_tensor(8, 6, rng, -5, 5));
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], c[i]) << i;
}

// ---- training ---------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialModels) {
  const auto corpus = tiny_corpus(5);
  auto cfg = tiny_train_config(gan::Objective::CLSWGAN);
  cfg.epochs = 0;
  const auto models = tiny_models(fusion::Mode::CLF, cfg, corpus);
  auto result = gan::train(models, corpus, cfg, 1);
  EXPECT_TRUE(result.trace.empty());
  auto before = models;
  auto p0 = gan::all_params(before), p1 = gan::all_params(result.models);
  ASSERT_EQ(p0.size(), p1.size());
  for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_EQ(*p0[i].tensor, *p1[i].tensor) << p0[i].name;
}

TEST(Train, SameSeedIsBitIdenticalAndUpdatesParameters) {
  const auto corpus = tiny_corpus(6);
  for (auto objective : {gan::Objective::CLSWGAN, gan::Objective::VAEGAN}) {
    auto cfg = tiny_train_config(objective);
    auto models = tiny_models(fusion::Mode::CLF, cfg, corpus);
    models.seen_classifier = gan::pretrain_seen_classifier(corpus.train_seen, 6, cfg, 3);
    auto a = gan::train(models, corpus, cfg, 9);
    auto b = gan::train(models, corpus, cfg, 9);
    ASSERT_EQ(a.trace.size(), 2u);
    auto pa = gan::all_params(a.models), pb = gan::all_params(b.models), p0 = gan::all_params(models);
    bool changed = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
      changed |= *pa[i].tensor != *p0[i].tensor;
    }
    EXPECT_TRUE(changed);
    for (std::size_t e = 0; e < 2; ++e) {
      EXPECT_EQ(a.trace[e].critic_loss, b.trace[e].critic_loss);
      EXPECT_EQ(a.trace[e].generator_loss, b.trace[e].generator_loss);
    }
    // seen classifier stays frozen
    EXPECT_EQ(a.models.seen_classifier.weight, models.seen_classifier.weight);
    if (objective == gan::Objective::VAEGAN) {
      EXPECT_GT(a.trace[0].reconstruction, 0.0);
    }
  }
}

TEST(Train, TraceCsvHasOneLinePerEpoch) {
  const auto corpus = tiny_corpus(7);
  auto cfg = tiny_train_config(gan::Objective::VAEGAN);
  cfg.epochs = 3;
  const auto result = gan::train(tiny_models(fusion::Mode::FLF, cfg, corpus), corpus, cfg, 2);
  const auto path = std::filesystem::temp_directory_path() / "mlzsl_trace_test.csv";
  gan::write_trace_csv(path, result.trace);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 4u);
}

TEST(Train, RejectsObjectiveModelMismatch) {
  const auto corpus = tiny_corpus(8);
  auto cfg = tiny_train_config(gan::Objective::CLSWGAN);
  const auto models = tiny_models(fusion::Mode::ALF, cfg, corpus);
  cfg.objective = gan::Objective::VAEGAN;
  EXPECT_THROW(gan::train(models, corpus, cfg, 1), mlzsl::ConfigError);
}

// ---- synthesis --------------------------------------------------------------

TEST(SynthesizeUnseen, CountsAndPartition) {
  const data::ClassSpace classes{4, 6, {}};
  std::mt19937_64 rng(15);
  const data::EmbeddingTable table{random_tensor(10, 3, rng)};
  const auto gen = fusion::init_synthesizer(fusion::Mode::CLF, {3, 3, 8, 6, 6, 2}, 1);
  const auto singles = gan::synthesize_unseen(gen, classes, table, {10, 1, 7}, 3);
  ASSERT_EQ(singles.size(), 60u);
  std::vector<int> per_class(10, 0);
  for (const auto& inst : singles) {
    ASSERT_EQ(inst.labels.size(), 1u);
    ++per_class[inst.labels[0]];
  }
  for (data::ClassId k = 4; k < 10; ++k) EXPECT_EQ(per_class[k], 10);

  const auto multi = gan::synthesize_unseen(gen, classes, table, {5, 3, 256}, 4);
  for (const auto& inst : multi) {
    EXPECT_GE(inst.labels.size(), 1u);
    EXPECT_LE(inst.labels.size(), 3u);
    EXPECT_TRUE(std::is_sorted(inst.labels.begin(), inst.labels.end()));
    for (auto k : inst.labels) EXPECT_TRUE(classes.is_unseen(k));
    for (double v : inst.feature) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_THROW(gan::synthesize_unseen(gen, classes, table, {5, 7, 256}, 4), mlzsl::ConfigError);
}

TEST(SynthesizeUnseen, DeterministicAndChunkIndependent) {
  const data::ClassSpace classes{2, 4, {}};
  std::mt19937_64 rng(16);
  const data::EmbeddingTable table{random_tensor(6, 3, rng)};
  const auto gen = fusion::init_synthesizer(fusion::Mode::FLF, {3, 3, 5, 6, 6, 1}, 1);
  const auto a = gan::synthesize_unseen(gen, classes, table, {7, 2, 256}, 11);
  const auto b = gan::synthesize_unseen(gen, classes, table, {7, 2, 256}, 11);
  const auto c = gan::synthesize_unseen(gen, classes, table, {7, 2, 3}, 11);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].feature, b[i].feature);
    EXPECT_EQ(a[i].labels, c[i].labels);
    for (std::size_t j = 0; j < a[i].feature.size(); ++j) EXPECT_NEAR(a[i].feature[j], c[i].feature[j], 1e-14);
  }
}

TEST(SynthesizeUnseen, FixedNoiseAndLabelsReplayExactly) {
  std::mt19937_64 rng(17);
  const auto gen = fusion::init_synthesizer(fusion::Mode::FLF, {3, 3, 5, 6, 6, 1}, 2);
  const data::EmbeddingTable table{random_tensor(6, 3, rng)};
  const std::vector<std::vector<data::ClassId>> labels{{2, 5}};
  const Tensor z = random_tensor(1, 3, rng);
  const Tensor first = gan::generate_features(gen, z, fusion::make_condition_batch(table, labels));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(gan::generate_features(gen, z, fusion::make_condition_batch(table, labels)), first);
}
