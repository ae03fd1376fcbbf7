#pragma once

// End-to-end experiment runner: configuration, seeded pipeline, checkpoints
// and results records.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlzsl/binary_io.hpp"
#include "mlzsl/data.hpp"
#include "mlzsl/fusion.hpp"
#include "mlzsl/gan.hpp"
#include "mlzsl/metrics.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/zslcls.hpp"

namespace mlzsl::experiment {

using nlohmann::json;

// ---- configuration ----------------------------------------------------------

/// Every knob of one run. Exactly one of `synthetic` / `data_dir` is set.
struct ExperimentConfig {
  std::optional<data::SyntheticConfig> synthetic;
  std::optional<std::filesystem::path> data_dir;
  fusion::Mode mode = fusion::Mode::CLF;
  gan::TrainConfig train;
  gan::SynthesisConfig synthesis;
  zslcls::ClassifierConfig classifier;
  std::vector<std::size_t> ks{3, 5};
  std::filesystem::path output_dir;  // empty: nothing is written
  std::uint64_t seed = 1;
};

/// Sub-seeds fanned out from the master seed, one per named stage.
struct SeedPlan {
  std::uint64_t data, init, gan, synth, cls;

  static SeedPlan from(std::uint64_t master) {
    return {derive_seed(master, "data"), derive_seed(master, "init"), derive_seed(master, "gan"),
            derive_seed(master, "synth"), derive_seed(master, "cls")};
  }
};

inline json synthetic_to_json(const data::SyntheticConfig& s) {
  return {{"seen_count", s.seen_count},     {"unseen_count", s.unseen_count},
          {"embedding_dim", s.embedding_dim}, {"feature_dim", s.feature_dim},
          {"train_count", s.train_count},   {"test_seen_count", s.test_seen_count},
          {"test_unseen_count", s.test_unseen_count}, {"max_labels", s.max_labels},
          {"noise", s.noise},               {"cluster_count", s.cluster_count},
          {"cluster_spread", s.cluster_spread}, {"map_hidden", s.map_hidden},
          {"map_gain", s.map_gain}};
}

/// Canonical JSON: keys sorted, every field present.
inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json j = {{"mode", fusion::mode_name(c.mode)},
            {"objective", gan::objective_name(t.objective)},
            {"lambda", t.lambda},
            {"alpha", t.alpha},
            {"learning_rate", t.learning_rate},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"critic_steps", t.critic_steps},
            {"noise_dim", t.noise_dim},
            {"hidden", t.hidden},
            {"clf_hidden", t.clf_hidden},
            {"heads", t.heads},
            {"kl_weight", t.kl_weight},
            {"reconstruction_weight", t.reconstruction_weight},
            {"cls_epochs", t.cls_epochs},
            {"cls_learning_rate", t.cls_learning_rate},
            {"cls_batch_size", t.cls_batch_size},
            {"synth_per_class", c.synthesis.per_class},
            {"synth_max_labels", c.synthesis.max_labels},
            {"final_epochs", c.classifier.epochs},
            {"final_batch_size", c.classifier.batch_size},
            {"final_learning_rate", c.classifier.learning_rate},
            {"ks", c.ks},
            {"output_dir", c.output_dir.string()},
            {"seed", c.seed}};
  if (c.synthetic) j["synthetic"] = synthetic_to_json(*c.synthetic);
  if (c.data_dir) j["data_dir"] = c.data_dir->string();
  return j;
}

namespace detail {

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys{
      "mode",           "objective",      "lambda",           "alpha",           "learning_rate",
      "beta1",          "beta2",          "batch_size",       "epochs",          "critic_steps",
      "noise_dim",      "hidden",         "clf_hidden",       "heads",           "kl_weight",
      "reconstruction_weight", "cls_epochs", "cls_learning_rate", "cls_batch_size", "synth_per_class",
      "synth_max_labels", "final_epochs", "final_batch_size", "final_learning_rate", "ks",
      "output_dir",     "seed",           "synthetic",        "data_dir"};
  return keys;
}

inline data::SyntheticConfig synthetic_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config key 'synthetic' must be an object");
  static const std::vector<std::string> keys{"seen_count",    "unseen_count",     "embedding_dim", "feature_dim",
                                             "train_count",   "test_seen_count",  "test_unseen_count",
                                             "max_labels",    "noise",            "cluster_count", "cluster_spread",
                                             "map_hidden",    "map_gain"};
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown synthetic key '" + k + "'");
  data::SyntheticConfig s;
  take(j, "seen_count", s.seen_count);
  take(j, "unseen_count", s.unseen_count);
  take(j, "embedding_dim", s.embedding_dim);
  take(j, "feature_dim", s.feature_dim);
  take(j, "train_count", s.train_count);
  take(j, "test_seen_count", s.test_seen_count);
  take(j, "test_unseen_count", s.test_unseen_count);
  take(j, "max_labels", s.max_labels);
  take(j, "noise", s.noise);
  take(j, "cluster_count", s.cluster_count);
  take(j, "cluster_spread", s.cluster_spread);
  take(j, "map_hidden", s.map_hidden);
  take(j, "map_gain", s.map_gain);
  return s;
}

}  // namespace detail

/// Parse a config document. Unknown keys are rejected; absent keys keep defaults.
/// The data source must be given exactly once.
inline ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    const auto& keys = detail::known_keys();
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  auto& t = c.train;
  std::string mode = fusion::mode_name(c.mode), objective = gan::objective_name(t.objective);
  detail::take(j, "mode", mode);
  detail::take(j, "objective", objective);
  c.mode = fusion::parse_mode(mode);
  t.objective = gan::parse_objective(objective);
  detail::take(j, "lambda", t.lambda);
  detail::take(j, "alpha", t.alpha);
  detail::take(j, "learning_rate", t.learning_rate);
  detail::take(j, "beta1", t.beta1);
  detail::take(j, "beta2", t.beta2);
  detail::take(j, "batch_size", t.batch_size);
  detail::take(j, "epochs", t.epochs);
  detail::take(j, "critic_steps", t.critic_steps);
  detail::take(j, "noise_dim", t.noise_dim);
  detail::take(j, "hidden", t.hidden);
  detail::take(j, "clf_hidden", t.clf_hidden);
  detail::take(j, "heads", t.heads);
  detail::take(j, "kl_weight", t.kl_weight);
  detail::take(j, "reconstruction_weight", t.reconstruction_weight);
  detail::take(j, "cls_epochs", t.cls_epochs);
  detail::take(j, "cls_learning_rate", t.cls_learning_rate);
  detail::take(j, "cls_batch_size", t.cls_batch_size);
  detail::take(j, "synth_per_class", c.synthesis.per_class);
  detail::take(j, "synth_max_labels", c.synthesis.max_labels);
  detail::take(j, "final_epochs", c.classifier.epochs);
  detail::take(j, "final_batch_size", c.classifier.batch_size);
  detail::take(j, "final_learning_rate", c.classifier.learning_rate);
  detail::take(j, "ks", c.ks);
  std::string out_dir;
  detail::take(j, "output_dir", out_dir);
  c.output_dir = out_dir;
  detail::take(j, "seed", c.seed);
  if (j.contains("synthetic")) c.synthetic = detail::synthetic_from_json(j.at("synthetic"));
  if (j.contains("data_dir")) {
    std::string dir;
    detail::take(j, "data_dir", dir);
    c.data_dir = dir;
  }
  return c;
}

/// Hash of the canonical JSON without `output_dir`: where results land does
/// not change what was run.
inline std::uint64_t config_digest(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  return fnv1a(j.dump());
}

inline std::string hex_digest(std::uint64_t d) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, d >>= 4) s[static_cast<std::size_t>(i)] = digits[d & 0xF];
  return s;
}

/// Checks that do not need the data: source count, trainer and classifier settings.
inline void validate(const ExperimentConfig& c) {
  if (c.synthetic.has_value() == c.data_dir.has_value()) {
    throw ConfigError("config needs exactly one data source ('synthetic' or 'data_dir')");
  }
  gan::validate(c.train);
  if (c.synthesis.per_class == 0 || c.synthesis.max_labels == 0) {
    throw ConfigError("synth_per_class and synth_max_labels must be positive");
  }
  if (c.classifier.batch_size == 0 || !(c.classifier.learning_rate > 0.0)) {
    throw ConfigError("final classifier batch size and learning rate must be positive");
  }
  if (c.ks.empty()) throw ConfigError("ks must list at least one K");
  for (auto k : c.ks)
    if (k == 0) throw ConfigError("ks entries must be positive");
}

/// Ks must fit the smallest evaluated universe (the U unseen classes).
inline void validate_against(const ExperimentConfig& c, const data::ClassSpace& classes) {
  for (auto k : c.ks) {
    if (k > classes.unseen_count) {
      throw ConfigError("K = " + std::to_string(k) + " exceeds the " + std::to_string(classes.unseen_count) +
                        " unseen classes");
    }
  }
}

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kDigestTensor = "meta.config_digest";

/// Ordered named tensors. Order is preserved through save and load.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  std::optional<std::uint64_t> digest() const {
    const Tensor* t = find(kDigestTensor);
    if (!t || t->size() != 2) return std::nullopt;
    return (static_cast<std::uint64_t>((*t)[0]) << 32) | static_cast<std::uint64_t>((*t)[1]);
  }
};

inline Tensor digest_tensor(std::uint64_t d) {
  return Tensor(Shape{2}, std::vector<double>{static_cast<double>(d >> 32), static_cast<double>(d & 0xFFFFFFFFu)});
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  io::write_magic(out, "MLZC");
  io::write_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : ck.tensors) {
    io::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::write_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) io::write_f64(out, v);
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  io::Reader r(in, path.string());
  r.expect_magic("MLZC");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  while (!r.at_end()) {
    const std::string what = "tensor " + std::to_string(ck.tensors.size());
    const auto len = r.u32(what + " name length");
    if (len == 0 || len > 4096) r.fail(what + ": implausible name length " + std::to_string(len));
    std::string name = r.bytes(len, what + " name");
    const auto rank = r.u32(name + " rank");
    if (rank > 8) r.fail(name + ": implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32(name + " dims"));
    const std::size_t n = shape_size(shape);
    if (n == 0 || n > (std::size_t{1} << 32)) r.fail(name + ": implausible shape " + shape_string(shape));
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64(name + " data");
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ck;
}

/// Copy tensors into `params` by name. The checkpoint must hold exactly these
/// parameters (plus "meta." entries) with identical shapes.
inline void restore(const nn::ParamList& params, const Checkpoint& ck) {
  for (const auto& [name, t] : ck.tensors) {
    if (name.starts_with("meta.")) continue;
    const bool expected = std::any_of(params.begin(), params.end(), [&](const auto& slot) { return slot.name == name; });
    if (!expected) throw FormatError("checkpoint holds '" + name + "', which the configured models do not have");
  }
  for (const auto& slot : params) {
    const Tensor* t = ck.find(slot.name);
    if (!t) throw FormatError("checkpoint lacks parameter '" + slot.name + "'");
    if (t->shape() != slot.tensor->shape()) {
      throw FormatError("checkpoint shape mismatch for '" + slot.name + "': file " + shape_string(t->shape()) +
                        ", config " + shape_string(slot.tensor->shape()));
    }
    *slot.tensor = *t;
  }
}

// ---- pipeline ---------------------------------------------------------------

/// Everything a finished run holds on to.
struct TrainedModels {
  gan::Models gan;
  zslcls::MultiLabelClassifier zsl;
  zslcls::MultiLabelClassifier gzsl;
};

inline nn::ParamList checkpoint_params(TrainedModels& m) {
  nn::ParamList p = gan::all_params(m.gan);
  nn::append_params(p, m.zsl.layer, "zsl");
  nn::append_params(p, m.gzsl.layer, "gzsl");
  return p;
}

inline Checkpoint make_checkpoint(TrainedModels& m, std::uint64_t digest) {
  Checkpoint ck;
  for (const auto& slot : checkpoint_params(m)) ck.tensors.emplace_back(slot.name, *slot.tensor);
  ck.tensors.emplace_back(kDigestTensor, digest_tensor(digest));
  return ck;
}

/// Shape skeleton of the models `cfg` would train on a corpus of this class space and width.
inline TrainedModels skeleton(const ExperimentConfig& cfg, const data::ClassSpace& classes, std::size_t embedding_dim,
                              std::size_t feature_dim) {
  return {gan::init_models(cfg.mode, cfg.train, {classes.seen_count, embedding_dim, feature_dim}, 0),
          zslcls::make_classifier(feature_dim, classes.unseen_ids()),
          zslcls::make_classifier(feature_dim, classes.all_ids())};
}

struct TaskScores {
  metrics::EvalTable table;
  double map = 0.0;
  std::map<std::size_t, metrics::Prf> per_k;
};

struct Results {
  std::uint64_t config_digest = 0;
  fusion::Mode mode = fusion::Mode::CLF;
  gan::Objective objective = gan::Objective::CLSWGAN;
  TaskScores zsl, gzsl;
  double runtime_seconds = 0.0;
  std::vector<gan::EpochStats> trace;
};

namespace detail {

/// Run one stage, re-raising module errors with the stage name prepended.
template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  const std::string prefix = std::string("[") + name + "] ";
  try {
    return f();
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  }
}

inline TaskScores score(const zslcls::MultiLabelClassifier& clf, const data::Split& split,
                        const std::vector<std::size_t>& ks) {
  TaskScores s{metrics::make_table(zslcls::predict_scores(clf, data::feature_matrix(split)), split, clf.classes), 0.0,
               {}};
  s.map = metrics::mean_ap(s.table);
  for (auto k : ks) s.per_k[k] = metrics::topk_prf(s.table, k);
  return s;
}

}  // namespace detail

/// Synthetic corpus from config (seeded by the data stream) or a corpus directory,
/// min-max normalized with train statistics.
inline data::Corpus load_data(const ExperimentConfig& cfg) {
  return detail::stage("data", [&] {
    if (cfg.synthetic.has_value() == cfg.data_dir.has_value()) {
      throw ConfigError("config needs exactly one data source ('synthetic' or 'data_dir')");
    }
    if (cfg.data_dir) return data::load_corpus(*cfg.data_dir);
    auto s = *cfg.synthetic;
    s.seed = SeedPlan::from(cfg.seed).data;
    auto corpus = data::generate_synthetic(s).corpus;
    data::normalize_corpus(corpus);
    data::validate(corpus);
    return corpus;
  });
}

inline json results_json(const Results& r) {
  auto task = [](const TaskScores& t) {
    json per_k = json::object();
    for (const auto& [k, prf] : t.per_k) per_k[std::to_string(k)] = {{"P", prf.precision}, {"R", prf.recall}, {"F1", prf.f1}};
    return json{{"mAP", t.map}, {"per-K", per_k}};
  };
  return {{"config_digest", hex_digest(r.config_digest)},
          {"mode", fusion::mode_name(r.mode)},
          {"objective", gan::objective_name(r.objective)},
          {"zsl", task(r.zsl)},
          {"gzsl", task(r.gzsl)},
          {"runtime_seconds", r.runtime_seconds}};
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
}

inline constexpr const char* kResultsFile = "results.json";
inline constexpr const char* kCheckpointFile = "checkpoint.mlzc";
inline constexpr const char* kTraceFile = "trace.csv";
inline constexpr const char* kConfigFile = "config.json";

struct PipelineOutput {
  Results results;
  TrainedModels models;
  data::Split synthesized;
};

/// data -> f_cls -> GAN -> synthesize unseen -> f_z, f_gz -> evaluate. ZSL is
/// scored on test_unseen over the U unseen classes, GZSL on test_seen plus
/// test_unseen over all C classes. Writes results, checkpoint and loss trace
/// when an output directory is set.
inline PipelineOutput run_pipeline(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::stage("config", [&] {
    validate(cfg);
    validate_against(cfg, corpus.classes);
    if (cfg.synthesis.max_labels > corpus.classes.unseen_count) {
      throw ConfigError("synth_max_labels exceeds the unseen class count");
    }
  });
  const auto seeds = SeedPlan::from(cfg.seed);
  const std::size_t de = corpus.embeddings.dim(), d = corpus.feature_dim();

  gan::Models models = detail::stage("init", [&] {
    return gan::init_models(cfg.mode, cfg.train, {corpus.classes.seen_count, de, d}, seeds.init);
  });
  models.seen_classifier = detail::stage("seen-classifier", [&] {
    return gan::pretrain_seen_classifier(corpus.train_seen, corpus.classes.seen_count, cfg.train,
                                         derive_seed(seeds.cls, "f_cls"));
  });
  auto trained = detail::stage("gan", [&] { return gan::train(std::move(models), corpus, cfg.train, seeds.gan); });
  auto synth = detail::stage("synthesize", [&] {
    return gan::synthesize_unseen(trained.models.generator, corpus.classes, corpus.embeddings, cfg.synthesis,
                                  seeds.synth);
  });

  auto cls_cfg = cfg.classifier;
  cls_cfg.beta1 = cfg.train.beta1;
  cls_cfg.beta2 = cfg.train.beta2;
  auto zsl_cfg = cls_cfg, gzsl_cfg = cls_cfg;
  zsl_cfg.seed = derive_seed(seeds.cls, "f_z");
  gzsl_cfg.seed = derive_seed(seeds.cls, "f_gz");
  auto f_z = detail::stage("zsl-classifier", [&] { return zslcls::train_zsl(synth, corpus.classes, zsl_cfg); });
  auto f_gz = detail::stage("gzsl-classifier",
                            [&] { return zslcls::train_gzsl(synth, corpus.train_seen, corpus.classes, gzsl_cfg); });

  PipelineOutput out{{}, {std::move(trained.models), std::move(f_z), std::move(f_gz)}, std::move(synth)};
  auto& r = out.results;
  r.config_digest = config_digest(cfg);
  r.mode = cfg.mode;
  r.objective = cfg.train.objective;
  r.trace = std::move(trained.trace);
  detail::stage("evaluate", [&] {
    r.zsl = detail::score(out.models.zsl, corpus.test_unseen, cfg.ks);
    data::Split full = corpus.test_seen;
    full.insert(full.end(), corpus.test_unseen.begin(), corpus.test_unseen.end());
    r.gzsl = detail::score(out.models.gzsl, full, cfg.ks);
  });
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.output_dir.empty()) {
    detail::stage("write", [&] {
      std::filesystem::create_directories(cfg.output_dir);
      write_json(cfg.output_dir / kConfigFile, to_json(cfg));
      write_json(cfg.output_dir / kResultsFile, results_json(r));
      save_checkpoint(cfg.output_dir / kCheckpointFile, make_checkpoint(out.models, r.config_digest));
      gan::write_trace_csv(cfg.output_dir / kTraceFile, r.trace);
    });
  }
  return out;
}

inline PipelineOutput run_pipeline(const ExperimentConfig& cfg) { return run_pipeline(cfg, load_data(cfg)); }

/// Load checkpointed models for `cfg`, refusing any name or shape mismatch.
/// The stored digest must be present but is not compared: synthesis-only
/// settings such as per-class counts may legitimately differ.
inline TrainedModels load_models(const std::filesystem::path& path, const ExperimentConfig& cfg,
                                 const data::Corpus& corpus) {
  const auto ck = load_checkpoint(path);
  const auto digest = ck.digest();
  if (!digest) throw FormatError(path.string() + ": missing " + std::string(kDigestTensor));
  auto m = skeleton(cfg, corpus.classes, corpus.embeddings.dim(), corpus.feature_dim());
  restore(checkpoint_params(m), ck);
  return m;
}

// ---- ablation ---------------------------------------------------------------

/// The six {ALF, FLF, CLF} x {CLSWGAN, VAEGAN} cells, each in its own
/// sub-directory of the base output directory when one is set.
inline std::vector<ExperimentConfig> ablation_grid(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> cells;
  for (auto objective : {gan::Objective::CLSWGAN, gan::Objective::VAEGAN}) {
    for (auto mode : {fusion::Mode::ALF, fusion::Mode::FLF, fusion::Mode::CLF}) {
      auto c = base;
      c.mode = mode;
      c.train.objective = objective;
      if (!base.output_dir.empty()) c.output_dir = base.output_dir / (fusion::mode_name(mode) + "_" + gan::objective_name(objective));
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

inline std::vector<Results> run_ablation(const ExperimentConfig& base) {
  const auto corpus = load_data(base);
  std::vector<Results> out;
  for (const auto& cell : ablation_grid(base)) out.push_back(run_pipeline(cell, corpus).results);
  return out;
}

}  // namespace mlzsl::experiment
