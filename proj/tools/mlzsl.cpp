// Command-line front end: gen-data, train, synth, eval, ablate, inspect-checkpoint.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlzsl/experiment.hpp"

namespace {

using nlohmann::json;
namespace ex = mlzsl::experiment;
namespace fs = std::filesystem;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mlzsl::FormatError(path + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw mlzsl::FormatError(path + ": " + e.what());
  }
}

/// Flags that override keys of the config file. Only flags given on the
/// command line are applied.
struct ConfigFlags {
  std::string config_file;
  std::string data_dir;
  std::string out;
  std::string mode, objective;
  double lambda = 0, alpha = 0, learning_rate = 0;
  std::size_t heads = 0, epochs = 0, batch_size = 0, critic_steps = 0, synth_per_class = 0, final_epochs = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ks;
  std::vector<CLI::Option*> given;

  void attach(CLI::App* app, bool with_mode) {
    app->add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    auto add = [&](CLI::Option* o) { given.push_back(o); };
    add(app->add_option("--data", data_dir, "Corpus directory (replaces the synthetic source)"));
    add(app->add_option("--out", out, "Output directory"));
    if (with_mode) {
      add(app->add_option("--mode", mode, "Fusion: ALF, FLF or CLF"));
      add(app->add_option("--objective", objective, "CLSWGAN or VAEGAN"));
    }
    add(app->add_option("--lambda", lambda, "Gradient-penalty weight"));
    add(app->add_option("--alpha", alpha, "Seen-classifier regularizer weight"));
    add(app->add_option("--lr", learning_rate, "GAN learning rate"));
    add(app->add_option("--heads", heads, "CLF attention heads"));
    add(app->add_option("--epochs", epochs, "GAN epochs"));
    add(app->add_option("--batch-size", batch_size, "GAN batch size"));
    add(app->add_option("--critic-steps", critic_steps, "Critic updates per generator update"));
    add(app->add_option("--synth-per-class", synth_per_class, "Synthesized instances per unseen class"));
    add(app->add_option("--final-epochs", final_epochs, "Epochs of the final classifiers"));
    add(app->add_option("--seed", seed, "Master seed"));
    add(app->add_option("--k", ks, "Top-K cut-offs (repeatable)"));
  }

  bool has(const std::string& flag) const {
    for (auto* o : given)
      if (o->check_lname(flag.substr(2)) && o->count() > 0) return true;
    return false;
  }

  ex::ExperimentConfig build() const {
    json j = config_file.empty() ? json::object() : read_json_file(config_file);
    if (!j.is_object()) throw mlzsl::ConfigError(config_file + ": config must be a JSON object");
    if (has("--data")) {
      j.erase("synthetic");
      j["data_dir"] = data_dir;
    }
    if (!j.contains("data_dir") && !j.contains("synthetic")) j["synthetic"] = json::object();
    if (has("--out")) j["output_dir"] = out;
    if (has("--mode")) j["mode"] = mode;
    if (has("--objective")) j["objective"] = objective;
    if (has("--lambda")) j["lambda"] = lambda;
    if (has("--alpha")) j["alpha"] = alpha;
    if (has("--lr")) j["learning_rate"] = learning_rate;
    if (has("--heads")) j["heads"] = heads;
    if (has("--epochs")) j["epochs"] = epochs;
    if (has("--batch-size")) j["batch_size"] = batch_size;
    if (has("--critic-steps")) j["critic_steps"] = critic_steps;
    if (has("--synth-per-class")) j["synth_per_class"] = synth_per_class;
    if (has("--final-epochs")) j["final_epochs"] = final_epochs;
    if (has("--seed")) j["seed"] = seed;
    if (has("--k")) j["ks"] = ks;
    auto cfg = ex::from_json(j);
    if (cfg.output_dir.empty()) cfg.output_dir = "mlzsl_out";
    ex::validate(cfg);
    return cfg;
  }
};

json task_summary(const ex::TaskScores& t) {
  json per_k = json::object();
  for (const auto& [k, prf] : t.per_k) per_k[std::to_string(k)] = {{"P", prf.precision}, {"R", prf.recall}, {"F1", prf.f1}};
  return {{"mAP", t.map}, {"per-K", per_k}};
}

int gen_data(const std::string& config_file, std::uint64_t seed, bool seed_given, const std::string& out) {
  ex::ExperimentConfig cfg;
  cfg.synthetic = mlzsl::data::SyntheticConfig{};
  if (!config_file.empty()) {
    json j = read_json_file(config_file);
    if (!j.contains("synthetic")) j["synthetic"] = json::object();
    j.erase("data_dir");
    cfg = ex::from_json(j);
  }
  if (seed_given) cfg.seed = seed;
  auto s = *cfg.synthetic;
  s.seed = ex::SeedPlan::from(cfg.seed).data;
  const auto corpus = mlzsl::data::generate_synthetic(s).corpus;
  mlzsl::data::save_corpus(out, corpus);
  std::cout << "wrote " << corpus.train_seen.size() << " train, " << corpus.test_seen.size() << " seen-test and "
            << corpus.test_unseen.size() << " unseen-test instances to " << out << "\n";
  return 0;
}

int train(const ConfigFlags& flags) {
  const auto cfg = flags.build();
  const auto out = ex::run_pipeline(cfg);
  std::cout << ex::results_json(out.results).dump(2) << "\n";
  std::cerr << "results, checkpoint and loss trace written to " << cfg.output_dir.string() << "\n";
  return 0;
}

int synth(const ConfigFlags& flags, const std::string& checkpoint, const std::string& file) {
  auto cfg = flags.build();
  const auto corpus = ex::load_data(cfg);
  const auto models = ex::load_models(checkpoint, cfg, corpus);
  const auto split = mlzsl::gan::synthesize_unseen(models.gan.generator, corpus.classes, corpus.embeddings,
                                                   cfg.synthesis, ex::SeedPlan::from(cfg.seed).synth);
  mlzsl::data::write_features(file, split);
  std::cout << "wrote " << split.size() << " synthesized unseen instances to " << file << "\n";
  return 0;
}

/// Score file: CSV rows "l1;l2,s_1,...,s_K", labels as 0-based columns.
int eval(const std::string& scores_file, const std::vector<std::size_t>& ks) {
  const auto split = mlzsl::data::load_features(scores_file);
  if (split.empty()) throw mlzsl::FormatError(scores_file + ": no scored images with labels");
  const std::size_t K = split.front().feature.size();
  mlzsl::metrics::EvalTable t{mlzsl::data::feature_matrix(split), {}};
  for (const auto& inst : split) {
    std::vector<std::size_t> cols;
    for (auto k : inst.labels) {
      if (k >= K) throw mlzsl::FormatError(scores_file + ": label " + std::to_string(k) + " >= " + std::to_string(K));
      cols.push_back(k);
    }
    t.truths.push_back(std::move(cols));
  }
  ex::TaskScores s{t, mlzsl::metrics::mean_ap(t), {}};
  for (auto k : ks) s.per_k[k] = mlzsl::metrics::topk_prf(t, k);
  std::cout << task_summary(s).dump(2) << "\n";
  return 0;
}

int ablate(const ConfigFlags& flags) {
  const auto base = flags.build();
  const auto results = ex::run_ablation(base);
  json all = json::array();
  std::cout << std::left << std::setw(6) << "mode" << std::setw(9) << "GAN" << std::setw(10) << "ZSL mAP"
            << "GZSL mAP\n";
  for (const auto& r : results) {
    all.push_back(ex::results_json(r));
    std::cout << std::setw(6) << mlzsl::fusion::mode_name(r.mode) << std::setw(9) << mlzsl::gan::objective_name(r.objective)
              << std::setw(10) << std::fixed << std::setprecision(4) << r.zsl.map << r.gzsl.map << "\n";
  }
  fs::create_directories(base.output_dir);
  ex::write_json(base.output_dir / "ablation.json", all);
  return 0;
}

int inspect(const std::string& path) {
  const auto ck = ex::load_checkpoint(path);
  std::cout << "checkpoint " << path << " (format version " << ex::kCheckpointVersion << ")\n";
  if (const auto d = ck.digest()) std::cout << "config digest " << ex::hex_digest(*d) << "\n";
  std::size_t total = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (name.starts_with("meta.")) continue;
    std::cout << "  " << std::left << std::setw(40) << name << mlzsl::shape_string(t.shape()) << "\n";
    total += t.size();
  }
  std::cout << total << " parameters\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-label generative zero-shot learning"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus directory");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 1;
  gen->add_option("--config", gen_config, "JSON config; its 'synthetic' section is used")->check(CLI::ExistingFile);
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Master seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  ConfigFlags train_flags, synth_flags, ablate_flags;
  auto* tr = app.add_subcommand("train", "Train, synthesize, fit final classifiers and evaluate");
  train_flags.attach(tr, true);

  auto* sy = app.add_subcommand("synth", "Synthesize unseen-class features from a checkpoint");
  synth_flags.attach(sy, true);
  std::string checkpoint, synth_file;
  sy->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  sy->add_option("--features", synth_file, "Output feature file (.csv or binary)")->required();

  auto* ev = app.add_subcommand("eval", "Score a CSV file of per-image scores and truth labels");
  std::string scores_file;
  std::vector<std::size_t> eval_ks{3};
  ev->add_option("scores", scores_file, "CSV rows: 'l1;l2,s_1,...,s_K'")->required()->check(CLI::ExistingFile);
  ev->add_option("--k", eval_ks, "Top-K cut-offs (repeatable)");

  auto* ab = app.add_subcommand("ablate", "Run the fusion x objective grid");
  ablate_flags.attach(ab, false);

  auto* in = app.add_subcommand("inspect-checkpoint", "Print tensor shapes and config digest");
  std::string inspect_path;
  in->add_option("checkpoint", inspect_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return gen_data(gen_config, gen_seed, gen_seed_opt->count() > 0, gen_out);
    if (*tr) return train(train_flags);
    if (*sy) return synth(synth_flags, checkpoint, synth_file);
    if (*ev) return eval(scores_file, eval_ks);
    if (*ab) return ablate(ablate_flags);
    if (*in) return inspect(inspect_path);
  } catch (const mlzsl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
