#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlzsl/binary_io.hpp"
#include "mlzsl/nn.hpp"
#include "mlzsl/random.hpp"
#include "mlzsl/tensor.hpp"

namespace mlzsl::data {

using ClassId = std::uint32_t;

/// Seen classes occupy indices [0, S), unseen classes [S, S+U).
struct ClassSpace {
  std::size_t seen_count = 0;
  std::size_t unseen_count = 0;
  std::vector<std::string> names;

  std::size_t total() const noexcept { return seen_count + unseen_count; }
  bool is_seen(ClassId k) const noexcept { return k < seen_count; }
  bool is_unseen(ClassId k) const noexcept { return k >= seen_count && k < total(); }

  std::vector<ClassId> seen_ids() const { return range(0, seen_count); }
  std::vector<ClassId> unseen_ids() const { return range(seen_count, total()); }
  std::vector<ClassId> all_ids() const { return range(0, total()); }

 private:
  static std::vector<ClassId> range(std::size_t lo, std::size_t hi) {
    std::vector<ClassId> ids;
    for (std::size_t k = lo; k < hi; ++k) ids.push_back(static_cast<ClassId>(k));
    return ids;
  }
};

/// One unit-norm attribute embedding per class (rows of a C x d_e matrix).
struct EmbeddingTable {
  Tensor vectors;

  std::size_t dim() const { return vectors.cols(); }
  std::size_t count() const { return vectors.rows(); }
  std::span<const double> row(ClassId k) const { return vectors.row(k); }
};

struct MultiLabelInstance {
  std::vector<double> feature;
  std::vector<ClassId> labels;  // sorted, unique, non-empty
};

using Split = std::vector<MultiLabelInstance>;

struct Corpus {
  ClassSpace classes;
  EmbeddingTable embeddings;
  Split train_seen;
  Split test_seen;
  Split test_unseen;

  std::size_t feature_dim() const { return train_seen.empty() ? 0 : train_seen.front().feature.size(); }
};

/// Stack the features of a split into an N x d matrix.
inline Tensor feature_matrix(const Split& split) {
  if (split.empty()) throw ShapeError("feature_matrix: empty split");
  const std::size_t d = split.front().feature.size();
  Tensor m(split.size(), d);
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i].feature.size() != d) throw ShapeError("feature_matrix: ragged split");
    std::copy(split[i].feature.begin(), split[i].feature.end(), m.row(i).begin());
  }
  return m;
}

inline void normalize_rows(Tensor& vectors, const std::string& source) {
  for (std::size_t k = 0; k < vectors.rows(); ++k) {
    double n2 = 0.0;
    for (double v : vectors.row(k)) n2 += v * v;
    const double n = std::sqrt(n2);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw FormatError(source + ": embedding record " + std::to_string(k) + " has zero or non-finite norm");
    }
    for (double& v : vectors.row(k)) v /= n;
  }
}

// ---- validation -------------------------------------------------------------

/// Partition soundness and embedding normalization; throws on violation.
inline void validate(const Corpus& c) {
  if (c.embeddings.count() != c.classes.total()) {
    throw ConfigError("embedding table has " + std::to_string(c.embeddings.count()) + " rows for " +
                      std::to_string(c.classes.total()) + " classes");
  }
  for (std::size_t k = 0; k < c.embeddings.count(); ++k) {
    double n2 = 0.0;
    for (double v : c.embeddings.row(static_cast<ClassId>(k))) n2 += v * v;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw ConfigError("embedding " + std::to_string(k) + " is not unit norm");
  }
  auto check = [&](const Split& split, const char* name, auto allowed) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& inst = split[i];
      if (inst.labels.empty()) throw ConfigError(std::string(name) + " record " + std::to_string(i) + " has no labels");
      if (!std::is_sorted(inst.labels.begin(), inst.labels.end()) ||
          std::adjacent_find(inst.labels.begin(), inst.labels.end()) != inst.labels.end()) {
        throw ConfigError(std::string(name) + " record " + std::to_string(i) + " labels are not sorted and unique");
      }
      for (ClassId k : inst.labels) {
        if (!allowed(k)) {
          throw ConfigError(std::string(name) + " record " + std::to_string(i) + " carries out-of-partition label " +
                            std::to_string(k));
        }
      }
    }
  };
  check(c.train_seen, "train_seen", [&](ClassId k) { return c.classes.is_seen(k); });
  check(c.test_seen, "test_seen", [&](ClassId k) { return c.classes.is_seen(k); });
  check(c.test_unseen, "test_unseen", [&](ClassId k) { return c.classes.is_unseen(k); });
}

// ---- synthetic corpus -------------------------------------------------------

struct SyntheticConfig {
  std::size_t seen_count = 20;
  std::size_t unseen_count = 6;
  std::size_t embedding_dim = 16;
  std::size_t feature_dim = 32;
  std::size_t train_count = 2000;
  std::size_t test_seen_count = 400;
  std::size_t test_unseen_count = 400;
  std::size_t max_labels = 3;
  double noise = 0.05;
  std::size_t cluster_count = 4;
  double cluster_spread = 0.6;  // per-class offset scale around its cluster center
  std::size_t map_hidden = 32;
  double map_gain = 2.5;  // weight scale of the hidden ground-truth map
  std::uint64_t seed = 1;
};

/// The generated corpus plus the hidden ground truth, for generator self-tests.
struct SyntheticCorpus {
  Corpus corpus;
  nn::Mlp hidden_map;  // embedding -> feature prototype
  Tensor prototypes;   // C x d
};

namespace detail {

inline std::vector<ClassId> sample_labels(Rng& rng, std::size_t lo, std::size_t hi, std::size_t n_max) {
  std::uniform_int_distribution<std::size_t> size_dist(1, n_max);
  const std::size_t n = size_dist(rng);
  std::vector<ClassId> pool;
  for (std::size_t k = lo; k < hi; ++k) pool.push_back(static_cast<ClassId>(k));
  // Partial Fisher-Yates: first n entries become a uniform sample without replacement.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline Split make_split(Rng& rng, const Tensor& prototypes, std::size_t count, std::size_t lo, std::size_t hi,
                        std::size_t n_max, double noise) {
  Split split;
  split.reserve(count);
  const std::size_t d = prototypes.cols();
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    MultiLabelInstance inst;
    inst.labels = sample_labels(rng, lo, hi, n_max);
    inst.feature.assign(d, 0.0);
    for (ClassId k : inst.labels)
      for (std::size_t j = 0; j < d; ++j) inst.feature[j] += prototypes(k, j);
    const double n = static_cast<double>(inst.labels.size());
    for (auto& v : inst.feature) v /= n;
    if (noise > 0.0) {
      for (auto& v : inst.feature) v += noise * gauss(rng);
    }
    for (auto& v : inst.feature) v = std::clamp(v, 0.0, 1.0);
    split.push_back(std::move(inst));
  }
  return split;
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.seen_count == 0 || cfg.unseen_count == 0 || cfg.embedding_dim == 0 || cfg.feature_dim == 0 ||
      cfg.train_count == 0 || cfg.test_seen_count == 0 || cfg.test_unseen_count == 0 || cfg.max_labels == 0 ||
      cfg.cluster_count == 0 || cfg.map_hidden == 0) {
    throw ConfigError("synthetic config: all counts must be positive");
  }
  if (cfg.noise < 0.0) throw ConfigError("synthetic config: noise must be non-negative");
  if (cfg.max_labels > cfg.seen_count) {
    throw ConfigError("synthetic config: max_labels " + std::to_string(cfg.max_labels) + " exceeds seen class count " +
                      std::to_string(cfg.seen_count));
  }
  if (cfg.max_labels > cfg.unseen_count) {
    throw ConfigError("synthetic config: max_labels " + std::to_string(cfg.max_labels) +
                      " exceeds unseen class count " + std::to_string(cfg.unseen_count));
  }

  Rng rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t C = cfg.seen_count + cfg.unseen_count;
  const std::size_t de = cfg.embedding_dim;

  Tensor centers(cfg.cluster_count, de);
  for (auto& v : centers.data()) v = gauss(rng);
  normalize_rows(centers, "synthetic cluster centers");

  Tensor emb(C, de);
  const double offset_scale = cfg.cluster_spread / std::sqrt(static_cast<double>(de));
  std::uniform_int_distribution<std::size_t> cluster_pick(0, cfg.cluster_count - 1);
  for (std::size_t k = 0; k < C; ++k) {
    const std::size_t c = cluster_pick(rng);
    for (std::size_t j = 0; j < de; ++j) emb(k, j) = centers(c, j) + offset_scale * gauss(rng);
  }
  normalize_rows(emb, "synthetic embeddings");

  // Hidden smooth map: N(0, gain^2 / fan_in) weights, leaky hidden layer, sigmoid output.
  nn::Mlp map;
  map.hidden = nn::Activation::LeakyRelu;
  map.output = nn::Activation::Sigmoid;
  map.layer1 = {Tensor(de, cfg.map_hidden), Tensor(1, cfg.map_hidden)};
  map.layer2 = {Tensor(cfg.map_hidden, cfg.feature_dim), Tensor(1, cfg.feature_dim)};
  const double s1 = cfg.map_gain;  // unit-norm inputs
  const double s2 = cfg.map_gain / std::sqrt(static_cast<double>(cfg.map_hidden));
  for (auto& v : map.layer1.weight.data()) v = s1 * gauss(rng);
  for (auto& v : map.layer1.bias.data()) v = 0.5 * gauss(rng);
  for (auto& v : map.layer2.weight.data()) v = s2 * gauss(rng);

  const Tensor prototypes = nn::mlp_forward(map, emb);

  SyntheticCorpus out;
  out.corpus.classes = {cfg.seen_count, cfg.unseen_count, {}};
  for (std::size_t k = 0; k < C; ++k) out.corpus.classes.names.push_back("class" + std::to_string(k));
  out.corpus.embeddings = {emb};
  out.corpus.train_seen =
      detail::make_split(rng, prototypes, cfg.train_count, 0, cfg.seen_count, cfg.max_labels, cfg.noise);
  out.corpus.test_seen =
      detail::make_split(rng, prototypes, cfg.test_seen_count, 0, cfg.seen_count, cfg.max_labels, cfg.noise);
  out.corpus.test_unseen =
      detail::make_split(rng, prototypes, cfg.test_unseen_count, cfg.seen_count, C, cfg.max_labels, cfg.noise);
  out.hidden_map = std::move(map);
  out.prototypes = prototypes;
  return out;
}

// ---- normalization ----------------------------------------------------------

/// Per-dimension min-max scaling fitted on one split. Dimensions with
/// min == max map to 0; values outside the fitted range are clipped to [0, 1].
class MinMaxScaler {
 public:
  static MinMaxScaler fit(const Split& train) {
    if (train.empty()) throw ConfigError("MinMaxScaler: cannot fit on an empty split");
    MinMaxScaler s;
    const std::size_t d = train.front().feature.size();
    s.min_.assign(d, std::numeric_limits<double>::infinity());
    s.max_.assign(d, -std::numeric_limits<double>::infinity());
    for (const auto& inst : train) {
      if (inst.feature.size() != d) throw ShapeError("MinMaxScaler: ragged feature dimensions");
      for (std::size_t j = 0; j < d; ++j) {
        s.min_[j] = std::min(s.min_[j], inst.feature[j]);
        s.max_[j] = std::max(s.max_[j], inst.feature[j]);
      }
    }
    return s;
  }

  void apply(Split& split) const {
    for (auto& inst : split) {
      if (inst.feature.size() != min_.size()) throw ShapeError("MinMaxScaler: feature dimension mismatch");
      for (std::size_t j = 0; j < min_.size(); ++j) {
        const double range = max_[j] - min_[j];
        inst.feature[j] = range > 0.0 ? std::clamp((inst.feature[j] - min_[j]) / range, 0.0, 1.0) : 0.0;
      }
    }
  }

  const std::vector<double>& min() const noexcept { return min_; }
  const std::vector<double>& max() const noexcept { return max_; }

 private:
  std::vector<double> min_;
  std::vector<double> max_;
};

/// Fit on train_seen and apply to every split.
inline void normalize_corpus(Corpus& c) {
  const auto scaler = MinMaxScaler::fit(c.train_seen);
  scaler.apply(c.train_seen);
  scaler.apply(c.test_seen);
  scaler.apply(c.test_unseen);
}

// ---- feature / embedding files ---------------------------------------------

namespace detail {

inline bool is_csv(const std::filesystem::path& p) { return p.extension() == ".csv"; }

inline void finish_labels(MultiLabelInstance& inst, std::optional<std::size_t> class_count, const std::string& where) {
  for (ClassId k : inst.labels) {
    if (class_count && k >= *class_count) {
      throw FormatError(where + ": label index " + std::to_string(k) + " >= class count " +
                        std::to_string(*class_count));
    }
  }
  std::sort(inst.labels.begin(), inst.labels.end());
  inst.labels.erase(std::unique(inst.labels.begin(), inst.labels.end()), inst.labels.end());
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& tok, const std::string& where) {
  const std::string t = trim(tok);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw FormatError(where + ": cannot parse value '" + t + "'");
  }
  return v;
}

inline ClassId parse_label(const std::string& tok, const std::string& where) {
  const std::string t = trim(tok);
  unsigned long v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || v > std::numeric_limits<ClassId>::max()) {
    throw FormatError(where + ": cannot parse label '" + t + "'");
  }
  return static_cast<ClassId>(v);
}

inline Split read_features_csv(const std::filesystem::path& path, std::optional<std::size_t> class_count) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  Split out;
  std::string line;
  std::size_t line_no = 0;
  std::optional<std::size_t> dim;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 2) throw FormatError(where + ": expected 'labels, v1, v2, ...'");
    MultiLabelInstance inst;
    const std::string labels = trim(fields[0]);
    if (!labels.empty()) {
      std::stringstream ls(labels);
      std::string tok;
      while (std::getline(ls, tok, ';')) inst.labels.push_back(parse_label(tok, where));
    }
    for (std::size_t i = 1; i < fields.size(); ++i) inst.feature.push_back(parse_double(fields[i], where));
    if (!dim) dim = inst.feature.size();
    if (inst.feature.size() != *dim) {
      throw FormatError(where + ": record has " + std::to_string(inst.feature.size()) + " values, expected " +
                        std::to_string(*dim));
    }
    finish_labels(inst, class_count, where);
    if (!inst.labels.empty()) out.push_back(std::move(inst));
  }
  return out;
}

inline Split read_features_binary(const std::filesystem::path& path, std::optional<std::size_t> class_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  io::Reader r(in, path.string());
  r.expect_magic("MLZF");
  const std::uint32_t count = r.u32("record count");
  const std::uint32_t d = r.u32("feature dimension");
  if (d == 0) r.fail("feature dimension must be positive");
  Split out;
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    const std::string where = path.string() + ": record " + std::to_string(rec);
    const std::string what = "record " + std::to_string(rec);
    MultiLabelInstance inst;
    const std::uint32_t n = r.u32(what + " label count");
    for (std::uint32_t i = 0; i < n; ++i) inst.labels.push_back(r.u32(what + " labels"));
    inst.feature.resize(d);
    for (std::uint32_t j = 0; j < d; ++j) inst.feature[j] = r.f32(what + " features");
    finish_labels(inst, class_count, where);
    if (!inst.labels.empty()) out.push_back(std::move(inst));
  }
  if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(count) + " records (length mismatch)");
  return out;
}

}  // namespace detail

/// Read a feature file (binary MLZF, or CSV when the path ends in .csv).
/// Records with an empty label set are dropped. Values are returned raw.
inline Split load_features(const std::filesystem::path& path, std::optional<std::size_t> class_count = std::nullopt) {
  return detail::is_csv(path) ? detail::read_features_csv(path, class_count)
                              : detail::read_features_binary(path, class_count);
}

inline void write_features(const std::filesystem::path& path, const Split& split) {
  if (detail::is_csv(path)) {
    std::ofstream out(path);
    if (!out) throw FormatError(path.string() + ": cannot open for writing");
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& inst : split) {
      for (std::size_t i = 0; i < inst.labels.size(); ++i) out << (i ? ";" : "") << inst.labels[i];
      for (double v : inst.feature) out << ", " << v;
      out << '\n';
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  const std::size_t d = split.empty() ? 1 : split.front().feature.size();
  io::write_magic(out, "MLZF");
  io::write_u32(out, static_cast<std::uint32_t>(split.size()));
  io::write_u32(out, static_cast<std::uint32_t>(d));
  for (const auto& inst : split) {
    if (inst.feature.size() != d) throw ShapeError("write_features: ragged feature dimensions");
    io::write_u32(out, static_cast<std::uint32_t>(inst.labels.size()));
    for (ClassId k : inst.labels) io::write_u32(out, k);
    for (double v : inst.feature) io::write_f32(out, static_cast<float>(v));
  }
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  io::write_magic(out, "MLZE");
  io::write_u32(out, static_cast<std::uint32_t>(table.count()));
  io::write_u32(out, static_cast<std::uint32_t>(table.dim()));
  for (double v : table.vectors.data()) io::write_f32(out, static_cast<float>(v));
}

/// Read an MLZE embedding file; rows are re-normalized to unit l2 norm.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path, const ClassSpace& classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  io::Reader r(in, path.string());
  r.expect_magic("MLZE");
  const std::uint32_t C = r.u32("class count");
  const std::uint32_t de = r.u32("embedding dimension");
  if (C != classes.total()) {
    r.fail("header declares " + std::to_string(C) + " classes, class space has " + std::to_string(classes.total()));
  }
  if (de == 0) r.fail("embedding dimension must be positive");
  Tensor vectors(C, de);
  for (std::uint32_t k = 0; k < C; ++k)
    for (std::uint32_t j = 0; j < de; ++j) vectors(k, j) = r.f32("embedding record " + std::to_string(k));
  if (!r.at_end()) r.fail("trailing bytes after embedding table (length mismatch)");
  normalize_rows(vectors, path.string());
  return {vectors};
}

// ---- corpus directories -----------------------------------------------------

inline constexpr const char* kClassesFile = "classes.json";
inline constexpr const char* kEmbeddingsFile = "embeddings.mlze";
inline constexpr const char* kTrainFile = "train_seen.mlzf";
inline constexpr const char* kTestSeenFile = "test_seen.mlzf";
inline constexpr const char* kTestUnseenFile = "test_unseen.mlzf";

inline void save_corpus(const std::filesystem::path& dir, const Corpus& c) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"seen_count", c.classes.seen_count},
                      {"unseen_count", c.classes.unseen_count},
                      {"names", c.classes.names}};
  std::ofstream(dir / kClassesFile) << j.dump(2) << '\n';
  write_embeddings(dir / kEmbeddingsFile, c.embeddings);
  write_features(dir / kTrainFile, c.train_seen);
  write_features(dir / kTestSeenFile, c.test_seen);
  write_features(dir / kTestUnseenFile, c.test_unseen);
}

/// Load a corpus directory and min-max normalize it with train statistics.
inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream cj(dir / kClassesFile);
  if (!cj) throw FormatError((dir / kClassesFile).string() + ": cannot open");
  nlohmann::json j;
  try {
    cj >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / kClassesFile).string() + ": " + e.what());
  }
  Corpus c;
  c.classes.seen_count = j.at("seen_count").get<std::size_t>();
  c.classes.unseen_count = j.at("unseen_count").get<std::size_t>();
  if (j.contains("names")) c.classes.names = j.at("names").get<std::vector<std::string>>();
  c.embeddings = load_embeddings(dir / kEmbeddingsFile, c.classes);
  const std::size_t C = c.classes.total();
  c.train_seen = load_features(dir / kTrainFile, C);
  c.test_seen = load_features(dir / kTestSeenFile, C);
  c.test_unseen = load_features(dir / kTestUnseenFile, C);
  normalize_corpus(c);
  validate(c);
  return c;
}

}  // namespace mlzsl::data
