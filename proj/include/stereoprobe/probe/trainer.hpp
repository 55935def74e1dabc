#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/common/text.hpp"
#include "stereoprobe/dataset/probe_corpus.hpp"
#include "stereoprobe/io/archive.hpp"
#include "stereoprobe/model/ablation.hpp"
#include "stereoprobe/probe/features.hpp"
#include "stereoprobe/probe/mlp.hpp"

namespace stereoprobe {

struct ProbeHyperparameters {
  std::vector<std::size_t> hidden{1024, 512};
  std::vector<double> dropout{0.4, 0.2};
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  std::size_t patience = 5;  // epochs without validation improvement
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t threads = 1;  // evaluation only

  nlohmann::ordered_json to_json() const {
    return {{"hidden", hidden},
            {"dropout", dropout},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"patience", patience},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_epsilon", adam_epsilon}};
  }

  static ProbeHyperparameters from_json(const nlohmann::json& j) {
    ProbeHyperparameters h;
    for (const auto& [key, value] : j.items()) {
      if (key == "hidden") h.hidden = value.get<std::vector<std::size_t>>();
      else if (key == "dropout") h.dropout = value.get<std::vector<double>>();
      else if (key == "learning_rate") h.learning_rate = value.get<double>();
      else if (key == "batch_size") h.batch_size = value.get<std::size_t>();
      else if (key == "epochs") h.epochs = value.get<std::size_t>();
      else if (key == "patience") h.patience = value.get<std::size_t>();
      else if (key == "beta1") h.beta1 = value.get<double>();
      else if (key == "beta2") h.beta2 = value.get<double>();
      else if (key == "adam_epsilon") h.adam_epsilon = value.get<double>();
      else if (key == "threads") h.threads = value.get<std::size_t>();
      else throw ConfigError("unknown probe setting '" + key + "'");
    }
    h.validate();
    return h;
  }

  void validate() const {
    if (dropout.size() != hidden.size()) {
      throw ConfigError("probe: need one dropout rate per hidden layer");
    }
    if (batch_size == 0 || epochs == 0) {
      throw ConfigError("probe: batch_size and epochs must be positive");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("probe: learning_rate must be > 0");
  }
};

struct ProbeModel {
  Mlp<float> net;
  ProbeHyperparameters hyper;
  std::uint64_t seed = 0;
};

// Probe-input feature indices to zero.
class FeatureMask {
 public:
  FeatureMask() = default;
  explicit FeatureMask(std::vector<std::size_t> indices)
      : indices_(std::move(indices)) {
    normalize();
  }

  void add(std::size_t i) {
    indices_.push_back(i);
    normalize();
  }
  void add(std::span<const std::size_t> idx) {
    indices_.insert(indices_.end(), idx.begin(), idx.end());
    normalize();
  }
  bool empty() const { return indices_.empty(); }
  std::size_t size() const { return indices_.size(); }
  const std::vector<std::size_t>& indices() const { return indices_; }

  void validate(std::size_t input_length) const {
    if (!indices_.empty() && indices_.back() >= input_length) {
      throw InputError("feature mask index " + std::to_string(indices_.back()) +
                       " exceeds probe input length " +
                       std::to_string(input_length));
    }
  }

  static FeatureMask all(std::size_t input_length) {
    std::vector<std::size_t> idx(input_length);
    for (std::size_t i = 0; i < input_length; ++i) idx[i] = i;
    return FeatureMask(std::move(idx));
  }

 private:
  void normalize() {
    std::sort(indices_.begin(), indices_.end());
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  }
  std::vector<std::size_t> indices_;
};

// Pair-feature indices of one attention neuron: its position in both halves.
inline std::vector<std::size_t> neuron_feature_indices(const ModelConfig& config,
                                                       int layer, int head,
                                                       int neuron) {
  NeuronCoordinate::mha(layer, head, neuron).validate(config);
  const std::size_t half = config.n_layers * config.d_model;
  const std::size_t i = static_cast<std::size_t>(layer) * config.d_model +
                        static_cast<std::size_t>(head) * config.d_head +
                        static_cast<std::size_t>(neuron);
  return {i, half + i};
}

// The 2 * d_head pair-features owned by one head.
inline std::vector<std::size_t> head_feature_indices(const ModelConfig& config,
                                                     int layer, int head) {
  std::vector<std::size_t> out;
  for (int j = 0; j < static_cast<int>(config.d_head); ++j) {
    for (std::size_t i : neuron_feature_indices(config, layer, head, j)) {
      out.push_back(i);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Attention coordinates of an ablation mask as probe-input indices; other
// components have no probe features and are ignored.
inline FeatureMask feature_mask_for(const AblationMask& mask,
                                    const ModelConfig& config) {
  std::vector<std::size_t> idx;
  for (const auto& c : mask.coordinates()) {
    if (c.component != Component::kMha) continue;
    for (std::size_t i : neuron_feature_indices(config, c.layer, c.head, c.neuron)) {
      idx.push_back(i);
    }
  }
  return FeatureMask(std::move(idx));
}

namespace detail {

inline Mlp<float>::Matrix gather_rows(const ProbeCorpus& corpus,
                                      std::span<const std::size_t> rows) {
  const std::size_t n = corpus.input_length();
  Mlp<float>::Matrix x(rows.size(), n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& f = corpus.pairs[rows[r]].features;
    std::copy(f.begin(), f.end(), x.row(static_cast<Eigen::Index>(r)).data());
  }
  return x;
}

}  // namespace detail

// Number of correct order-flag predictions on `rows`, features in `mask`
// zeroed, dropout off. Rows are processed in fixed-size chunks in parallel.
inline std::size_t count_correct(const Mlp<float>& net, const ProbeCorpus& corpus,
                                 std::span<const std::size_t> rows,
                                 const FeatureMask& mask, std::size_t threads = 1) {
  const std::size_t n = corpus.input_length();
  if (net.input_size() != n) {
    throw ConfigError("probe expects " + std::to_string(net.input_size()) +
                      " features but the corpus has " + std::to_string(n));
  }
  mask.validate(n);
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (rows.size() + kChunk - 1) / kChunk;
  std::vector<std::size_t> correct(chunks, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t r0 = c * kChunk;
    const std::size_t r1 = std::min(rows.size(), r0 + kChunk);
    std::vector<float> x((r1 - r0) * n);
    for (std::size_t r = r0; r < r1; ++r) {
      const auto& f = corpus.pairs[rows[r]].features;
      float* dst = x.data() + (r - r0) * n;
      std::copy(f.begin(), f.end(), dst);
      for (std::size_t i : mask.indices()) dst[i] = 0.0f;
    }
    const auto logits = mlp_logits_stable(net, x.data(), r1 - r0);
    const std::size_t k = net.output_size();
    for (std::size_t r = r0; r < r1; ++r) {
      const int pred = argmax_row(logits.data() + (r - r0) * k, k);
      if (pred == corpus.pairs[rows[r]].label()) ++correct[c];
    }
  });
  std::size_t total = 0;
  for (std::size_t v : correct) total += v;
  return total;
}

inline double evaluate_probe(const ProbeModel& model, const ProbeCorpus& corpus,
                             std::span<const std::size_t> rows,
                             const FeatureMask& mask = {}, std::size_t threads = 1) {
  if (rows.empty()) throw InputError("evaluate_probe: no samples to evaluate");
  return static_cast<double>(count_correct(model.net, corpus, rows, mask, threads)) /
         static_cast<double>(rows.size());
}

// Accuracy on the validation split.
inline double evaluate_probe(const ProbeModel& model, const ProbeCorpus& corpus,
                             const FeatureMask& mask = {}, std::size_t threads = 1) {
  return evaluate_probe(model, corpus, corpus.validation, mask, threads);
}

struct CurvePoint {
  std::size_t step = 0;  // epoch, 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainingResult {
  ProbeModel model;  // parameters of the best validation epoch
  std::vector<CurvePoint> curve;
  double best_validation_accuracy = 0.0;
  std::size_t best_epoch = 0;
  bool stopped_early = false;

  std::string curve_csv() const {
    std::string out = csv_row({"step", "train_acc", "val_acc"});
    for (const auto& p : curve) {
      out += csv_row({std::to_string(p.step), format_number(p.train_accuracy),
                      format_number(p.validation_accuracy)});
    }
    return out;
  }
};

// Adam on mean cross-entropy of the order flag with seeded init, shuffling
// and dropout. Keeps the parameters of the best validation epoch and stops
// after `patience` epochs without improvement.
inline TrainingResult train_probe(const ProbeCorpus& corpus,
                                  const ProbeHyperparameters& hyper,
                                  std::uint64_t seed) {
  hyper.validate();
  if (corpus.train.empty()) throw InputError("train_probe: empty training split");
  std::vector<std::size_t> sizes{corpus.input_length()};
  sizes.insert(sizes.end(), hyper.hidden.begin(), hyper.hidden.end());
  sizes.push_back(2);

  TrainingResult result;
  result.model.hyper = hyper;
  result.model.seed = seed;
  result.model.net = make_mlp<float>(sizes, hyper.dropout, seed);
  Mlp<float>& net = result.model.net;
  Adam<float> adam(net, {hyper.learning_rate, hyper.beta1, hyper.beta2,
                         hyper.adam_epsilon});
  const auto& val_rows =
      corpus.validation.empty() ? corpus.train : corpus.validation;

  Mlp<float> best = net;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order = corpus.train;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    Rng shuffle = make_rng(seed, "probe-shuffle", epoch);
    Rng dropout = make_rng(seed, "probe-dropout", epoch);
    portable_shuffle(order, shuffle);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += hyper.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + hyper.batch_size);
      const std::span<const std::size_t> rows(order.data() + b0, b1 - b0);
      const auto x = detail::gather_rows(corpus, rows);
      std::vector<int> y;
      for (std::size_t r : rows) y.push_back(corpus.pairs[r].label());
      MlpGradients<float> g;
      const double loss = mlp_loss(net, x, y, &dropout, &g);
      if (!std::isfinite(loss)) {
        throw TrainingError("probe training diverged: loss " +
                            format_number(loss) + " at epoch " +
                            std::to_string(epoch) + ", batch " +
                            std::to_string(batches) +
                            "; try a lower learning_rate");
      }
      adam.step(net, g);
      loss_sum += loss;
      ++batches;
    }
    net.check_finite();
    CurvePoint p;
    p.step = epoch;
    p.train_loss = loss_sum / static_cast<double>(batches);
    p.train_accuracy =
        static_cast<double>(count_correct(net, corpus, corpus.train, {}, hyper.threads)) /
        static_cast<double>(corpus.train.size());
    p.validation_accuracy =
        static_cast<double>(count_correct(net, corpus, val_rows, {}, hyper.threads)) /
        static_cast<double>(val_rows.size());
    result.curve.push_back(p);
    if (p.validation_accuracy > best_acc) {
      best_acc = p.validation_accuracy;
      best = net;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= hyper.patience && hyper.patience > 0) {
      result.stopped_early = epoch < hyper.epochs;
      break;
    }
  }
  net = std::move(best);
  result.best_validation_accuracy = best_acc;
  return result;
}

// Checkpoint: named-tensor archive at `path` plus a JSON sidecar at
// `path + ".json"` with the hyperparameters and layer sizes.
inline void save_probe(const ProbeModel& model, const std::string& path,
                       const std::string& config_hash = "") {
  TensorArchive archive;
  for (std::size_t l = 0; l < model.net.layer_count(); ++l) {
    const auto& w = model.net.weights[l];
    const auto& b = model.net.biases[l];
    archive.add_f32("layers." + std::to_string(l) + ".weight",
                    {static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols())},
                    std::span<const float>(w.data(), static_cast<std::size_t>(w.size())));
    archive.add_f32("layers." + std::to_string(l) + ".bias",
                    {static_cast<std::size_t>(b.size())},
                    std::span<const float>(b.data(), static_cast<std::size_t>(b.size())));
  }
  archive.metadata()["format"] = "stereoprobe-probe";
  if (!config_hash.empty()) archive.metadata()["config_hash"] = config_hash;
  archive.save(path);
  nlohmann::ordered_json side;
  if (!config_hash.empty()) side["config_hash"] = config_hash;
  side["sizes"] = model.net.sizes();
  side["seed"] = model.seed;
  side["hyperparameters"] = model.hyper.to_json();
  std::ofstream out(path + ".json");
  if (!out) throw LoadError("cannot write probe sidecar " + path + ".json");
  out << side.dump(2) << "\n";
}

inline ProbeModel load_probe(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw LoadError("missing probe sidecar " + path + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("probe sidecar " + path + ".json: " + e.what());
  }
  ProbeModel model;
  model.hyper = ProbeHyperparameters::from_json(side.at("hyperparameters"));
  model.seed = side.at("seed").get<std::uint64_t>();
  const auto sizes = side.at("sizes").get<std::vector<std::size_t>>();
  const TensorArchive archive = TensorArchive::load(path);
  model.net.dropout = model.hyper.dropout;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Tensor w = archive.tensor("layers." + std::to_string(l) + ".weight",
                                    {sizes[l], sizes[l + 1]});
    const Tensor b =
        archive.tensor("layers." + std::to_string(l) + ".bias", {sizes[l + 1]});
    Mlp<float>::Matrix wm(sizes[l], sizes[l + 1]);
    std::copy(w.values().begin(), w.values().end(), wm.data());
    Mlp<float>::Row bm(sizes[l + 1]);
    std::copy(b.values().begin(), b.values().end(), bm.data());
    model.net.weights.push_back(std::move(wm));
    model.net.biases.push_back(std::move(bm));
  }
  if (model.net.dropout.size() + 2 != sizes.size()) {
    throw LoadError("probe sidecar " + path + ".json: dropout and sizes disagree");
  }
  model.net.check_finite();
  return model;
}

struct EmbeddingProbeResult {
  EmbeddingSource source = EmbeddingSource::kEncoding;
  std::array<double, 4> per_bias{};  // by BiasType, validation accuracy
  std::array<std::size_t, 4> per_bias_count{};
  double overall = 0.0;
};

struct EmbeddingStudy {
  std::vector<EmbeddingProbeResult> results;  // encoding, positional

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : results) {
      nlohmann::ordered_json row;
      row["embedding"] = to_string(r.source);
      for (BiasType b : kAllBiasTypes) {
        const auto i = static_cast<std::size_t>(b);
        row[to_string(b)] = r.per_bias_count[i] ? nlohmann::ordered_json(r.per_bias[i])
                                                : nlohmann::ordered_json(nullptr);
      }
      row["overall"] = r.overall;
      j.push_back(std::move(row));
    }
    return j;
  }
};

// Two probes on the intrasentence pairs: one on mean token+position
// embeddings, one on mean position embeddings alone.
inline EmbeddingStudy embedding_probe_study(
    const Transformer& model, const Tokenizer& tokenizer,
    const std::vector<TripletExample>& examples,
    const ProbeHyperparameters& hyper, std::uint64_t seed,
    const CorpusOptions& options = {}, const SequenceOptions& sequence = {}) {
  std::vector<TripletExample> intra;
  for (const auto& e : examples) {
    if (e.format == TaskFormat::kIntrasentence) intra.push_back(e);
  }
  if (intra.empty()) throw InputError("embedding study: no intrasentence examples");
  EmbeddingStudy study;
  for (EmbeddingSource source : {EmbeddingSource::kEncoding, EmbeddingSource::kPositional}) {
    const SentenceFeatureFn fn = [&](const TripletExample& e, CandidateKind k) {
      return embedding_features(model, tokenizer, e, k, source, sequence);
    };
    const ProbeCorpus corpus = build_probe_corpus(intra, fn, seed, options);
    const TrainingResult trained = train_probe(corpus, hyper, seed);
    EmbeddingProbeResult r;
    r.source = source;
    const auto& rows = corpus.validation.empty() ? corpus.train : corpus.validation;
    r.overall = evaluate_probe(trained.model, corpus, rows, {}, hyper.threads);
    for (BiasType b : kAllBiasTypes) {
      std::vector<std::size_t> sub;
      for (std::size_t i : rows) {
        if (corpus.pairs[i].bias_type == b) sub.push_back(i);
      }
      const auto bi = static_cast<std::size_t>(b);
      r.per_bias_count[bi] = sub.size();
      if (!sub.empty()) {
        r.per_bias[bi] = evaluate_probe(trained.model, corpus, sub, {}, hyper.threads);
      }
    }
    study.results.push_back(r);
  }
  return study;
}

}  // namespace stereoprobe
