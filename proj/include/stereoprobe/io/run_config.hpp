#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/contrastive/ablation_study.hpp"
#include "stereoprobe/metrics/scorer.hpp"
#include "stereoprobe/probe/features.hpp"
#include "stereoprobe/probe/trainer.hpp"
#include "stereoprobe/shapley/probe_game.hpp"

namespace stereoprobe {

struct Exp1Settings {
  double epsilon = 1e-8;
  RatioMode ratio_mode = RatioMode::kMagnitude;
  std::size_t top_k = 200;
  std::size_t ablation_top_k = 100;  // per component
  EffectScope effect_scope = EffectScope::kSubsection;
  std::size_t chunk_size = 64;
};

struct Exp2Settings {
  Pooling pooling = Pooling::kMax;
  double validation_fraction = 0.2;
  ProbeHyperparameters probe;
  std::size_t head_permutations = 200;
  std::size_t neuron_permutations = 200;
  double top_head_fraction = 0.1;
  NeuronSelection selection = NeuronSelection::kPositive;
  std::size_t top_k = 400;
  bool embedding_study = true;
};

// Everything a run needs. Relative paths resolve against the config file.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "out";
  std::string weights;
  std::string model_config;  // optional key = value file; GPT-2 Small if empty
  std::string vocab;
  std::string merges;
  std::string dataset;
  std::string cache_dir;  // default: <output_dir>/cache
  std::size_t limit_examples = 0;  // 0 means all
  SequenceOptions sequence;
  IntersentenceScoring intersentence = IntersentenceScoring::kContinuationOnly;
  Exp1Settings exp1;
  Exp2Settings exp2;

  ScorerOptions scorer_options() const { return {sequence, intersentence}; }
  std::string cache_path() const {
    return cache_dir.empty() ? output_dir + "/cache" : cache_dir;
  }

  // Canonical form with every default filled in.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["output_dir"] = output_dir;
    j["weights"] = weights;
    j["model_config"] = model_config;
    j["vocab"] = vocab;
    j["merges"] = merges;
    j["dataset"] = dataset;
    j["cache_dir"] = cache_dir;
    j["limit_examples"] = limit_examples;
    j["prepend_bos"] = sequence.prepend_bos;
    j["intersentence_scoring"] =
        intersentence == IntersentenceScoring::kContinuationOnly ? "continuation" : "all";
    j["exp1"] = {{"epsilon", exp1.epsilon},
                 {"ratio_mode", exp1.ratio_mode == RatioMode::kMagnitude ? "magnitude" : "signed"},
                 {"top_k", exp1.top_k},
                 {"ablation_top_k", exp1.ablation_top_k},
                 {"effect_scope", exp1.effect_scope == EffectScope::kSubsection ? "subsection" : "all"},
                 {"chunk_size", exp1.chunk_size}};
    j["exp2"] = {{"pooling", exp2.pooling == Pooling::kMax ? "max" : "mean"},
                 {"validation_fraction", exp2.validation_fraction},
                 {"probe", exp2.probe.to_json()},
                 {"head_permutations", exp2.head_permutations},
                 {"neuron_permutations", exp2.neuron_permutations},
                 {"top_head_fraction", exp2.top_head_fraction},
                 {"selection", exp2.selection == NeuronSelection::kPositive ? "positive" : "top_k"},
                 {"top_k", exp2.top_k},
                 {"embedding_study", exp2.embedding_study}};
    return j;
  }

  // Thread count is left out: it never changes results.
  std::string hash() const {
    auto j = to_json();
    j.erase("threads");
    return hex64(fnv1a(j.dump()));
  }
};

namespace detail {

template <typename T>
T config_value(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: '" + key + "' has the wrong type");
  }
}

inline std::string choice(const nlohmann::json& j, const std::string& key,
                          const std::set<std::string>& allowed) {
  const auto v = config_value<std::string>(j, key);
  if (!allowed.count(v)) throw ConfigError("config: invalid value '" + v + "' for '" + key + "'");
  return v;
}

inline void parse_exp1(const nlohmann::json& j, Exp1Settings& s) {
  for (const auto& [k, v] : j.items()) {
    if (k == "epsilon") s.epsilon = config_value<double>(v, k);
    else if (k == "ratio_mode") s.ratio_mode = choice(v, k, {"magnitude", "signed"}) == "magnitude" ? RatioMode::kMagnitude : RatioMode::kSigned;
    else if (k == "top_k") s.top_k = config_value<std::size_t>(v, k);
    else if (k == "ablation_top_k") s.ablation_top_k = config_value<std::size_t>(v, k);
    else if (k == "effect_scope") s.effect_scope = choice(v, k, {"subsection", "all"}) == "subsection" ? EffectScope::kSubsection : EffectScope::kAllExamples;
    else if (k == "chunk_size") s.chunk_size = config_value<std::size_t>(v, k);
    else throw ConfigError("config: unknown key 'exp1." + k + "'");
  }
  if (!(s.epsilon > 0.0)) throw ConfigError("config: exp1.epsilon must be > 0");
  if (s.chunk_size == 0) throw ConfigError("config: exp1.chunk_size must be > 0");
}

inline void parse_exp2(const nlohmann::json& j, Exp2Settings& s) {
  for (const auto& [k, v] : j.items()) {
    if (k == "pooling") s.pooling = choice(v, k, {"max", "mean"}) == "max" ? Pooling::kMax : Pooling::kMean;
    else if (k == "validation_fraction") s.validation_fraction = config_value<double>(v, k);
    else if (k == "probe") s.probe = ProbeHyperparameters::from_json(v);
    else if (k == "head_permutations") s.head_permutations = config_value<std::size_t>(v, k);
    else if (k == "neuron_permutations") s.neuron_permutations = config_value<std::size_t>(v, k);
    else if (k == "top_head_fraction") s.top_head_fraction = config_value<double>(v, k);
    else if (k == "selection") s.selection = choice(v, k, {"positive", "top_k"}) == "positive" ? NeuronSelection::kPositive : NeuronSelection::kTopK;
    else if (k == "top_k") s.top_k = config_value<std::size_t>(v, k);
    else if (k == "embedding_study") s.embedding_study = config_value<bool>(v, k);
    else throw ConfigError("config: unknown key 'exp2." + k + "'");
  }
  if (!(s.validation_fraction >= 0.0 && s.validation_fraction < 1.0)) {
    throw ConfigError("config: exp2.validation_fraction must be in [0, 1)");
  }
  if (s.head_permutations == 0 || s.neuron_permutations == 0) {
    throw ConfigError("config: permutation counts must be positive");
  }
  if (!(s.top_head_fraction > 0.0 && s.top_head_fraction <= 1.0)) {
    throw ConfigError("config: exp2.top_head_fraction must be in (0, 1]");
  }
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

}  // namespace detail

// Strict parse: unknown keys and wrong types are errors; "seed" is required.
inline RunConfig parse_run_config(const nlohmann::json& j,
                                  const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
  RunConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") c.seed = detail::config_value<std::uint64_t>(v, k);
    else if (k == "threads") c.threads = detail::config_value<std::size_t>(v, k);
    else if (k == "output_dir") c.output_dir = detail::config_value<std::string>(v, k);
    else if (k == "weights") c.weights = detail::config_value<std::string>(v, k);
    else if (k == "model_config") c.model_config = detail::config_value<std::string>(v, k);
    else if (k == "vocab") c.vocab = detail::config_value<std::string>(v, k);
    else if (k == "merges") c.merges = detail::config_value<std::string>(v, k);
    else if (k == "dataset") c.dataset = detail::config_value<std::string>(v, k);
    else if (k == "cache_dir") c.cache_dir = detail::config_value<std::string>(v, k);
    else if (k == "limit_examples") c.limit_examples = detail::config_value<std::size_t>(v, k);
    else if (k == "prepend_bos") c.sequence.prepend_bos = detail::config_value<bool>(v, k);
    else if (k == "intersentence_scoring") {
      c.intersentence = detail::choice(v, k, {"continuation", "all"}) == "continuation"
                            ? IntersentenceScoring::kContinuationOnly
                            : IntersentenceScoring::kAllTokens;
    } else if (k == "exp1") detail::parse_exp1(v, c.exp1);
    else if (k == "exp2") detail::parse_exp2(v, c.exp2);
    else throw ConfigError("config: unknown key '" + k + "'");
  }
  if (c.threads == 0) c.threads = 1;
  for (std::string* p : {&c.output_dir, &c.weights, &c.model_config, &c.vocab,
                         &c.merges, &c.dataset, &c.cache_dir}) {
    *p = detail::resolve(base_dir, *p);
  }
  c.exp2.probe.threads = c.threads;
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return parse_run_config(j, std::filesystem::path(path).parent_path());
}

// Checks that the listed inputs exist before any compute starts.
inline void require_inputs(const RunConfig& c, bool model, bool dataset) {
  auto need = [](const std::string& what, const std::string& p) {
    if (p.empty()) throw ConfigError("config: '" + what + "' is required");
    if (!std::filesystem::is_regular_file(p)) {
      throw InputError(what + " file not found: " + p);
    }
  };
  if (model) {
    need("weights", c.weights);
    need("vocab", c.vocab);
    need("merges", c.merges);
    if (!c.model_config.empty()) need("model_config", c.model_config);
  }
  if (dataset) need("dataset", c.dataset);
}

}  // namespace stereoprobe
