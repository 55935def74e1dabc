#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/dataset/stereoset.hpp"

namespace stereoprobe {

// A stereotype/anti-stereotype representation pair, concatenated in a random
// order. The probe label is the order flag: 1 when the stereotype comes first.
struct ProbePair {
  std::string example_id;
  std::size_t example_index = 0;
  BiasType bias_type = BiasType::kRace;
  TaskFormat format = TaskFormat::kIntrasentence;
  bool stereo_first = false;
  std::vector<float> features;  // 2 x per-sentence length

  int label() const { return stereo_first ? 1 : 0; }
  std::size_t half() const { return features.size() / 2; }
  std::span<const float> stereo_features() const {
    return std::span<const float>(features).subspan(stereo_first ? 0 : half(),
                                                    half());
  }
  std::span<const float> anti_features() const {
    return std::span<const float>(features).subspan(stereo_first ? half() : 0,
                                                    half());
  }
};

struct ProbeCorpus {
  std::vector<ProbePair> pairs;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::size_t sentence_feature_length = 0;

  std::size_t input_length() const { return 2 * sentence_feature_length; }

  // Ids, order flags and split assignment, for exact reproducibility.
  nlohmann::ordered_json manifest() const {
    std::vector<char> is_val(pairs.size(), 0);
    for (auto i : validation) is_val[i] = 1;
    nlohmann::ordered_json j;
    j["n_pairs"] = pairs.size();
    j["sentence_feature_length"] = sentence_feature_length;
    j["n_train"] = train.size();
    j["n_validation"] = validation.size();
    auto& rows = j["pairs"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      rows.push_back({{"id", pairs[i].example_id},
                      {"format", to_string(pairs[i].format)},
                      {"bias_type", to_string(pairs[i].bias_type)},
                      {"stereo_first", pairs[i].stereo_first},
                      {"split", is_val[i] ? "validation" : "train"}});
    }
    return j;
  }
};

struct CorpusOptions {
  double validation_fraction = 0.2;
  std::size_t threads = 1;
};

// Per-sentence features for one candidate of one example.
using SentenceFeatureFn =
    std::function<std::vector<float>(const TripletExample&, CandidateKind)>;

// Seeded 80/20 (by default) split, stratified by bias type. Every stratum
// is shuffled with its own named sub-stream.
inline void assign_split(ProbeCorpus& corpus, std::uint64_t seed,
                         double validation_fraction) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must be in [0, 1)");
  }
  corpus.train.clear();
  corpus.validation.clear();
  for (BiasType b : kAllBiasTypes) {
    std::vector<std::size_t> stratum;
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
      if (corpus.pairs[i].bias_type == b) stratum.push_back(i);
    }
    Rng rng = make_rng(seed, "split", static_cast<std::uint64_t>(b));
    portable_shuffle(stratum, rng);
    const auto n_val = static_cast<std::size_t>(
        std::llround(validation_fraction * static_cast<double>(stratum.size())));
    corpus.validation.insert(corpus.validation.end(), stratum.begin(),
                             stratum.begin() + static_cast<std::ptrdiff_t>(n_val));
    corpus.train.insert(corpus.train.end(),
                        stratum.begin() + static_cast<std::ptrdiff_t>(n_val),
                        stratum.end());
  }
  std::sort(corpus.train.begin(), corpus.train.end());
  std::sort(corpus.validation.begin(), corpus.validation.end());
}

// One pair per example (either format). Order flags are drawn sequentially
// from the "dataset" stream, features are extracted in parallel.
inline ProbeCorpus build_probe_corpus(const std::vector<TripletExample>& examples,
                                      const SentenceFeatureFn& feature_fn,
                                      std::uint64_t seed,
                                      const CorpusOptions& options = {}) {
  ProbeCorpus corpus;
  corpus.pairs.resize(examples.size());
  Rng rng = make_rng(seed, "dataset");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto& p = corpus.pairs[i];
    p.example_id = examples[i].id;
    p.example_index = i;
    p.bias_type = examples[i].bias_type;
    p.format = examples[i].format;
    p.stereo_first = uniform01(rng) < 0.5;
  }
  std::vector<std::vector<float>> stereo(examples.size()), anti(examples.size());
  parallel_for(examples.size(), options.threads, [&](std::size_t i) {
    stereo[i] = feature_fn(examples[i], CandidateKind::kStereotype);
    anti[i] = feature_fn(examples[i], CandidateKind::kAntiStereotype);
  });
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::size_t n = stereo[i].size();
    if (i == 0) corpus.sentence_feature_length = n;
    if (n == 0 || n != corpus.sentence_feature_length ||
        anti[i].size() != n) {
      throw InputError("probe corpus: feature length mismatch at example " +
                       examples[i].id);
    }
    auto& p = corpus.pairs[i];
    const auto& first = p.stereo_first ? stereo[i] : anti[i];
    const auto& second = p.stereo_first ? anti[i] : stereo[i];
    p.features.reserve(2 * n);
    p.features.insert(p.features.end(), first.begin(), first.end());
    p.features.insert(p.features.end(), second.begin(), second.end());
    std::vector<float>().swap(stereo[i]);
    std::vector<float>().swap(anti[i]);
  }
  assign_split(corpus, seed, options.validation_fraction);
  return corpus;
}

}  // namespace stereoprobe
