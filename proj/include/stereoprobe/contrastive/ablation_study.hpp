#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/text.hpp"
#include "stereoprobe/contrastive/scoring.hpp"
#include "stereoprobe/dataset/sequences.hpp"
#include "stereoprobe/metrics/scorer.hpp"

namespace stereoprobe {

// Runs the three candidates of an example through the model and averages
// every layout coordinate over each candidate's span.
inline CandidateActivations collect_candidate_activations(
    const Transformer& model, const Tokenizer& tokenizer,
    const TripletExample& example, const SequenceOptions& options = {}) {
  CandidateActivations acts;
  for (CandidateKind kind : kAllCandidates) {
    const EncodedCandidate enc =
        encode_candidate(tokenizer, example, kind, options);
    ForwardOptions fo;
    fo.compute_logits = false;
    const ForwardTrace trace = model.forward(enc.tokens, {}, fo);
    acts.values[static_cast<std::size_t>(kind)] =
        span_mean_activations(trace, model.config(), enc.candidate_span);
  }
  return acts;
}

// Scores every example without holding all activations at once. Examples are
// extracted in parallel blocks and folded in example order.
inline ScoreTable score_examples_with_model(
    const Transformer& model, const Tokenizer& tokenizer,
    const std::vector<TripletExample>& examples,
    const ScoringOptions& options = {}, const SequenceOptions& sequence = {},
    std::size_t threads = 1) {
  ScoreAccumulator acc(options);
  const std::size_t block = std::max<std::size_t>(1, threads) * 4;
  for (std::size_t begin = 0; begin < examples.size(); begin += block) {
    const std::size_t n = std::min(block, examples.size() - begin);
    std::vector<CandidateActivations> acts(n);
    parallel_for(n, threads, [&](std::size_t i) {
      acts[i] = collect_candidate_activations(model, tokenizer,
                                              examples[begin + i], sequence);
    });
    for (std::size_t i = 0; i < n; ++i) {
      acc.add(subsection_of(examples[begin + i]), acts[i]);
    }
  }
  ScoreTable table = acc.finish();
  std::vector<SubsectionKey> expected;
  for (const auto& e : examples) expected.push_back(subsection_of(e));
  std::sort(expected.begin(), expected.end());
  expected.erase(std::unique(expected.begin(), expected.end()), expected.end());
  note_empty_subsections(table, expected);
  return table;
}

enum class EffectScope {
  kSubsection,   // the neuron's own subsection
  kAllExamples,  // the whole example list
};

struct AblationStudyOptions {
  EffectScope scope = EffectScope::kSubsection;
  std::size_t threads = 1;
};

struct NeuronEffect {
  NeuronScore neuron;
  double effect_percent = 0.0;  // mean relative drop in stereotype LL, x100
  std::size_t examples = 0;
};

struct EffectSummary {
  Component component = Component::kEmbedding;
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  double fraction_negative = 0.0;
};

struct AblationStudy {
  std::vector<NeuronEffect> effects;
  std::vector<EffectSummary> summaries;  // one per component present

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto& s = j["summary"] = nlohmann::ordered_json::array();
    for (const auto& e : summaries) {
      s.push_back({{"component", to_string(e.component)},
                   {"count", e.count},
                   {"mean_effect_percent", e.mean},
                   {"median_effect_percent", e.median},
                   {"max_effect_percent", e.max},
                   {"fraction_negative", e.fraction_negative}});
    }
    auto& a = j["effects"] = nlohmann::ordered_json::array();
    for (const auto& e : effects) {
      auto row = score_json(e.neuron);
      row["effect_percent"] = e.effect_percent;
      row["examples"] = e.examples;
      a.push_back(std::move(row));
    }
    return j;
  }
};

// (base - ablated) / |base| * 100 for mean log-likelihoods.
inline double relative_effect_percent(double base, double ablated) {
  if (base == ablated) return 0.0;
  return (base - ablated) / std::max(std::abs(base), 1e-300) * 100.0;
}

inline EffectSummary summarize_effects(Component component,
                                       const std::vector<double>& values) {
  EffectSummary s;
  s.component = component;
  s.count = values.size();
  if (values.empty()) return s;
  const RatioStatistics st = ratio_statistics(values);
  s.mean = st.mean;
  s.median = st.median;
  s.max = st.max;
  const auto neg = std::count_if(values.begin(), values.end(),
                                 [](double v) { return v < 0.0; });
  s.fraction_negative =
      static_cast<double>(neg) / static_cast<double>(values.size());
  return s;
}

// Ablates each listed neuron alone and measures the relative change in the
// stereotype candidate's mean log-likelihood.
inline AblationStudy single_neuron_ablation_study(
    const std::vector<NeuronScore>& neurons,
    const std::vector<TripletExample>& examples, const CandidateScorer& scorer,
    const AblationStudyOptions& options = {}) {
  std::vector<double> base(examples.size());
  parallel_for(examples.size(), options.threads, [&](std::size_t i) {
    base[i] = scorer.log_likelihood(examples[i], CandidateKind::kStereotype, {});
  });
  std::map<SubsectionKey, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    members[subsection_of(examples[i])].push_back(i);
  }
  std::vector<std::size_t> all(examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  AblationStudy study;
  study.effects.resize(neurons.size());
  parallel_for(neurons.size(), options.threads, [&](std::size_t n) {
    const NeuronScore& ns = neurons[n];
    const std::vector<std::size_t>* idx = &all;
    std::vector<std::size_t> none;
    if (options.scope == EffectScope::kSubsection) {
      const auto it = members.find(ns.subsection);
      idx = it == members.end() ? &none : &it->second;
    }
    AblationMask mask;
    mask.add(ns.coordinate);
    double sum = 0.0;
    for (std::size_t i : *idx) {
      const double ablated = scorer.log_likelihood(
          examples[i], CandidateKind::kStereotype, mask);
      sum += relative_effect_percent(base[i], ablated);
    }
    NeuronEffect& e = study.effects[n];
    e.neuron = ns;
    e.examples = idx->size();
    e.effect_percent = idx->empty() ? 0.0 : sum / static_cast<double>(idx->size());
  });
  for (Component c : kAllComponents) {
    std::vector<double> values;
    for (const auto& e : study.effects) {
      if (e.neuron.coordinate.component == c) values.push_back(e.effect_percent);
    }
    if (!values.empty()) study.summaries.push_back(summarize_effects(c, values));
  }
  return study;
}

// Top `per_component` neurons of each component, in ranking order.
inline std::vector<NeuronScore> top_per_component(
    const std::vector<NeuronScore>& scores, std::size_t per_component) {
  std::vector<NeuronScore> out;
  for (Component c : kAllComponents) {
    auto top = top_k(scores, per_component, c);
    out.insert(out.end(), top.begin(), top.end());
  }
  return out;
}

inline std::string scores_csv(const std::vector<NeuronScore>& scores) {
  std::string out = csv_row({"component", "layer", "head", "neuron", "bias_type",
                             "target", "score", "samples"});
  for (const auto& s : scores) {
    const auto& c = s.coordinate;
    out += csv_row({to_string(c.component), std::to_string(c.layer),
                    std::to_string(c.head), std::to_string(c.neuron),
                    to_string(s.subsection.bias_type), s.subsection.target,
                    format_number(s.score), std::to_string(s.sample_count)});
  }
  return out;
}

}  // namespace stereoprobe
