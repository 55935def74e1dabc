#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/contrastive/layout.hpp"
#include "stereoprobe/dataset/stereoset.hpp"
#include "stereoprobe/model/transformer.hpp"
#include "stereoprobe/tokenizer/bpe.hpp"

namespace stereoprobe {

// Span-averaged activations of the three candidates over every coordinate
// of an ActivationLayout, indexed by CandidateKind.
struct CandidateActivations {
  std::array<std::vector<double>, 3> values;

  const std::vector<double>& of(CandidateKind k) const {
    return values[static_cast<std::size_t>(k)];
  }
};

// Mean over the span tokens of the embedding, pre-W_O attention and
// pre-residual FFN captures, in ActivationLayout order.
inline std::vector<double> span_mean_activations(const ForwardTrace& trace,
                                                 const ModelConfig& config,
                                                 TokenSpan span) {
  if (span.end <= span.start || span.end > trace.n_tokens) {
    throw InputError("activation extraction: empty or out-of-range span");
  }
  const ActivationLayout layout(config);
  const std::size_t d = config.d_model;
  const std::size_t L = config.n_layers;
  std::vector<double> out(layout.size(), 0.0);
  for (std::size_t t = span.start; t < span.end; ++t) {
    const auto emb = trace.embeddings.row(t);
    for (std::size_t j = 0; j < d; ++j) out[j] += emb[j];
    for (std::size_t l = 0; l < L; ++l) {
      const auto mha = trace.at(trace.mha_out, l, t);
      const auto ffn = trace.at(trace.ffn_out, l, t);
      double* mo = out.data() + d + l * d;
      double* fo = out.data() + d * (1 + L) + l * d;
      for (std::size_t j = 0; j < d; ++j) {
        mo[j] += mha[j];
        fo[j] += ffn[j];
      }
    }
  }
  const auto n = static_cast<double>(span.length());
  for (double& v : out) v /= n;
  return out;
}

inline CandidateActivations extract_candidate_activations(
    const std::array<const ForwardTrace*, 3>& traces,
    const std::array<TokenSpan, 3>& spans, const ModelConfig& config) {
  CandidateActivations acts;
  for (std::size_t k = 0; k < 3; ++k) {
    acts.values[k] = span_mean_activations(*traces[k], config, spans[k]);
  }
  return acts;
}

enum class RatioMode {
  // |a_s| / max(|a_x|, eps): how strongly the unit fires, sign ignored.
  kMagnitude,
  // a_s / (sign(a_x) * max(|a_x|, eps)).
  kSigned,
};

struct RatioScore {
  double value = 1.0;
  bool degenerate = false;  // a denominator hit the epsilon floor
};

// 0.5 * (a_s / a_a + a_s / a_r) under the chosen sign convention with an
// epsilon floor on denominators. A term whose numerator and denominator
// have equal magnitude is exactly 1.
inline RatioScore relative_ratio(double a_s, double a_a, double a_r,
                                 double eps,
                                 RatioMode mode = RatioMode::kMagnitude) {
  if (!(eps > 0.0)) throw InputError("relative ratio: epsilon must be > 0");
  RatioScore out;
  auto term = [&](double denom) {
    if (mode == RatioMode::kMagnitude) {
      if (std::abs(a_s) == std::abs(denom)) return 1.0;
      if (std::abs(denom) < eps) out.degenerate = true;
      return std::abs(a_s) / std::max(std::abs(denom), eps);
    }
    if (a_s == denom) return 1.0;
    if (std::abs(denom) < eps) out.degenerate = true;
    const double floored = std::max(std::abs(denom), eps);
    return a_s / (denom < 0.0 ? -floored : floored);
  };
  out.value = 0.5 * (term(a_a) + term(a_r));
  return out;
}

inline double relative_ratio_score(double a_s, double a_a, double a_r,
                                   double eps,
                                   RatioMode mode = RatioMode::kMagnitude) {
  return relative_ratio(a_s, a_a, a_r, eps, mode).value;
}

struct ScoringOptions {
  double epsilon = 1e-8;
  RatioMode mode = RatioMode::kMagnitude;
};

struct ScoringSample {
  SubsectionKey subsection;
  CandidateActivations activations;
};

struct SubsectionScores {
  SubsectionKey key;
  std::size_t sample_count = 0;
  std::vector<double> scores;              // per layout coordinate
  std::vector<std::uint32_t> degenerate;   // floor hits per coordinate
};

struct NeuronScore {
  NeuronCoordinate coordinate;
  SubsectionKey subsection;
  double score = 0.0;
  std::size_t sample_count = 0;
};

struct ScoreTable {
  std::size_t coordinate_count = 0;
  std::vector<SubsectionScores> subsections;  // sorted by key
  std::vector<std::string> warnings;
};

// Streaming form of the subsection scoring: per-example ratio scores are
// summed per coordinate within each (bias type, target) subsection in the
// order samples are added; no comparison crosses subsections.
class ScoreAccumulator {
 public:
  explicit ScoreAccumulator(ScoringOptions options = {}) : options_(options) {}

  void add(const SubsectionKey& key, const CandidateActivations& acts) {
    const std::size_t n = acts.values[0].size();
    if (coordinate_count_ == 0) coordinate_count_ = n;
    for (const auto& v : acts.values) {
      if (v.size() != coordinate_count_ || v.empty()) {
        throw InputError("score_all: activation vectors differ in length");
      }
    }
    SubsectionScores& sub = groups_[key];
    if (sub.scores.empty()) {
      sub.key = key;
      sub.scores.assign(coordinate_count_, 0.0);
      sub.degenerate.assign(coordinate_count_, 0);
    }
    ++sub.sample_count;
    const auto& as = acts.of(CandidateKind::kStereotype);
    const auto& aa = acts.of(CandidateKind::kAntiStereotype);
    const auto& ar = acts.of(CandidateKind::kUnrelated);
    for (std::size_t c = 0; c < coordinate_count_; ++c) {
      const RatioScore r =
          relative_ratio(as[c], aa[c], ar[c], options_.epsilon, options_.mode);
      sub.scores[c] += r.value;
      sub.degenerate[c] += r.degenerate;
    }
  }

  ScoreTable finish() const {
    ScoreTable table;
    table.coordinate_count = coordinate_count_;
    for (const auto& [key, acc] : groups_) {
      SubsectionScores sub = acc;
      for (double& v : sub.scores) v /= static_cast<double>(sub.sample_count);
      table.subsections.push_back(std::move(sub));
    }
    return table;
  }

 private:
  ScoringOptions options_;
  std::size_t coordinate_count_ = 0;
  std::map<SubsectionKey, SubsectionScores> groups_;
};

inline ScoreTable score_all(const std::vector<ScoringSample>& samples,
                            const ScoringOptions& options = {}) {
  ScoreAccumulator acc(options);
  for (const auto& s : samples) acc.add(s.subsection, s.activations);
  return acc.finish();
}

// Subsections with no usable sample are reported, not scored.
inline void note_empty_subsections(
    ScoreTable& table, const std::vector<SubsectionKey>& expected) {
  for (const auto& key : expected) {
    const bool present = std::any_of(
        table.subsections.begin(), table.subsections.end(),
        [&](const SubsectionScores& s) { return s.key == key; });
    if (!present) {
      table.warnings.push_back("subsection " + key.label() +
                               " has no usable examples; skipped");
    }
  }
}

inline std::vector<NeuronScore> flatten_scores(const ScoreTable& table,
                                               const ModelConfig& config) {
  const ActivationLayout layout(config);
  if (layout.size() != table.coordinate_count) {
    throw ConfigError("score table does not match model layout");
  }
  std::vector<NeuronScore> out;
  out.reserve(table.subsections.size() * table.coordinate_count);
  for (const auto& sub : table.subsections) {
    for (std::size_t c = 0; c < table.coordinate_count; ++c) {
      out.push_back({layout.coordinate_at(c), sub.key, sub.scores[c],
                     sub.sample_count});
    }
  }
  return out;
}

// Descending score; ties by (component, layer, head, neuron), then key.
inline bool score_order(const NeuronScore& a, const NeuronScore& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.coordinate != b.coordinate) return a.coordinate < b.coordinate;
  return a.subsection < b.subsection;
}

inline std::vector<NeuronScore> top_k(const std::vector<NeuronScore>& scores,
                                      std::size_t k,
                                      std::optional<Component> component = {}) {
  std::vector<const NeuronScore*> pool;
  for (const auto& s : scores) {
    if (!component || s.coordinate.component == *component) pool.push_back(&s);
  }
  k = std::min(k, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k),
                    pool.end(), [](const NeuronScore* a, const NeuronScore* b) {
                      return score_order(*a, *b);
                    });
  std::vector<NeuronScore> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(*pool[i]);
  return out;
}

struct RatioStatistics {
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  std::size_t count = 0;
  // Right skew: a few extreme ratios pull the mean above the median.
  bool heavy_tail() const { return mean > median; }
};

inline RatioStatistics ratio_statistics(std::vector<double> values) {
  RatioStatistics s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  s.max = values.back();
  return s;
}

struct ComponentRanking {
  Component component;
  std::vector<NeuronScore> top;
  std::array<std::size_t, 4> bias_type_counts{};  // by BiasType
  std::vector<std::size_t> layer_histogram;       // empty for embeddings
};

struct Tabulation {
  std::size_t k = 0;
  std::vector<ComponentRanking> rankings;  // embedding, mha, ffn
  // [bias type][component]
  std::array<std::array<RatioStatistics, 3>, 4> statistics{};
  std::array<std::array<bool, 3>, 4> has_statistics{};
  std::vector<std::string> notes;

  nlohmann::ordered_json to_json() const;
};

inline nlohmann::ordered_json score_json(const NeuronScore& s) {
  return {{"component", to_string(s.coordinate.component)},
          {"layer", s.coordinate.layer},
          {"head", s.coordinate.head},
          {"neuron", s.coordinate.neuron},
          {"bias_type", to_string(s.subsection.bias_type)},
          {"target", s.subsection.target},
          {"score", s.score},
          {"samples", s.sample_count}};
}

inline nlohmann::ordered_json Tabulation::to_json() const {
  nlohmann::ordered_json j;
  j["k"] = k;
  auto& stats = j["ratio_statistics"] = nlohmann::ordered_json::array();
  for (Component c : kAllComponents) {
    for (BiasType b : kAllBiasTypes) {
      const auto bi = static_cast<std::size_t>(b);
      const auto ci = static_cast<std::size_t>(c);
      if (!has_statistics[bi][ci]) continue;
      const auto& s = statistics[bi][ci];
      stats.push_back({{"component", to_string(c)},
                       {"bias_type", to_string(b)},
                       {"mean", s.mean},
                       {"median", s.median},
                       {"max", s.max},
                       {"count", s.count},
                       {"heavy_tail", s.heavy_tail()}});
    }
  }
  auto dist = nlohmann::ordered_json::object();
  auto layers = nlohmann::ordered_json::object();
  auto tops = nlohmann::ordered_json::object();
  for (const auto& r : rankings) {
    const auto name = to_string(r.component);
    for (BiasType b : kAllBiasTypes) {
      dist[name][to_string(b)] = r.bias_type_counts[static_cast<std::size_t>(b)];
    }
    if (!r.layer_histogram.empty()) layers[name] = r.layer_histogram;
    auto& list = tops[name] = nlohmann::ordered_json::array();
    for (const auto& s : r.top) list.push_back(score_json(s));
  }
  j["bias_type_distribution"] = std::move(dist);
  j["layer_distribution"] = std::move(layers);
  j["top"] = std::move(tops);
  j["notes"] = notes;
  return j;
}

// Top-K per component with bias-type counts and per-layer histograms, plus
// mean/median/max of every score per (bias type, component).
inline Tabulation rank_and_tabulate(const std::vector<NeuronScore>& scores,
                                    std::size_t k, std::size_t n_layers) {
  Tabulation tab;
  tab.k = k;
  std::array<std::array<std::vector<double>, 3>, 4> cells;
  for (const auto& s : scores) {
    cells[static_cast<std::size_t>(s.subsection.bias_type)]
         [static_cast<std::size_t>(s.coordinate.component)]
             .push_back(s.score);
  }
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (cells[b][c].empty()) continue;
      tab.has_statistics[b][c] = true;
      tab.statistics[b][c] = ratio_statistics(std::move(cells[b][c]));
    }
  }
  for (Component c : kAllComponents) {
    ComponentRanking r;
    r.component = c;
    r.top = top_k(scores, k, c);
    if (r.top.size() < k) {
      tab.notes.push_back("component " + to_string(c) + ": only " +
                          std::to_string(r.top.size()) +
                          " scores available; top-" + std::to_string(k) +
                          " truncated");
    }
    if (c != Component::kEmbedding) r.layer_histogram.assign(n_layers, 0);
    for (const auto& s : r.top) {
      ++r.bias_type_counts[static_cast<std::size_t>(s.subsection.bias_type)];
      if (c != Component::kEmbedding) {
        ++r.layer_histogram[static_cast<std::size_t>(s.coordinate.layer)];
      }
    }
    tab.rankings.push_back(std::move(r));
  }
  return tab;
}

}  // namespace stereoprobe
