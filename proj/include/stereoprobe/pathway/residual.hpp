#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/text.hpp"
#include "stereoprobe/dataset/sequences.hpp"
#include "stereoprobe/model/transformer.hpp"

namespace stereoprobe {

// A direction in the residual stream with its squared norm cached.
class BiasDirection {
 public:
  explicit BiasDirection(std::vector<double> v) : v_(std::move(v)) {
    for (double x : v_) {
      if (!std::isfinite(x)) throw InputError("bias direction is not finite");
      norm2_ += x * x;
    }
    if (!(norm2_ > 0.0)) throw ComputeError("bias direction is zero");
  }

  const std::vector<double>& vector() const { return v_; }
  double norm_squared() const { return norm2_; }
  std::size_t size() const { return v_.size(); }

 private:
  std::vector<double> v_;
  double norm2_ = 0.0;
};

// Coefficient of the projection of x onto v: (x . v) / |v|^2.
inline double projection_strength(std::span<const double> x,
                                  const BiasDirection& v) {
  if (x.size() != v.size()) {
    throw InputError("projection_strength: dimension " + std::to_string(x.size()) +
                     " vs " + std::to_string(v.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * v.vector()[i];
  return dot / v.norm_squared();
}

inline std::vector<double> apply_stream_update(std::span<const double> x,
                                               std::span<const double> delta) {
  if (x.size() != delta.size()) {
    throw InputError("apply_stream_update: dimension mismatch");
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + delta[i];
  return out;
}

// Removes a component from the stream (the ablation counterpart of an update).
inline std::vector<double> subtract_stream_component(std::span<const double> x,
                                                     std::span<const double> delta) {
  if (x.size() != delta.size()) {
    throw InputError("subtract_stream_component: dimension mismatch");
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - delta[i];
  return out;
}

// Difference of means: mean(stereo) - mean(anti).
inline BiasDirection fit_bias_direction(const std::vector<std::vector<double>>& stereo,
                                        const std::vector<std::vector<double>>& anti) {
  if (stereo.size() != anti.size()) {
    throw InputError("fit_bias_direction: stereo and anti counts differ");
  }
  if (stereo.size() < 2) throw InputError("fit_bias_direction: need at least two pairs");
  const std::size_t d = stereo.front().size();
  std::vector<double> v(d, 0.0);
  for (std::size_t i = 0; i < stereo.size(); ++i) {
    if (stereo[i].size() != d || anti[i].size() != d) {
      throw InputError("fit_bias_direction: feature dimensions differ");
    }
    for (std::size_t j = 0; j < d; ++j) v[j] += stereo[i][j] - anti[i][j];
  }
  bool zero = true;
  for (double& x : v) {
    x /= static_cast<double>(stereo.size());
    if (x != 0.0) zero = false;
  }
  if (zero) throw ComputeError("fit_bias_direction: stereotype and anti-stereotype means coincide");
  return BiasDirection(std::move(v));
}

// Residual stream x_l after every block, averaged over a token span;
// entry 0 is the embedding stream x_0.
inline std::vector<std::vector<double>> span_mean_streams(const ForwardTrace& trace,
                                                          const ModelConfig& config,
                                                          TokenSpan span) {
  if (span.end <= span.start || span.end > trace.n_tokens) {
    throw InputError("stream capture: empty span");
  }
  const std::size_t d = config.d_model;
  std::vector<std::vector<double>> out(config.n_layers + 1, std::vector<double>(d, 0.0));
  for (std::size_t t = span.start; t < span.end; ++t) {
    const auto x0 = trace.embeddings.row(t);
    for (std::size_t j = 0; j < d; ++j) out[0][j] += x0[j];
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const auto xl = trace.at(trace.residual, l, t);
      for (std::size_t j = 0; j < d; ++j) out[l + 1][j] += xl[j];
    }
  }
  for (auto& row : out) {
    for (double& x : row) x /= static_cast<double>(span.length());
  }
  return out;
}

inline std::vector<std::vector<double>> candidate_streams(
    const Transformer& model, const Tokenizer& tokenizer,
    const TripletExample& example, CandidateKind kind, const AblationMask& mask,
    const SequenceOptions& sequence = {}) {
  const EncodedCandidate enc = encode_candidate(tokenizer, example, kind, sequence);
  ForwardOptions fo;
  fo.compute_logits = false;
  fo.keep_residuals = true;
  const ForwardTrace trace = model.forward(enc.tokens, mask, fo);
  return span_mean_streams(trace, model.config(), enc.candidate_span);
}

struct LayerProjection {
  std::size_t layer = 0;  // 0 is the embedding stream
  double baseline = 0.0;
  double ablated = 0.0;
};

struct ProjectionProfile {
  std::vector<LayerProjection> layers;

  std::string csv() const {
    std::string out = csv_row({"layer", "mean_strength_baseline", "mean_strength_ablated"});
    for (const auto& l : layers) {
      out += csv_row({std::to_string(l.layer), format_number(l.baseline),
                      format_number(l.ablated)});
    }
    return out;
  }
};

// Per layer: fits a difference-of-means direction from baseline stereotype
// and anti-stereotype streams, then reports the mean projection strength of
// the stereotype candidates with and without the mask.
inline ProjectionProfile layer_projection_profile(
    const Transformer& model, const Tokenizer& tokenizer,
    const std::vector<TripletExample>& examples, const AblationMask& mask,
    std::size_t threads = 1, const SequenceOptions& sequence = {}) {
  const std::size_t n = examples.size();
  std::vector<std::vector<std::vector<double>>> stereo(n), anti(n), ablated(n);
  parallel_for(n, threads, [&](std::size_t i) {
    stereo[i] = candidate_streams(model, tokenizer, examples[i],
                                  CandidateKind::kStereotype, {}, sequence);
    anti[i] = candidate_streams(model, tokenizer, examples[i],
                                CandidateKind::kAntiStereotype, {}, sequence);
    ablated[i] = candidate_streams(model, tokenizer, examples[i],
                                   CandidateKind::kStereotype, mask, sequence);
  });
  ProjectionProfile profile;
  for (std::size_t l = 0; l <= model.config().n_layers; ++l) {
    std::vector<std::vector<double>> s, a;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(stereo[i][l]);
      a.push_back(anti[i][l]);
    }
    const BiasDirection v = fit_bias_direction(s, a);
    LayerProjection row;
    row.layer = l;
    for (std::size_t i = 0; i < n; ++i) {
      row.baseline += projection_strength(stereo[i][l], v);
      row.ablated += projection_strength(ablated[i][l], v);
    }
    row.baseline /= static_cast<double>(n);
    row.ablated /= static_cast<double>(n);
    profile.layers.push_back(row);
  }
  return profile;
}

}  // namespace stereoprobe
