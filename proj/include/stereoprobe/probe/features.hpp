#pragma once

#include <algorithm>
#include <limits>
#include <span>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/dataset/probe_corpus.hpp"
#include "stereoprobe/dataset/sequences.hpp"
#include "stereoprobe/model/transformer.hpp"

namespace stereoprobe {

enum class Pooling { kMax, kMean };

// Per-head attention activations (before W_O), pooled over token positions
// [begin, end). Layout: layer-major, then head, then head dimension, so
// feature l*d_model + h*d_head + j is neuron j of head h in layer l.
inline std::vector<float> pool_head_activations(const ForwardTrace& trace,
                                                const ModelConfig& config,
                                                std::size_t begin,
                                                std::size_t end,
                                                Pooling pooling = Pooling::kMax) {
  if (end <= begin || end > trace.n_tokens) {
    throw InputError("sentence features: empty token range");
  }
  const std::size_t d = config.d_model;
  const std::size_t L = config.n_layers;
  std::vector<float> out(L * d);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < d; ++j) {
      if (pooling == Pooling::kMax) {
        float m = -std::numeric_limits<float>::infinity();
        for (std::size_t t = begin; t < end; ++t) {
          m = std::max(m, trace.at(trace.mha_out, l, t)[j]);
        }
        out[l * d + j] = m;
      } else {
        double s = 0.0;
        for (std::size_t t = begin; t < end; ++t) {
          s += trace.at(trace.mha_out, l, t)[j];
        }
        out[l * d + j] = static_cast<float>(s / static_cast<double>(end - begin));
      }
    }
  }
  return out;
}

// Features of raw token ids, pooled over every position.
inline std::vector<float> extract_sentence_features(
    const Transformer& model, std::span<const TokenId> tokens,
    Pooling pooling = Pooling::kMax) {
  if (tokens.empty()) throw InputError("sentence features: empty sentence");
  ForwardOptions fo;
  fo.compute_logits = false;
  const ForwardTrace trace = model.forward(tokens, {}, fo);
  return pool_head_activations(trace, model.config(), 0, tokens.size(), pooling);
}

struct FeatureOptions {
  SequenceOptions sequence;
  Pooling pooling = Pooling::kMax;
};

// Features of one candidate. A leading BOS token conditions the pass but is
// not pooled. Intrasentence candidates pool the whole sentence; intersentence
// candidates pool their continuation tokens, with the context as prefix.
inline std::vector<float> candidate_features(const Transformer& model,
                                             const Tokenizer& tokenizer,
                                             const TripletExample& example,
                                             CandidateKind kind,
                                             const FeatureOptions& options = {}) {
  const EncodedCandidate enc =
      encode_candidate(tokenizer, example, kind, options.sequence);
  if (enc.tokens.size() <= enc.prefix) {
    throw InputError("example " + example.id + ": empty sentence");
  }
  ForwardOptions fo;
  fo.compute_logits = false;
  const ForwardTrace trace = model.forward(enc.tokens, {}, fo);
  std::size_t begin = enc.prefix;
  std::size_t end = enc.tokens.size();
  if (example.format == TaskFormat::kIntersentence) {
    begin = enc.candidate_span.start;
    end = enc.candidate_span.end;
  }
  return pool_head_activations(trace, model.config(), begin, end,
                               options.pooling);
}

inline SentenceFeatureFn head_feature_fn(const Transformer& model,
                                         const Tokenizer& tokenizer,
                                         FeatureOptions options = {}) {
  return [&model, &tokenizer, options](const TripletExample& e,
                                       CandidateKind k) {
    return candidate_features(model, tokenizer, e, k, options);
  };
}

enum class EmbeddingSource {
  kEncoding,    // x_0 = token embedding + position embedding
  kPositional,  // position embedding rows only
};

inline const char* to_string(EmbeddingSource s) {
  return s == EmbeddingSource::kEncoding ? "encoding" : "positional";
}

// Mean over the sentence tokens (BOS excluded) of the chosen embedding.
inline std::vector<float> embedding_features(const Transformer& model,
                                             const Tokenizer& tokenizer,
                                             const TripletExample& example,
                                             CandidateKind kind,
                                             EmbeddingSource source,
                                             const SequenceOptions& sequence = {}) {
  const EncodedCandidate enc =
      encode_candidate(tokenizer, example, kind, sequence);
  const std::size_t begin = enc.prefix;
  const std::size_t end = enc.tokens.size();
  if (end <= begin) throw InputError("example " + example.id + ": empty sentence");
  model.check_tokens(enc.tokens);
  const auto& w = model.weights();
  const std::size_t d = model.config().d_model;
  std::vector<double> acc(d, 0.0);
  for (std::size_t t = begin; t < end; ++t) {
    const auto pos = w.wpe.row(t);
    if (source == EmbeddingSource::kEncoding) {
      const auto tok = w.wte.row(static_cast<std::size_t>(enc.tokens[t]));
      for (std::size_t j = 0; j < d; ++j) {
        acc[j] += static_cast<double>(tok[j] + pos[j]);
      }
    } else {
      for (std::size_t j = 0; j < d; ++j) acc[j] += pos[j];
    }
  }
  std::vector<float> out(d);
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = static_cast<float>(acc[j] / static_cast<double>(end - begin));
  }
  return out;
}

}  // namespace stereoprobe
