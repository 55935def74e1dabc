#pragma once

#include <array>

#include "stereoprobe/dataset/sequences.hpp"
#include "stereoprobe/dataset/stereoset.hpp"
#include "stereoprobe/model/transformer.hpp"

namespace stereoprobe {

// Mean log-likelihood of one candidate of an example under an ablation mask.
class CandidateScorer {
 public:
  virtual ~CandidateScorer() = default;
  virtual double log_likelihood(const TripletExample& example,
                                CandidateKind kind,
                                const AblationMask& mask) const = 0;
};

enum class IntersentenceScoring {
  // Average over continuation tokens only; the candidates differ only there.
  kContinuationOnly,
  // Average over every predicted token of context + continuation.
  kAllTokens,
};

struct ScorerOptions {
  SequenceOptions sequence;
  IntersentenceScoring intersentence = IntersentenceScoring::kContinuationOnly;
};

class SentenceScorer final : public CandidateScorer {
 public:
  SentenceScorer(const Transformer& model, const Tokenizer& tokenizer,
                 ScorerOptions options = {})
      : model_(model), tokenizer_(tokenizer), options_(options) {}

  double log_likelihood(const TripletExample& example, CandidateKind kind,
                        const AblationMask& mask) const override {
    const CompiledMask compiled(mask, model_.config());
    return log_likelihood(example, kind, compiled);
  }

  double log_likelihood(const TripletExample& example, CandidateKind kind,
                        const CompiledMask& mask) const {
    const EncodedCandidate enc =
        encode_candidate(tokenizer_, example, kind, options_.sequence);
    std::size_t from = 1;
    if (example.format == TaskFormat::kIntersentence &&
        options_.intersentence == IntersentenceScoring::kContinuationOnly) {
      from = std::max<std::size_t>(1, enc.candidate_span.start);
    }
    return model_.sequence_log_likelihood_compiled(enc.tokens, mask, from);
  }

  const Transformer& model() const { return model_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const ScorerOptions& options() const { return options_; }

 private:
  const Transformer& model_;
  const Tokenizer& tokenizer_;
  ScorerOptions options_;
};

}  // namespace stereoprobe
