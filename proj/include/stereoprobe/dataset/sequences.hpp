#pragma once

#include <vector>

#include "stereoprobe/dataset/stereoset.hpp"
#include "stereoprobe/tokenizer/bpe.hpp"

namespace stereoprobe {

struct SequenceOptions {
  // Prefix every sequence with the tokenizer's <|endoftext|> token (when the
  // vocabulary has one) so the first real token is also predicted.
  bool prepend_bos = true;
};

// A candidate's scored text as model input.
struct EncodedCandidate {
  std::vector<TokenId> tokens;
  // Tokens carrying the candidate: the filled-in word pieces (intrasentence)
  // or the continuation (intersentence). Indices are into `tokens`.
  TokenSpan candidate_span;
  // Number of prefix tokens (0 or 1) before the text proper.
  std::size_t prefix = 0;
};

inline EncodedCandidate encode_candidate(const Tokenizer& tokenizer,
                                         const TripletExample& example,
                                         CandidateKind kind,
                                         const SequenceOptions& options = {}) {
  EncodedCandidate out;
  const auto with_offsets =
      tokenizer.encode_with_offsets(example.scored_text(kind));
  if (options.prepend_bos && tokenizer.bos_id()) {
    out.tokens.push_back(*tokenizer.bos_id());
    out.prefix = 1;
  }
  for (const auto& t : with_offsets) out.tokens.push_back(t.id);
  const auto [b0, b1] = example.candidate_bytes(kind);
  if (b1 <= b0) {
    throw InputError("example " + example.id + ": candidate '" +
                     to_string(kind) + "' does not align with its template");
  }
  TokenSpan span = span_for_byte_range(with_offsets, b0, b1);
  span.start += out.prefix;
  span.end += out.prefix;
  out.candidate_span = span;
  return out;
}

}  // namespace stereoprobe
