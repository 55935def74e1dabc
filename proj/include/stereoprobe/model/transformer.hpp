#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/model/ablation.hpp"
#include "stereoprobe/model/config.hpp"
#include "stereoprobe/model/ops.hpp"
#include "stereoprobe/model/tensor.hpp"
#include "stereoprobe/model/weights.hpp"

namespace stereoprobe {

using TokenId = int;

struct ForwardOptions {
  bool compute_logits = true;
  // Logit rows [logits_begin, logits_end); logits_end == 0 means T.
  std::size_t logits_begin = 0;
  std::size_t logits_end = 0;
  bool keep_residuals = false;
  bool keep_attention = false;
};

// Activations captured by one forward pass. Attention and FFN captures are
// taken before the skip-connection addition, after ablation is applied.
struct ForwardTrace {
  std::size_t n_tokens = 0;
  Tensor embeddings;    // [T, d_model]  x_0 = WTE[token] + WPE[position]
  Tensor mha_out;       // [L, T, d_model] per-head context vectors before
                        // W_O; head h owns columns [h*d_head, (h+1)*d_head)
  Tensor attn_update;   // [L, T, d_model] attention output after W_O + b_O
  Tensor ffn_out;       // [L, T, d_model]
  Tensor residual_mid;  // [L, T, d_model] x_i^mid (keep_residuals)
  Tensor residual;      // [L, T, d_model] x_i     (keep_residuals)
  Tensor final_stream;  // [T, d_model] x_L
  Tensor attention;     // [L, H, T, T] (keep_attention)
  Tensor logits;        // [logits_end - logits_begin, vocab_size]
  std::size_t logits_begin = 0;

  // Row of a [L, T, d] capture.
  std::span<const float> at(const Tensor& capture, std::size_t layer,
                            std::size_t t) const {
    const std::size_t d = capture.dim(2);
    return {capture.data() + (layer * n_tokens + t) * d, d};
  }
};

struct MhaOutput {
  Tensor per_head;   // [T, d_model], head-major column blocks
  Tensor combined;   // [T, d_model]
  Tensor attention;  // [H, T, T] when requested
};

// Causal multi-head self-attention on an already normalized input `x`
// ([T, d_model]). Masked head neurons are zeroed before W_O recombination.
// When every head neuron of the layer is masked the sub-layer output is
// exactly zero (the output bias is dropped as well).
inline MhaOutput mha_forward(const Tensor& x, const LayerWeights& w,
                             const ModelConfig& config,
                             const CompiledMask& mask, std::size_t layer,
                             bool keep_attention = false) {
  const std::size_t T = x.dim(0);
  const std::size_t d = config.d_model;
  const std::size_t H = config.n_heads;
  const std::size_t dh = config.d_head;
  if (x.rank() != 2 || x.dim(1) != d || w.w_q.shape() != std::vector{d, d}) {
    throw ConfigError("mha_forward: shape mismatch");
  }
  if (T > config.max_positions) {
    throw InputError("mha_forward: sequence longer than max_positions");
  }
  Tensor q({T, d}), k({T, d}), v({T, d});
  linear(x.data(), T, w.w_q, w.b_q.data(), q.data());
  linear(x.data(), T, w.w_k, w.b_k.data(), k.data());
  linear(x.data(), T, w.w_v, w.b_v.data(), v.data());

  MhaOutput out;
  out.per_head = Tensor({T, d});
  if (keep_attention) out.attention = Tensor({H, T, T});
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> scores(T);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < T; ++t) {
      const std::span<float> row(scores.data(), t + 1);
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] = dot(q.data() + t * d + off, k.data() + s * d + off, dh) *
                 scale;
      }
      softmax_inplace(row);
      if (keep_attention) {
        for (std::size_t s = 0; s <= t; ++s) out.attention.at(h, t, s) = row[s];
      }
      float* z = out.per_head.data() + t * d + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const float p = row[s];
        const float* vs = v.data() + s * d + off;
        for (std::size_t j = 0; j < dh; ++j) z[j] += p * vs[j];
      }
    }
  }
  if (mask.any) {
    const auto& m = mask.mha[layer];
    for (std::size_t t = 0; t < T; ++t) {
      float* z = out.per_head.data() + t * d;
      for (std::size_t j = 0; j < d; ++j) {
        if (m[j]) z[j] = 0.0f;
      }
    }
  }
  out.combined = Tensor({T, d});
  if (!(mask.any && mask.mha_layer_full[layer])) {
    linear(out.per_head.data(), T, w.w_o, w.b_o.data(), out.combined.data());
  }
  return out;
}

inline MhaOutput mha_forward(const Tensor& x, const LayerWeights& w,
                             const ModelConfig& config,
                             const AblationMask& mask, std::size_t layer,
                             bool keep_attention = false) {
  return mha_forward(x, w, config, CompiledMask(mask, config), layer,
                     keep_attention);
}

// GELU(x W1 + b1) W2 + b2 on an already normalized input; masked output
// coordinates are zeroed before the skip addition.
inline Tensor ffn_forward(const Tensor& x, const LayerWeights& w,
                          const ModelConfig& config, const CompiledMask& mask,
                          std::size_t layer) {
  const std::size_t T = x.dim(0);
  const std::size_t d = config.d_model;
  if (x.rank() != 2 || x.dim(1) != d ||
      w.w1.shape() != std::vector{d, config.d_ff} ||
      w.w2.shape() != std::vector{config.d_ff, d}) {
    throw ConfigError("ffn_forward: shape mismatch");
  }
  Tensor hidden({T, config.d_ff});
  linear(x.data(), T, w.w1, w.b1.data(), hidden.data());
  for (float& h : hidden.values()) h = gelu(h);
  Tensor out({T, d});
  linear(hidden.data(), T, w.w2, w.b2.data(), out.data());
  if (mask.any) {
    const auto& m = mask.ffn[layer];
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        if (m[j]) out.at(t, j) = 0.0f;
      }
    }
  }
  return out;
}

inline Tensor ffn_forward(const Tensor& x, const LayerWeights& w,
                          const ModelConfig& config, const AblationMask& mask,
                          std::size_t layer) {
  return ffn_forward(x, w, config, CompiledMask(mask, config), layer);
}

// Decoder-only transformer in scoring mode. Immutable after construction and
// safe to share across threads; every call owns its trace.
class Transformer {
 public:
  explicit Transformer(WeightStore weights) : w_(std::move(weights)) {
    validate_weights(w_);
  }

  const WeightStore& weights() const { return w_; }
  const ModelConfig& config() const { return w_.config; }

  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > config().max_positions) {
      throw InputError("forward: " + std::to_string(tokens.size()) +
                       " tokens exceed max_positions " +
                       std::to_string(config().max_positions));
    }
    for (TokenId id : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= config().vocab_size) {
        throw InputError("forward: token id " + std::to_string(id) +
                         " out of range");
      }
    }
  }

  // x_0 rows for the given tokens (no ablation).
  Tensor embed(std::span<const TokenId> tokens) const {
    const std::size_t d = config().d_model;
    Tensor x({tokens.size(), d});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto te = w_.wte.row(static_cast<std::size_t>(tokens[t]));
      const auto pe = w_.wpe.row(t);
      for (std::size_t j = 0; j < d; ++j) x.at(t, j) = te[j] + pe[j];
    }
    return x;
  }

  ForwardTrace forward(std::span<const TokenId> tokens,
                       const AblationMask& mask = {},
                       const ForwardOptions& options = {}) const {
    check_tokens(tokens);
    const CompiledMask compiled(mask, config());
    return forward_compiled(tokens, compiled, options);
  }

  ForwardTrace forward_compiled(std::span<const TokenId> tokens,
                                const CompiledMask& mask,
                                const ForwardOptions& options) const {
    check_tokens(tokens);
    const auto& c = config();
    const std::size_t T = tokens.size();
    const std::size_t d = c.d_model;
    const std::size_t L = c.n_layers;

    ForwardTrace trace;
    trace.n_tokens = T;
    Tensor x = embed(tokens);
    if (mask.any) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          if (mask.embedding[j]) x.at(t, j) = 0.0f;
        }
      }
    }
    trace.embeddings = x;
    trace.mha_out = Tensor({L, T, d});
    trace.attn_update = Tensor({L, T, d});
    trace.ffn_out = Tensor({L, T, d});
    if (options.keep_residuals) {
      trace.residual_mid = Tensor({L, T, d});
      trace.residual = Tensor({L, T, d});
    }
    if (options.keep_attention) {
      trace.attention = Tensor({L, c.n_heads, T, T});
    }

    const bool normalized_skip =
        c.residual_form == ResidualForm::kNormalizedSkip;
    Tensor normed({T, d});
    for (std::size_t l = 0; l < L; ++l) {
      const LayerWeights& lw = w_.layers[l];
      normalize_rows(x, lw.ln1_gamma, lw.ln1_beta, normed);
      MhaOutput attn =
          mha_forward(normed, lw, c, mask, l, options.keep_attention);
      copy_layer(attn.per_head, trace.mha_out, l);
      copy_layer(attn.combined, trace.attn_update, l);
      if (options.keep_attention) {
        const std::size_t block = c.n_heads * T * T;
        std::copy(attn.attention.data(), attn.attention.data() + block,
                  trace.attention.data() + l * block);
      }
      Tensor& base = normalized_skip ? normed : x;
      add_inplace(base, attn.combined);
      if (normalized_skip) x = normed;
      if (options.keep_residuals) copy_layer(x, trace.residual_mid, l);

      normalize_rows(x, lw.ln2_gamma, lw.ln2_beta, normed);
      Tensor ffn = ffn_forward(normed, lw, c, mask, l);
      copy_layer(ffn, trace.ffn_out, l);
      Tensor& base2 = normalized_skip ? normed : x;
      add_inplace(base2, ffn);
      if (normalized_skip) x = normed;
      if (options.keep_residuals) copy_layer(x, trace.residual, l);
    }
    trace.final_stream = x;

    if (options.compute_logits) {
      const std::size_t begin = options.logits_begin;
      const std::size_t end = options.logits_end ? options.logits_end : T;
      if (begin > end || end > T) {
        throw InputError("forward: invalid logits row range");
      }
      trace.logits_begin = begin;
      trace.logits = Tensor({end - begin, c.vocab_size});
      normalize_rows(x, w_.ln_f_gamma, w_.ln_f_beta, normed);
      unembed(normed, begin, end, trace.logits);
    }
    return trace;
  }

  // logits = LN_f(x) @ wte^T for every row of a [T, d] stream.
  Tensor logits_of_stream(const Tensor& stream) const {
    const std::size_t T = stream.dim(0);
    Tensor normed({T, config().d_model});
    normalize_rows(stream, w_.ln_f_gamma, w_.ln_f_beta, normed);
    Tensor logits({T, config().vocab_size});
    unembed(normed, 0, T, logits);
    return logits;
  }

  // Mean log-probability of tokens[score_from..T) given their prefixes. The
  // default scores every position except the first.
  double sequence_log_likelihood(std::span<const TokenId> tokens,
                                 const AblationMask& mask = {},
                                 std::size_t score_from = 1) const {
    const CompiledMask compiled(mask, config());
    return sequence_log_likelihood_compiled(tokens, compiled, score_from);
  }

  double sequence_log_likelihood_compiled(std::span<const TokenId> tokens,
                                          const CompiledMask& mask,
                                          std::size_t score_from = 1) const {
    const std::size_t T = tokens.size();
    if (T < 2) {
      throw InputError(
          "sequence_log_likelihood: need at least two tokens to score");
    }
    if (score_from < 1 || score_from >= T) {
      throw InputError("sequence_log_likelihood: invalid scored span");
    }
    ForwardOptions opt;
    opt.logits_begin = score_from - 1;
    opt.logits_end = T - 1;
    const ForwardTrace trace = forward_compiled(tokens, mask, opt);
    double total = 0.0;
    for (std::size_t t = score_from; t < T; ++t) {
      const auto row = trace.logits.row(t - 1 - opt.logits_begin);
      total += static_cast<double>(row[static_cast<std::size_t>(tokens[t])]) -
               log_sum_exp(row);
    }
    return total / static_cast<double>(T - score_from);
  }

 private:
  void normalize_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      Tensor& out) const {
    for (std::size_t t = 0; t < x.dim(0); ++t) {
      layer_norm(x.row(t), gamma.values(), beta.values(), config().ln_epsilon,
                 out.row(t));
    }
  }

  void unembed(const Tensor& normed, std::size_t begin, std::size_t end,
               Tensor& logits) const {
    const std::size_t d = config().d_model;
    const std::size_t V = config().vocab_size;
    for (std::size_t v = 0; v < V; ++v) {
      const float* e = w_.wte.data() + v * d;
      for (std::size_t t = begin; t < end; ++t) {
        logits.at(t - begin, v) = dot(normed.data() + t * d, e, d);
      }
    }
  }

  static void add_inplace(Tensor& x, const Tensor& delta) {
    float* xd = x.data();
    const float* dd = delta.data();
    for (std::size_t i = 0; i < x.size(); ++i) xd[i] += dd[i];
  }

  static void copy_layer(const Tensor& src, Tensor& dst, std::size_t layer) {
    std::copy(src.data(), src.data() + src.size(),
              dst.data() + layer * src.size());
  }

  WeightStore w_;
};

}  // namespace stereoprobe
