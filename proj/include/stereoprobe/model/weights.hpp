#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/io/archive.hpp"
#include "stereoprobe/model/config.hpp"
#include "stereoprobe/model/tensor.hpp"

namespace stereoprobe {

// Matrices use the x @ W convention: W is [in x out].
struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;          // [d_model]
  Tensor w_q, w_k, w_v, w_o;           // [d_model x d_model]
  Tensor b_q, b_k, b_v, b_o;           // [d_model]
  Tensor ln2_gamma, ln2_beta;          // [d_model]
  Tensor w1;                           // [d_model x d_ff]
  Tensor b1;                           // [d_ff]
  Tensor w2;                           // [d_ff x d_model]
  Tensor b2;                           // [d_model]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

// All learned parameters. The unembedding is tied to the token embedding
// (logits = LN(x) @ wte^T), so it has no storage of its own.
struct WeightStore {
  ModelConfig config;
  Tensor wte;  // [vocab_size x d_model]
  Tensor wpe;  // [max_positions x d_model]
  std::vector<LayerWeights> layers;
  Tensor ln_f_gamma, ln_f_beta;  // [d_model]

  const Tensor& unembedding() const { return wte; }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;
};

namespace detail {

// Calls fn(name, expected_shape, tensor) for every parameter in canonical
// order. Works on const and mutable stores; `layers` must already be sized.
template <typename Store, typename Fn>
void for_each_weight(Store& w, Fn&& fn) {
  const auto& c = w.config;
  const std::size_t d = c.d_model;
  using Shape = std::vector<std::size_t>;
  fn(std::string("wte"), Shape{c.vocab_size, d}, w.wte);
  fn(std::string("wpe"), Shape{c.max_positions, d}, w.wpe);
  fn(std::string("ln_f.gamma"), Shape{d}, w.ln_f_gamma);
  fn(std::string("ln_f.beta"), Shape{d}, w.ln_f_beta);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "ln1.gamma", Shape{d}, L.ln1_gamma);
    fn(p + "ln1.beta", Shape{d}, L.ln1_beta);
    fn(p + "attn.w_q", Shape{d, d}, L.w_q);
    fn(p + "attn.w_k", Shape{d, d}, L.w_k);
    fn(p + "attn.w_v", Shape{d, d}, L.w_v);
    fn(p + "attn.w_o", Shape{d, d}, L.w_o);
    fn(p + "attn.b_q", Shape{d}, L.b_q);
    fn(p + "attn.b_k", Shape{d}, L.b_k);
    fn(p + "attn.b_v", Shape{d}, L.b_v);
    fn(p + "attn.b_o", Shape{d}, L.b_o);
    fn(p + "ln2.gamma", Shape{d}, L.ln2_gamma);
    fn(p + "ln2.beta", Shape{d}, L.ln2_beta);
    fn(p + "ffn.w1", Shape{d, c.d_ff}, L.w1);
    fn(p + "ffn.b1", Shape{c.d_ff}, L.b1);
    fn(p + "ffn.w2", Shape{c.d_ff, d}, L.w2);
    fn(p + "ffn.b2", Shape{d}, L.b2);
  }
}

// Columns [begin, begin + width) of a [rows x cols] tensor.
inline Tensor column_slice(const Tensor& t, std::size_t begin,
                           std::size_t width) {
  Tensor out({t.dim(0), width});
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) = t.at(r, begin + c);
  }
  return out;
}

inline Tensor range_slice(const Tensor& t, std::size_t begin,
                          std::size_t width) {
  std::vector<float> v(t.data() + begin, t.data() + begin + width);
  return Tensor({width}, std::move(v));
}

}  // namespace detail

inline void validate_weights(const WeightStore& w) {
  w.config.validate();
  if (w.layers.size() != w.config.n_layers) {
    throw ConfigError("weights: layer count does not match config");
  }
  detail::for_each_weight(w, [](const std::string& name, const auto& shape,
                                const Tensor& t) {
    if (t.shape() != shape) {
      throw ConfigError("weights: tensor '" + name + "' has shape " +
                        shape_string(t.shape()) + ", expected " +
                        shape_string(shape));
    }
  });
}

// Saves under the canonical names (see README "Weight archive").
inline void save_weights(const WeightStore& w, const std::string& path) {
  validate_weights(w);
  TensorArchive archive;
  detail::for_each_weight(
      w, [&](const std::string& name, const auto&, const Tensor& t) {
        archive.add(name, t);
      });
  archive.metadata()["format"] = "stereoprobe-weights";
  archive.save(path);
}

// Whether the archive uses the published GPT-2 checkpoint naming
// ("h.{i}.attn.c_attn.weight", ...), optionally prefixed by "transformer.".
inline bool is_gpt2_checkpoint(const TensorArchive& a) {
  return a.contains("wte.weight") || a.contains("transformer.wte.weight");
}

// Renaming table from the published GPT-2 checkpoint:
//   wte.weight                 -> wte
//   wpe.weight                 -> wpe
//   h.{i}.ln_1.weight / .bias  -> blocks.{i}.ln1.gamma / .beta
//   h.{i}.attn.c_attn.weight   -> columns [0,d) w_q, [d,2d) w_k, [2d,3d) w_v
//   h.{i}.attn.c_attn.bias     -> b_q, b_k, b_v (same split)
//   h.{i}.attn.c_proj.weight   -> blocks.{i}.attn.w_o   (.bias -> b_o)
//   h.{i}.ln_2.weight / .bias  -> blocks.{i}.ln2.gamma / .beta
//   h.{i}.mlp.c_fc.weight      -> blocks.{i}.ffn.w1     (.bias -> b1)
//   h.{i}.mlp.c_proj.weight    -> blocks.{i}.ffn.w2     (.bias -> b2)
//   ln_f.weight / .bias        -> ln_f.gamma / .beta
// GPT-2 stores Conv1D weights as [in x out], which is already our layout.
// The "h.{i}.attn.bias" causal-mask buffers and lm_head.weight are ignored.
inline WeightStore import_gpt2(const TensorArchive& a,
                               const ModelConfig& config) {
  const std::string pre = a.contains("transformer.wte.weight")
                              ? "transformer."
                              : "";
  const std::size_t d = config.d_model;
  WeightStore w;
  w.config = config;
  w.wte = a.tensor(pre + "wte.weight", {config.vocab_size, d});
  w.wpe = a.tensor(pre + "wpe.weight", {config.max_positions, d});
  w.ln_f_gamma = a.tensor(pre + "ln_f.weight", {d});
  w.ln_f_beta = a.tensor(pre + "ln_f.bias", {d});
  w.layers.resize(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = pre + "h." + std::to_string(l) + ".";
    auto& L = w.layers[l];
    L.ln1_gamma = a.tensor(p + "ln_1.weight", {d});
    L.ln1_beta = a.tensor(p + "ln_1.bias", {d});
    const Tensor qkv = a.tensor(p + "attn.c_attn.weight", {d, 3 * d});
    const Tensor qkv_b = a.tensor(p + "attn.c_attn.bias", {3 * d});
    L.w_q = detail::column_slice(qkv, 0, d);
    L.w_k = detail::column_slice(qkv, d, d);
    L.w_v = detail::column_slice(qkv, 2 * d, d);
    L.b_q = detail::range_slice(qkv_b, 0, d);
    L.b_k = detail::range_slice(qkv_b, d, d);
    L.b_v = detail::range_slice(qkv_b, 2 * d, d);
    L.w_o = a.tensor(p + "attn.c_proj.weight", {d, d});
    L.b_o = a.tensor(p + "attn.c_proj.bias", {d});
    L.ln2_gamma = a.tensor(p + "ln_2.weight", {d});
    L.ln2_beta = a.tensor(p + "ln_2.bias", {d});
    L.w1 = a.tensor(p + "mlp.c_fc.weight", {d, config.d_ff});
    L.b1 = a.tensor(p + "mlp.c_fc.bias", {config.d_ff});
    L.w2 = a.tensor(p + "mlp.c_proj.weight", {config.d_ff, d});
    L.b2 = a.tensor(p + "mlp.c_proj.bias", {d});
  }
  return w;
}

// Loads either a canonical archive or a published GPT-2 checkpoint. Errors
// name the offending tensor.
inline WeightStore load_weights(const std::string& path,
                                const ModelConfig& config) {
  config.validate();
  const TensorArchive archive = TensorArchive::load(path);
  WeightStore w;
  if (is_gpt2_checkpoint(archive)) {
    w = import_gpt2(archive, config);
  } else {
    w.config = config;
    w.layers.resize(config.n_layers);
    detail::for_each_weight(
        w, [&](const std::string& name, const auto& shape, Tensor& t) {
          t = archive.tensor(name, shape);
        });
  }
  detail::for_each_weight(
      w, [](const std::string& name, const auto&, const Tensor& t) {
        if (!t.all_finite()) {
          throw LoadError("weights: tensor '" + name +
                          "' contains non-finite values");
        }
      });
  return w;
}

// Order-sensitive checksum over every parameter, used to prove the model is
// never modified and recorded in run manifests.
inline std::uint64_t weights_checksum(const WeightStore& w) {
  Fnv1a h;
  detail::for_each_weight(
      w, [&](const std::string& name, const auto&, const Tensor& t) {
        h.update(name);
        h.update(t.values());
      });
  return h.digest();
}

// Seeded random weights for toy models and tests. Matrices are uniform in
// [-scale, scale]; layer-norm gains stay near one.
inline WeightStore random_weights(const ModelConfig& config,
                                  std::uint64_t seed, float scale = 0.3f) {
  config.validate();
  WeightStore w;
  w.config = config;
  w.layers.resize(config.n_layers);
  Rng rng = make_rng(seed, "weights");
  detail::for_each_weight(
      w, [&](const std::string& name, const auto& shape, Tensor& t) {
        t = Tensor(shape);
        const bool gain = name.find("gamma") != std::string::npos;
        for (auto& v : t.values()) {
          const auto u = static_cast<float>(uniform01(rng) * 2.0 - 1.0);
          v = gain ? 1.0f + 0.1f * u : scale * u;
        }
      });
  return w;
}

}  // namespace stereoprobe
