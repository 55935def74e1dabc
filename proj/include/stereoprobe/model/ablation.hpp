#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/model/config.hpp"

namespace stereoprobe {

// Declaration order defines the lexicographic tie-break order of rankings.
enum class Component : std::uint8_t { kEmbedding = 0, kMha = 1, kFfn = 2 };

inline constexpr Component kAllComponents[] = {
    Component::kEmbedding, Component::kMha, Component::kFfn};

inline std::string to_string(Component c) {
  switch (c) {
    case Component::kEmbedding:
      return "embedding";
    case Component::kMha:
      return "mha";
    case Component::kFfn:
      return "ffn";
  }
  return "unknown";
}

inline Component parse_component(const std::string& s) {
  if (s == "embedding") return Component::kEmbedding;
  if (s == "mha") return Component::kMha;
  if (s == "ffn") return Component::kFfn;
  throw InputError("unknown component '" + s + "'");
}

// One addressable unit of the network. `layer` is -1 for embeddings, `head`
// is -1 for everything except attention. For attention the neuron indexes the
// head's d_head-dimensional context vector (before W_O); for embeddings and
// FFN it indexes the d_model output.
struct NeuronCoordinate {
  Component component = Component::kEmbedding;
  int layer = -1;
  int head = -1;
  int neuron = 0;

  static NeuronCoordinate embedding(int neuron) {
    return {Component::kEmbedding, -1, -1, neuron};
  }
  static NeuronCoordinate mha(int layer, int head, int neuron) {
    return {Component::kMha, layer, head, neuron};
  }
  static NeuronCoordinate ffn(int layer, int neuron) {
    return {Component::kFfn, layer, -1, neuron};
  }

  // Offset within the layer's d_model-wide output (head * d_head + neuron for
  // attention).
  std::size_t flat_index(const ModelConfig& config) const {
    if (component == Component::kMha) {
      return static_cast<std::size_t>(head) * config.d_head +
             static_cast<std::size_t>(neuron);
    }
    return static_cast<std::size_t>(neuron);
  }

  void validate(const ModelConfig& config) const {
    const auto L = static_cast<int>(config.n_layers);
    const auto H = static_cast<int>(config.n_heads);
    const auto D = static_cast<int>(config.d_model);
    const auto dh = static_cast<int>(config.d_head);
    bool ok = false;
    switch (component) {
      case Component::kEmbedding:
        ok = layer == -1 && head == -1 && neuron >= 0 && neuron < D;
        break;
      case Component::kMha:
        ok = layer >= 0 && layer < L && head >= 0 && head < H &&
             neuron >= 0 && neuron < dh;
        break;
      case Component::kFfn:
        ok = layer >= 0 && layer < L && head == -1 && neuron >= 0 &&
             neuron < D;
        break;
    }
    if (!ok) throw InputError("neuron coordinate out of range: " + label());
  }

  std::string label() const {
    std::string s = to_string(component);
    if (layer >= 0) s += ".L" + std::to_string(layer);
    if (head >= 0) s += ".H" + std::to_string(head);
    return s + ".N" + std::to_string(neuron);
  }

  friend auto operator<=>(const NeuronCoordinate&,
                          const NeuronCoordinate&) = default;
};

// Set of coordinates to zero during a forward pass. Duplicates collapse; the
// empty mask means no intervention.
class AblationMask {
 public:
  AblationMask() = default;
  explicit AblationMask(const std::vector<NeuronCoordinate>& coords)
      : coords_(coords.begin(), coords.end()) {}

  void add(const NeuronCoordinate& c) { coords_.insert(c); }
  void merge(const AblationMask& other) {
    coords_.insert(other.coords_.begin(), other.coords_.end());
  }
  bool contains(const NeuronCoordinate& c) const {
    return coords_.count(c) != 0;
  }
  bool empty() const { return coords_.empty(); }
  std::size_t size() const { return coords_.size(); }
  const std::set<NeuronCoordinate>& coordinates() const { return coords_; }

  void validate(const ModelConfig& config) const {
    for (const auto& c : coords_) c.validate(config);
  }

  // Stable identifier for reports.
  std::string id() const {
    if (coords_.empty()) return "none";
    Fnv1a h;
    for (const auto& c : coords_) h.update(c.label() + ";");
    return hex64(h.digest());
  }

  friend bool operator==(const AblationMask&, const AblationMask&) = default;

 private:
  std::set<NeuronCoordinate> coords_;
};

// Dense per-site view of a mask, built once per forward pass.
struct CompiledMask {
  std::vector<char> embedding;             // [d_model]
  std::vector<std::vector<char>> mha;      // [L][d_model]
  std::vector<std::vector<char>> ffn;      // [L][d_model]
  std::vector<char> mha_layer_full;        // [L]: every head neuron masked
  bool any = false;

  CompiledMask(const AblationMask& mask, const ModelConfig& config)
      : embedding(config.d_model, 0),
        mha(config.n_layers, std::vector<char>(config.d_model, 0)),
        ffn(config.n_layers, std::vector<char>(config.d_model, 0)),
        mha_layer_full(config.n_layers, 0) {
    mask.validate(config);
    std::vector<std::size_t> mha_counts(config.n_layers, 0);
    for (const auto& c : mask.coordinates()) {
      any = true;
      const std::size_t idx = c.flat_index(config);
      switch (c.component) {
        case Component::kEmbedding:
          embedding[idx] = 1;
          break;
        case Component::kMha:
          mha[c.layer][idx] = 1;
          ++mha_counts[c.layer];
          break;
        case Component::kFfn:
          ffn[c.layer][idx] = 1;
          break;
      }
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      mha_layer_full[l] = mha_counts[l] == config.d_model;
    }
  }
};

// All attention and FFN coordinates of every layer.
inline AblationMask full_sublayer_mask(const ModelConfig& config) {
  AblationMask mask;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      for (std::size_t n = 0; n < config.d_head; ++n) {
        mask.add(NeuronCoordinate::mha(static_cast<int>(l),
                                       static_cast<int>(h),
                                       static_cast<int>(n)));
      }
    }
    for (std::size_t n = 0; n < config.d_model; ++n) {
      mask.add(NeuronCoordinate::ffn(static_cast<int>(l), static_cast<int>(n)));
    }
  }
  return mask;
}

}  // namespace stereoprobe
