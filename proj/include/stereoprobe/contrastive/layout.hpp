#pragma once

#include <cstddef>

#include "stereoprobe/model/ablation.hpp"
#include "stereoprobe/model/config.hpp"

namespace stereoprobe {

// Flat ordering of every scored coordinate:
//   [embedding d_model | attention L x d_model | FFN L x d_model]
// Attention entries use head * d_head + neuron within each layer block.
class ActivationLayout {
 public:
  explicit ActivationLayout(const ModelConfig& config)
      : layers_(config.n_layers),
        d_model_(config.d_model),
        d_head_(config.d_head) {}

  std::size_t size() const { return d_model_ * (1 + 2 * layers_); }
  std::size_t layers() const { return layers_; }
  std::size_t d_model() const { return d_model_; }

  std::size_t index_of(const NeuronCoordinate& c) const {
    switch (c.component) {
      case Component::kEmbedding:
        return static_cast<std::size_t>(c.neuron);
      case Component::kMha:
        return d_model_ + static_cast<std::size_t>(c.layer) * d_model_ +
               static_cast<std::size_t>(c.head) * d_head_ +
               static_cast<std::size_t>(c.neuron);
      case Component::kFfn:
        return d_model_ * (1 + layers_) +
               static_cast<std::size_t>(c.layer) * d_model_ +
               static_cast<std::size_t>(c.neuron);
    }
    return 0;
  }

  NeuronCoordinate coordinate_at(std::size_t index) const {
    if (index < d_model_) {
      return NeuronCoordinate::embedding(static_cast<int>(index));
    }
    index -= d_model_;
    if (index < layers_ * d_model_) {
      const auto layer = static_cast<int>(index / d_model_);
      const std::size_t flat = index % d_model_;
      return NeuronCoordinate::mha(layer, static_cast<int>(flat / d_head_),
                                   static_cast<int>(flat % d_head_));
    }
    index -= layers_ * d_model_;
    return NeuronCoordinate::ffn(static_cast<int>(index / d_model_),
                                 static_cast<int>(index % d_model_));
  }

  Component component_at(std::size_t index) const {
    if (index < d_model_) return Component::kEmbedding;
    if (index < d_model_ * (1 + layers_)) return Component::kMha;
    return Component::kFfn;
  }

 private:
  std::size_t layers_;
  std::size_t d_model_;
  std::size_t d_head_;
};

}  // namespace stereoprobe
