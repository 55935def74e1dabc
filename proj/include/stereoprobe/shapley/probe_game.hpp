#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/model/ablation.hpp"
#include "stereoprobe/probe/trainer.hpp"
#include "stereoprobe/shapley/shapley.hpp"

namespace stereoprobe {

// An attention head, or one neuron of a head, with the probe-input features
// it owns (its positions in both halves of the pair).
struct Player {
  enum class Kind { kHead, kNeuron };
  Kind kind = Kind::kHead;
  int layer = 0;
  int head = 0;
  int neuron = -1;
  std::vector<std::size_t> features;

  std::string id() const {
    std::string s = "L" + std::to_string(layer) + ".H" + std::to_string(head);
    if (kind == Kind::kNeuron) s += ".N" + std::to_string(neuron);
    return s;
  }
};

inline std::vector<Player> head_players(const ModelConfig& config) {
  std::vector<Player> out;
  for (int l = 0; l < static_cast<int>(config.n_layers); ++l) {
    for (int h = 0; h < static_cast<int>(config.n_heads); ++h) {
      out.push_back({Player::Kind::kHead, l, h, -1, head_feature_indices(config, l, h)});
    }
  }
  return out;
}

inline std::vector<Player> neuron_players(
    const ModelConfig& config, const std::vector<std::pair<int, int>>& heads) {
  auto sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  std::vector<Player> out;
  for (const auto& [l, h] : sorted) {
    for (int j = 0; j < static_cast<int>(config.d_head); ++j) {
      out.push_back({Player::Kind::kNeuron, l, h, j,
                     neuron_feature_indices(config, l, h, j)});
    }
  }
  return out;
}

inline std::vector<std::string> player_ids(const std::vector<Player>& players) {
  std::vector<std::string> ids;
  for (const auto& p : players) ids.push_back(p.id());
  return ids;
}

// Probe accuracy on a fixed evaluation set with every feature of an absent
// player zeroed; features owned by no player are always present.
//
// First-layer pre-activations are kept as per-player fixed-point sums, so
// adding or removing a player is exact and the value of a coalition does not
// depend on the order in which it was assembled.
class ProbeGame final : public CoalitionGame {
 public:
  static constexpr double kScale = 4294967296.0;  // 2^32

  ProbeGame(const ProbeModel& probe, const ProbeCorpus& corpus,
            std::vector<Player> players, std::vector<std::size_t> rows)
      : probe_(probe), players_(std::move(players)), rows_(std::move(rows)) {
    const std::size_t n_in = corpus.input_length();
    if (probe.net.input_size() != n_in) {
      throw ConfigError("probe game: probe and corpus feature counts differ");
    }
    if (rows_.empty()) throw InputError("probe game: empty evaluation set");
    if (probe.net.layer_count() < 2) {
      throw ConfigError("probe game: the probe needs a hidden layer");
    }
    hidden_ = static_cast<std::size_t>(probe.net.weights[0].cols());
    x_.resize(static_cast<Eigen::Index>(rows_.size()), static_cast<Eigen::Index>(n_in));
    labels_.reserve(rows_.size());
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      const auto& f = corpus.pairs.at(rows_[r]).features;
      for (std::size_t i = 0; i < n_in; ++i) {
        x_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = f[i];
      }
      labels_.push_back(corpus.pairs[rows_[r]].label());
    }
    std::vector<char> owned(n_in, 0);
    for (const auto& p : players_) {
      for (std::size_t i : p.features) {
        if (i >= n_in) throw InputError("player " + p.id() + " owns a feature out of range");
        if (owned[i]) throw InputError("players overlap at feature " + std::to_string(i));
        owned[i] = 1;
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n_in; ++i) {
      if (!owned[i]) rest.push_back(i);
    }
    base_ = contribution(rest);
  }

  std::size_t player_count() const override { return players_.size(); }
  const std::vector<Player>& players() const { return players_; }
  std::size_t sample_count() const { return rows_.size(); }

  std::unique_ptr<Session> session(bool full) const override {
    auto s = std::make_unique<ProbeSession>(*this);
    if (full) {
      for (std::size_t p = 0; p < players_.size(); ++p) s->add(p);
    }
    return s;
  }

 private:
  using Fixed = std::vector<std::int64_t>;

  // Fixed-point [rows x hidden] contribution of a set of input features.
  Fixed contribution(const std::vector<std::size_t>& features) const {
    const auto n = static_cast<Eigen::Index>(rows_.size());
    Fixed out(rows_.size() * hidden_, 0);
    if (features.empty()) return out;
    Eigen::MatrixXd xs(n, static_cast<Eigen::Index>(features.size()));
    Eigen::MatrixXd ws(static_cast<Eigen::Index>(features.size()),
                       static_cast<Eigen::Index>(hidden_));
    const auto& w1 = probe_.net.weights[0];
    for (std::size_t k = 0; k < features.size(); ++k) {
      const auto col = static_cast<Eigen::Index>(features[k]);
      xs.col(static_cast<Eigen::Index>(k)) = x_.col(col).cast<double>();
      ws.row(static_cast<Eigen::Index>(k)) = w1.row(col).cast<double>();
    }
    const Eigen::MatrixXd c = xs * ws;
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index j = 0; j < c.cols(); ++j) {
        const double v = c(r, j) * kScale;
        if (!(std::abs(v) < 9.0e18)) {
          throw ComputeError("probe game: first-layer contribution out of range");
        }
        out[static_cast<std::size_t>(r) * hidden_ + static_cast<std::size_t>(j)] =
            std::llround(v);
      }
    }
    return out;
  }

  double accuracy(const Fixed& acc) const {
    const std::size_t n = rows_.size();
    std::vector<float> pre1(n * hidden_);
    const float* b1 = probe_.net.biases[0].data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < hidden_; ++j) {
        pre1[r * hidden_ + j] = static_cast<float>(
            static_cast<double>(acc[r * hidden_ + j]) / kScale +
            static_cast<double>(b1[j]));
      }
    }
    const auto logits = mlp_logits_from_first(probe_.net, std::move(pre1), n);
    const std::size_t k = probe_.net.output_size();
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (argmax_row(logits.data() + r * k, k) == labels_[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
  }

  class ProbeSession final : public Session {
   public:
    explicit ProbeSession(const ProbeGame& game)
        : game_(game), acc_(game.base_), present_(game.players_.size(), 0) {}

    void add(std::size_t p) override { toggle(p, true); }
    void remove(std::size_t p) override { toggle(p, false); }
    double value() override { return game_.accuracy(acc_); }

   private:
    void toggle(std::size_t p, bool on) {
      if (static_cast<bool>(present_.at(p)) == on) return;
      present_[p] = on ? 1 : 0;
      const Fixed c = game_.contribution(game_.players_[p].features);
      if (on) {
        for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i] += c[i];
      } else {
        for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i] -= c[i];
      }
    }

    const ProbeGame& game_;
    Fixed acc_;
    std::vector<char> present_;
  };

  const ProbeModel& probe_;
  std::vector<Player> players_;
  std::vector<std::size_t> rows_;
  std::size_t hidden_ = 0;
  Mlp<float>::Matrix x_;
  std::vector<int> labels_;
  Fixed base_;
};

enum class NeuronSelection {
  kPositive,  // every neuron with phi > 0
  kTopK,      // the k highest-ranked neurons
};

struct PipelineOptions {
  std::size_t head_permutations = 200;
  std::size_t neuron_permutations = 200;
  double top_head_fraction = 0.1;  // floor, at least one head
  NeuronSelection selection = NeuronSelection::kPositive;
  std::size_t top_k = 400;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

inline std::size_t top_head_count(std::size_t heads, double fraction) {
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(heads)));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(heads, 1));
}

struct PipelineResult {
  std::vector<Player> head_players;
  ShapleyReport head_report;
  std::vector<std::pair<int, int>> top_heads;  // in ranking order
  std::vector<Player> neuron_players;
  ShapleyReport neuron_report;
  AblationMask selected;  // attention neurons

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto& th = j["top_heads"] = nlohmann::ordered_json::array();
    for (const auto& [l, h] : top_heads) th.push_back({{"layer", l}, {"head", h}});
    j["selected_neurons"] = selected.size();
    j["mask_id"] = selected.id();
    j["head_report"] = head_report.to_json();
    j["neuron_report"] = neuron_report.to_json();
    return j;
  }
};

// Stage 1 ranks every head; stage 2 ranks the neurons of the top heads with
// the other features left in place, and selects neurons by the chosen rule.
inline PipelineResult head_then_neuron_pipeline(const ProbeModel& probe,
                                                const ProbeCorpus& corpus,
                                                const ModelConfig& config,
                                                const PipelineOptions& options = {}) {
  const auto& rows = corpus.validation.empty() ? corpus.train : corpus.validation;
  PipelineResult result;
  result.head_players = head_players(config);
  {
    const ProbeGame game(probe, corpus, result.head_players, rows);
    result.head_report = estimate_shapley(
        game, player_ids(result.head_players),
        {options.head_permutations, options.seed, options.threads, "shapley-heads"});
  }
  const std::size_t k = top_head_count(result.head_players.size(), options.top_head_fraction);
  for (std::size_t r = 0; r < k; ++r) {
    const auto& p = result.head_players[result.head_report.ranking[r]];
    result.top_heads.emplace_back(p.layer, p.head);
  }
  result.neuron_players = neuron_players(config, result.top_heads);
  {
    const ProbeGame game(probe, corpus, result.neuron_players, rows);
    result.neuron_report = estimate_shapley(
        game, player_ids(result.neuron_players),
        {options.neuron_permutations, options.seed, options.threads, "shapley-neurons"});
  }
  const auto& rep = result.neuron_report;
  for (std::size_t r = 0; r < rep.ranking.size(); ++r) {
    const std::size_t p = rep.ranking[r];
    const bool take = options.selection == NeuronSelection::kPositive
                          ? rep.phi[p] > 0.0
                          : r < options.top_k;
    if (!take) continue;
    const auto& pl = result.neuron_players[p];
    result.selected.add(NeuronCoordinate::mha(pl.layer, pl.head, pl.neuron));
  }
  return result;
}

}  // namespace stereoprobe
