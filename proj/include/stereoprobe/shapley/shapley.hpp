#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <numeric>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/common/text.hpp"

namespace stereoprobe {

// A cooperative game over players 0..n-1. Values are read through sessions
// that hold a current coalition and change it one player at a time, so
// incremental implementations can avoid recomputing from scratch.
class CoalitionGame {
 public:
  class Session {
   public:
    virtual ~Session() = default;
    virtual void add(std::size_t player) = 0;
    virtual void remove(std::size_t player) = 0;
    virtual double value() = 0;
  };

  virtual ~CoalitionGame() = default;
  virtual std::size_t player_count() const = 0;
  // A session starting from the empty coalition, or the grand coalition.
  virtual std::unique_ptr<Session> session(bool full) const = 0;

  double value(const std::vector<char>& present) const {
    if (present.size() != player_count()) {
      throw InputError("coalition size does not match the player count");
    }
    auto s = session(false);
    for (std::size_t i = 0; i < present.size(); ++i) {
      if (present[i]) s->add(i);
    }
    return s->value();
  }
};

// Game defined by a plain function of the membership vector.
class FunctionGame final : public CoalitionGame {
 public:
  using ValueFn = std::function<double(const std::vector<char>&)>;

  FunctionGame(std::size_t players, ValueFn fn)
      : players_(players), fn_(std::move(fn)) {}

  std::size_t player_count() const override { return players_; }

  std::unique_ptr<Session> session(bool full) const override {
    return std::make_unique<FnSession>(fn_, players_, full);
  }

 private:
  class FnSession final : public Session {
   public:
    FnSession(const ValueFn& fn, std::size_t n, bool full)
        : fn_(fn), present_(n, full ? 1 : 0) {}
    void add(std::size_t p) override { present_.at(p) = 1; }
    void remove(std::size_t p) override { present_.at(p) = 0; }
    double value() override { return fn_(present_); }

   private:
    const ValueFn& fn_;
    std::vector<char> present_;
  };

  std::size_t players_;
  ValueFn fn_;
};

struct ShapleyOptions {
  std::size_t permutations = 200;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string stream = "shapley";
};

struct ShapleyReport {
  std::vector<std::string> players;  // ids, in player order
  std::vector<double> phi;
  std::vector<double> variance;      // sample variance of the marginals
  std::vector<std::size_t> ranking;  // player indices, descending phi
  std::size_t iterations = 0;
  double empty_value = 0.0;
  double full_value = 0.0;

  double std_error(std::size_t p) const {
    return iterations > 1 ? std::sqrt(variance[p] / static_cast<double>(iterations))
                          : 0.0;
  }

  std::string csv() const {
    std::vector<std::size_t> rank(players.size());
    for (std::size_t r = 0; r < ranking.size(); ++r) rank[ranking[r]] = r + 1;
    std::string out = csv_row({"player", "phi", "variance", "rank"});
    for (std::size_t p = 0; p < players.size(); ++p) {
      out += csv_row({players[p], format_number(phi[p]),
                      format_number(variance[p]), std::to_string(rank[p])});
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["iterations"] = iterations;
    j["empty_value"] = empty_value;
    j["full_value"] = full_value;
    auto& r = j["ranking"] = nlohmann::ordered_json::array();
    for (std::size_t p : ranking) {
      r.push_back({{"player", players[p]},
                   {"phi", phi[p]},
                   {"variance", variance[p]}});
    }
    return j;
  }
};

// Descending phi; equal values keep player order, which callers build in
// lexicographic (layer, head, neuron) order.
inline std::vector<std::size_t> rank_players(const std::vector<double>& phi) {
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return phi[a] > phi[b];
  });
  return order;
}

// Monte Carlo permutation sampling. Permutation m draws from its own
// sub-stream, so results do not depend on the thread count; per-player means
// and variances are reduced in permutation order.
inline ShapleyReport estimate_shapley(const CoalitionGame& game,
                                      std::vector<std::string> player_ids,
                                      const ShapleyOptions& options) {
  const std::size_t P = game.player_count();
  if (P == 0) throw InputError("estimate_shapley: no players");
  if (options.permutations == 0) {
    throw InputError("estimate_shapley: need at least one permutation");
  }
  if (player_ids.empty()) {
    for (std::size_t p = 0; p < P; ++p) player_ids.push_back(std::to_string(p));
  }
  if (player_ids.size() != P) {
    throw InputError("estimate_shapley: player id count does not match");
  }
  const std::size_t M = options.permutations;
  std::vector<std::vector<double>> marginals(M);
  parallel_for(M, options.threads, [&](std::size_t m) {
    try {
      std::vector<std::size_t> perm(P);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng = make_rng(options.seed, options.stream, m);
      portable_shuffle(perm, rng);
      auto session = game.session(false);
      std::vector<double> marg(P, 0.0);
      double prev = session->value();
      for (std::size_t p : perm) {
        session->add(p);
        const double v = session->value();
        marg[p] = v - prev;
        prev = v;
      }
      marginals[m] = std::move(marg);
    } catch (const std::exception& e) {
      throw ComputeError("shapley: value function failed in permutation " +
                         std::to_string(m) + ": " + e.what());
    }
  });

  ShapleyReport report;
  report.players = std::move(player_ids);
  report.iterations = M;
  report.phi.assign(P, 0.0);
  report.variance.assign(P, 0.0);
  std::vector<double> m2(P, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const double count = static_cast<double>(m + 1);
    for (std::size_t p = 0; p < P; ++p) {
      const double x = marginals[m][p];
      const double delta = x - report.phi[p];
      report.phi[p] += delta / count;
      m2[p] += delta * (x - report.phi[p]);
    }
  }
  if (M > 1) {
    for (std::size_t p = 0; p < P; ++p) {
      report.variance[p] = m2[p] / static_cast<double>(M - 1);
    }
  }
  report.ranking = rank_players(report.phi);
  report.empty_value = game.session(false)->value();
  report.full_value = game.session(true)->value();
  return report;
}

// Exact Shapley values by enumerating all 2^n coalitions (small n only).
inline std::vector<double> exact_shapley(const CoalitionGame& game) {
  const std::size_t n = game.player_count();
  if (n == 0 || n > 20) throw InputError("exact_shapley: need 1..20 players");
  const std::size_t total = std::size_t{1} << n;
  std::vector<double> v(total);
  std::vector<char> present(n);
  for (std::size_t s = 0; s < total; ++s) {
    for (std::size_t i = 0; i < n; ++i) present[i] = (s >> i) & 1u;
    v[s] = game.value(present);
  }
  std::vector<double> weight(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k! (n - k - 1)! / n!
    double w = 1.0 / static_cast<double>(n);
    for (std::size_t j = 1; j <= k; ++j) {
      w *= static_cast<double>(j) / static_cast<double>(n - j);
    }
    weight[k] = w;
  }
  std::vector<double> phi(n, 0.0);
  for (std::size_t s = 0; s < total; ++s) {
    const auto k = static_cast<std::size_t>(std::popcount(s));
    for (std::size_t i = 0; i < n; ++i) {
      if ((s >> i) & 1u) continue;
      phi[i] += weight[k] * (v[s | (std::size_t{1} << i)] - v[s]);
    }
  }
  return phi;
}

enum class CurveOrder { kTopDown, kRandom };

inline const char* to_string(CurveOrder o) {
  return o == CurveOrder::kTopDown ? "top_down" : "random";
}

struct CurvePointAblation {
  double fraction = 0.0;  // players removed / players
  double accuracy = 0.0;
};

struct AblationCurve {
  CurveOrder order = CurveOrder::kTopDown;
  std::uint64_t seed = 0;
  std::vector<std::size_t> removal_order;
  std::vector<CurvePointAblation> points;  // players + 1 points

  std::string csv(bool header = true) const {
    std::string out;
    if (header) out = csv_row({"fraction", "accuracy", "order", "seed"});
    for (const auto& p : points) {
      out += csv_row({format_number(p.fraction), format_number(p.accuracy),
                      to_string(order), std::to_string(seed)});
    }
    return out;
  }
};

// Starting from the grand coalition, removes players one at a time (each
// step's mask is a superset of the previous one) and records the value.
inline AblationCurve ablation_curve(const ShapleyReport& report,
                                    const CoalitionGame& game, CurveOrder order,
                                    std::uint64_t seed = 0) {
  const std::size_t P = game.player_count();
  if (report.ranking.size() != P) {
    throw InputError("ablation_curve: report does not match the game");
  }
  AblationCurve curve;
  curve.order = order;
  curve.seed = seed;
  curve.removal_order = report.ranking;
  if (order == CurveOrder::kRandom) {
    std::iota(curve.removal_order.begin(), curve.removal_order.end(), std::size_t{0});
    Rng rng = make_rng(seed, "ablation-curve");
    portable_shuffle(curve.removal_order, rng);
  }
  auto session = game.session(true);
  curve.points.push_back({0.0, session->value()});
  for (std::size_t k = 0; k < P; ++k) {
    session->remove(curve.removal_order[k]);
    curve.points.push_back({static_cast<double>(k + 1) / static_cast<double>(P),
                            session->value()});
  }
  return curve;
}

}  // namespace stereoprobe
