#include <gtest/gtest.h>

#include <map>
#include <random>

#include "oracles.hpp"
#include "support.hpp"

using namespace testsupport;
using namespace oracles;

namespace {

// Scorer with preset log-likelihoods keyed by example id.
class TableScorer final : public sp::CandidateScorer {
 public:
  explicit TableScorer(std::map<std::string, std::array<double, 3>> table)
      : table_(std::move(table)) {}
  double log_likelihood(const sp::TripletExample& e, K kind,
                        const sp::AblationMask&) const override {
    return table_.at(e.id)[static_cast<std::size_t>(kind)];
  }

 private:
  std::map<std::string, std::array<double, 3>> table_;
};

std::vector<sp::TripletExample> id_examples(int intra, int inter) {
  std::vector<sp::TripletExample> ex;
  for (int i = 0; i < intra + inter; ++i) {
    sp::TripletExample e;
    e.id = "e" + std::to_string(i);
    e.format = i < intra ? sp::TaskFormat::kIntrasentence : sp::TaskFormat::kIntersentence;
    ex.push_back(e);
  }
  return ex;
}

}  // namespace

// ---- activation extraction ----

TEST(Extraction, SpanMeansMatchLoopOracle) {
  const auto model = toy_model();
  const auto& c = model.config();
  const std::vector<int> tokens = {334, 262, 300, 265, 305, 271, 46};
  const auto trace = model.forward(tokens);
  const sp::ActivationLayout layout(c);

  const auto one = sp::span_mean_activations(trace, c, {2, 3});
  const auto two = sp::span_mean_activations(trace, c, {2, 4});
  const auto many = sp::span_mean_activations(trace, c, {1, 7});
  for (std::size_t idx = 0; idx < layout.size(); ++idx) {
    const auto co = layout.coordinate_at(idx);
    EXPECT_EQ(layout.index_of(co), idx);
    auto value = [&](std::size_t t) -> double {
      const auto j = co.flat_index(c);
      switch (co.component) {
        case sp::Component::kEmbedding: return trace.embeddings.at(t, j);
        case sp::Component::kMha: return trace.at(trace.mha_out, co.layer, t)[j];
        case sp::Component::kFfn: return trace.at(trace.ffn_out, co.layer, t)[j];
      }
      return 0;
    };
    EXPECT_EQ(one[idx], value(2));
    EXPECT_DOUBLE_EQ(two[idx], (value(2) + value(3)) / 2);
    double s = 0;
    for (std::size_t t = 1; t < 7; ++t) s += value(t);
    EXPECT_NEAR(many[idx], s / 6, 1e-12);
  }
  EXPECT_THROW(sp::span_mean_activations(trace, c, {3, 3}), sp::InputError);
  EXPECT_THROW(sp::span_mean_activations(trace, c, {3, 9}), sp::InputError);
}

// ---- ratio scoring ----

TEST(RelativeRatio, HandArithmetic) {
  EXPECT_EQ(sp::relative_ratio_score(2, 2, 2, 1e-8), 1.0);
  EXPECT_EQ(sp::relative_ratio_score(4, 2, 1, 1e-8), 3.0);
  const auto floor = sp::relative_ratio(1, 0, 0, 1e-8);
  EXPECT_DOUBLE_EQ(floor.value, 1e8);
  EXPECT_TRUE(floor.degenerate);
  EXPECT_FALSE(sp::relative_ratio(4, 2, 1, 1e-8).degenerate);
  EXPECT_EQ(sp::relative_ratio_score(-4, 2, -1, 1e-8), 3.0);
  EXPECT_EQ(sp::relative_ratio_score(-4, 2, -1, 1e-8, sp::RatioMode::kSigned), 1.0);
  EXPECT_THROW(sp::relative_ratio_score(1, 1, 1, 0.0), sp::InputError);
}

TEST(ScoreAll, MeanOfOneAndOfTwo) {
  sp::ScoringSample a{key(sp::BiasType::kRace, "x"), {}};
  a.activations.values = {std::vector<double>{4, 2}, {2, 2}, {1, 2}};
  const auto one = sp::score_all({a});
  ASSERT_EQ(one.subsections.size(), 1u);
  EXPECT_EQ(one.subsections[0].scores, (std::vector<double>{3.0, 1.0}));
  sp::ScoringSample b = a;
  b.activations.values = {std::vector<double>{1, 2}, {1, 2}, {1, 2}};
  const auto two = sp::score_all({a, b});
  EXPECT_EQ(two.subsections[0].scores, (std::vector<double>{2.0, 1.0}));
  EXPECT_EQ(two.subsections[0].sample_count, 2u);
}

TEST(ScoreAll, MatchesBruteForceOnTenExamples) {
  const auto samples = ten_example_fixture(40);
  const auto table = sp::score_all(samples, {1e-8, sp::RatioMode::kMagnitude});
  const auto want = brute_force_scores(samples, 1e-8);
  ASSERT_EQ(table.subsections.size(), 2u);
  for (const auto& sub : table.subsections) {
    const auto& w = want.at(sub.key);
    for (std::size_t c = 0; c < w.size(); ++c) EXPECT_NEAR(sub.scores[c], w[c], 1e-9);
  }
  // Race sorts first and holds the zero anti-stereotype activation.
  EXPECT_EQ(table.subsections[0].degenerate[0], 1u);
  EXPECT_EQ(table.subsections[1].degenerate[0], 0u);
}

TEST(ScoreAll, EqualActivationsScoreOne) {
  auto samples = ten_example_fixture(25);
  for (auto& s : samples) s.activations.values[1] = s.activations.values[2] = s.activations.values[0];
  for (const auto& sub : sp::score_all(samples).subsections) {
    for (double v : sub.scores) EXPECT_EQ(v, 1.0);
  }
}

TEST(ScoreAll, SubsectionsNeverMix) {
  auto samples = ten_example_fixture(5);
  const auto base = sp::score_all(samples);
  // Perturbing only gender samples leaves the race subsection unchanged.
  for (auto& s : samples) {
    if (s.subsection.bias_type == sp::BiasType::kGender) s.activations.values[0][3] *= 7;
  }
  const auto moved = sp::score_all(samples);
  for (std::size_t i = 0; i < 2; ++i) {
    const bool race = base.subsections[i].key.bias_type == sp::BiasType::kRace;
    EXPECT_EQ(base.subsections[i].scores == moved.subsections[i].scores, race);
  }
}

TEST(Ranking, TopOneAndHandSort) {
  const auto c = toy_config();
  const sp::ActivationLayout layout(c);
  sp::ScoreTable table;
  table.coordinate_count = layout.size();
  sp::SubsectionScores s;
  s.key = key(sp::BiasType::kReligion, "Bible");
  s.sample_count = 1;
  for (std::size_t i = 0; i < layout.size(); ++i) s.scores.push_back(std::fmod(i * 37.0, 41.0));
  table.subsections.push_back(s);
  const auto flat = sp::flatten_scores(table, c);
  const auto top1 = sp::top_k(flat, 1);
  ASSERT_EQ(top1.size(), 1u);
  EXPECT_EQ(top1[0].score, 40.0);

  auto sorted = flat;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  const auto top5 = sp::top_k(flat, 5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(top5[i].score, sorted[i].score);

  const auto tab = sp::rank_and_tabulate(flat, 3, c.n_layers);
  ASSERT_EQ(tab.rankings.size(), 3u);
  for (const auto& r : tab.rankings) {
    EXPECT_EQ(r.top.size(), 3u);
    EXPECT_EQ(r.bias_type_counts[3], 3u);
    for (const auto& n : r.top) EXPECT_EQ(n.coordinate.component, r.component);
  }
  const auto big = sp::rank_and_tabulate(flat, 1000, c.n_layers);
  EXPECT_FALSE(big.notes.empty());

  const auto j = tab.to_json();
  EXPECT_EQ(j.at("top").size(), 3u);
  EXPECT_EQ(j.at("top").at("mha").size(), 3u);
  EXPECT_EQ(j.at("bias_type_distribution").at("ffn").at("religion").get<int>(), 3);
  EXPECT_EQ(j.at("layer_distribution").size(), 2u);
}

TEST(Ranking, RatioStatistics) {
  const auto s = sp::ratio_statistics({1, 1, 1, 1, 96});
  EXPECT_EQ(s.mean, 20.0);
  EXPECT_EQ(s.median, 1.0);
  EXPECT_EQ(s.max, 96.0);
  EXPECT_EQ(sp::ratio_statistics({1, 2, 3, 4}).median, 2.5);
  EXPECT_TRUE(s.heavy_tail());
  EXPECT_FALSE(sp::ratio_statistics({1, 2, 3}).heavy_tail());
}

TEST(Contrastive, ModelScoresMatchManualCollection) {
  const auto model = toy_model();
  const auto& ex = fixture_set().examples;
  const auto table = sp::score_examples_with_model(model, toy_tokenizer(), ex, {}, {}, 2);
  std::vector<sp::ScoringSample> samples;
  for (const auto& e : ex) {
    samples.push_back({sp::subsection_of(e),
                       sp::collect_candidate_activations(model, toy_tokenizer(), e)});
  }
  const auto want = sp::score_all(samples);
  ASSERT_EQ(table.subsections.size(), want.subsections.size());
  for (std::size_t i = 0; i < want.subsections.size(); ++i) {
    EXPECT_EQ(table.subsections[i].scores, want.subsections[i].scores);
  }
}

// ---- single-neuron ablation ----

TEST(Ablation, EffectPercentDefinition) {
  EXPECT_EQ(sp::relative_effect_percent(-2.0, -2.0), 0.0);
  EXPECT_DOUBLE_EQ(sp::relative_effect_percent(-2.0, -3.0), 50.0);
  EXPECT_DOUBLE_EQ(sp::relative_effect_percent(-2.0, -1.0), -50.0);
}

TEST(Ablation, DeadNeuronHasZeroEffect) {
  auto w = sp::random_weights(toy_config(), 7);
  // FFN output 5 of layer 1 is identically zero.
  for (std::size_t r = 0; r < w.layers[1].w2.dim(0); ++r) w.layers[1].w2.at(r, 5) = 0.0f;
  w.layers[1].b2.values()[5] = 0.0f;
  const sp::Transformer model(std::move(w));
  const sp::SentenceScorer scorer(model, toy_tokenizer());
  sp::NeuronScore ns;
  ns.coordinate = sp::NeuronCoordinate::ffn(1, 5);
  ns.subsection = sp::subsection_of(fixture_set().examples[0]);
  const auto study = sp::single_neuron_ablation_study({ns}, fixture_set().examples, scorer,
                                                      {sp::EffectScope::kAllExamples, 1});
  ASSERT_EQ(study.effects.size(), 1u);
  EXPECT_EQ(study.effects[0].effect_percent, 0.0);
  EXPECT_EQ(study.effects[0].examples, fixture_set().examples.size());
}

TEST(Ablation, PlantedNeuronMatchesDirectRecompute) {
  auto w = sp::random_weights(toy_config(), 7);
  for (std::size_t r = 0; r < w.layers[0].w2.dim(0); ++r) w.layers[0].w2.at(r, 2) *= 6.0f;
  w.layers[0].b2.values()[2] = 3.0f;
  const sp::Transformer model(std::move(w));
  const sp::SentenceScorer scorer(model, toy_tokenizer());
  const auto& ex = fixture_set().examples;
  sp::NeuronScore ns;
  ns.coordinate = sp::NeuronCoordinate::ffn(0, 2);
  ns.subsection = sp::subsection_of(ex[0]);
  const auto study = sp::single_neuron_ablation_study({ns}, ex, scorer, {});

  double sum = 0;
  std::size_t n = 0;
  const sp::AblationMask mask({ns.coordinate});
  for (const auto& e : ex) {
    if (sp::subsection_of(e) != ns.subsection) continue;
    const auto enc = sp::encode_candidate(toy_tokenizer(), e, K::kStereotype);
    const std::size_t from =
        e.format == sp::TaskFormat::kIntrasentence ? 1 : enc.candidate_span.start;
    const double b = model.sequence_log_likelihood(enc.tokens, {}, from);
    const double a = model.sequence_log_likelihood(enc.tokens, mask, from);
    sum += (b - a) / std::abs(b) * 100;
    ++n;
  }
  ASSERT_EQ(n, study.effects[0].examples);
  EXPECT_NE(study.effects[0].effect_percent, 0.0);
  EXPECT_NEAR(study.effects[0].effect_percent, sum / n, 1e-9);
  ASSERT_EQ(study.summaries.size(), 1u);
  EXPECT_EQ(study.summaries[0].component, sp::Component::kFfn);
}

TEST(Ablation, TopPerComponentTakesEachComponent) {
  const auto c = toy_config();
  sp::ScoreTable table;
  table.coordinate_count = sp::ActivationLayout(c).size();
  sp::SubsectionScores s;
  s.key = key(sp::BiasType::kRace, "x");
  s.sample_count = 1;
  for (std::size_t i = 0; i < table.coordinate_count; ++i) s.scores.push_back(i);
  table.subsections.push_back(s);
  const auto top = sp::top_per_component(sp::flatten_scores(table, c), 2);
  ASSERT_EQ(top.size(), 6u);
  EXPECT_EQ(top[0].coordinate.component, sp::Component::kEmbedding);
  EXPECT_EQ(top[2].coordinate.component, sp::Component::kMha);
  EXPECT_EQ(top[4].coordinate.component, sp::Component::kFfn);
  EXPECT_GT(top[0].score, top[1].score);
  EXPECT_NE(sp::scores_csv(top).find("component,layer,head,neuron"), std::string::npos);
}

// ---- StereoSet metrics ----

TEST(Icat, PublishedRowsAndEdges) {
  EXPECT_EQ(sp::icat(50, 100), 100.0);
  EXPECT_EQ(sp::icat(100, 73.0), 0.0);
  EXPECT_EQ(sp::icat(0, 73.0), 0.0);
  const double rows[][3] = {{51.72, 84.79, 81.87}, {51.11, 84.41, 82.54},
                            {64.72, 97.48, 68.78}, {64.25, 97.53, 69.74},
                            {50.16, 85.07, 84.79}, {50.02, 85.07, 85.03},
                            {61.78, 96.49, 73.76}, {61.68, 96.25, 73.76}};
  for (const auto& r : rows) EXPECT_NEAR(sp::icat(r[0], r[1]), r[2], 0.02);
  EXPECT_THROW(sp::icat(101, 50), sp::InputError);
  EXPECT_THROW(sp::icat(50, -1), sp::InputError);
}

TEST(Metrics, AllTiesGiveFiftyFifty) {
  const auto m = sp::compute_metrics(std::vector<sp::CandidateLikelihoods>(5, {-1, -1, -1}));
  EXPECT_EQ(m.ss, 50.0);
  EXPECT_EQ(m.lms, 50.0);
}

TEST(Metrics, HandCountedSixExampleFixture) {
  const auto ex = id_examples(4, 2);
  const TableScorer scorer({{"e0", {-1, -2, -3}},  {"e1", {-2, -1, -1.5}},
                            {"e2", {-1, -1, -1}},  {"e3", {-3, -4, -1}},
                            {"e4", {-1, -2, -5}},  {"e5", {-2, -1, -0.5}}});
  const auto eval = sp::stereoset_eval(scorer, ex);
  ASSERT_EQ(eval.per_format.size(), 2u);
  const auto& intra = eval.per_format[0];
  EXPECT_EQ(intra.format, "intrasentence");
  EXPECT_EQ(intra.ss, 62.5);
  EXPECT_EQ(intra.lms, 50.0);
  EXPECT_EQ(intra.icat, 37.5);
  const auto& inter = eval.per_format[1];
  EXPECT_EQ(inter.ss, 50.0);
  EXPECT_EQ(inter.lms, 50.0);
  EXPECT_EQ(inter.icat, 50.0);
  EXPECT_EQ(eval.average.ss, 56.25);
  EXPECT_EQ(eval.average.lms, 50.0);
  EXPECT_EQ(eval.average.icat, 43.75);
  EXPECT_EQ(eval.average.n_examples, 6u);
}

TEST(Metrics, SwappingStereoAndAntiMirrorsSs) {
  std::vector<sp::CandidateLikelihoods> lls, swapped;
  sp::Rng rng = sp::make_rng(3, "swap");
  for (int i = 0; i < 50; ++i) {
    sp::CandidateLikelihoods l{-sp::uniform01(rng), -sp::uniform01(rng), -sp::uniform01(rng)};
    lls.push_back(l);
    swapped.push_back({l.anti_stereotype, l.stereotype, l.unrelated});
  }
  const auto a = sp::compute_metrics(lls), b = sp::compute_metrics(swapped);
  EXPECT_DOUBLE_EQ(a.ss, 100.0 - b.ss);
  EXPECT_EQ(a.lms, b.lms);
  EXPECT_DOUBLE_EQ(a.icat, b.icat);
}

TEST(Metrics, ModelEvaluationIsDeterministic) {
  const auto model = toy_model();
  const sp::SentenceScorer scorer(model, toy_tokenizer());
  const auto a = sp::stereoset_eval(scorer, fixture_set().examples, {}, 1);
  const auto b = sp::stereoset_eval(scorer, fixture_set().examples, {}, 3);
  ASSERT_EQ(a.rows().size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.rows()[i].ss, b.rows()[i].ss);
    EXPECT_EQ(a.rows()[i].lms, b.rows()[i].lms);
    EXPECT_EQ(a.rows()[i].icat, b.rows()[i].icat);
  }
  for (std::size_t i = 0; i < a.likelihoods.size(); ++i) {
    EXPECT_EQ(a.likelihoods[i].stereotype, b.likelihoods[i].stereotype);
  }
}

TEST(Metrics, IntersentenceScoresOnlyTheContinuation) {
  const auto model = toy_model();
  const auto inter = fixture_set().of_format(sp::TaskFormat::kIntersentence);
  const auto& e = inter[0];
  const auto enc = sp::encode_candidate(toy_tokenizer(), e, K::kStereotype);
  const sp::SentenceScorer cont(model, toy_tokenizer());
  const sp::SentenceScorer all(model, toy_tokenizer(),
                               {{}, sp::IntersentenceScoring::kAllTokens});
  EXPECT_EQ(cont.log_likelihood(e, K::kStereotype, sp::AblationMask{}),
            model.sequence_log_likelihood(enc.tokens, {}, enc.candidate_span.start));
  EXPECT_EQ(all.log_likelihood(e, K::kStereotype, sp::AblationMask{}),
            model.sequence_log_likelihood(enc.tokens, {}, 1));
}

TEST(Metrics, EmptyNeuronSetGivesIdenticalRows) {
  const auto model = toy_model();
  const sp::SentenceScorer scorer(model, toy_tokenizer());
  const auto report = sp::baseline_vs_ablated_report(scorer, fixture_set().examples, {});
  ASSERT_EQ(report.rows.size(), 6u);
  for (std::size_t i = 0; i < 6; i += 2) {
    EXPECT_EQ(report.rows[i].condition, "baseline");
    EXPECT_EQ(report.rows[i + 1].condition, "ablated");
    EXPECT_EQ(report.rows[i].ss, report.rows[i + 1].ss);
    EXPECT_EQ(report.rows[i].lms, report.rows[i + 1].lms);
    EXPECT_EQ(report.rows[i].icat, report.rows[i + 1].icat);
  }
  EXPECT_EQ(report.mask_id, "none");
  EXPECT_EQ(report.lms_change, 0.0);

  const sp::AblationMask mask({sp::NeuronCoordinate::ffn(0, 1), sp::NeuronCoordinate::mha(1, 0, 2)});
  const auto ablated = sp::baseline_vs_ablated_report(scorer, fixture_set().examples, mask);
  const auto direct = sp::stereoset_eval(scorer, fixture_set().examples, mask);
  EXPECT_EQ(ablated.rows[1].ss, direct.per_format[0].ss);
  EXPECT_EQ(ablated.rows[5].icat, direct.average.icat);
  EXPECT_EQ(ablated.mask_size, 2u);
}

// ---- residual pathway ----

TEST(Pathway, WorkedProjectionExample) {
  const sp::BiasDirection v({1, 1, 0, 0});
  const std::vector<double> x0 = {1.2, 0.8, -0.3, 0.5};
  const std::vector<double> delta = {0.1, -0.1, 0.5, -0.2};
  const auto x1 = sp::apply_stream_update(x0, delta);
  const std::vector<double> want1 = {1.3, 0.7, 0.2, 0.3};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x1[i], want1[i], 1e-12);
  const auto abl = sp::subtract_stream_component(x1, std::vector<double>{0.6, 0.4, 0, 0});
  const std::vector<double> want2 = {0.7, 0.3, 0.2, 0.3};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(abl[i], want2[i], 1e-12);
  EXPECT_NEAR(sp::projection_strength(x0, v), 1.0, 1e-12);
  EXPECT_NEAR(sp::projection_strength(x1, v), 1.0, 1e-12);
  EXPECT_NEAR(sp::projection_strength(abl, v), 0.5, 1e-12);
}

TEST(Pathway, OrthogonalAndZeroUpdates) {
  const sp::BiasDirection v({1, 1, 0, 0});
  EXPECT_EQ(sp::projection_strength(std::vector<double>{1, -1, 5, 2}, v), 0.0);
  const std::vector<double> x = {1.2, 0.8, -0.3, 0.5};
  EXPECT_EQ(sp::apply_stream_update(x, std::vector<double>(4, 0.0)), x);
  EXPECT_THROW(sp::projection_strength(std::vector<double>{1, 2}, v), sp::InputError);
  EXPECT_THROW(sp::BiasDirection({0, 0}), sp::ComputeError);
  EXPECT_THROW(sp::BiasDirection({NAN, 1}), sp::InputError);
}

TEST(Pathway, FitRejectsIdenticalPairs) {
  const std::vector<std::vector<double>> s = {{1, 2}, {3, 4}};
  EXPECT_THROW(sp::fit_bias_direction(s, s), sp::ComputeError);
}

TEST(Pathway, SeparatedCloudsOnFirstAxis) {
  std::vector<std::vector<double>> s, a;
  for (int i = 0; i < 6; ++i) {
    const double y = i - 2.5, z = (i % 3) - 1.0;
    s.push_back({3.0, y, z});
    a.push_back({-3.0, y, z});
  }
  const auto v = sp::fit_bias_direction(s, a).vector();
  EXPECT_GT(v[0], 0.0);
  EXPECT_NEAR(v[1], 0.0, 1e-12);
  EXPECT_NEAR(v[2], 0.0, 1e-12);
}

TEST(Pathway, RecoversPlantedDirection) {
  const std::size_t d = 16;
  std::mt19937_64 gen(99);
  std::normal_distribution<double> normal;
  std::vector<double> u(d);
  for (auto& x : u) x = normal(gen);
  std::vector<std::vector<double>> s, a;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> base(d), ss(d), aa(d);
    for (std::size_t j = 0; j < d; ++j) base[j] = normal(gen) * 2;
    for (std::size_t j = 0; j < d; ++j) {
      ss[j] = base[j] + 0.5 * u[j] + normal(gen);
      aa[j] = base[j] - 0.5 * u[j] + normal(gen);
    }
    s.push_back(ss);
    a.push_back(aa);
  }
  const auto v = sp::fit_bias_direction(s, a).vector();
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t j = 0; j < d; ++j) {
    dot += u[j] * v[j];
    nu += u[j] * u[j];
    nv += v[j] * v[j];
  }
  const double angle = std::acos(dot / std::sqrt(nu * nv)) * 180 / M_PI;
  EXPECT_LT(angle, 10.0);
}

TEST(Pathway, ProfileOnToyModel) {
  const auto model = toy_model();
  const auto& ex = fixture_set().examples;
  const auto none = sp::layer_projection_profile(model, toy_tokenizer(), ex, {});
  ASSERT_EQ(none.layers.size(), 3u);
  for (const auto& l : none.layers) EXPECT_EQ(l.baseline, l.ablated);
  const auto full = sp::layer_projection_profile(model, toy_tokenizer(), ex,
                                                 sp::full_sublayer_mask(model.config()));
  // With every sub-layer silenced, every layer's stream is x_0.
  EXPECT_EQ(full.layers[0].ablated, full.layers[0].baseline);
  EXPECT_NE(full.layers[2].ablated, full.layers[2].baseline);
  EXPECT_NE(none.csv().find("layer,mean_strength_baseline,mean_strength_ablated"),
            std::string::npos);
}
