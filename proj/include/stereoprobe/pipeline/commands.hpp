#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "stereoprobe/contrastive/ablation_study.hpp"
#include "stereoprobe/io/activation_cache.hpp"
#include "stereoprobe/metrics/stereoset_metrics.hpp"
#include "stereoprobe/pathway/residual.hpp"
#include "stereoprobe/pipeline/workspace.hpp"
#include "stereoprobe/probe/trainer.hpp"
#include "stereoprobe/shapley/probe_game.hpp"

namespace stereoprobe {

namespace fs = std::filesystem;

struct ExtractResult {
  CacheStats stats;
  std::string fingerprint;
};

inline ActivationCache make_cache(const RunConfig& c, const Workspace& ws) {
  return ActivationCache(c.cache_path(), ws.activation_fingerprint(c),
                         ws.net().config(), c.exp1.chunk_size);
}

inline ExtractResult run_extract(const RunConfig& c, const Workspace& ws) {
  ExtractResult r;
  r.fingerprint = ws.activation_fingerprint(c);
  const ActivationCache cache = make_cache(c, ws);
  r.stats = cache.build(
      ws.examples,
      [&](const TripletExample& e) {
        return collect_candidate_activations(ws.net(), ws.tok(), e, c.sequence);
      },
      c.threads);
  write_manifest(c, ws, "extract", {fs::path(c.cache_path()).string()},
                 {{"chunks", r.stats.chunks},
                  {"reused", r.stats.reused},
                  {"built", r.stats.built},
                  {"rebuilt", r.stats.rebuilt},
                  {"examples_computed", r.stats.examples_computed},
                  {"warnings", r.stats.warnings}});
  return r;
}

struct Exp1Result {
  ScoreTable table;
  Tabulation tabulation;
  AblationStudy ablation;
  std::vector<std::string> artifacts;
};

inline Exp1Result run_exp1(const RunConfig& c, const Workspace& ws) {
  const ExtractResult extracted = run_extract(c, ws);
  const std::string hash = c.hash();
  const fs::path out = fs::path(c.output_dir) / "exp1";
  Exp1Result r;

  ScoreAccumulator acc({c.exp1.epsilon, c.exp1.ratio_mode});
  make_cache(c, ws).visit(ws.examples, [&](std::size_t i, const CandidateActivations& a) {
    acc.add(subsection_of(ws.examples[i]), a);
  });
  r.table = acc.finish();
  std::vector<SubsectionKey> expected;
  for (const auto& g : group_by_subsection(ws.examples)) expected.push_back(g.key);
  note_empty_subsections(r.table, expected);

  const ModelConfig& mc = ws.net().config();
  const std::vector<NeuronScore> scores = flatten_scores(r.table, mc);
  r.tabulation = rank_and_tabulate(scores, c.exp1.top_k, mc.n_layers);

  const SentenceScorer scorer(ws.net(), ws.tok(), c.scorer_options());
  const auto targets = top_per_component(scores, c.exp1.ablation_top_k);
  r.ablation = single_neuron_ablation_study(targets, ws.examples, scorer,
                                            {c.exp1.effect_scope, c.threads});

  std::vector<NeuronScore> top;
  for (const auto& rk : r.tabulation.rankings) top.insert(top.end(), rk.top.begin(), rk.top.end());
  nlohmann::ordered_json tables = r.tabulation.to_json();
  tables["warnings"] = r.table.warnings;
  tables["subsections"] = r.table.subsections.size();

  const std::vector<std::pair<std::string, std::string>> files = {
      {"tables.json", json_artifact(hash, tables)},
      {"top_scores.csv", csv_artifact(hash, scores_csv(top))},
      {"ablation_effects.json", json_artifact(hash, r.ablation.to_json())},
  };
  for (const auto& [name, content] : files) {
    write_file(out / name, content);
    r.artifacts.push_back((out / name).string());
  }
  write_manifest(c, ws, "exp1", r.artifacts);
  return r;
}

struct Exp2Result {
  ProbeCorpus corpus;
  TrainingResult training;
  PipelineResult pipeline;
  AblationCurve head_top_down, head_random, neuron_top_down, neuron_random;
  ComparisonReport comparison;
  std::optional<EmbeddingStudy> embedding;
  std::optional<ProjectionProfile> projection;
  std::vector<std::string> artifacts;
};

inline nlohmann::ordered_json mask_json(const AblationMask& mask) {
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& co : mask.coordinates()) {
    list.push_back({{"component", to_string(co.component)},
                    {"layer", co.layer},
                    {"head", co.head},
                    {"neuron", co.neuron}});
  }
  return list;
}

inline Exp2Result run_exp2(const RunConfig& c, const Workspace& ws) {
  const std::string hash = c.hash();
  const fs::path out = fs::path(c.output_dir) / "exp2";
  const ModelConfig& mc = ws.net().config();
  Exp2Result r;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file(out / name, content);
    r.artifacts.push_back((out / name).string());
  };

  r.corpus = build_probe_corpus(ws.examples,
                                head_feature_fn(ws.net(), ws.tok(), {c.sequence, c.exp2.pooling}),
                                c.seed, {c.exp2.validation_fraction, c.threads});
  emit("corpus_manifest.json", json_artifact(hash, r.corpus.manifest()));

  r.training = train_probe(r.corpus, c.exp2.probe, c.seed);
  fs::create_directories(out);
  save_probe(r.training.model, (out / "probe.bin").string(), hash);
  r.artifacts.push_back((out / "probe.bin").string());
  emit("probe_curve.csv", csv_artifact(hash, r.training.curve_csv()));

  PipelineOptions po;
  po.head_permutations = c.exp2.head_permutations;
  po.neuron_permutations = c.exp2.neuron_permutations;
  po.top_head_fraction = c.exp2.top_head_fraction;
  po.selection = c.exp2.selection;
  po.top_k = c.exp2.top_k;
  po.seed = c.seed;
  po.threads = c.threads;
  r.pipeline = head_then_neuron_pipeline(r.training.model, r.corpus, mc, po);
  emit("shapley_heads.csv", csv_artifact(hash, r.pipeline.head_report.csv()));
  emit("shapley_neurons.csv", csv_artifact(hash, r.pipeline.neuron_report.csv()));
  nlohmann::ordered_json sel = r.pipeline.to_json();
  sel["neurons"] = mask_json(r.pipeline.selected);
  emit("selected_neurons.json", json_artifact(hash, sel));

  const auto& rows = r.corpus.validation.empty() ? r.corpus.train : r.corpus.validation;
  {
    const ProbeGame game(r.training.model, r.corpus, r.pipeline.head_players, rows);
    r.head_top_down = ablation_curve(r.pipeline.head_report, game, CurveOrder::kTopDown, c.seed);
    r.head_random = ablation_curve(r.pipeline.head_report, game, CurveOrder::kRandom, c.seed);
  }
  {
    const ProbeGame game(r.training.model, r.corpus, r.pipeline.neuron_players, rows);
    r.neuron_top_down = ablation_curve(r.pipeline.neuron_report, game, CurveOrder::kTopDown, c.seed);
    r.neuron_random = ablation_curve(r.pipeline.neuron_report, game, CurveOrder::kRandom, c.seed);
  }
  emit("ablation_curve_heads.csv",
       csv_artifact(hash, r.head_top_down.csv() + r.head_random.csv(false)));
  emit("ablation_curve_neurons.csv",
       csv_artifact(hash, r.neuron_top_down.csv() + r.neuron_random.csv(false)));

  const SentenceScorer scorer(ws.net(), ws.tok(), c.scorer_options());
  r.comparison = baseline_vs_ablated_report(scorer, ws.examples, r.pipeline.selected, c.threads);
  emit("stereoset_comparison.json", json_artifact(hash, r.comparison.to_json()));
  emit("stereoset_comparison.csv",
       csv_artifact(hash, metrics_csv(r.comparison.rows, "model", r.comparison.mask_id)));

  if (ws.examples.size() >= 2) {
    r.projection = layer_projection_profile(ws.net(), ws.tok(), ws.examples,
                                            r.pipeline.selected, c.threads, c.sequence);
    emit("projection_profile.csv", csv_artifact(hash, r.projection->csv()));
  }
  if (c.exp2.embedding_study) {
    r.embedding = embedding_probe_study(ws.net(), ws.tok(), ws.examples, c.exp2.probe,
                                        c.seed, {c.exp2.validation_fraction, c.threads},
                                        c.sequence);
    emit("embedding_study.json", json_artifact(hash, {{"results", r.embedding->to_json()}}));
  }
  write_manifest(c, ws, "exp2", r.artifacts,
                 {{"best_validation_accuracy", r.training.best_validation_accuracy},
                  {"selected_neurons", r.pipeline.selected.size()}});
  return r;
}

struct EvalResult {
  StereoSetEvaluation evaluation;
  std::vector<std::string> artifacts;
};

inline EvalResult run_eval_stereoset(const RunConfig& c, const Workspace& ws) {
  const std::string hash = c.hash();
  const fs::path out = fs::path(c.output_dir) / "eval";
  const SentenceScorer scorer(ws.net(), ws.tok(), c.scorer_options());
  EvalResult r;
  r.evaluation = stereoset_eval(scorer, ws.examples, {}, c.threads, "baseline");
  nlohmann::ordered_json j;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : r.evaluation.rows()) rows.push_back(row.to_json());
  write_file(out / "stereoset_baseline.json", json_artifact(hash, j));
  write_file(out / "stereoset_baseline.csv",
             csv_artifact(hash, metrics_csv(r.evaluation.rows(), "model", "none")));
  r.artifacts = {(out / "stereoset_baseline.json").string(),
                 (out / "stereoset_baseline.csv").string()};
  write_manifest(c, ws, "eval-stereoset", r.artifacts);
  return r;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string fixed2(double v) { return format_fixed(v, 2); }

// First ablated fraction at which accuracy drops to `level` or below.
inline std::string chance_point(const std::vector<std::string>& lines,
                                const std::string& order, double level) {
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (f.size() >= 3 && f[2] == order && std::stod(f[1]) <= level) {
      return fixed2(100.0 * std::stod(f[0])) + "%";
    }
  }
  return "not reached";
}

}  // namespace detail

struct ReportResult {
  std::string summary;
  std::vector<std::string> artifacts;
};

// Markdown summary plus plot-data files from earlier exp1/exp2 artifacts.
inline ReportResult run_report(const RunConfig& c) {
  const fs::path base(c.output_dir);
  const std::vector<std::string> needed = {
      "exp1/tables.json",          "exp1/ablation_effects.json",
      "exp2/probe_curve.csv",      "exp2/shapley_heads.csv",
      "exp2/ablation_curve_heads.csv", "exp2/ablation_curve_neurons.csv",
      "exp2/stereoset_comparison.json", "exp2/selected_neurons.json"};
  std::vector<std::string> missing;
  for (const auto& n : needed) {
    if (!fs::is_regular_file(base / n)) missing.push_back((base / n).string());
  }
  if (!missing.empty()) {
    std::string msg = "report: missing artifacts:";
    for (const auto& m : missing) msg += " " + m;
    throw InputError(msg);
  }
  auto load_json = [&](const std::string& n) {
    try {
      return nlohmann::json::parse(read_file((base / n).string()));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("report: unreadable artifact " + (base / n).string() + ": " + e.what());
    }
  };
  const auto tables = load_json("exp1/tables.json");
  const auto effects = load_json("exp1/ablation_effects.json");
  const auto comparison = load_json("exp2/stereoset_comparison.json");
  const auto selected = load_json("exp2/selected_neurons.json");
  const auto probe_curve = csv_lines(read_file((base / "exp2/probe_curve.csv").string()));
  const auto heads = csv_lines(read_file((base / "exp2/shapley_heads.csv").string()));
  const auto head_curve = csv_lines(read_file((base / "exp2/ablation_curve_heads.csv").string()));
  const auto neuron_curve =
      csv_lines(read_file((base / "exp2/ablation_curve_neurons.csv").string()));

  std::string md = "# Stereotype localization summary\n\n";
  md += "Config hash: `" + tables.value("config_hash", std::string("?")) + "`\n\n";
  md += "## Contrastive ratio statistics\n\n";
  md += "| Component | Bias type | Mean | Median | Max | Heavy tail |\n";
  md += "|---|---|---|---|---|---|\n";
  for (const auto& s : tables.at("ratio_statistics")) {
    md += "| " + s.at("component").get<std::string>() + " | " +
          s.at("bias_type").get<std::string>() + " | " +
          detail::fixed2(s.at("mean").get<double>()) + " | " +
          detail::fixed2(s.at("median").get<double>()) + " | " +
          detail::fixed2(s.at("max").get<double>()) + " | " +
          (s.at("heavy_tail").get<bool>() ? "yes" : "no") + " |\n";
  }
  md += "\n## Single-neuron ablation\n\n";
  md += "| Component | Neurons | Mean effect % | Median effect % | Max effect % | Negative |\n";
  md += "|---|---|---|---|---|---|\n";
  for (const auto& s : effects.at("summary")) {
    md += "| " + s.at("component").get<std::string>() + " | " +
          std::to_string(s.at("count").get<std::size_t>()) + " | " +
          detail::fixed2(s.at("mean_effect_percent").get<double>()) + " | " +
          detail::fixed2(s.at("median_effect_percent").get<double>()) + " | " +
          detail::fixed2(s.at("max_effect_percent").get<double>()) + " | " +
          detail::fixed2(100.0 * s.at("fraction_negative").get<double>()) + "% |\n";
  }
  double best = 0.0;
  for (std::size_t i = 1; i < probe_curve.size(); ++i) {
    const auto f = detail::split_csv_line(probe_curve[i]);
    if (f.size() >= 3) best = std::max(best, std::stod(f[2]));
  }
  md += "\n## Probe and Shapley attribution\n\n";
  md += "Best validation accuracy: " + detail::fixed2(100.0 * best) + "%\n\n";
  md += "Top heads by Shapley value:\n\n| Rank | Head | phi |\n|---|---|---|\n";
  std::vector<std::vector<std::string>> head_rows;
  for (std::size_t i = 1; i < heads.size(); ++i) head_rows.push_back(detail::split_csv_line(heads[i]));
  std::sort(head_rows.begin(), head_rows.end(), [](const auto& a, const auto& b) {
    return std::stoul(a[3]) < std::stoul(b[3]);
  });
  for (std::size_t i = 0; i < std::min<std::size_t>(10, head_rows.size()); ++i) {
    md += "| " + head_rows[i][3] + " | " + head_rows[i][0] + " | " +
          format_fixed(std::stod(head_rows[i][1]), 4) + " |\n";
  }
  md += "\nSelected neurons: " +
        std::to_string(selected.at("selected_neurons").get<std::size_t>()) + "\n\n";
  md += "Ablation reaching 55% accuracy or below: heads top-down " +
        detail::chance_point(head_curve, "top_down", 0.55) + ", random " +
        detail::chance_point(head_curve, "random", 0.55) + "; neurons top-down " +
        detail::chance_point(neuron_curve, "top_down", 0.55) + ", random " +
        detail::chance_point(neuron_curve, "random", 0.55) + "\n\n";
  md += "## StereoSet\n\n| Format | Condition | SS | LMS | iCAT |\n|---|---|---|---|---|\n";
  for (const auto& row : comparison.at("rows")) {
    md += "| " + row.at("format").get<std::string>() + " | " +
          row.at("condition").get<std::string>() + " | " +
          detail::fixed2(row.at("SS").get<double>()) + " | " +
          detail::fixed2(row.at("LMS").get<double>()) + " | " +
          detail::fixed2(row.at("iCAT").get<double>()) + " |\n";
  }
  md += std::string("\nSS moved toward 50: ") +
        (comparison.at("ss_toward_parity").get<bool>() ? "yes" : "no") +
        "; LMS change: " + detail::fixed2(comparison.at("lms_change").get<double>()) + "\n";

  ReportResult r;
  r.summary = md;
  const fs::path out = base / "report";
  const std::vector<std::pair<std::string, std::string>> files = {
      {"summary.md", md},
      {"plot_head_ablation.csv", read_file((base / "exp2/ablation_curve_heads.csv").string())},
      {"plot_neuron_ablation.csv", read_file((base / "exp2/ablation_curve_neurons.csv").string())},
      {"plot_probe_training.csv", read_file((base / "exp2/probe_curve.csv").string())}};
  for (const auto& [name, content] : files) {
    write_file(out / name, content);
    r.artifacts.push_back((out / name).string());
  }
  return r;
}

}  // namespace stereoprobe
