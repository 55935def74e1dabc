#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <sys/wait.h>

#include "support.hpp"

using namespace testsupport;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run cli(const std::string& args) {
  const std::string cmd = std::string("\"") + STEREOPROBE_CLI + "\" " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// Relative path -> contents, manifests excluded (they carry a timestamp).
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name.rfind("manifest_", 0) == 0) continue;
    out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

std::vector<fs::path> chunks(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto n = e.path().filename().string();
    if (n.rfind("chunk_", 0) == 0 && e.path().extension() == ".bin") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST(Cli, HelpAndUsage) {
  EXPECT_EQ(cli("--help").code, 0);
  const auto none = cli("");
  EXPECT_EQ(none.code, 1);
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  EXPECT_EQ(cli("--config " + cfg + " frobnicate").code, 1);
}

TEST(Cli, MissingConfigIsInputError) {
  const auto r = cli("--config /nonexistent/run.json eval-stereoset");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("cannot open config file"), std::string::npos) << r.output;
}

TEST(Cli, MalformedConfigIsInputError) {
  TempDir dir;
  std::ofstream(dir.str("bad.json")) << "{ \"seed\": ";
  EXPECT_EQ(cli("--config " + dir.str("bad.json") + " extract").code, 1);
  std::ofstream(dir.str("unknown.json")) << R"({"seed": 1, "sed": 1})";
  const auto r = cli("--config " + dir.str("unknown.json") + " extract");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("sed"), std::string::npos) << r.output;
}

TEST(Cli, MissingDatasetIsInputError) {
  TempDir dir;
  const auto cfg = write_toy_run(dir, 11, {{"dataset", dir.str("nope.json")}});
  const auto r = cli("--config " + cfg + " eval-stereoset");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("nope.json"), std::string::npos) << r.output;
}

TEST(Cli, MismatchedWeightsAreInputError) {
  TempDir dir;
  const auto other = sp::random_weights(sp::ModelConfig::make(1, 2, 8, 335, 64), 1);
  sp::save_weights(other, dir.str("other.weights"));
  const auto cfg = write_toy_run(dir, 11, {{"weights", dir.str("other.weights")}});
  EXPECT_EQ(cli("--config " + cfg + " eval-stereoset").code, 1);
}

TEST(Cli, ExtractReusesAndRepairsCache) {
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  const auto first = cli("--config " + cfg + " extract");
  ASSERT_EQ(first.code, 0) << first.output;
  const auto files = chunks(dir.path() / "cache");
  ASSERT_EQ(files.size(), 4u);  // 20 examples, 6 per chunk
  EXPECT_NE(first.output.find("0 chunks reused, 4 computed"), std::string::npos) << first.output;

  const auto before = slurp(files[1]);
  const auto second = cli("--config " + cfg + " extract");
  ASSERT_EQ(second.code, 0);
  EXPECT_NE(second.output.find("4 chunks reused, 0 computed"), std::string::npos) << second.output;

  {
    std::ofstream out(files[1], std::ios::binary | std::ios::trunc);
    out << before.substr(0, before.size() / 2);
  }
  const auto third = cli("--config " + cfg + " extract");
  ASSERT_EQ(third.code, 0) << third.output;
  EXPECT_NE(third.output.find("warning: rebuilding chunk_1.bin"), std::string::npos)
      << third.output;
  EXPECT_NE(third.output.find("3 chunks reused, 1 computed"), std::string::npos);
  EXPECT_EQ(slurp(files[1]), before);
}

TEST(Cli, EvalStereoSetWritesMetrics) {
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  const auto r = cli("--config " + cfg + " eval-stereoset");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = read_json(dir.path() / "out/eval/stereoset_baseline.json");
  ASSERT_EQ(j.at("rows").size(), 3u);
  for (const auto& row : j.at("rows")) {
    EXPECT_GE(row.at("SS").get<double>(), 0.0);
    EXPECT_LE(row.at("SS").get<double>(), 100.0);
    EXPECT_GE(row.at("iCAT").get<double>(), 0.0);
  }
  EXPECT_TRUE(fs::exists(dir.path() / "out/eval/stereoset_baseline.csv"));
  const auto manifest = read_json(dir.path() / "out/manifest_eval-stereoset.json");
  EXPECT_TRUE(manifest.contains("created_utc"));
}

TEST(Cli, ReportWithoutExperimentsFails) {
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  const auto r = cli("--config " + cfg + " report");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("missing artifacts"), std::string::npos) << r.output;
}

TEST(Cli, FullRunIsDeterministic) {
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  const fs::path out = dir.path() / "out";
  for (const char* cmd : {"exp1", "exp2", "report"}) {
    const auto r = cli("--config " + cfg + " " + cmd);
    ASSERT_EQ(r.code, 0) << cmd << "\n" << r.output;
  }
  for (const char* f : {"exp1/tables.json", "exp1/top_scores.csv", "exp1/ablation_effects.json",
                        "exp2/probe.bin", "exp2/probe.bin.json", "exp2/shapley_heads.csv",
                        "exp2/shapley_neurons.csv", "exp2/selected_neurons.json",
                        "exp2/ablation_curve_heads.csv", "exp2/stereoset_comparison.json",
                        "exp2/embedding_study.json", "exp2/corpus_manifest.json",
                        "report/summary.md", "report/plot_head_ablation.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto selected = read_json(out / "exp2/selected_neurons.json");
  EXPECT_EQ(selected.at("selected_neurons").get<int>(), 4);  // top_k 4
  EXPECT_EQ(selected.at("top_heads").size(), 1u);            // floor(0.25 * 4)
  const auto summary = slurp(out / "report/summary.md");
  for (const char* section : {"## Contrastive ratio statistics", "## Single-neuron ablation",
                              "## Probe and Shapley attribution", "## StereoSet"}) {
    EXPECT_NE(summary.find(section), std::string::npos) << section;
  }

  const auto first = snapshot(out);
  fs::remove_all(out);
  for (const char* cmd : {"exp1", "exp2", "report"}) {
    ASSERT_EQ(cli("--config " + cfg + " --threads 3 " + cmd).code, 0) << cmd;
  }
  const auto second = snapshot(out);
  // Artifacts do not depend on the worker count.
  EXPECT_EQ(second, first);

  // Same flags, same bytes.
  fs::remove_all(out);
  for (const char* cmd : {"exp1", "exp2", "report"}) {
    ASSERT_EQ(cli("--config " + cfg + " " + cmd).code, 0) << cmd;
  }
  EXPECT_EQ(snapshot(out), first);
}

TEST(Cli, SeedAndOutputOverrides) {
  TempDir dir;
  const auto cfg = write_toy_run(dir);
  ASSERT_EQ(cli("--config " + cfg + " --output " + dir.str("alt") + " eval-stereoset").code, 0);
  EXPECT_TRUE(fs::exists(dir.path() / "alt/eval/stereoset_baseline.json"));
  EXPECT_FALSE(fs::exists(dir.path() / "out/eval"));

  ASSERT_EQ(cli("--config " + cfg + " --seed 12 exp2").code, 0);
  const auto a = read_json(dir.path() / "out/exp2/corpus_manifest.json");
  const auto m = read_json(dir.path() / "out/manifest_exp2.json");
  ASSERT_EQ(cli("--config " + cfg + " exp2").code, 0);
  const auto b = read_json(dir.path() / "out/exp2/corpus_manifest.json");
  EXPECT_NE(a.dump(), b.dump());
  EXPECT_NE(m.dump().find("12"), std::string::npos);
}
