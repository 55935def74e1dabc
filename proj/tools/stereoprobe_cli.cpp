// Command-line driver: extract, exp1, exp2, eval-stereoset, report.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "stereoprobe/stereoprobe.hpp"

namespace sp = stereoprobe;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string output;
};

sp::RunConfig resolve_config(const Overrides& o) {
  std::ifstream in(o.config);
  if (!in) throw sp::ConfigError("cannot open config file " + o.config);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw sp::ConfigError("malformed config " + o.config + ": " + e.what());
  }
  if (!j.is_object()) throw sp::ConfigError("config: top level must be an object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.threads) j["threads"] = *o.threads;
  sp::RunConfig c = sp::parse_run_config(j, std::filesystem::path(o.config).parent_path());
  if (!o.output.empty()) c.output_dir = o.output;
  return c;
}

void log(const std::string& msg) { std::cerr << "stereoprobe: " << msg << "\n"; }

int run(const std::string& command, const Overrides& o) {
  const sp::RunConfig c = resolve_config(o);
  log(command + " (config " + c.hash() + ", seed " + std::to_string(c.seed) + ", " +
      std::to_string(c.threads) + " threads)");
  if (command == "report") {
    const auto r = sp::run_report(c);
    for (const auto& a : r.artifacts) log("wrote " + a);
    return sp::kExitOk;
  }
  const bool needs_data = true;
  const sp::Workspace ws = sp::load_workspace(c, true, needs_data);
  log("loaded " + std::to_string(ws.examples.size()) + " examples");
  std::vector<std::string> artifacts;
  if (command == "extract") {
    const auto r = sp::run_extract(c, ws);
    for (const auto& w : r.stats.warnings) log("warning: " + w);
    log("cache: " + std::to_string(r.stats.reused) + " chunks reused, " +
        std::to_string(r.stats.built + r.stats.rebuilt) + " computed");
    artifacts.push_back(c.cache_path());
  } else if (command == "exp1") {
    const auto r = sp::run_exp1(c, ws);
    for (const auto& w : r.table.warnings) log("warning: " + w);
    artifacts = r.artifacts;
  } else if (command == "exp2") {
    const auto r = sp::run_exp2(c, ws);
    log("best validation accuracy " + sp::format_fixed(r.training.best_validation_accuracy, 4) +
        ", " + std::to_string(r.pipeline.selected.size()) + " neurons selected");
    artifacts = r.artifacts;
  } else if (command == "eval-stereoset") {
    artifacts = sp::run_eval_stereoset(c, ws).artifacts;
  }
  for (const auto& a : artifacts) log("wrote " + a);
  return sp::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Localize stereotype representations in a GPT-2 style model"};
  app.require_subcommand(1);
  Overrides o;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  app.add_option("--config", o.config, "Run configuration (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  auto* threads_opt = app.add_option("--threads", threads, "Override the worker count");
  app.add_option("--output", o.output, "Override the output directory");

  std::string command;
  const std::pair<const char*, const char*> commands[] = {
      {"extract", "Build or resume the activation cache"},
      {"exp1", "Contrastive neuron scoring and single-neuron ablations"},
      {"exp2", "Probe training, Shapley attribution and ablation evaluation"},
      {"eval-stereoset", "Baseline SS, LMS and iCAT"},
      {"report", "Markdown summary and plot data from earlier runs"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    sub->callback([&command, n = std::string(name)] { command = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? sp::kExitOk : sp::kExitInputError;
  }
  if (seed_opt->count()) o.seed = seed;
  if (threads_opt->count()) o.threads = threads;

  try {
    return run(command, o);
  } catch (const sp::Error& e) {
    std::cerr << "stereoprobe: error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "stereoprobe: error: " << e.what() << "\n";
    return sp::kExitInputError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "stereoprobe: error: " << e.what() << "\n";
    return sp::kExitInputError;
  } catch (const std::exception& e) {
    std::cerr << "stereoprobe: error: " << e.what() << "\n";
    return sp::kExitComputeError;
  }
}
