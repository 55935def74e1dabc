#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/dataset/stereoset.hpp"
#include "stereoprobe/io/run_config.hpp"
#include "stereoprobe/model/config.hpp"
#include "stereoprobe/model/transformer.hpp"
#include "stereoprobe/model/weights.hpp"
#include "stereoprobe/tokenizer/bpe.hpp"

namespace stereoprobe {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << content;
  if (!out) throw InputError("write failed for " + path.string());
}

// CSV artifacts start with a comment line carrying the config hash.
inline std::string csv_artifact(const std::string& config_hash, const std::string& body) {
  return "# config_hash=" + config_hash + "\n" + body;
}

inline std::string json_artifact(const std::string& config_hash,
                                 const nlohmann::ordered_json& body) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  if (body.is_object()) {
    for (const auto& [k, v] : body.items()) j[k] = v;
  } else {
    j["data"] = body;
  }
  return j.dump(2) + "\n";
}

// Lines of a CSV artifact without comment lines.
inline std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

struct Workspace {
  std::optional<Transformer> model;
  std::optional<BpeTokenizer> tokenizer;
  std::vector<TripletExample> examples;
  DatasetCounts counts;
  std::string weights_checksum;
  std::string tokenizer_checksum;

  const Transformer& net() const {
    if (!model) throw ConfigError("this command needs a model");
    return *model;
  }
  const BpeTokenizer& tok() const {
    if (!tokenizer) throw ConfigError("this command needs a tokenizer");
    return *tokenizer;
  }

  // Identifies everything that determines cached activations.
  std::string activation_fingerprint(const RunConfig& c) const {
    Fnv1a h;
    h.update(weights_checksum);
    h.update(tokenizer_checksum);
    h.update(c.sequence.prepend_bos ? "bos" : "nobos");
    h.update(serialize_config(net().config()));
    return hex64(h.digest());
  }
};

inline Workspace load_workspace(const RunConfig& c, bool need_model, bool need_dataset) {
  require_inputs(c, need_model, need_dataset);
  Workspace ws;
  if (need_model) {
    const ModelConfig mc =
        c.model_config.empty() ? ModelConfig::gpt2_small() : load_config(c.model_config);
    ws.model.emplace(load_weights(c.weights, mc));
    ws.weights_checksum = hex64(weights_checksum(ws.model->weights()));
    ws.tokenizer.emplace(BpeTokenizer::load(c.vocab, c.merges));
    if (ws.tokenizer->vocab_size() > mc.vocab_size) {
      throw ConfigError("tokenizer has " + std::to_string(ws.tokenizer->vocab_size()) +
                        " tokens but the model only " + std::to_string(mc.vocab_size));
    }
    Fnv1a h;
    h.update(read_file(c.vocab));
    h.update(read_file(c.merges));
    ws.tokenizer_checksum = hex64(h.digest());
  }
  if (need_dataset) {
    StereoSet set = load_stereoset(c.dataset);
    ws.examples = std::move(set.examples);
    if (c.limit_examples > 0 && ws.examples.size() > c.limit_examples) {
      ws.examples.resize(c.limit_examples);
    }
    ws.counts = count_examples(ws.examples);
  }
  return ws;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Per-command provenance record; the only artifact carrying a timestamp.
inline void write_manifest(const RunConfig& c, const Workspace& ws,
                           const std::string& command,
                           const std::vector<std::string>& artifacts,
                           const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = c.hash();
  j["config"] = c.to_json();
  j["weights_checksum"] = ws.weights_checksum;
  j["tokenizer_checksum"] = ws.tokenizer_checksum;
  if (!ws.examples.empty()) j["dataset"] = ws.counts.to_json();
  j["artifacts"] = artifacts;
  if (!extra.is_null()) j["details"] = extra;
  j["created_utc"] = utc_timestamp();
  write_file(std::filesystem::path(c.output_dir) / ("manifest_" + command + ".json"),
             j.dump(2) + "\n");
}

}  // namespace stereoprobe
