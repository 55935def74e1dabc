#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "stereoprobe/stereoprobe.hpp"

namespace sp = stereoprobe;

namespace testsupport {

inline std::string data_path(const std::string& name) {
  return std::string(STEREOPROBE_TEST_DATA) + "/" + name;
}

inline const sp::BpeTokenizer& toy_tokenizer() {
  static const sp::BpeTokenizer tok = sp::BpeTokenizer::load(
      data_path("toy_vocab.json"), data_path("toy_merges.txt"));
  return tok;
}

// L=2, H=2, d_model=8 with the toy tokenizer's vocabulary.
inline sp::ModelConfig toy_config() {
  return sp::ModelConfig::make(2, 2, 8, toy_tokenizer().vocab_size(), 64);
}

inline sp::Transformer toy_model(std::uint64_t seed = 7) {
  return sp::Transformer(sp::random_weights(toy_config(), seed));
}

inline const sp::StereoSet& fixture_set() {
  static const sp::StereoSet set =
      sp::load_stereoset(data_path("stereoset_fixture.json"));
  return set;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp =
        std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("stereoprobe_test_" + std::to_string(stamp) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& name) const {
    return (path_ / name).string();
  }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes toy weights, a model config and a small-budget run config into
// `dir`; returns the run config path.
inline std::string write_toy_run(const TempDir& dir, std::uint64_t seed = 11,
                                 const nlohmann::json& overrides = {}) {
  const auto weights = sp::random_weights(toy_config(), 7);
  sp::save_weights(weights, dir.str("toy.weights"));
  {
    std::ofstream out(dir.str("toy.model"));
    out << sp::serialize_config(toy_config());
  }
  nlohmann::json probe = {{"hidden", {16}},        {"dropout", {0.1}},
                          {"learning_rate", 0.01}, {"batch_size", 8},
                          {"epochs", 4},           {"patience", 2}};
  nlohmann::json j = {
      {"seed", seed},
      {"threads", 1},
      {"output_dir", dir.str("out")},
      {"weights", dir.str("toy.weights")},
      {"model_config", dir.str("toy.model")},
      {"vocab", data_path("toy_vocab.json")},
      {"merges", data_path("toy_merges.txt")},
      {"dataset", data_path("stereoset_fixture.json")},
      {"cache_dir", dir.str("cache")},
      {"exp1", {{"top_k", 20}, {"ablation_top_k", 3}, {"chunk_size", 6}}},
      {"exp2",
       {{"probe", probe},
        {"head_permutations", 20},
        {"neuron_permutations", 10},
        {"top_head_fraction", 0.25},
        {"selection", "top_k"},
        {"top_k", 4}}}};
  if (overrides.is_object()) j.merge_patch(overrides);
  const std::string path = dir.str("run.json");
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace testsupport
