#pragma once

#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/text.hpp"

namespace stereoprobe {

// How each block writes into the residual stream.
enum class ResidualForm {
  // x_out = x + SubLayer(LN(x)); standard GPT-2 pre-LN.
  kPreLn,
  // x_out = LN(x) + SubLayer(LN(x)); the normalized-skip variant kept for
  // study. Incompatible with published GPT-2 weights.
  kNormalizedSkip,
};

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 0;
  double ln_epsilon = 1e-5;
  ResidualForm residual_form = ResidualForm::kPreLn;

  static ModelConfig gpt2_small() {
    ModelConfig c;
    c.n_layers = 12;
    c.n_heads = 12;
    c.d_model = 768;
    c.d_head = 64;
    c.d_ff = 3072;
    c.vocab_size = 50257;
    c.max_positions = 1024;
    return c;
  }

  // Convenience constructor deriving d_head and d_ff.
  static ModelConfig make(std::size_t layers, std::size_t heads,
                          std::size_t d_model, std::size_t vocab,
                          std::size_t max_positions) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_head = heads ? d_model / heads : 0;
    c.d_ff = 4 * d_model;
    c.vocab_size = vocab;
    c.max_positions = max_positions;
    c.validate();
    return c;
  }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 ||
        d_ff == 0 || vocab_size == 0 || max_positions == 0) {
      throw ConfigError("model config: all counts must be positive");
    }
    if (n_heads * d_head != d_model) {
      throw ConfigError("model config: n_heads * d_head != d_model");
    }
    if (d_ff != 4 * d_model) {
      throw ConfigError("model config: d_ff must equal 4 * d_model");
    }
    if (!(ln_epsilon > 0.0)) {
      throw ConfigError("model config: ln_epsilon must be positive");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::string to_string(ResidualForm form) {
  return form == ResidualForm::kPreLn ? "pre_ln" : "normalized_skip";
}

// Plain-text `key = value` form, one field per line; '#' starts a comment.
inline std::string serialize_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "n_layers = " << c.n_layers << '\n'
      << "n_heads = " << c.n_heads << '\n'
      << "d_model = " << c.d_model << '\n'
      << "d_head = " << c.d_head << '\n'
      << "d_ff = " << c.d_ff << '\n'
      << "vocab_size = " << c.vocab_size << '\n'
      << "max_positions = " << c.max_positions << '\n'
      << "ln_epsilon = " << format_number(c.ln_epsilon) << '\n'
      << "residual_form = " << to_string(c.residual_form) << '\n';
  return out.str();
}

inline ModelConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("model config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    kv[std::string(trim(body.substr(0, eq)))] =
        std::string(trim(body.substr(eq + 1)));
  }

  ModelConfig c;
  auto take_count = [&](const char* key, std::size_t& field, bool required) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) {
        throw ConfigError(std::string("model config: missing key ") + key);
      }
      return;
    }
    try {
      std::size_t pos = 0;
      const auto value = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument(key);
      field = static_cast<std::size_t>(value);
    } catch (const std::exception&) {
      throw ConfigError(std::string("model config: bad value for ") + key);
    }
    kv.erase(it);
  };
  take_count("n_layers", c.n_layers, true);
  take_count("n_heads", c.n_heads, true);
  take_count("d_model", c.d_model, true);
  take_count("vocab_size", c.vocab_size, true);
  take_count("max_positions", c.max_positions, true);
  c.d_head = c.n_heads ? c.d_model / c.n_heads : 0;
  c.d_ff = 4 * c.d_model;
  take_count("d_head", c.d_head, false);
  take_count("d_ff", c.d_ff, false);
  if (auto it = kv.find("ln_epsilon"); it != kv.end()) {
    try {
      c.ln_epsilon = std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError("model config: bad value for ln_epsilon");
    }
    kv.erase(it);
  }
  if (auto it = kv.find("residual_form"); it != kv.end()) {
    if (it->second == "pre_ln") {
      c.residual_form = ResidualForm::kPreLn;
    } else if (it->second == "normalized_skip") {
      c.residual_form = ResidualForm::kNormalizedSkip;
    } else {
      throw ConfigError("model config: unknown residual_form " + it->second);
    }
    kv.erase(it);
  }
  if (!kv.empty()) {
    throw ConfigError("model config: unknown key " + kv.begin()->first);
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace stereoprobe
