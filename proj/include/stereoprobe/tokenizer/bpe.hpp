#pragma once

#include <algorithm>
#include <climits>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/tokenizer/unicode.hpp"

namespace stereoprobe {

using TokenId = int;

struct TokenWithOffset {
  TokenId id;
  std::size_t byte_begin;  // offsets into the encoded text
  std::size_t byte_end;
};

// Half-open token index range [start, end).
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - start; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Interface for tokenizers that can report byte offsets.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenWithOffset> encode_with_offsets(
      std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::optional<TokenId> bos_id() const = 0;

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& t : encode_with_offsets(text)) ids.push_back(t.id);
    return ids;
  }
};

// Byte-level BPE compatible with the GPT-2 vocabulary files
// (encoder/vocab JSON + ordered merges list).
class BpeTokenizer final : public Tokenizer {
 public:
  BpeTokenizer(std::unordered_map<std::string, TokenId> vocab,
               const std::vector<std::pair<std::string, std::string>>& merges)
      : token_to_id_(std::move(vocab)) {
    id_to_token_.resize(token_to_id_.size());
    std::vector<char> seen(token_to_id_.size(), 0);
    for (const auto& [tok, id] : token_to_id_) {
      if (id < 0 || static_cast<std::size_t>(id) >= token_to_id_.size() ||
          seen[id]) {
        throw LoadError("vocabulary ids must be dense and unique; bad id " +
                        std::to_string(id) + " for token '" + tok + "'");
      }
      seen[id] = 1;
      id_to_token_[id] = tok;
    }
    for (std::size_t r = 0; r < merges.size(); ++r) {
      const auto key = merges[r].first + ' ' + merges[r].second;
      if (!ranks_.emplace(key, static_cast<int>(r)).second) {
        throw LoadError("duplicate merge rule '" + key + "'");
      }
    }
    const auto& enc = unicode::byte_encoder();
    for (int b = 0; b < 256; ++b) {
      byte_symbol_[b] = unicode::encode_utf8(enc[b]);
      byte_decoder_[enc[b]] = static_cast<unsigned char>(b);
    }
    if (auto it = token_to_id_.find("<|endoftext|>");
        it != token_to_id_.end()) {
      bos_ = it->second;
    }
  }

  static BpeTokenizer load(const std::string& vocab_path,
                           const std::string& merges_path) {
    std::ifstream vin(vocab_path);
    if (!vin) throw LoadError("cannot open vocabulary " + vocab_path);
    std::unordered_map<std::string, TokenId> vocab;
    try {
      const auto j = nlohmann::json::parse(vin);
      for (const auto& [tok, id] : j.items()) vocab[tok] = id.get<TokenId>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed vocabulary " + vocab_path + ": " + e.what());
    }
    std::ifstream min(merges_path);
    if (!min) throw LoadError("cannot open merges " + merges_path);
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(min, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
          line.find(' ', sp + 1) != std::string::npos) {
        throw LoadError("malformed merge at " + merges_path + ":" +
                        std::to_string(line_no));
      }
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return BpeTokenizer(std::move(vocab), merges);
  }

  std::size_t vocab_size() const override { return id_to_token_.size(); }
  std::optional<TokenId> bos_id() const override { return bos_; }

  std::optional<TokenId> token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& token_string(TokenId id) const {
    return id_to_token_.at(static_cast<std::size_t>(id));
  }

  std::vector<TokenWithOffset> encode_with_offsets(
      std::string_view text) const override {
    const auto chars = unicode::decode_utf8(text);
    std::vector<TokenWithOffset> out;
    std::size_t i = 0;
    while (i < chars.size()) {
      const std::size_t j = match_pretoken(chars, i);
      const std::size_t b0 = chars[i].byte_offset;
      const std::size_t b1 =
          chars[j - 1].byte_offset + chars[j - 1].byte_length;
      bpe_word(text, b0, b1, out);
      i = j;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const override {
    std::string bytes;
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw InputError("decode: token id " + std::to_string(id) +
                         " out of range");
      }
      for (const auto& ch : unicode::decode_utf8(id_to_token_[id])) {
        auto it = byte_decoder_.find(ch.code_point);
        if (it == byte_decoder_.end()) {
          // Special tokens such as <|endoftext|> are plain text.
          bytes += unicode::encode_utf8(ch.code_point);
        } else {
          bytes += static_cast<char>(it->second);
        }
      }
    }
    return bytes;
  }

 private:
  struct Symbol {
    std::string text;
    std::size_t begin, end;
  };

  // Index one past the pre-token starting at i, following
  // 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  static std::size_t match_pretoken(
      const std::vector<unicode::DecodedChar>& c, std::size_t i) {
    const std::size_t n = c.size();
    auto cp = [&](std::size_t k) -> char32_t {
      return k < n ? c[k].code_point : 0;
    };
    if (cp(i) == U'\'') {
      for (std::u32string_view suffix :
           {U"s", U"t", U"re", U"ve", U"m", U"ll", U"d"}) {
        bool ok = true;
        for (std::size_t k = 0; k < suffix.size(); ++k) {
          if (i + 1 + k >= n || cp(i + 1 + k) != suffix[k]) {
            ok = false;
            break;
          }
        }
        if (ok) return i + 1 + suffix.size();
      }
    }
    using Pred = bool (*)(char32_t);
    const Pred classes[] = {
        +[](char32_t x) { return unicode::is_letter(x); },
        +[](char32_t x) { return unicode::is_number(x); },
        +[](char32_t x) {
          return !unicode::is_space(x) && !unicode::is_letter(x) &&
                 !unicode::is_number(x);
        }};
    for (Pred pred : classes) {
      std::size_t k = i;
      if (cp(k) == U' ' && k + 1 < n && pred(cp(k + 1))) ++k;
      if (k < n && pred(cp(k))) {
        while (k < n && pred(cp(k))) ++k;
        return k;
      }
    }
    // Whitespace run.
    std::size_t k = i;
    while (k < n && unicode::is_space(cp(k))) ++k;
    if (k == i) return i + 1;  // unreachable for valid classes
    if (k < n && k - i >= 2) return k - 1;  // \s+(?!\S) backtracks by one
    return k;
  }

  void bpe_word(std::string_view text, std::size_t b0, std::size_t b1,
                std::vector<TokenWithOffset>& out) const {
    std::vector<Symbol> word;
    word.reserve(b1 - b0);
    for (std::size_t b = b0; b < b1; ++b) {
      word.push_back(
          {byte_symbol_[static_cast<unsigned char>(text[b])], b, b + 1});
    }
    while (word.size() > 1) {
      int best_rank = INT_MAX;
      std::size_t best = 0;
      for (std::size_t k = 0; k + 1 < word.size(); ++k) {
        auto it = ranks_.find(word[k].text + ' ' + word[k + 1].text);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best = k;
        }
      }
      if (best_rank == INT_MAX) break;
      const std::string first = word[best].text;
      const std::string second = word[best + 1].text;
      std::vector<Symbol> merged;
      merged.reserve(word.size());
      for (std::size_t k = 0; k < word.size();) {
        if (k + 1 < word.size() && word[k].text == first &&
            word[k + 1].text == second) {
          merged.push_back(
              {first + second, word[k].begin, word[k + 1].end});
          k += 2;
        } else {
          merged.push_back(std::move(word[k]));
          ++k;
        }
      }
      word = std::move(merged);
    }
    for (const auto& s : word) {
      auto it = token_to_id_.find(s.text);
      if (it == token_to_id_.end()) {
        throw LoadError("vocabulary has no entry for BPE symbol '" + s.text +
                        "'");
      }
      out.push_back({it->second, s.begin, s.end});
    }
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> ranks_;
  std::string byte_symbol_[256];
  std::unordered_map<char32_t, unsigned char> byte_decoder_;
  std::optional<TokenId> bos_;
};

// Tokens whose byte range intersects [byte_begin, byte_end).
inline TokenSpan span_for_byte_range(std::span<const TokenWithOffset> tokens,
                                     std::size_t byte_begin,
                                     std::size_t byte_end) {
  TokenSpan span{tokens.size(), 0};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].byte_begin < byte_end && tokens[i].byte_end > byte_begin) {
      span.start = std::min(span.start, i);
      span.end = i + 1;
    }
  }
  if (span.end == 0) {
    throw InputError("no tokens overlap the requested byte range");
  }
  return span;
}

inline constexpr std::string_view kBlank = "BLANK";

// Locates the tokens covering `candidate` inside `sentence`, where sentence
// is `template_text` with its BLANK replaced by the candidate. The span is
// every token whose bytes intersect the candidate's bytes, which includes a
// leading-space token glued to the first word piece and excludes separate
// trailing punctuation.
inline TokenSpan locate_candidate_span(const Tokenizer& tokenizer,
                                       std::string_view sentence,
                                       std::string_view template_text,
                                       std::string_view candidate) {
  const auto blank = template_text.find(kBlank);
  if (blank == std::string_view::npos) {
    throw InputError("template has no BLANK: '" + std::string(template_text) +
                     "'");
  }
  if (candidate.empty()) throw InputError("empty candidate");
  std::string filled(template_text.substr(0, blank));
  filled += candidate;
  filled += template_text.substr(blank + kBlank.size());
  if (filled != sentence) {
    throw InputError("candidate '" + std::string(candidate) +
                     "' does not fill template to the sentence '" +
                     std::string(sentence) + "'");
  }
  const auto tokens = tokenizer.encode_with_offsets(sentence);
  return span_for_byte_range(tokens, blank, blank + candidate.size());
}

}  // namespace stereoprobe
