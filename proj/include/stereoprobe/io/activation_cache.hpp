#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/contrastive/layout.hpp"
#include "stereoprobe/contrastive/scoring.hpp"

namespace stereoprobe {

static_assert(std::endian::native == std::endian::little,
              "activation cache files are little-endian");

struct CacheStats {
  std::size_t chunks = 0;
  std::size_t reused = 0;
  std::size_t built = 0;
  std::size_t rebuilt = 0;  // existed but were stale or corrupt
  std::size_t examples_computed = 0;
  std::vector<std::string> warnings;
};

// Span-averaged activations stored in fixed-size chunks of examples. Each
// chunk file is: 8-byte magic, u64 header length, JSON index header (entries
// keyed by example id, candidate and component, a run fingerprint and a data
// checksum), then float64 data. Stale or damaged chunks are rebuilt; valid
// ones are reused, so an interrupted build resumes where it stopped.
class ActivationCache {
 public:
  using ComputeFn = std::function<CandidateActivations(const TripletExample&)>;
  using VisitFn = std::function<void(std::size_t, const CandidateActivations&)>;
  static constexpr char kMagic[8] = {'S', 'P', 'A', 'C', 'H', 'N', 'K', '1'};

  ActivationCache(std::filesystem::path dir, std::string fingerprint,
                  const ModelConfig& config, std::size_t chunk_size = 64)
      : dir_(std::move(dir)),
        fingerprint_(std::move(fingerprint)),
        config_(config),
        layout_(config),
        chunk_size_(chunk_size) {
    if (chunk_size_ == 0) throw ConfigError("activation cache: chunk size must be > 0");
  }

  std::size_t chunk_count(std::size_t n_examples) const {
    return (n_examples + chunk_size_ - 1) / chunk_size_;
  }

  std::filesystem::path chunk_path(std::size_t k) const {
    return dir_ / ("chunk_" + std::to_string(k) + ".bin");
  }

  // Makes sure every chunk exists and is valid, computing only what is
  // missing. Examples inside a chunk are computed in parallel.
  CacheStats build(const std::vector<TripletExample>& examples,
                   const ComputeFn& compute, std::size_t threads = 1) const {
    std::filesystem::create_directories(dir_);
    CacheStats stats;
    stats.chunks = chunk_count(examples.size());
    for (std::size_t k = 0; k < stats.chunks; ++k) {
      std::string why;
      const bool exists = std::filesystem::exists(chunk_path(k));
      if (exists && read_chunk(k, examples, &why)) {
        ++stats.reused;
        continue;
      }
      if (exists) {
        ++stats.rebuilt;
        stats.warnings.push_back("rebuilding " + chunk_path(k).filename().string() +
                                 ": " + why);
      } else {
        ++stats.built;
      }
      const auto [b, e] = bounds(k, examples.size());
      std::vector<CandidateActivations> acts(e - b);
      parallel_for(e - b, threads, [&](std::size_t i) { acts[i] = compute(examples[b + i]); });
      stats.examples_computed += e - b;
      write_chunk(k, examples, acts);
    }
    write_index(examples.size(), stats.chunks);
    return stats;
  }

  // Calls `fn(example index, activations)` in example order. Throws when a
  // chunk is missing or invalid.
  void visit(const std::vector<TripletExample>& examples, const VisitFn& fn) const {
    for (std::size_t k = 0; k < chunk_count(examples.size()); ++k) {
      std::string why;
      auto acts = read_chunk(k, examples, &why);
      if (!acts) throw InputError("activation cache: " + chunk_path(k).string() + ": " + why);
      const std::size_t b = k * chunk_size_;
      for (std::size_t i = 0; i < acts->size(); ++i) fn(b + i, (*acts)[i]);
    }
  }

  // The chunk's activations, or nullopt with the reason it cannot be used.
  std::optional<std::vector<CandidateActivations>> read_chunk(
      std::size_t k, const std::vector<TripletExample>& examples,
      std::string* why = nullptr) const {
    auto fail = [&](const std::string& reason) {
      if (why) *why = reason;
      return std::optional<std::vector<CandidateActivations>>{};
    };
    std::ifstream in(chunk_path(k), std::ios::binary);
    if (!in) return fail("missing");
    char magic[8];
    std::uint64_t header_len = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) return fail("bad magic");
    if (!in.read(reinterpret_cast<char*>(&header_len), 8) || header_len > (1u << 26)) {
      return fail("bad header length");
    }
    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
      return fail("truncated header");
    }
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception&) {
      return fail("unreadable header");
    }
    const auto [b, e] = bounds(k, examples.size());
    const std::size_t n = layout_.size();
    try {
      if (header.at("fingerprint").get<std::string>() != fingerprint_) {
        return fail("fingerprint mismatch");
      }
      if (header.at("coordinates").get<std::size_t>() != n) return fail("layout mismatch");
      const auto& ids = header.at("example_ids");
      if (ids.size() != e - b) return fail("example count mismatch");
      for (std::size_t i = b; i < e; ++i) {
        if (ids[i - b].get<std::string>() != examples[i].id) return fail("example ids differ");
      }
    } catch (const nlohmann::json::exception&) {
      return fail("incomplete header");
    }
    std::vector<double> data((e - b) * 3 * n);
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      return fail("truncated data");
    }
    if (in.peek() != std::char_traits<char>::eof()) return fail("trailing bytes");
    Fnv1a h;
    h.update(std::span<const double>(data));
    if (header.value("checksum", std::string()) != hex64(h.digest())) {
      return fail("checksum mismatch");
    }
    std::vector<CandidateActivations> out(e - b);
    for (std::size_t i = 0; i < e - b; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double* src = data.data() + (i * 3 + c) * n;
        out[i].values[c].assign(src, src + n);
      }
    }
    return out;
  }

 private:
  std::pair<std::size_t, std::size_t> bounds(std::size_t k, std::size_t n) const {
    const std::size_t b = k * chunk_size_;
    return {b, std::min(n, b + chunk_size_)};
  }

  void write_chunk(std::size_t k, const std::vector<TripletExample>& examples,
                   const std::vector<CandidateActivations>& acts) const {
    const std::size_t n = layout_.size();
    const std::size_t d = config_.d_model;
    const std::size_t L = config_.n_layers;
    const std::size_t b = k * chunk_size_;
    std::vector<double> data;
    data.reserve(acts.size() * 3 * n);
    nlohmann::ordered_json header;
    header["fingerprint"] = fingerprint_;
    header["chunk"] = k;
    header["coordinates"] = n;
    auto ids = nlohmann::ordered_json::array();
    auto entries = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < acts.size(); ++i) {
      ids.push_back(examples[b + i].id);
      for (CandidateKind kind : kAllCandidates) {
        const auto& v = acts[i].of(kind);
        if (v.size() != n) throw ComputeError("activation cache: wrong activation length");
        const std::size_t base = data.size();
        data.insert(data.end(), v.begin(), v.end());
        const std::pair<Component, std::pair<std::size_t, std::size_t>> parts[] = {
            {Component::kEmbedding, {base, d}},
            {Component::kMha, {base + d, L * d}},
            {Component::kFfn, {base + d + L * d, L * d}}};
        for (const auto& [comp, range] : parts) {
          entries.push_back({{"example_id", examples[b + i].id},
                             {"candidate", to_string(kind)},
                             {"component", to_string(comp)},
                             {"offset", range.first},
                             {"count", range.second}});
        }
      }
    }
    header["example_ids"] = std::move(ids);
    header["entries"] = std::move(entries);
    Fnv1a h;
    h.update(std::span<const double>(data));
    header["checksum"] = hex64(h.digest());
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    const auto tmp = chunk_path(k).string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw InputError("activation cache: cannot write " + tmp);
      out.write(kMagic, 8);
      out.write(reinterpret_cast<const char*>(&len), 8);
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
      if (!out) throw InputError("activation cache: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, chunk_path(k));
  }

  void write_index(std::size_t n_examples, std::size_t chunks) const {
    nlohmann::ordered_json j;
    j["fingerprint"] = fingerprint_;
    j["chunk_size"] = chunk_size_;
    j["examples"] = n_examples;
    j["coordinates"] = layout_.size();
    auto& files = j["chunks"] = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < chunks; ++k) files.push_back(chunk_path(k).filename().string());
    std::ofstream out(dir_ / "index.json");
    out << j.dump(2) << "\n";
  }

  std::filesystem::path dir_;
  std::string fingerprint_;
  ModelConfig config_;
  ActivationLayout layout_;
  std::size_t chunk_size_;
};

}  // namespace stereoprobe
