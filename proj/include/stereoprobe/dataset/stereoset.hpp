#pragma once

#include <array>
#include <compare>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <tuple>
#include <vector>

#include "stereoprobe/common/error.hpp"

namespace stereoprobe {

enum class BiasType : std::uint8_t {
  kRace = 0,
  kProfession = 1,
  kGender = 2,
  kReligion = 3
};
inline constexpr BiasType kAllBiasTypes[] = {
    BiasType::kRace, BiasType::kProfession, BiasType::kGender,
    BiasType::kReligion};

enum class TaskFormat : std::uint8_t { kIntrasentence = 0, kIntersentence = 1 };

enum class CandidateKind : std::uint8_t {
  kStereotype = 0,
  kAntiStereotype = 1,
  kUnrelated = 2
};
inline constexpr CandidateKind kAllCandidates[] = {
    CandidateKind::kStereotype, CandidateKind::kAntiStereotype,
    CandidateKind::kUnrelated};

inline std::string to_string(BiasType b) {
  switch (b) {
    case BiasType::kRace:
      return "race";
    case BiasType::kProfession:
      return "profession";
    case BiasType::kGender:
      return "gender";
    case BiasType::kReligion:
      return "religion";
  }
  return "unknown";
}

inline BiasType parse_bias_type(const std::string& s) {
  for (BiasType b : kAllBiasTypes) {
    if (to_string(b) == s) return b;
  }
  throw IngestError("unknown bias_type '" + s + "'");
}

inline std::string to_string(TaskFormat f) {
  return f == TaskFormat::kIntrasentence ? "intrasentence" : "intersentence";
}

inline std::string to_string(CandidateKind k) {
  switch (k) {
    case CandidateKind::kStereotype:
      return "stereotype";
    case CandidateKind::kAntiStereotype:
      return "anti-stereotype";
    case CandidateKind::kUnrelated:
      return "unrelated";
  }
  return "unknown";
}

inline CandidateKind parse_candidate_kind(const std::string& s) {
  for (CandidateKind k : kAllCandidates) {
    if (to_string(k) == s) return k;
  }
  throw IngestError("unknown gold_label '" + s + "'");
}

struct CandidateSentence {
  std::string id;
  // Intrasentence: the filled-in sentence. Intersentence: the continuation.
  std::string sentence;
  // Intrasentence only: byte range of the substituted candidate inside
  // `sentence`; empty when the sentence does not align with the template.
  std::size_t fill_begin = 0;
  std::size_t fill_end = 0;

  std::string fill() const {
    return sentence.substr(fill_begin, fill_end - fill_begin);
  }
};

// One StereoSet context with its three labelled candidates.
struct TripletExample {
  std::string id;
  TaskFormat format = TaskFormat::kIntrasentence;
  BiasType bias_type = BiasType::kRace;
  std::string target;
  // Intrasentence: template containing BLANK. Intersentence: context sentence.
  std::string context;
  std::array<CandidateSentence, 3> candidates;  // indexed by CandidateKind

  const CandidateSentence& candidate(CandidateKind k) const {
    return candidates[static_cast<std::size_t>(k)];
  }

  // Sequence fed to the model: the sentence itself (intrasentence) or
  // context + " " + continuation (intersentence).
  std::string scored_text(CandidateKind k) const {
    if (format == TaskFormat::kIntrasentence) return candidate(k).sentence;
    return context + " " + candidate(k).sentence;
  }

  // Bytes of scored_text(k) that distinguish this candidate: the filled-in
  // word(s), or the continuation including its joining space.
  std::pair<std::size_t, std::size_t> candidate_bytes(CandidateKind k) const {
    const auto& c = candidate(k);
    if (format == TaskFormat::kIntrasentence) return {c.fill_begin, c.fill_end};
    return {context.size(), context.size() + 1 + c.sentence.size()};
  }

  bool has_aligned_fills() const {
    if (format != TaskFormat::kIntrasentence) return true;
    for (const auto& c : candidates) {
      if (c.fill_end <= c.fill_begin) return false;
    }
    return true;
  }
};

// Grouping key of the subsection-based scoring: exact (bias type, target).
struct SubsectionKey {
  BiasType bias_type = BiasType::kRace;
  std::string target;

  std::string label() const { return to_string(bias_type) + "/" + target; }
  friend auto operator<=>(const SubsectionKey&, const SubsectionKey&) = default;
};

inline SubsectionKey subsection_of(const TripletExample& e) {
  return {e.bias_type, e.target};
}

struct DatasetCounts {
  std::size_t intrasentence = 0;
  std::size_t intersentence = 0;
  // [format][bias type]
  std::array<std::array<std::size_t, 4>, 2> by_domain{};

  std::size_t count(TaskFormat f, BiasType b) const {
    return by_domain[static_cast<std::size_t>(f)][static_cast<std::size_t>(b)];
  }
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["intrasentence"] = intrasentence;
    j["intersentence"] = intersentence;
    for (TaskFormat f : {TaskFormat::kIntrasentence, TaskFormat::kIntersentence}) {
      for (BiasType b : kAllBiasTypes) {
        j["by_domain"][to_string(f)][to_string(b)] = count(f, b);
      }
    }
    return j;
  }
};

struct StereoSet {
  std::vector<TripletExample> examples;
  DatasetCounts counts;

  std::vector<TripletExample> of_format(TaskFormat f) const {
    std::vector<TripletExample> out;
    for (const auto& e : examples) {
      if (e.format == f) out.push_back(e);
    }
    return out;
  }
};

inline DatasetCounts count_examples(const std::vector<TripletExample>& ex) {
  DatasetCounts c;
  for (const auto& e : ex) {
    (e.format == TaskFormat::kIntrasentence ? c.intrasentence
                                            : c.intersentence)++;
    ++c.by_domain[static_cast<std::size_t>(e.format)]
                 [static_cast<std::size_t>(e.bias_type)];
  }
  return c;
}

namespace detail {

// Byte range of the text substituted for BLANK. Falls back to a common
// prefix/suffix diff when the sentence does not match the template verbatim.
inline std::pair<std::size_t, std::size_t> fill_range(
    const std::string& templ, const std::string& sentence) {
  const auto blank = templ.find("BLANK");
  if (blank == std::string::npos) return {0, 0};
  const std::string prefix = templ.substr(0, blank);
  const std::string suffix = templ.substr(blank + 5);
  if (sentence.size() > prefix.size() + suffix.size() &&
      sentence.compare(0, prefix.size(), prefix) == 0 &&
      sentence.compare(sentence.size() - suffix.size(), suffix.size(),
                       suffix) == 0) {
    return {prefix.size(), sentence.size() - suffix.size()};
  }
  std::size_t lcp = 0;
  while (lcp < prefix.size() && lcp < sentence.size() &&
         prefix[lcp] == sentence[lcp]) {
    ++lcp;
  }
  std::size_t lcs = 0;
  while (lcs < suffix.size() && lcs + lcp < sentence.size() &&
         suffix[suffix.size() - 1 - lcs] ==
             sentence[sentence.size() - 1 - lcs]) {
    ++lcs;
  }
  // Extend to UTF-8 boundaries so the range never splits a character.
  auto is_cont = [&](std::size_t i) {
    return i < sentence.size() &&
           (static_cast<unsigned char>(sentence[i]) & 0xc0) == 0x80;
  };
  while (lcp > 0 && is_cont(lcp)) --lcp;
  std::size_t end = sentence.size() - lcs;
  while (is_cont(end)) ++end;
  if (end <= lcp) return {0, 0};
  return {lcp, end};
}

inline std::string ingest_where(TaskFormat f, std::size_t index) {
  return to_string(f) + " record " + std::to_string(index);
}

}  // namespace detail

inline StereoSet parse_stereoset(const nlohmann::json& root) {
  StereoSet set;
  if (!root.is_object() || !root.contains("data") ||
      !root["data"].is_object()) {
    throw IngestError("StereoSet: missing top-level 'data' object");
  }
  const auto& data = root["data"];
  for (TaskFormat format :
       {TaskFormat::kIntrasentence, TaskFormat::kIntersentence}) {
    const std::string key = to_string(format);
    if (!data.contains(key)) continue;
    if (!data[key].is_array()) {
      throw IngestError("StereoSet: '" + key + "' is not an array");
    }
    const auto& records = data[key];
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const auto where = detail::ingest_where(format, i);
      try {
        TripletExample e;
        e.format = format;
        e.id = r.at("id").get<std::string>();
        e.target = r.at("target").get<std::string>();
        e.bias_type = parse_bias_type(r.at("bias_type").get<std::string>());
        e.context = r.at("context").get<std::string>();
        const auto& sentences = r.at("sentences");
        if (!sentences.is_array() || sentences.size() != 3) {
          throw IngestError("expected exactly three sentences");
        }
        std::array<bool, 3> seen{};
        for (const auto& s : sentences) {
          const auto kind =
              parse_candidate_kind(s.at("gold_label").get<std::string>());
          const auto k = static_cast<std::size_t>(kind);
          if (seen[k]) {
            throw IngestError("duplicate gold_label " + to_string(kind));
          }
          seen[k] = true;
          auto& c = e.candidates[k];
          c.id = s.at("id").get<std::string>();
          c.sentence = s.at("sentence").get<std::string>();
          if (format == TaskFormat::kIntrasentence) {
            std::tie(c.fill_begin, c.fill_end) =
                detail::fill_range(e.context, c.sentence);
          }
        }
        if (format == TaskFormat::kIntrasentence &&
            e.context.find("BLANK") == std::string::npos) {
          throw IngestError("intrasentence context has no BLANK");
        }
        set.examples.push_back(std::move(e));
      } catch (const IngestError& err) {
        throw IngestError("StereoSet " + where + ": " + err.what());
      } catch (const nlohmann::json::exception& err) {
        throw IngestError("StereoSet " + where + ": " + err.what());
      }
    }
  }
  set.counts = count_examples(set.examples);
  return set;
}

inline StereoSet load_stereoset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open StereoSet file " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("malformed StereoSet JSON " + path + ": " + e.what());
  }
  return parse_stereoset(root);
}

struct SubsectionGroup {
  SubsectionKey key;
  std::vector<std::size_t> members;  // indices into the example list
};

// Partition by exact (bias type, target), in sorted key order.
inline std::vector<SubsectionGroup> group_by_subsection(
    const std::vector<TripletExample>& examples) {
  std::map<SubsectionKey, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    groups[subsection_of(examples[i])].push_back(i);
  }
  std::vector<SubsectionGroup> out;
  out.reserve(groups.size());
  for (auto& [key, members] : groups) {
    out.push_back({key, std::move(members)});
  }
  return out;
}

}  // namespace stereoprobe
