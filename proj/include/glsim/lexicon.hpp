#pragma once

// Object-mention extraction from generated captions, CHAIR style: lowercase,
// word-boundary matching of every lexicon surface form, with naive plural
// stripping on the last word of a surface and longest-match-wins.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "trace.hpp"

namespace glsim {

enum class MentionLabel { unlabeled, real, hallucinated };

inline std::string_view to_string(MentionLabel l) {
  switch (l) {
    case MentionLabel::real: return "real";
    case MentionLabel::hallucinated: return "hallucinated";
    case MentionLabel::unlabeled: break;
  }
  return "unlabeled";
}

inline MentionLabel parse_label(std::string_view s) {
  if (s == "real") return MentionLabel::real;
  if (s == "hallucinated") return MentionLabel::hallucinated;
  if (s == "unlabeled") return MentionLabel::unlabeled;
  throw Error(ErrorCode::ParseFailure, "unknown label '" + std::string(s) + "'");
}

struct ObjectMention {
  std::string sample_id;
  std::string surface;
  std::string canonical;
  std::size_t token_index = 0;
  std::int64_t first_token_id = 0;
  CharSpan char_span;
  MentionLabel label = MentionLabel::unlabeled;

  friend bool operator==(const ObjectMention&, const ObjectMention&) = default;
};

namespace detail {

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && std::isalnum(u);
}

struct WordSpan {
  std::size_t start;
  std::size_t end;
};

inline std::vector<WordSpan> split_words(std::string_view text) {
  std::vector<WordSpan> words;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    words.push_back({i, j});
    i = j;
  }
  return words;
}

/// "Hair-Drier " -> "hair drier"
inline std::string normalize_surface(std::string_view s) {
  const auto lower = ascii_lower(s);
  std::string out;
  for (const auto& w : split_words(lower)) {
    if (!out.empty()) out += ' ';
    out.append(lower, w.start, w.end - w.start);
  }
  return out;
}

}  // namespace detail

class ObjectLexicon {
 public:
  struct Class {
    std::string canonical;
    std::vector<std::string> synonyms;
  };

  /// Words ending in "s" that must never be reduced to a singular form.
  static const std::set<std::string>& plural_exceptions() {
    static const std::set<std::string> kExceptions = {
        "glasses", "pants", "jeans", "shorts", "news", "series", "species", "christmas", "physics", "clothes"};
    return kExceptions;
  }

  ObjectLexicon() = default;

  explicit ObjectLexicon(std::vector<Class> classes) {
    for (auto& c : classes) add(std::move(c));
  }

  void add(Class c) {
    c.canonical = detail::normalize_surface(c.canonical);
    if (c.canonical.empty()) throw Error(ErrorCode::ParseFailure, "empty canonical class name");
    if (index_.count(c.canonical))
      throw Error(ErrorCode::ParseFailure, "canonical class '" + c.canonical + "' listed twice");
    const std::size_t idx = classes_.size();
    std::vector<std::string> forms{c.canonical};
    for (const auto& s : c.synonyms) forms.push_back(detail::normalize_surface(s));
    std::vector<std::string> kept;
    for (const auto& f : forms) {
      if (f.empty()) continue;
      auto it = surfaces_.find(f);
      if (it != surfaces_.end()) {
        if (it->second == idx) continue;
        throw Error(ErrorCode::DuplicateSurface,
                    "'" + f + "' maps to both '" + classes_[it->second].canonical + "' and '" + c.canonical + "'");
      }
      surfaces_.emplace(f, idx);
      kept.push_back(f);
      max_words_ = std::max(max_words_, static_cast<std::size_t>(std::count(f.begin(), f.end(), ' ') + 1));
    }
    index_.emplace(c.canonical, idx);
    classes_.push_back({c.canonical, std::vector<std::string>(kept.begin() + 1, kept.end())});
  }

  const std::vector<Class>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  std::size_t max_words() const { return max_words_; }
  bool has_class(const std::string& canonical) const { return index_.count(canonical) > 0; }

  /// Canonical class for a normalized surface form, or nullptr.
  const std::string* lookup(const std::string& surface) const {
    auto it = surfaces_.find(surface);
    return it == surfaces_.end() ? nullptr : &classes_[it->second].canonical;
  }

 private:
  std::vector<Class> classes_;
  std::unordered_map<std::string, std::size_t> surfaces_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t max_words_ = 1;
};

using AnnotationSet = std::map<std::string, std::set<std::string>>;

namespace detail {

/// Singular forms to try for a plural word. The exception list only guards
/// bare words: "glasses" alone is eyewear, "wine glasses" is not.
inline std::vector<std::string> singular_candidates(const std::string& word, bool bare_word = true) {
  std::vector<std::string> out;
  if (bare_word && ObjectLexicon::plural_exceptions().count(word)) return out;
  auto ends = [&](std::string_view suf) {
    return word.size() > suf.size() && word.compare(word.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends("ies")) out.push_back(word.substr(0, word.size() - 3) + "y");
  // "es" only after sibilants and "o": "benches", "buses", "tomatoes"; not "skies" -> "ski".
  if ((ends("shes") || ends("ches") || ends("xes") || ends("zes") || ends("ses") || ends("oes")))
    out.push_back(word.substr(0, word.size() - 2));
  if (ends("s") && !ends("ss")) out.push_back(word.substr(0, word.size() - 1));
  return out;
}

inline bool only_separators(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '-';
  });
}

struct TextMatch {
  std::size_t start;
  std::size_t end;
  std::string canonical;
};

/// All lexicon matches in caption order, longest match first at each word.
inline std::vector<TextMatch> match_text(const std::string& lower, const ObjectLexicon& lex) {
  const auto words = split_words(lower);
  std::vector<TextMatch> out;
  std::size_t i = 0;
  while (i < words.size()) {
    bool matched = false;
    const std::size_t longest = std::min(lex.max_words(), words.size() - i);
    for (std::size_t n = longest; n >= 1 && !matched; --n) {
      std::string prefix;
      bool contiguous = true;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        const auto& a = words[i + k];
        const auto& b = words[i + k + 1];
        if (!only_separators(std::string_view(lower).substr(a.end, b.start - a.end))) {
          contiguous = false;
          break;
        }
        prefix.append(lower, a.start, a.end - a.start);
        prefix += ' ';
      }
      if (!contiguous) continue;
      const auto& last = words[i + n - 1];
      const std::string last_word = lower.substr(last.start, last.end - last.start);
      const std::string* canonical = lex.lookup(prefix + last_word);
      if (!canonical) {
        for (const auto& cand : singular_candidates(last_word, n == 1))
          if ((canonical = lex.lookup(prefix + cand))) break;
      }
      if (canonical) {
        out.push_back({words[i].start, last.end, *canonical});
        i += n;
        matched = true;
      }
    }
    if (!matched) ++i;
  }
  return out;
}

}  // namespace detail

/// First occurrence of each lexicon class in the caption, in caption order,
/// each bound to the generated token whose span holds its first character.
inline std::vector<ObjectMention> extract_mentions(const SampleTrace& trace, const ObjectLexicon& lex) {
  const auto lower = detail::ascii_lower(trace.generated_text);
  std::vector<ObjectMention> mentions;
  std::set<std::string> seen;
  for (auto& m : detail::match_text(lower, lex)) {
    if (!seen.insert(m.canonical).second) continue;
    auto tok = std::find_if(trace.gen_tokens.begin(), trace.gen_tokens.end(),
                            [&](const GenToken& t) { return t.span.contains(m.start); });
    if (tok == trace.gen_tokens.end())
      throw Error(ErrorCode::SpanAlignmentFailure, "sample " + trace.sample_id + ": '" +
                                                       lower.substr(m.start, m.end - m.start) + "' at char " +
                                                       std::to_string(m.start) + " is not covered by any token");
    ObjectMention om;
    om.sample_id = trace.sample_id;
    om.surface = lower.substr(m.start, m.end - m.start);
    om.canonical = std::move(m.canonical);
    om.token_index = static_cast<std::size_t>(tok - trace.gen_tokens.begin());
    om.first_token_id = tok->token_id;
    om.char_span = {m.start, m.end};
    mentions.push_back(std::move(om));
  }
  return mentions;
}

inline std::vector<ObjectMention> label_mentions(std::vector<ObjectMention> mentions, const AnnotationSet& annotations,
                                                 const std::string& image_id) {
  auto it = annotations.find(image_id);
  if (it == annotations.end()) throw Error(ErrorCode::MissingAnnotation, "no annotation for image " + image_id);
  for (auto& m : mentions)
    m.label = it->second.count(m.canonical) ? MentionLabel::real : MentionLabel::hallucinated;
  return mentions;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseFailure, path.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Lexicon JSON: [{"canonical": "dog", "synonyms": ["puppy", ...]}, ...]
inline ObjectLexicon lexicon_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::ParseFailure, "lexicon must be a JSON array");
  ObjectLexicon lex;
  try {
    for (const auto& entry : j) {
      ObjectLexicon::Class c;
      c.canonical = entry.at("canonical").get<std::string>();
      if (entry.contains("synonyms")) c.synonyms = entry.at("synonyms").get<std::vector<std::string>>();
      lex.add(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseFailure, std::string("lexicon: ") + e.what());
  }
  return lex;
}

inline nlohmann::json lexicon_to_json(const ObjectLexicon& lex) {
  auto j = nlohmann::json::array();
  for (const auto& c : lex.classes()) j.push_back({{"canonical", c.canonical}, {"synonyms", c.synonyms}});
  return j;
}

inline ObjectLexicon load_lexicon(const std::filesystem::path& path) {
  return lexicon_from_json(detail::parse_json_file(path));
}

/// Annotation JSON: {"<image_id>": ["dog", "dining table"], ...}
inline AnnotationSet annotations_from_json(const nlohmann::json& j, const ObjectLexicon& lex) {
  if (!j.is_object()) throw Error(ErrorCode::ParseFailure, "annotations must be a JSON object");
  AnnotationSet out;
  for (const auto& [image_id, classes] : j.items()) {
    if (!classes.is_array()) throw Error(ErrorCode::ParseFailure, "annotations for " + image_id + " must be an array");
    auto& set = out[image_id];
    for (const auto& c : classes) {
      if (!c.is_string()) throw Error(ErrorCode::ParseFailure, "annotation entries must be strings");
      auto name = detail::normalize_surface(c.get<std::string>());
      if (!lex.has_class(name))
        throw Error(ErrorCode::ParseFailure, "annotation class '" + name + "' for " + image_id + " is not in the lexicon");
      set.insert(std::move(name));
    }
  }
  return out;
}

inline nlohmann::json annotations_to_json(const AnnotationSet& a) {
  auto j = nlohmann::json::object();
  for (const auto& [image_id, classes] : a) j[image_id] = std::vector<std::string>(classes.begin(), classes.end());
  return j;
}

inline AnnotationSet load_annotations(const std::filesystem::path& path, const ObjectLexicon& lex) {
  return annotations_from_json(detail::parse_json_file(path), lex);
}

inline nlohmann::json mention_to_json(const ObjectMention& m) {
  return {{"sample_id", m.sample_id},
          {"surface", m.surface},
          {"canonical", m.canonical},
          {"token_index", m.token_index},
          {"first_token_id", m.first_token_id},
          {"char_span", {m.char_span.start, m.char_span.end}},
          {"label", to_string(m.label)}};
}

inline ObjectMention mention_from_json(const nlohmann::json& j) {
  try {
    ObjectMention m;
    m.sample_id = j.at("sample_id").get<std::string>();
    m.surface = j.at("surface").get<std::string>();
    m.canonical = j.at("canonical").get<std::string>();
    m.token_index = j.at("token_index").get<std::size_t>();
    m.first_token_id = j.at("first_token_id").get<std::int64_t>();
    const auto span = j.at("char_span").get<std::vector<std::size_t>>();
    if (span.size() != 2) throw Error(ErrorCode::ParseFailure, "char_span must have two entries");
    m.char_span = {span[0], span[1]};
    m.label = parse_label(j.value("label", "unlabeled"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseFailure, std::string("mention: ") + e.what());
  }
}

inline void write_mentions_jsonl(std::ostream& os, const std::vector<ObjectMention>& mentions) {
  for (const auto& m : mentions) os << mention_to_json(m).dump() << '\n';
}

inline std::vector<ObjectMention> read_mentions_jsonl(std::istream& is) {
  std::vector<ObjectMention> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(mention_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseFailure, "mentions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace glsim
