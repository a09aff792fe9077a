#pragma once

// Object-level hallucination scores. Every score is oriented so that a
// larger value means "more likely a real object", which lets all methods
// share the same thresholded detector (score >= tau => real).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "lexicon.hpp"
#include "trace.hpp"

namespace glsim {

enum class Method { glsim, global, local, nll, entropy, internal_confidence, svar, contextual_lens };
enum class Distance { cosine, l2 };
enum class GlobalAnchor { last_instruction_token, last_image_token, mean_image_tokens };
enum class LocalAggregation { mean, probability_weighted_mean };
enum class TokenSelect { first, last, mean };

inline constexpr std::array<Method, 8> kAllMethods = {Method::glsim,   Method::global,
                                                      Method::local,   Method::nll,
                                                      Method::entropy, Method::internal_confidence,
                                                      Method::svar,    Method::contextual_lens};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::glsim: return "glsim";
    case Method::global: return "global";
    case Method::local: return "local";
    case Method::nll: return "nll";
    case Method::entropy: return "entropy";
    case Method::internal_confidence: return "internal_confidence";
    case Method::svar: return "svar";
    case Method::contextual_lens: return "contextual_lens";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : kAllMethods)
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::Usage, "unknown method '" + std::string(s) + "'");
}

inline std::string_view to_string(Distance d) { return d == Distance::cosine ? "cosine" : "l2"; }
inline std::string_view to_string(GlobalAnchor a) {
  switch (a) {
    case GlobalAnchor::last_instruction_token: return "last_instruction_token";
    case GlobalAnchor::last_image_token: return "last_image_token";
    case GlobalAnchor::mean_image_tokens: return "mean_image_tokens";
  }
  return "?";
}
inline std::string_view to_string(LocalAggregation a) {
  return a == LocalAggregation::mean ? "mean" : "probability_weighted_mean";
}
inline std::string_view to_string(TokenSelect t) {
  switch (t) {
    case TokenSelect::first: return "first";
    case TokenSelect::last: return "last";
    case TokenSelect::mean: return "mean";
  }
  return "?";
}

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<Enum, N>& values, std::string_view what) {
  for (auto v : values)
    if (to_string(v) == s) return v;
  throw Error(ErrorCode::Usage, "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

inline Distance parse_distance(std::string_view s) {
  return parse_enum(s, std::array{Distance::cosine, Distance::l2}, "distance");
}
inline GlobalAnchor parse_anchor(std::string_view s) {
  return parse_enum(s,
                    std::array{GlobalAnchor::last_instruction_token, GlobalAnchor::last_image_token,
                               GlobalAnchor::mean_image_tokens},
                    "global anchor");
}
inline LocalAggregation parse_aggregation(std::string_view s) {
  return parse_enum(s, std::array{LocalAggregation::mean, LocalAggregation::probability_weighted_mean},
                    "local aggregation");
}
inline TokenSelect parse_token_select(std::string_view s) {
  return parse_enum(s, std::array{TokenSelect::first, TokenSelect::last, TokenSelect::mean}, "token selection");
}

/// Scoring hyperparameters. Defaults are the LLaVA-1.5-7B settings.
struct ScoringConfig {
  int image_layer = 32;  // l: logit-lens grounding, patch and anchor states
  int text_layer = 31;   // l': object-token state
  std::size_t k = 32;
  double w = 0.6;
  Distance distance = Distance::cosine;
  GlobalAnchor global_anchor = GlobalAnchor::last_instruction_token;
  LocalAggregation local_aggregation = LocalAggregation::mean;
  TokenSelect token_select = TokenSelect::first;
  int svar_lo = 5;
  int svar_hi = 18;
  // Internal Confidence over raw logit-lens logits instead of softmax probabilities.
  bool ic_raw_logits = false;
  // Experimental: take patch states for the local similarity from a layer
  // other than the grounding layer.
  std::optional<int> similarity_layer;

  friend bool operator==(const ScoringConfig&, const ScoringConfig&) = default;
};

inline nlohmann::json config_to_json(const ScoringConfig& c) {
  nlohmann::json j = {{"image_layer", c.image_layer},
                      {"text_layer", c.text_layer},
                      {"k", c.k},
                      {"w", c.w},
                      {"distance", to_string(c.distance)},
                      {"global_anchor", to_string(c.global_anchor)},
                      {"local_aggregation", to_string(c.local_aggregation)},
                      {"token_select", to_string(c.token_select)},
                      {"svar_layer_range", {c.svar_lo, c.svar_hi}},
                      {"ic_raw_logits", c.ic_raw_logits},
                      {"similarity_layer", nullptr}};
  if (c.similarity_layer) j["similarity_layer"] = *c.similarity_layer;
  return j;
}

/// FNV-1a 64 of the canonical (key-sorted, compact) JSON form of the config.
inline std::string config_fingerprint(const ScoringConfig& c) {
  const std::string canonical = config_to_json(c).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
  return out;
}

struct ScoreRecord {
  std::string sample_id;
  std::string canonical;
  Method method = Method::glsim;
  double score = 0.0;
  std::string fingerprint;
  MentionLabel label = MentionLabel::unlabeled;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

struct ScoreFailure {
  std::string sample_id;
  std::string canonical;
  Method method = Method::glsim;
  ErrorCode code = ErrorCode::InvariantViolation;
  std::string message;
};

struct ScoreBatch {
  std::vector<ScoreRecord> records;
  std::vector<ScoreFailure> failures;
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace detail {

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename A, typename B>
double similarity(std::span<const A> a, std::span<const B> b, Distance distance) {
  if (distance == Distance::l2) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      acc += diff * diff;
    }
    return -std::sqrt(acc);
  }
  const double na = dot(a, a);
  const double nb = dot(b, b);
  if (!(na > 0.0) || !(nb > 0.0)) throw Error(ErrorCode::DegenerateEmbedding, "zero-norm embedding under cosine");
  const double c = dot(a, b) / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

inline const Matrix& visual_layer(const SampleTrace& t, int l) {
  auto it = t.visual_hidden.find(l);
  if (it == t.visual_hidden.end() || !t.has_layer(l))
    throw Error(ErrorCode::LayerNotExported, "layer " + std::to_string(l) + " not exported in " + t.sample_id);
  return it->second;
}

inline const Matrix& gen_layer(const SampleTrace& t, int l) {
  auto it = t.gen_hidden.find(l);
  if (it == t.gen_hidden.end() || !t.has_layer(l))
    throw Error(ErrorCode::LayerNotExported, "layer " + std::to_string(l) + " not exported in " + t.sample_id);
  return it->second;
}

inline void check_token_index(const SampleTrace& t, std::size_t j) {
  if (j >= t.gen_tokens.size() || j >= t.n_generated)
    throw Error(ErrorCode::TokenOutOfRange, "token index " + std::to_string(j) + " outside generated tokens of " +
                                                t.sample_id);
}

inline void check_vocab_token(const ModelPack& pack, std::int64_t token_id) {
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= pack.vocab_size)
    throw Error(ErrorCode::TokenOutOfRange, "token id " + std::to_string(token_id) + " outside vocabulary");
}

inline double logit(const ModelPack& pack, std::size_t token, std::span<const float> h) {
  return dot(pack.unembed.row(token), h);
}

/// log sum_v exp(W_U[v] . h), computed with max subtraction.
inline double log_partition(const ModelPack& pack, std::span<const float> h) {
  std::vector<double> logits(pack.vocab_size);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < pack.vocab_size; ++v) {
    logits[v] = logit(pack, v, h);
    mx = std::max(mx, logits[v]);
  }
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

/// Per-layer log partitions of every visual patch. Shared across the
/// mentions of one sample; the numbers are identical to recomputing them.
class LogitLensCache {
 public:
  const std::vector<double>& log_partitions(const SampleTrace& t, const ModelPack& pack, int l) {
    auto it = cache_.find(l);
    if (it != cache_.end()) return it->second;
    const Matrix& vh = visual_layer(t, l);
    std::vector<double> z(vh.rows);
    for (std::size_t i = 0; i < vh.rows; ++i) z[i] = log_partition(pack, vh.row(i));
    return cache_.emplace(l, std::move(z)).first->second;
  }

 private:
  std::map<int, std::vector<double>> cache_;
};

inline std::vector<double> logit_lens_probs(const SampleTrace& t, const ModelPack& pack, int l,
                                            std::int64_t token_id, LogitLensCache* cache) {
  check_vocab_token(pack, token_id);
  const Matrix& vh = visual_layer(t, l);
  std::vector<double> probs(vh.rows);
  const auto tok = static_cast<std::size_t>(token_id);
  if (cache) {
    const auto& z = cache->log_partitions(t, pack, l);
    for (std::size_t i = 0; i < vh.rows; ++i) probs[i] = std::exp(logit(pack, tok, vh.row(i)) - z[i]);
  } else {
    for (std::size_t i = 0; i < vh.rows; ++i)
      probs[i] = std::exp(logit(pack, tok, vh.row(i)) - log_partition(pack, vh.row(i)));
  }
  return probs;
}

/// Generated-token indices covered by the mention: its first token plus any
/// following tokens whose spans overlap the mention's character span.
inline std::pair<std::size_t, std::size_t> mention_token_range(const SampleTrace& t, const ObjectMention& m) {
  check_token_index(t, m.token_index);
  std::size_t end = m.token_index + 1;
  while (end < t.gen_tokens.size() && t.gen_tokens[end].span.overlaps(m.char_span)) ++end;
  return {m.token_index, end};
}

}  // namespace detail

/// Full softmax of one hidden state through the unembedding.
inline std::vector<double> vocab_softmax(const ModelPack& pack, std::span<const float> h) {
  const double z = detail::log_partition(pack, h);
  std::vector<double> p(pack.vocab_size);
  for (std::size_t v = 0; v < pack.vocab_size; ++v) p[v] = std::exp(detail::logit(pack, v, h) - z);
  return p;
}

/// -sum p ln p in nats; zero entries contribute nothing.
inline double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

inline void validate_config(const ScoringConfig& cfg, const SampleTrace& t) {
  for (int l : {cfg.image_layer, cfg.text_layer})
    if (!t.has_layer(l))
      throw Error(ErrorCode::LayerNotExported, "layer " + std::to_string(l) + " not exported in " + t.sample_id);
  if (cfg.similarity_layer && !t.has_layer(*cfg.similarity_layer))
    throw Error(ErrorCode::LayerNotExported,
                "layer " + std::to_string(*cfg.similarity_layer) + " not exported in " + t.sample_id);
  if (cfg.k < 1 || cfg.k > t.n_visual)
    throw Error(ErrorCode::KOutOfRange, "K=" + std::to_string(cfg.k) + " outside [1, N=" +
                                            std::to_string(t.n_visual) + "] for " + t.sample_id);
  if (!(cfg.w >= 0.0 && cfg.w <= 1.0))
    throw Error(ErrorCode::InvariantViolation, "w=" + std::to_string(cfg.w) + " outside [0, 1]");
}

/// h_{l'}(o): the object token's state, or the last / mean over its tokens.
inline std::vector<double> object_token_embedding(const SampleTrace& t, const ObjectMention& m, int text_layer,
                                                  TokenSelect select) {
  const Matrix& gh = detail::gen_layer(t, text_layer);
  auto [begin, end] = detail::mention_token_range(t, m);
  if (select == TokenSelect::first) end = begin + 1;
  if (select == TokenSelect::last) begin = end - 1;
  std::vector<double> out(gh.cols, 0.0);
  for (std::size_t j = begin; j < end; ++j) {
    const auto row = gh.row(j);
    for (std::size_t c = 0; c < gh.cols; ++c) out[c] += row[c];
  }
  const double n = static_cast<double>(end - begin);
  if (end - begin > 1)
    for (auto& x : out) x /= n;
  return out;
}

/// softmax(h_l(v_i) W_U)[token] for every visual patch i.
inline std::vector<double> visual_logit_lens_probs(const SampleTrace& t, const ModelPack& pack, int l,
                                                   std::int64_t token_id) {
  return detail::logit_lens_probs(t, pack, l, token_id, nullptr);
}

/// Indices of the K largest probabilities, descending; ties go to the lower index.
inline std::vector<std::size_t> top_k_patches(std::span<const double> probs, std::size_t k) {
  if (k < 1 || k > probs.size())
    throw Error(ErrorCode::KOutOfRange,
                "K=" + std::to_string(k) + " outside [1, N=" + std::to_string(probs.size()) + "]");
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

namespace detail {

inline double local_score_impl(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                               const ScoringConfig& cfg, LogitLensCache* cache) {
  validate_config(cfg, t);
  const auto probs = logit_lens_probs(t, pack, cfg.image_layer, m.first_token_id, cache);
  const auto selected = top_k_patches(probs, cfg.k);
  const auto obj = object_token_embedding(t, m, cfg.text_layer, cfg.token_select);
  const Matrix& patches = visual_layer(t, cfg.similarity_layer.value_or(cfg.image_layer));
  const std::span<const double> obj_view(obj);

  if (cfg.local_aggregation == LocalAggregation::mean) {
    double acc = 0.0;
    for (auto i : selected) acc += similarity(patches.row(i), obj_view, cfg.distance);
    return acc / static_cast<double>(selected.size());
  }
  double mass = 0.0;
  for (auto i : selected) mass += probs[i];
  double acc = 0.0;
  for (auto i : selected) acc += probs[i] / mass * similarity(patches.row(i), obj_view, cfg.distance);
  return acc;
}

inline std::vector<double> global_anchor(const SampleTrace& t, const ScoringConfig& cfg) {
  const int l = cfg.image_layer;
  switch (cfg.global_anchor) {
    case GlobalAnchor::last_instruction_token: {
      auto it = t.prompt_last_hidden.find(l);
      if (it == t.prompt_last_hidden.end() || !t.has_layer(l))
        throw Error(ErrorCode::LayerNotExported, "layer " + std::to_string(l) + " not exported in " + t.sample_id);
      return {it->second.begin(), it->second.end()};
    }
    case GlobalAnchor::last_image_token: {
      const Matrix& vh = visual_layer(t, l);
      if (vh.rows == 0) throw Error(ErrorCode::InvariantViolation, "no visual tokens in " + t.sample_id);
      const auto row = vh.row(vh.rows - 1);
      return {row.begin(), row.end()};
    }
    case GlobalAnchor::mean_image_tokens: {
      const Matrix& vh = visual_layer(t, l);
      if (vh.rows == 0) throw Error(ErrorCode::InvariantViolation, "no visual tokens in " + t.sample_id);
      std::vector<double> mean(vh.cols, 0.0);
      for (std::size_t i = 0; i < vh.rows; ++i)
        for (std::size_t c = 0; c < vh.cols; ++c) mean[c] += vh(i, c);
      for (auto& x : mean) x /= static_cast<double>(vh.rows);
      return mean;
    }
  }
  return {};
}

inline double global_score_impl(const SampleTrace& t, const ObjectMention& m, const ScoringConfig& cfg) {
  validate_config(cfg, t);
  const auto anchor = global_anchor(t, cfg);
  const auto obj = object_token_embedding(t, m, cfg.text_layer, cfg.token_select);
  return similarity(std::span<const double>(anchor), std::span<const double>(obj), cfg.distance);
}

struct IcArgmax {
  double value = -std::numeric_limits<double>::infinity();
  int layer = -1;
  std::size_t patch = 0;
};

inline IcArgmax internal_confidence_impl(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                                         bool raw_logits, LogitLensCache* cache) {
  check_vocab_token(pack, m.first_token_id);
  if (t.exported_layers.empty() || t.n_visual == 0)
    throw Error(ErrorCode::NoVisualLayers, "no visual hidden states exported in " + t.sample_id);
  IcArgmax best;
  for (int l : t.exported_layers) {
    std::vector<double> values;
    if (raw_logits) {
      const Matrix& vh = visual_layer(t, l);
      values.resize(vh.rows);
      for (std::size_t i = 0; i < vh.rows; ++i)
        values[i] = logit(pack, static_cast<std::size_t>(m.first_token_id), vh.row(i));
    } else {
      values = logit_lens_probs(t, pack, l, m.first_token_id, cache);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] > best.value) best = {values[i], l, i};
    }
  }
  return best;
}

}  // namespace detail

inline double local_score(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                          const ScoringConfig& cfg) {
  return detail::local_score_impl(t, pack, m, cfg, nullptr);
}

inline double global_score(const SampleTrace& t, const ObjectMention& m, const ScoringConfig& cfg) {
  return detail::global_score_impl(t, m, cfg);
}

inline double glsim_score(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                          const ScoringConfig& cfg) {
  const double g = global_score(t, m, cfg);
  const double loc = local_score(t, pack, m, cfg);
  return cfg.w * g + (1.0 - cfg.w) * loc;
}

inline double nll_score(const SampleTrace& t, const ObjectMention& m) {
  detail::check_token_index(t, m.token_index);
  return t.gen_tokens[m.token_index].logprob;
}

inline double entropy_score(const SampleTrace& t, const ObjectMention& m) {
  detail::check_token_index(t, m.token_index);
  return -t.gen_tokens[m.token_index].entropy;
}

inline double internal_confidence_score(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                                        bool raw_logits = false) {
  return detail::internal_confidence_impl(t, pack, m, raw_logits, nullptr).value;
}

inline double svar_score(const SampleTrace& t, const ObjectMention& m, const ScoringConfig& cfg) {
  detail::check_token_index(t, m.token_index);
  if (cfg.svar_lo > cfg.svar_hi)
    throw Error(ErrorCode::InvariantViolation, "empty SVAR layer range");
  double acc = 0.0;
  for (int l = cfg.svar_lo; l <= cfg.svar_hi; ++l) {
    auto it = t.var.find(l);
    if (it == t.var.end())
      throw Error(ErrorCode::VarLayerMissing, "VAR layer " + std::to_string(l) + " missing in " + t.sample_id);
    acc += it->second.at(m.token_index);
  }
  return acc;
}

/// Object-level Contextual Lens: best cosine between the object state and any patch.
inline double contextual_lens_score(const SampleTrace& t, const ObjectMention& m, const ScoringConfig& cfg) {
  const Matrix& vh = detail::visual_layer(t, cfg.image_layer);
  const auto obj = object_token_embedding(t, m, cfg.text_layer, cfg.token_select);
  if (vh.rows == 0) throw Error(ErrorCode::InvariantViolation, "no visual tokens in " + t.sample_id);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vh.rows; ++i)
    best = std::max(best, detail::similarity(vh.row(i), std::span<const double>(obj), Distance::cosine));
  return best;
}

namespace detail {

inline double score_mention_impl(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                                 const ScoringConfig& cfg, Method method, LogitLensCache* cache) {
  switch (method) {
    case Method::glsim: {
      const double g = global_score_impl(t, m, cfg);
      const double loc = local_score_impl(t, pack, m, cfg, cache);
      return cfg.w * g + (1.0 - cfg.w) * loc;
    }
    case Method::global: return global_score_impl(t, m, cfg);
    case Method::local: return local_score_impl(t, pack, m, cfg, cache);
    case Method::nll: return nll_score(t, m);
    case Method::entropy: return entropy_score(t, m);
    case Method::internal_confidence: return internal_confidence_impl(t, pack, m, cfg.ic_raw_logits, cache).value;
    case Method::svar: return svar_score(t, m, cfg);
    case Method::contextual_lens: return contextual_lens_score(t, m, cfg);
  }
  return 0.0;
}

}  // namespace detail

inline double score_mention(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                            const ScoringConfig& cfg, Method method) {
  return detail::score_mention_impl(t, pack, m, cfg, method, nullptr);
}

/// Mean per-token score over generated tokens [begin, end), each token
/// standing in for the object token in turn.
inline double span_aggregate_score(const SampleTrace& t, const ModelPack& pack, std::size_t begin, std::size_t end,
                                   const ScoringConfig& cfg, Method method) {
  if (begin >= end) throw Error(ErrorCode::EmptySpan, "empty token span");
  detail::check_token_index(t, end - 1);
  double acc = 0.0;
  for (std::size_t j = begin; j < end; ++j) {
    ObjectMention m;
    m.sample_id = t.sample_id;
    m.token_index = j;
    m.first_token_id = t.gen_tokens[j].token_id;
    m.char_span = t.gen_tokens[j].span;
    ScoringConfig single = cfg;
    single.token_select = TokenSelect::first;
    acc += score_mention(t, pack, m, single, method);
  }
  return acc / static_cast<double>(end - begin);
}

struct GroundingHeatmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> probs;  // row-major rows x cols
  std::vector<bool> mask;     // Top-K cells
  double at(std::size_t r, std::size_t c) const { return probs[r * cols + c]; }
};

inline GroundingHeatmap grounding_heatmap(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                                          const ScoringConfig& cfg) {
  if (t.grid.rows * t.grid.cols != t.n_visual)
    throw Error(ErrorCode::GridMismatch, "grid " + std::to_string(t.grid.rows) + "x" + std::to_string(t.grid.cols) +
                                             " does not hold N=" + std::to_string(t.n_visual) + " patches");
  GroundingHeatmap h;
  h.rows = t.grid.rows;
  h.cols = t.grid.cols;
  h.probs = visual_logit_lens_probs(t, pack, cfg.image_layer, m.first_token_id);
  h.mask.assign(h.probs.size(), false);
  for (auto i : top_k_patches(h.probs, cfg.k)) h.mask[i] = true;
  return h;
}

/// One record per mention x method, ordered by sample_id, caption position
/// and method. Failing records are collected instead of aborting the batch.
inline ScoreBatch score_all(const TraceBundle& bundle, std::vector<ObjectMention> mentions, const ScoringConfig& cfg,
                            std::vector<Method> methods) {
  std::sort(methods.begin(), methods.end());
  methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
  std::stable_sort(mentions.begin(), mentions.end(), [](const ObjectMention& a, const ObjectMention& b) {
    if (a.sample_id != b.sample_id) return a.sample_id < b.sample_id;
    return a.char_span.start < b.char_span.start;
  });
  const std::string fp = config_fingerprint(cfg);

  ScoreBatch batch;
  std::map<std::string, const SampleTrace*> by_id;
  for (const auto& s : bundle.samples) by_id.emplace(s.sample_id, &s);

  std::string current;
  detail::LogitLensCache cache;
  for (const auto& m : mentions) {
    if (m.sample_id != current) {
      current = m.sample_id;
      cache = detail::LogitLensCache();
    }
    auto it = by_id.find(m.sample_id);
    for (auto method : methods) {
      if (it == by_id.end()) {
        batch.failures.push_back({m.sample_id, m.canonical, method, ErrorCode::InvariantViolation,
                                  "unknown sample " + m.sample_id});
        continue;
      }
      try {
        const double s = detail::score_mention_impl(*it->second, bundle.pack, m, cfg, method, &cache);
        if (!std::isfinite(s)) throw Error(ErrorCode::InvariantViolation, "non-finite score");
        batch.records.push_back({m.sample_id, m.canonical, method, s, fp, m.label});
      } catch (const Error& e) {
        batch.failures.push_back({m.sample_id, m.canonical, method, e.code(), e.what()});
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// JSON Lines
// ---------------------------------------------------------------------------

inline nlohmann::json record_to_json(const ScoreRecord& r) {
  return {{"sample_id", r.sample_id}, {"canonical", r.canonical},     {"method", to_string(r.method)},
          {"score", r.score},         {"fingerprint", r.fingerprint}, {"label", to_string(r.label)}};
}

inline ScoreRecord record_from_json(const nlohmann::json& j) {
  try {
    ScoreRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.canonical = j.at("canonical").get<std::string>();
    r.method = parse_method(j.at("method").get<std::string>());
    r.score = j.at("score").get<double>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.label = parse_label(j.value("label", "unlabeled"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseFailure, std::string("score record: ") + e.what());
  }
}

inline void write_records_jsonl(std::ostream& os, const std::vector<ScoreRecord>& records) {
  for (const auto& r : records) os << record_to_json(r).dump() << '\n';
}

inline std::vector<ScoreRecord> read_records_jsonl(std::istream& is) {
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseFailure, "scores line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace glsim
