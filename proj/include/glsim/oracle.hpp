#pragma once

// Naive reference scorer sharing only the data types with scoring.hpp.
// Long double arithmetic, a full softmax per patch and a full sort for Top-K.
// Slow; meant for checking the engine, not for scoring real traces.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "lexicon.hpp"
#include "scoring.hpp"
#include "trace.hpp"

namespace glsim::oracle {

using Real = long double;

namespace naive {

inline const Matrix& visual(const SampleTrace& t, int l) {
  if (!t.has_layer(l) || !t.visual_hidden.count(l))
    throw Error(ErrorCode::LayerNotExported, "oracle: layer " + std::to_string(l));
  return t.visual_hidden.at(l);
}

inline std::vector<Real> softmax_of_patch(const ModelPack& pack, std::span<const float> h) {
  std::vector<Real> logits(pack.vocab_size, 0.0L);
  for (std::size_t v = 0; v < pack.vocab_size; ++v)
    for (std::size_t c = 0; c < pack.hidden_dim; ++c)
      logits[v] += static_cast<Real>(pack.unembed(v, c)) * static_cast<Real>(h[c]);
  Real mx = logits[0];
  for (Real x : logits) mx = std::max(mx, x);
  std::vector<Real> p(logits.size());
  Real total = 0.0L;
  for (std::size_t v = 0; v < p.size(); ++v) {
    p[v] = std::exp(logits[v] - mx);
    total += p[v];
  }
  for (auto& x : p) x /= total;
  return p;
}

inline std::vector<Real> object_probs(const SampleTrace& t, const ModelPack& pack, int l, std::int64_t token) {
  if (token < 0 || static_cast<std::size_t>(token) >= pack.vocab_size)
    throw Error(ErrorCode::TokenOutOfRange, "oracle: token id");
  const Matrix& vh = visual(t, l);
  std::vector<Real> out;
  for (std::size_t i = 0; i < vh.rows; ++i) out.push_back(softmax_of_patch(pack, vh.row(i))[static_cast<std::size_t>(token)]);
  return out;
}

inline std::vector<std::size_t> top_k(const std::vector<Real>& probs, std::size_t k) {
  if (k < 1 || k > probs.size()) throw Error(ErrorCode::KOutOfRange, "oracle: K");
  std::vector<std::pair<Real, std::size_t>> all;
  for (std::size_t i = 0; i < probs.size(); ++i) all.emplace_back(probs[i], i);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

template <typename A, typename B>
Real sim(const A& a, const B& b, std::size_t d, Distance distance) {
  if (distance == Distance::l2) {
    Real s = 0.0L;
    for (std::size_t i = 0; i < d; ++i) {
      const Real diff = static_cast<Real>(a[i]) - static_cast<Real>(b[i]);
      s += diff * diff;
    }
    return -std::sqrt(s);
  }
  Real ab = 0.0L, aa = 0.0L, bb = 0.0L;
  for (std::size_t i = 0; i < d; ++i) {
    ab += static_cast<Real>(a[i]) * static_cast<Real>(b[i]);
    aa += static_cast<Real>(a[i]) * static_cast<Real>(a[i]);
    bb += static_cast<Real>(b[i]) * static_cast<Real>(b[i]);
  }
  if (aa == 0.0L || bb == 0.0L) throw Error(ErrorCode::DegenerateEmbedding, "oracle: zero norm");
  return ab / std::sqrt(aa * bb);
}

inline std::vector<Real> object_embedding(const SampleTrace& t, const ObjectMention& m, int l, TokenSelect sel) {
  if (!t.has_layer(l) || !t.gen_hidden.count(l)) throw Error(ErrorCode::LayerNotExported, "oracle: text layer");
  if (m.token_index >= t.gen_tokens.size()) throw Error(ErrorCode::TokenOutOfRange, "oracle: token index");
  const Matrix& gh = t.gen_hidden.at(l);
  std::vector<std::size_t> tokens{m.token_index};
  for (std::size_t j = m.token_index + 1; j < t.gen_tokens.size(); ++j) {
    const auto& sp = t.gen_tokens[j].span;
    if (!(sp.start < m.char_span.end && m.char_span.start < sp.end)) break;
    tokens.push_back(j);
  }
  if (sel == TokenSelect::first) tokens = {tokens.front()};
  if (sel == TokenSelect::last) tokens = {tokens.back()};
  std::vector<Real> e(gh.cols, 0.0L);
  for (auto j : tokens)
    for (std::size_t c = 0; c < gh.cols; ++c) e[c] += gh(j, c);
  for (auto& x : e) x /= static_cast<Real>(tokens.size());
  return e;
}

inline void check_cfg(const SampleTrace& t, const ScoringConfig& cfg) {
  if (!t.has_layer(cfg.image_layer) || !t.has_layer(cfg.text_layer))
    throw Error(ErrorCode::LayerNotExported, "oracle: layer");
  if (cfg.k < 1 || cfg.k > t.n_visual) throw Error(ErrorCode::KOutOfRange, "oracle: K");
}

inline Real local(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m, const ScoringConfig& cfg) {
  check_cfg(t, cfg);
  const auto probs = object_probs(t, pack, cfg.image_layer, m.first_token_id);
  const auto chosen = top_k(probs, cfg.k);
  const auto obj = object_embedding(t, m, cfg.text_layer, cfg.token_select);
  const Matrix& patches = visual(t, cfg.similarity_layer.value_or(cfg.image_layer));
  Real total = 0.0L, mass = 0.0L;
  std::vector<Real> sims;
  for (auto i : chosen) {
    sims.push_back(sim(patches.row(i), obj, patches.cols, cfg.distance));
    mass += probs[i];
  }
  for (std::size_t n = 0; n < chosen.size(); ++n) {
    if (cfg.local_aggregation == LocalAggregation::mean) total += sims[n] / static_cast<Real>(chosen.size());
    else total += sims[n] * probs[chosen[n]] / mass;
  }
  return total;
}

inline Real global(const SampleTrace& t, const ObjectMention& m, const ScoringConfig& cfg) {
  check_cfg(t, cfg);
  const Matrix& vh = visual(t, cfg.image_layer);
  std::vector<Real> anchor(vh.cols, 0.0L);
  if (cfg.global_anchor == GlobalAnchor::last_instruction_token) {
    const auto& p = t.prompt_last_hidden.at(cfg.image_layer);
    for (std::size_t c = 0; c < anchor.size(); ++c) anchor[c] = p[c];
  } else if (cfg.global_anchor == GlobalAnchor::last_image_token) {
    for (std::size_t c = 0; c < anchor.size(); ++c) anchor[c] = vh(vh.rows - 1, c);
  } else {
    for (std::size_t i = 0; i < vh.rows; ++i)
      for (std::size_t c = 0; c < anchor.size(); ++c) anchor[c] += static_cast<Real>(vh(i, c)) / static_cast<Real>(vh.rows);
  }
  return sim(anchor, object_embedding(t, m, cfg.text_layer, cfg.token_select), anchor.size(), cfg.distance);
}

}  // namespace naive

struct IcResult {
  Real value = -std::numeric_limits<Real>::infinity();
  int layer = -1;
  std::size_t patch = 0;
};

inline IcResult internal_confidence(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m,
                                    bool raw_logits = false) {
  if (t.exported_layers.empty() || t.n_visual == 0) throw Error(ErrorCode::NoVisualLayers, "oracle: no layers");
  IcResult best;
  for (int l : t.exported_layers) {
    const Matrix& vh = naive::visual(t, l);
    for (std::size_t i = 0; i < vh.rows; ++i) {
      Real value;
      if (raw_logits) {
        value = 0.0L;
        for (std::size_t c = 0; c < vh.cols; ++c)
          value += static_cast<Real>(pack.unembed(static_cast<std::size_t>(m.first_token_id), c)) * vh(i, c);
      } else {
        value = naive::softmax_of_patch(pack, vh.row(i))[static_cast<std::size_t>(m.first_token_id)];
      }
      if (value > best.value) best = {value, l, i};
    }
  }
  return best;
}

/// Reference score of one mention under one method.
inline Real score(const SampleTrace& t, const ModelPack& pack, const ObjectMention& m, const ScoringConfig& cfg,
                  Method method) {
  switch (method) {
    case Method::glsim: {
      const Real g = naive::global(t, m, cfg);
      const Real loc = naive::local(t, pack, m, cfg);
      return static_cast<Real>(cfg.w) * g + (1.0L - static_cast<Real>(cfg.w)) * loc;
    }
    case Method::global: return naive::global(t, m, cfg);
    case Method::local: return naive::local(t, pack, m, cfg);
    case Method::nll:
      if (m.token_index >= t.gen_tokens.size()) throw Error(ErrorCode::TokenOutOfRange, "oracle: token index");
      return t.gen_tokens[m.token_index].logprob;
    case Method::entropy:
      if (m.token_index >= t.gen_tokens.size()) throw Error(ErrorCode::TokenOutOfRange, "oracle: token index");
      return -static_cast<Real>(t.gen_tokens[m.token_index].entropy);
    case Method::internal_confidence: return internal_confidence(t, pack, m, cfg.ic_raw_logits).value;
    case Method::svar: {
      Real total = 0.0L;
      for (int l = cfg.svar_lo; l <= cfg.svar_hi; ++l) {
        if (!t.var.count(l)) throw Error(ErrorCode::VarLayerMissing, "oracle: var layer");
        total += t.var.at(l)[m.token_index];
      }
      return total;
    }
    case Method::contextual_lens: {
      const Matrix& vh = naive::visual(t, cfg.image_layer);
      const auto obj = naive::object_embedding(t, m, cfg.text_layer, cfg.token_select);
      Real best = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < vh.rows; ++i) best = std::max(best, naive::sim(vh.row(i), obj, vh.cols, Distance::cosine));
      return best;
    }
  }
  return 0.0L;
}

/// Reference counterpart of score_all for a single method.
inline ScoreBatch oracle_scores(const TraceBundle& bundle, const std::vector<ObjectMention>& mentions,
                                const ScoringConfig& cfg, Method method) {
  ScoreBatch batch;
  const std::string fp = config_fingerprint(cfg);
  for (const auto& m : mentions) {
    const SampleTrace* t = bundle.find(m.sample_id);
    try {
      if (!t) throw Error(ErrorCode::InvariantViolation, "unknown sample " + m.sample_id);
      batch.records.push_back(
          {m.sample_id, m.canonical, method, static_cast<double>(score(*t, bundle.pack, m, cfg, method)), fp, m.label});
    } catch (const Error& e) {
      batch.failures.push_back({m.sample_id, m.canonical, method, e.code(), e.what()});
    }
  }
  return batch;
}

}  // namespace glsim::oracle
