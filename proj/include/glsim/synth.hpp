#pragma once

// Deterministic synthetic trace bundles with planted geometry.
//
// Every object class c owns two orthonormal directions: a semantic direction
// u_c (what its hidden states look like) and a readout direction r_c (the
// row of W_U that makes the logit lens predict its token, W_U[c] = 4 r_c).
// A "planted" patch of class c is S * normalize(a (u_c + r_c)/sqrt2 + (1-a) z)
// with z a background direction orthogonal to all class directions, so the
// logit lens lights up on it and it is cosine-similar to the object token.
//
// Each sample's caption mentions one object class c; the image always holds
// one other "scene" class c'. Scenarios:
//   clean_real          c planted, prompt anchor aligned with c
//   clean_halluc        c absent, anchor aligned with c'
//   context_confound    c absent, anchor aligned with c (global score fooled)
//   lookalike_confound  c absent, c' patches carry r_c and a semantic
//                       direction close to u_c (local score fooled),
//                       anchor aligned with c'
//
// Randomness comes from a counter-based generator: value n of stream s under
// seed k is splitmix64(key + (n+1) * 0x9E3779B97F4A7C15) with
// key = splitmix64(k ^ splitmix64(s + 0x632BE59BD9B4E019)). Uniforms take the
// top 53 bits; normals use the cosine branch of Box-Muller on two uniforms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "lexicon.hpp"
#include "trace.hpp"

namespace glsim {

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ull))) {}

  std::uint64_t at(std::uint64_t counter) const { return mix(key_ + (counter + 1) * 0x9E3779B97F4A7C15ull); }
  std::uint64_t next() { return at(counter_++); }

  /// [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

enum class Scenario { clean_real, clean_halluc, context_confound, lookalike_confound };

struct ScenarioMix {
  double clean_real = 0.5;
  double clean_halluc = 0.5;
  double context_confound = 0.0;
  double lookalike_confound = 0.0;
  std::array<double, 4> fractions() const { return {clean_real, clean_halluc, context_confound, lookalike_confound}; }
};

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t samples = 100;
  std::size_t n_visual = 16;     // N
  std::size_t hidden_dim = 32;   // d
  std::size_t vocab_size = 64;   // |V|
  std::size_t n_generated = 8;   // M
  int layer_count = 32;
  std::vector<int> exported_layers{30, 31, 32};
  std::vector<int> var_layers{5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18};
  ScenarioMix mix;
  double alpha = 0.8;                 // signal strength in (0, 1]
  double sigma = 0.0;                 // relative noise norm
  std::size_t planted_patches = 2;    // patches per planted class
  double lookalike_similarity = 0.9;  // cosine of a lookalike's direction to the mentioned class
  std::string model_id = "synthetic";
};

struct SynthOutput {
  TraceBundle bundle;
  AnnotationSet annotations;
  ObjectLexicon lexicon;
  std::vector<Scenario> scenarios;  // per sample, in sample order
};

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::clean_real: return "clean_real";
    case Scenario::clean_halluc: return "clean_halluc";
    case Scenario::context_confound: return "context_confound";
    case Scenario::lookalike_confound: return "lookalike_confound";
  }
  return "?";
}

inline std::size_t synth_class_count(const SynthSpec& s) {
  return std::max<std::size_t>(2, std::min({s.vocab_size / 4, s.hidden_dim / 4, std::size_t{16}}));
}

inline void validate_spec(const SynthSpec& s) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::SpecInvalid, m); };
  const auto f = s.mix.fractions();
  double sum = 0.0;
  for (double x : f) {
    if (!(x >= 0.0)) fail("scenario fractions must be non-negative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("scenario fractions must sum to 1");
  if (s.hidden_dim < 4) fail("hidden_dim must be >= 4");
  if (s.vocab_size < 8) fail("vocab_size must be >= 8");
  if (s.n_visual < 1) fail("n_visual must be >= 1");
  if (s.n_generated < 6) fail("n_generated must be >= 6");
  if (s.samples < 1) fail("samples must be >= 1");
  if (!(s.alpha > 0.0 && s.alpha <= 1.0)) fail("alpha must lie in (0, 1]");
  if (!(s.sigma >= 0.0) || !std::isfinite(s.sigma)) fail("sigma must be >= 0");
  if (s.planted_patches < 1 || s.planted_patches > s.n_visual) fail("planted_patches must lie in [1, N]");
  if (!(s.lookalike_similarity >= 0.0 && s.lookalike_similarity <= 1.0))
    fail("lookalike_similarity must lie in [0, 1]");
  if (s.layer_count < 1) fail("layer_count must be >= 1");
  if (s.exported_layers.empty()) fail("exported_layers must not be empty");
  for (int l : s.exported_layers)
    if (l < 0 || l > s.layer_count) fail("exported layer " + std::to_string(l) + " out of range");
  for (int l : s.var_layers)
    if (l < 1 || l > s.layer_count) fail("var layer " + std::to_string(l) + " out of range");
  if (s.vocab_size < synth_class_count(s) + 4) fail("vocab_size too small for the class vocabulary");
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.seed = j.value("seed", s.seed);
    s.samples = j.value("samples", s.samples);
    s.n_visual = j.value("n_visual", s.n_visual);
    s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.n_generated = j.value("n_generated", s.n_generated);
    s.layer_count = j.value("layer_count", s.layer_count);
    s.exported_layers = j.value("exported_layers", s.exported_layers);
    s.var_layers = j.value("var_layers", s.var_layers);
    if (j.contains("mix")) {
      const auto& m = j.at("mix");
      s.mix = {m.value("clean_real", 0.0), m.value("clean_halluc", 0.0), m.value("context_confound", 0.0),
               m.value("lookalike_confound", 0.0)};
    }
    s.alpha = j.value("alpha", s.alpha);
    s.sigma = j.value("sigma", s.sigma);
    s.planted_patches = j.value("planted_patches", s.planted_patches);
    s.lookalike_similarity = j.value("lookalike_similarity", s.lookalike_similarity);
    s.model_id = j.value("model_id", s.model_id);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SpecInvalid, e.what());
  }
  std::sort(s.exported_layers.begin(), s.exported_layers.end());
  s.exported_layers.erase(std::unique(s.exported_layers.begin(), s.exported_layers.end()), s.exported_layers.end());
  std::sort(s.var_layers.begin(), s.var_layers.end());
  s.var_layers.erase(std::unique(s.var_layers.begin(), s.var_layers.end()), s.var_layers.end());
  validate_spec(s);
  return s;
}

inline nlohmann::json spec_to_json(const SynthSpec& s) {
  return {{"seed", s.seed},
          {"samples", s.samples},
          {"n_visual", s.n_visual},
          {"hidden_dim", s.hidden_dim},
          {"vocab_size", s.vocab_size},
          {"n_generated", s.n_generated},
          {"layer_count", s.layer_count},
          {"exported_layers", s.exported_layers},
          {"var_layers", s.var_layers},
          {"mix",
           {{"clean_real", s.mix.clean_real},
            {"clean_halluc", s.mix.clean_halluc},
            {"context_confound", s.mix.context_confound},
            {"lookalike_confound", s.mix.lookalike_confound}}},
          {"alpha", s.alpha},
          {"sigma", s.sigma},
          {"planted_patches", s.planted_patches},
          {"lookalike_similarity", s.lookalike_similarity},
          {"model_id", s.model_id}};
}

namespace detail {

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> kNames = {"dog",   "cat",    "horse", "sheep",  "cow",      "elephant",
                                                  "bear",  "zebra",  "giraffe", "bird", "car",      "bus",
                                                  "train", "truck",  "boat",  "bench"};
  return kNames;
}

using Vec = std::vector<double>;

inline double norm(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline Vec normalized(Vec v) {
  const double n = norm(v);
  if (n > 0.0)
    for (auto& x : v) x /= n;
  return v;
}

inline Vec axpy(double a, const Vec& x, double b, const Vec& y) {
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

class SynthGeometry {
 public:
  SynthGeometry(const SynthSpec& spec, std::size_t classes) : d_(spec.hidden_dim), classes_(classes) {
    CounterRng rng(spec.seed, 0);
    std::vector<Vec> basis;
    while (basis.size() < d_) {
      Vec v(d_);
      for (auto& x : v) x = rng.normal();
      for (const auto& b : basis) {
        double p = 0.0;
        for (std::size_t i = 0; i < d_; ++i) p += v[i] * b[i];
        for (std::size_t i = 0; i < d_; ++i) v[i] -= p * b[i];
      }
      if (norm(v) > 1e-6) basis.push_back(normalized(v));
    }
    semantic_.assign(basis.begin(), basis.begin() + static_cast<std::ptrdiff_t>(classes_));
    readout_.assign(basis.begin() + static_cast<std::ptrdiff_t>(classes_),
                    basis.begin() + static_cast<std::ptrdiff_t>(2 * classes_));
    background_.assign(basis.begin() + static_cast<std::ptrdiff_t>(2 * classes_), basis.end());
  }

  const Vec& semantic(std::size_t c) const { return semantic_[c]; }
  const Vec& readout(std::size_t c) const { return readout_[c]; }

  /// Unit vector orthogonal to every class direction when room exists.
  Vec background(CounterRng& rng) const {
    Vec v(d_, 0.0);
    if (background_.empty()) {
      for (auto& x : v) x = rng.normal();
    } else {
      for (const auto& b : background_) {
        const double g = rng.normal();
        for (std::size_t i = 0; i < d_; ++i) v[i] += g * b[i];
      }
    }
    return normalized(v);
  }

 private:
  std::size_t d_;
  std::size_t classes_;
  std::vector<Vec> semantic_, readout_, background_;
};

/// |v| * (unit(v) + sigma * g / sqrt(d)), stored as f32.
inline void store_noisy(std::span<float> dst, const Vec& v, double sigma, CounterRng& rng) {
  const double n = norm(v);
  const double scale = sigma * n / std::sqrt(static_cast<double>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double noise = sigma > 0.0 ? scale * rng.normal() : 0.0;
    dst[i] = static_cast<float>(v[i] + noise);
  }
}

inline std::vector<Scenario> assign_scenarios(const SynthSpec& spec) {
  const auto f = spec.mix.fractions();
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t total = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double exact = f[k] * static_cast<double>(spec.samples);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(counts[k]);
    total += counts[k];
  }
  while (total < spec.samples) {  // largest remainder, lowest index on ties
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (rem[k] > rem[best]) best = k;
    ++counts[best];
    rem[best] = -1.0;
    ++total;
  }
  std::vector<Scenario> out;
  for (std::size_t k = 0; k < 4; ++k) out.insert(out.end(), counts[k], static_cast<Scenario>(k));
  CounterRng rng(spec.seed, 1);
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

inline std::string padded(std::size_t i, std::size_t width) {
  std::string s = std::to_string(i);
  return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

}  // namespace detail

inline SynthOutput generate(const SynthSpec& spec) {
  validate_spec(spec);
  using detail::Vec;
  const std::size_t C = synth_class_count(spec);
  const std::size_t d = spec.hidden_dim, N = spec.n_visual, M = spec.n_generated, V = spec.vocab_size;
  const detail::SynthGeometry geo(spec, C);
  constexpr double kReadoutScale = 4.0;
  constexpr double kPatchScale = 4.0;

  SynthOutput out;
  std::vector<ObjectLexicon::Class> classes;
  for (std::size_t c = 0; c < C; ++c) classes.push_back({detail::synth_class_names()[c], {}});
  out.lexicon = ObjectLexicon(classes);

  // Vocabulary: classes, then the caption scaffold, then fillers.
  ModelPack& pack = out.bundle.pack;
  pack.model_id = spec.model_id;
  pack.hidden_dim = d;
  pack.vocab_size = V;
  pack.layer_count = spec.layer_count;
  pack.vocab.resize(V);
  const std::vector<std::string> scaffold = {"a", "photo", "of", ".", "with", "and", "the", "in", "scene", "image"};
  for (std::size_t v = 0; v < V; ++v) {
    if (v < C) pack.vocab[v] = detail::synth_class_names()[v];
    else if (v - C < scaffold.size()) pack.vocab[v] = scaffold[v - C];
    else pack.vocab[v] = "tok" + std::to_string(v);
  }
  const std::int64_t tok_a = static_cast<std::int64_t>(C), tok_photo = tok_a + 1, tok_of = tok_a + 2,
                     tok_stop = tok_a + 3;
  pack.unembed = Matrix(V, d);
  {
    CounterRng rng(spec.seed, 2);
    for (std::size_t v = 0; v < V; ++v) {
      auto row = pack.unembed.row(v);
      if (v < C) {
        for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(kReadoutScale * geo.readout(v)[i]);
      } else {
        for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(rng.normal() / std::sqrt(double(d)));
      }
    }
  }

  out.scenarios = detail::assign_scenarios(spec);
  const std::size_t width = std::max<std::size_t>(5, std::to_string(spec.samples - 1).size());
  const double log_v = std::log(static_cast<double>(V));
  out.bundle.annotations_ref = "annotations.json";

  for (std::size_t si = 0; si < spec.samples; ++si) {
    CounterRng rng(spec.seed, 16 + si);
    const Scenario scenario = out.scenarios[si];
    const bool real = scenario == Scenario::clean_real;
    const std::size_t obj = rng.below(C);
    const std::size_t scene = (obj + 1 + rng.below(C - 1)) % C;

    SampleTrace s;
    s.sample_id = "s" + detail::padded(si, width);
    s.image_id = "img" + detail::padded(si, width);
    std::size_t rows = 1;
    for (std::size_t r = 1; r * r <= N; ++r)
      if (N % r == 0) rows = r;
    s.grid = {rows, N / rows};
    s.n_visual = N;
    s.n_generated = M;
    s.exported_layers = spec.exported_layers;
    s.var_layers = spec.var_layers;

    auto& ann = out.annotations[s.image_id];
    ann.insert(pack.vocab[scene]);
    if (real) ann.insert(pack.vocab[obj]);

    // Caption "a photo of a <obj> <fillers...> ."
    std::vector<std::int64_t> ids = {tok_a, tok_photo, tok_of, tok_a, static_cast<std::int64_t>(obj)};
    const std::size_t filler_lo = C + 4;
    while (ids.size() + 1 < M)
      ids.push_back(filler_lo < V ? static_cast<std::int64_t>(filler_lo + rng.below(V - filler_lo)) : tok_of);
    ids.push_back(tok_stop);
    constexpr std::size_t kObjIndex = 4;
    for (std::size_t j = 0; j < M; ++j) {
      if (j > 0) s.generated_text += ' ';
      GenToken t;
      t.token_id = ids[j];
      t.span.start = s.generated_text.size();
      s.generated_text += pack.vocab[static_cast<std::size_t>(ids[j])];
      t.span.end = s.generated_text.size();
      double p = rng.uniform(0.5, 1.0), h = rng.uniform(0.0, 1.5);
      if (j == kObjIndex) {
        p = real ? rng.uniform(0.35, 0.95) : rng.uniform(0.15, 0.75);
        h = real ? rng.uniform(0.3, 1.8) : rng.uniform(0.8, 2.6);
      }
      t.logprob = std::log(p);
      t.entropy = std::min(h, log_v);
      s.gen_tokens.push_back(t);
    }

    // Patch layout, shared across layers.
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t P = spec.planted_patches;
    std::vector<int> role(N, -1);  // -1 background, 0 object, 1 scene
    if (real) {
      for (std::size_t k = 0; k < std::min(P, N); ++k) role[order[k]] = 0;
      for (std::size_t k = P; k < std::min(2 * P, N); ++k) role[order[k]] = 1;
    } else {
      for (std::size_t k = 0; k < std::min(P, N); ++k) role[order[k]] = 1;
    }
    const double rho = spec.lookalike_similarity;
    const Vec lookalike_dir =
        detail::normalized(detail::axpy(rho, geo.semantic(obj), std::sqrt(1.0 - rho * rho), geo.semantic(scene)));
    const std::size_t anchor_class =
        (scenario == Scenario::clean_real || scenario == Scenario::context_confound) ? obj : scene;

    for (int l : spec.exported_layers) {
      const double a = spec.alpha * (0.5 + 0.5 * static_cast<double>(l) / static_cast<double>(spec.layer_count));
      auto planted = [&](const Vec& sem, const Vec& readout) {
        const Vec sig = detail::axpy(1.0 / std::numbers::sqrt2, sem, 1.0 / std::numbers::sqrt2, readout);
        const Vec mixed = detail::normalized(detail::axpy(a, sig, 1.0 - a, geo.background(rng)));
        return detail::axpy(kPatchScale, mixed, 0.0, mixed);
      };
      Matrix vh(N, d);
      for (std::size_t i = 0; i < N; ++i) {
        Vec v;
        if (role[i] == 0) v = planted(geo.semantic(obj), geo.readout(obj));
        else if (role[i] == 1 && scenario == Scenario::lookalike_confound) v = planted(lookalike_dir, geo.readout(obj));
        else if (role[i] == 1) v = planted(geo.semantic(scene), geo.readout(scene));
        else {
          const Vec bg = geo.background(rng);
          v = detail::axpy(kPatchScale, bg, 0.0, bg);
        }
        detail::store_noisy(vh.row(i), v, spec.sigma, rng);
      }
      std::vector<float> anchor(d);
      detail::store_noisy(anchor,
                          detail::normalized(detail::axpy(a, geo.semantic(anchor_class), 1.0 - a, geo.background(rng))),
                          spec.sigma, rng);
      Matrix gh(M, d);
      for (std::size_t j = 0; j < M; ++j) {
        const Vec v = j == kObjIndex
                          ? detail::normalized(detail::axpy(a, geo.semantic(obj), 1.0 - a, geo.background(rng)))
                          : geo.background(rng);
        detail::store_noisy(gh.row(j), v, spec.sigma, rng);
      }
      s.visual_hidden.emplace(l, std::move(vh));
      s.prompt_last_hidden.emplace(l, std::move(anchor));
      s.gen_hidden.emplace(l, std::move(gh));
    }

    for (int l : spec.var_layers) {
      std::vector<float> var(M);
      for (std::size_t j = 0; j < M; ++j) {
        double v = rng.uniform(0.0, 0.6);
        if (j == kObjIndex) v = (real ? 0.5 : 0.4) + 0.15 * rng.normal();
        var[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      s.var.emplace(l, std::move(var));
    }
    out.bundle.samples.push_back(std::move(s));
  }
  return out;
}

/// Writes the bundle plus lexicon.json and annotations.json into `dest`.
inline void write_synth_output(const SynthOutput& out, const std::filesystem::path& dest) {
  write_bundle(out.bundle, dest);
  detail::write_file(dest / "lexicon.json", lexicon_to_json(out.lexicon).dump(2) + "\n");
  detail::write_file(dest / "annotations.json", annotations_to_json(out.annotations).dump(2) + "\n");
}

}  // namespace glsim
