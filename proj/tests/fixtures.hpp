#pragma once

// Hand-built bundles and scratch directories shared by the unit tests.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <glsim/glsim.hpp>

namespace fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "glsim") {
    static std::atomic<unsigned> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline float gauss(std::mt19937_64& rng, double scale = 1.0) {
  return static_cast<float>(std::normal_distribution<double>(0.0, scale)(rng));
}

inline glsim::Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  glsim::Matrix m(rows, cols);
  for (auto& x : m.data) x = gauss(rng, scale);
  return m;
}

struct Shape {
  std::size_t n = 4;
  std::size_t d = 8;
  std::size_t v = 16;
  std::size_t m = 6;
  int layer_count = 32;
  std::vector<int> layers{31, 32};
  std::vector<int> var_layers{5, 6, 7};
};

inline glsim::ModelPack random_pack(std::mt19937_64& rng, const Shape& s, const std::string& model_id = "fixture") {
  glsim::ModelPack p;
  p.model_id = model_id;
  p.hidden_dim = s.d;
  p.vocab_size = s.v;
  p.layer_count = s.layer_count;
  p.unembed = random_matrix(rng, s.v, s.d, 1.0);
  for (std::size_t i = 0; i < s.v; ++i) p.vocab.push_back("w" + std::to_string(i));
  return p;
}

/// Random sample with a caption of M single-word tokens "w<id>" separated by spaces.
inline glsim::SampleTrace random_sample(std::mt19937_64& rng, const Shape& s, const std::string& id,
                                        double state_scale = 1.0) {
  glsim::SampleTrace t;
  t.sample_id = id;
  t.image_id = "img_" + id;
  t.n_visual = s.n;
  t.n_generated = s.m;
  std::size_t rows = 1;
  for (std::size_t r = 1; r * r <= s.n; ++r)
    if (s.n % r == 0) rows = r;
  t.grid = {rows, s.n / rows};
  t.exported_layers = s.layers;
  t.var_layers = s.var_layers;
  std::uniform_int_distribution<std::size_t> tok(0, s.v - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t j = 0; j < s.m; ++j) {
    if (j) t.generated_text += ' ';
    glsim::GenToken g;
    g.token_id = static_cast<std::int64_t>(tok(rng));
    g.span.start = t.generated_text.size();
    t.generated_text += "w" + std::to_string(g.token_id);
    g.span.end = t.generated_text.size();
    g.logprob = std::log(0.05 + 0.95 * unit(rng));
    g.entropy = unit(rng) * std::log(static_cast<double>(s.v));
    t.gen_tokens.push_back(g);
  }
  for (int l : s.layers) {
    t.visual_hidden.emplace(l, random_matrix(rng, s.n, s.d, state_scale));
    std::vector<float> anchor(s.d);
    for (auto& x : anchor) x = gauss(rng, state_scale);
    t.prompt_last_hidden.emplace(l, std::move(anchor));
    t.gen_hidden.emplace(l, random_matrix(rng, s.m, s.d, state_scale));
  }
  for (int l : s.var_layers) {
    std::vector<float> v(s.m);
    for (auto& x : v) x = static_cast<float>(unit(rng));
    t.var.emplace(l, std::move(v));
  }
  return t;
}

inline glsim::TraceBundle random_bundle(std::uint64_t seed, const Shape& s, std::size_t samples = 3) {
  std::mt19937_64 rng(seed);
  glsim::TraceBundle b;
  b.pack = random_pack(rng, s);
  for (std::size_t i = 0; i < samples; ++i) b.samples.push_back(random_sample(rng, s, "s" + std::to_string(100 + i)));
  return b;
}

/// Mention of generated token j, as extract_mentions would produce for a
/// single-token object.
inline glsim::ObjectMention mention_at(const glsim::SampleTrace& t, std::size_t j,
                                       glsim::MentionLabel label = glsim::MentionLabel::unlabeled) {
  glsim::ObjectMention m;
  m.sample_id = t.sample_id;
  m.surface = t.generated_text.substr(t.gen_tokens[j].span.start, t.gen_tokens[j].span.end - t.gen_tokens[j].span.start);
  m.canonical = m.surface;
  m.token_index = j;
  m.first_token_id = t.gen_tokens[j].token_id;
  m.char_span = t.gen_tokens[j].span;
  m.label = label;
  return m;
}

/// Trace holding only a caption, tokenized into alphanumeric runs of at most
/// five characters and single punctuation characters. Token j gets id 100 + j.
inline glsim::SampleTrace caption_trace(const std::string& id, const std::string& text) {
  glsim::SampleTrace t;
  t.sample_id = id;
  t.image_id = id;
  t.generated_text = text;
  auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::size_t end = i + 1;
    if (alnum(text[i])) {
      std::size_t run = i;
      while (run < text.size() && alnum(text[run])) ++run;
      end = std::min(run, i + 5);
    }
    glsim::GenToken g;
    g.token_id = 100 + static_cast<std::int64_t>(t.gen_tokens.size());
    g.span = {i, end};
    t.gen_tokens.push_back(g);
    i = end;
  }
  t.n_generated = t.gen_tokens.size();
  return t;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

}  // namespace fixtures
