#pragma once

// Trace container: the model pack (unembedding matrix + vocabulary) and the
// per-sample activation traces exported from a vision-language model run.
//
// On-disk layout of a bundle directory:
//
//   pack/manifest.json      model constants, section table for unembed.bin
//   pack/unembed.bin        W_U, |V| x d
//   pack/vocab.tsv          token_id <TAB> surface (backslash-escaped)
//   samples/<id>/manifest.json
//   samples/<id>/tensors.bin
//
// Binary files start with an 8-byte magic followed by zero padding; every
// section starts on a 64-byte boundary and the gaps between sections are
// zero. Tensors are little-endian f32, row-major. Each manifest lists, per
// section, its shape, byte offset, byte length and CRC-32.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "error.hpp"
#include "tensor.hpp"

namespace glsim {

inline constexpr std::string_view kFormatVersion = "1";
inline constexpr std::string_view kPackMagic = "glsim-pack";
inline constexpr std::string_view kSampleMagic = "glsim-sample";
inline constexpr std::array<char, 8> kBinaryMagic = {'G', 'L', 'S', 'I', 'M', 'T', 'B', '1'};
inline constexpr std::size_t kSectionAlign = 64;

enum class LayerConvention { post_block_1_based };
enum class UnembedInputTransform { none, final_norm_applied };

inline std::string to_string(UnembedInputTransform t) {
  return t == UnembedInputTransform::none ? "none" : "final_norm_applied";
}

struct ModelPack {
  std::string model_id;
  std::size_t hidden_dim = 0;
  std::size_t vocab_size = 0;
  int layer_count = 0;
  LayerConvention layer_convention = LayerConvention::post_block_1_based;
  UnembedInputTransform unembed_input_transform = UnembedInputTransform::none;
  Matrix unembed;                  // |V| x d, row v is the readout for token v
  std::vector<std::string> vocab;  // surface of token id i at index i

  friend bool operator==(const ModelPack&, const ModelPack&) = default;
};

struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool contains(std::size_t pos) const { return pos >= start && pos < end; }
  bool overlaps(CharSpan o) const { return start < o.end && o.start < end; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct GenToken {
  std::int64_t token_id = 0;
  double logprob = 0.0;  // log p of the chosen token
  double entropy = 0.0;  // nats, over the full vocabulary
  CharSpan span;

  friend bool operator==(const GenToken& a, const GenToken& b) {
    return a.token_id == b.token_id && std::bit_cast<std::uint64_t>(a.logprob) == std::bit_cast<std::uint64_t>(b.logprob) &&
           std::bit_cast<std::uint64_t>(a.entropy) == std::bit_cast<std::uint64_t>(b.entropy) && a.span == b.span;
  }
};

struct GridDims {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct SampleTrace {
  std::string sample_id;
  std::string image_id;
  GridDims grid;
  std::size_t n_visual = 0;     // N
  std::size_t n_generated = 0;  // M
  std::vector<int> exported_layers;
  std::map<int, Matrix> visual_hidden;                    // N x d
  std::map<int, std::vector<float>> prompt_last_hidden;   // d
  std::map<int, Matrix> gen_hidden;                       // M x d
  std::vector<GenToken> gen_tokens;
  std::vector<int> var_layers;
  std::map<int, std::vector<float>> var;  // M per layer
  std::string generated_text;

  bool has_layer(int l) const {
    return std::find(exported_layers.begin(), exported_layers.end(), l) != exported_layers.end();
  }

  friend bool operator==(const SampleTrace& a, const SampleTrace& b) {
    auto vec_maps_equal = [](const std::map<int, std::vector<float>>& x,
                             const std::map<int, std::vector<float>>& y) {
      if (x.size() != y.size()) return false;
      for (auto ix = x.begin(), iy = y.begin(); ix != x.end(); ++ix, ++iy)
        if (ix->first != iy->first || !bitwise_equal(ix->second, iy->second)) return false;
      return true;
    };
    return a.sample_id == b.sample_id && a.image_id == b.image_id && a.grid == b.grid &&
           a.n_visual == b.n_visual && a.n_generated == b.n_generated &&
           a.exported_layers == b.exported_layers && a.visual_hidden == b.visual_hidden &&
           vec_maps_equal(a.prompt_last_hidden, b.prompt_last_hidden) &&
           a.gen_hidden == b.gen_hidden && a.gen_tokens == b.gen_tokens &&
           a.var_layers == b.var_layers && vec_maps_equal(a.var, b.var) &&
           a.generated_text == b.generated_text;
  }
};

struct TraceBundle {
  ModelPack pack;
  std::vector<SampleTrace> samples;
  std::optional<std::string> annotations_ref;

  const SampleTrace* find(const std::string& sample_id) const {
    for (const auto& s : samples)
      if (s.sample_id == sample_id) return &s;
    return nullptr;
  }

  friend bool operator==(const TraceBundle&, const TraceBundle&) = default;
};

struct Issue {
  ErrorCode code;
  std::string message;
};

/// Every invariant violation found in a bundle directory. Empty means valid.
struct ValidationReport {
  std::vector<Issue> issues;
  bool ok() const { return issues.empty(); }
};

// ---------------------------------------------------------------------------
// Invariant checks
// ---------------------------------------------------------------------------

namespace detail {

inline bool valid_sample_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '-' || c == '.';
  });
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

inline void push(std::vector<Issue>& out, ErrorCode code, std::string msg) {
  out.push_back({code, std::move(msg)});
}

}  // namespace detail

inline std::vector<Issue> check_pack(const ModelPack& pack) {
  std::vector<Issue> out;
  using detail::push;
  if (pack.hidden_dim == 0) push(out, ErrorCode::InvariantViolation, "pack: hidden_dim must be positive");
  if (pack.vocab_size == 0) push(out, ErrorCode::InvariantViolation, "pack: vocab_size must be positive");
  if (pack.layer_count < 1) push(out, ErrorCode::InvariantViolation, "pack: layer_count must be >= 1");
  if (pack.unembed.rows != pack.vocab_size || pack.unembed.cols != pack.hidden_dim ||
      pack.unembed.data.size() != pack.vocab_size * pack.hidden_dim)
    push(out, ErrorCode::InvariantViolation, "pack: unembed shape is not vocab_size x hidden_dim");
  if (pack.vocab.size() != pack.vocab_size)
    push(out, ErrorCode::InvariantViolation, "pack: vocab table size differs from vocab_size");
  if (!detail::all_finite(pack.unembed.data))
    push(out, ErrorCode::InvariantViolation, "pack: unembed contains non-finite values");
  return out;
}

inline std::vector<Issue> check_sample(const SampleTrace& s, const ModelPack& pack) {
  std::vector<Issue> out;
  using detail::push;
  const std::string where = "sample " + s.sample_id + ": ";
  const std::size_t d = pack.hidden_dim;
  const std::size_t N = s.n_visual;
  const std::size_t M = s.n_generated;

  if (!detail::valid_sample_id(s.sample_id))
    push(out, ErrorCode::InvariantViolation, where + "sample_id must match [A-Za-z0-9._-]+");
  if (s.grid.rows * s.grid.cols != N)
    push(out, ErrorCode::InvariantViolation, where + "grid rows*cols differs from N");
  if (s.exported_layers.empty()) push(out, ErrorCode::InvariantViolation, where + "no exported layers");
  if (!std::is_sorted(s.exported_layers.begin(), s.exported_layers.end()) ||
      std::adjacent_find(s.exported_layers.begin(), s.exported_layers.end()) != s.exported_layers.end())
    push(out, ErrorCode::InvariantViolation, where + "exported_layers must be strictly ascending");
  if (!std::is_sorted(s.var_layers.begin(), s.var_layers.end()) ||
      std::adjacent_find(s.var_layers.begin(), s.var_layers.end()) != s.var_layers.end())
    push(out, ErrorCode::InvariantViolation, where + "var_layers must be strictly ascending");

  for (int l : s.exported_layers) {
    const std::string tag = "layer_" + std::to_string(l);
    if (l < 0 || l > pack.layer_count)
      push(out, ErrorCode::InvariantViolation, where + "layer out of range: exported " + tag +
                                                   " with layer_count " + std::to_string(pack.layer_count));
    auto vh = s.visual_hidden.find(l);
    if (vh == s.visual_hidden.end() || vh->second.rows != N || vh->second.cols != d)
      push(out, ErrorCode::InvariantViolation, where + "visual_hidden/" + tag + " shape is not N x d");
    else if (!detail::all_finite(vh->second.data))
      push(out, ErrorCode::InvariantViolation, where + "visual_hidden/" + tag + " has non-finite values");
    auto pl = s.prompt_last_hidden.find(l);
    if (pl == s.prompt_last_hidden.end() || pl->second.size() != d)
      push(out, ErrorCode::InvariantViolation, where + "prompt_last_hidden/" + tag + " length is not d");
    else if (!detail::all_finite(pl->second))
      push(out, ErrorCode::InvariantViolation, where + "prompt_last_hidden/" + tag + " has non-finite values");
    auto gh = s.gen_hidden.find(l);
    if (gh == s.gen_hidden.end() || gh->second.rows != M || gh->second.cols != d)
      push(out, ErrorCode::InvariantViolation, where + "gen_hidden/" + tag + " shape is not M x d");
    else if (!detail::all_finite(gh->second.data))
      push(out, ErrorCode::InvariantViolation, where + "gen_hidden/" + tag + " has non-finite values");
  }
  if (s.visual_hidden.size() != s.exported_layers.size() ||
      s.prompt_last_hidden.size() != s.exported_layers.size() || s.gen_hidden.size() != s.exported_layers.size())
    push(out, ErrorCode::InvariantViolation, where + "hidden-state tensors present for layers not in exported_layers");

  if (s.gen_tokens.size() != M)
    push(out, ErrorCode::InvariantViolation, where + "gen_tokens count differs from M");
  std::size_t prev_end = 0;
  for (std::size_t j = 0; j < s.gen_tokens.size(); ++j) {
    const auto& t = s.gen_tokens[j];
    const std::string tj = where + "token " + std::to_string(j) + ": ";
    if (t.token_id < 0 || static_cast<std::size_t>(t.token_id) >= pack.vocab_size)
      push(out, ErrorCode::InvariantViolation, tj + "token_id out of vocabulary range");
    if (!std::isfinite(t.logprob) || t.logprob > 0.0)
      push(out, ErrorCode::InvariantViolation, tj + "logprob must be finite and <= 0");
    if (!(t.entropy >= 0.0) || !std::isfinite(t.entropy))
      push(out, ErrorCode::InvariantViolation, tj + "entropy must be finite and >= 0");
    if (t.span.start > t.span.end || t.span.end > s.generated_text.size())
      push(out, ErrorCode::InvariantViolation, tj + "char_span outside generated_text");
    if (t.span.start < prev_end)
      push(out, ErrorCode::InvariantViolation, tj + "char_span overlaps or precedes previous span");
    prev_end = std::max(prev_end, t.span.end);
  }

  for (int l : s.var_layers) {
    const std::string tag = "var/layer_" + std::to_string(l);
    if (l < 1 || l > pack.layer_count)
      push(out, ErrorCode::InvariantViolation, where + "layer out of range: " + tag +
                                                   " with layer_count " + std::to_string(pack.layer_count));
    auto it = s.var.find(l);
    if (it == s.var.end() || it->second.size() != M) {
      push(out, ErrorCode::InvariantViolation, where + tag + " length is not M");
      continue;
    }
    for (float v : it->second) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        push(out, ErrorCode::InvariantViolation, where + "var out of [0,1] in " + tag);
        break;
      }
    }
  }
  if (s.var.size() != s.var_layers.size())
    push(out, ErrorCode::InvariantViolation, where + "var tensors present for layers not in var_layers");
  return out;
}

inline std::vector<Issue> check_bundle(const TraceBundle& b) {
  auto out = check_pack(b.pack);
  std::set<std::string> seen;
  for (const auto& s : b.samples) {
    if (!seen.insert(s.sample_id).second)
      detail::push(out, ErrorCode::InvariantViolation, "duplicate sample_id " + s.sample_id);
    auto more = check_sample(s, b.pack);
    out.insert(out.end(), more.begin(), more.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary section files
// ---------------------------------------------------------------------------

namespace detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::size_t align_up(std::size_t n) { return (n + kSectionAlign - 1) / kSectionAlign * kSectionAlign; }

inline std::uint32_t crc32_of(const char* p, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(p), chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void encode_f32(std::span<const float> src, char* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!src.empty()) std::memcpy(dst, src.data(), src.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(src[i]);
      for (int b = 0; b < 4; ++b) dst[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
  }
}

inline void decode_f32(const char* src, std::span<float> dst) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!dst.empty()) std::memcpy(dst.data(), src, dst.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      dst[i] = std::bit_cast<float>(u);
    }
  }
}

struct SectionWriter {
  std::string bytes;
  json table = json::array();

  SectionWriter() : bytes(kSectionAlign, '\0') { std::memcpy(bytes.data(), kBinaryMagic.data(), kBinaryMagic.size()); }

  void add(const std::string& name, std::vector<std::size_t> shape, std::span<const float> values) {
    const std::size_t offset = bytes.size();
    const std::size_t nbytes = values.size() * sizeof(float);
    bytes.resize(align_up(offset + nbytes), '\0');
    encode_f32(values, bytes.data() + offset);
    table.push_back({{"name", name},
                     {"shape", shape},
                     {"offset", offset},
                     {"nbytes", nbytes},
                     {"crc32", crc32_of(bytes.data() + offset, nbytes)}});
  }
};

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + p.string() + " for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw Error(ErrorCode::IoFailure, "write failed: " + p.string());
}

inline std::optional<std::string> read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return std::nullopt;
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string escape_tsv(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::optional<std::string> unescape_tsv(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i >= s.size()) return std::nullopt;
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: return std::nullopt;
    }
  }
  return out;
}

/// Parsed view of one binary section file, with structural checks applied.
/// Sections that fail a check are dropped from `sections` after an issue is
/// recorded, so callers only see decodable data.
struct SectionFile {
  struct Entry {
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t nbytes = 0;
  };
  std::string bytes;
  std::map<std::string, Entry> sections;

  template <typename Out>
  bool load(const std::vector<float>::size_type count, const std::string& name, Out& dst) const {
    auto it = sections.find(name);
    if (it == sections.end() || it->second.nbytes != count * sizeof(float)) return false;
    dst.resize(count);
    decode_f32(bytes.data() + it->second.offset, std::span<float>(dst.data(), count));
    return true;
  }
};

inline std::string where_of(const fs::path& p) { return p.generic_string() + ": "; }

inline SectionFile parse_sections(const fs::path& bin_path, const json& manifest, std::vector<Issue>& out) {
  SectionFile sf;
  const std::string where = where_of(bin_path);
  auto bytes = read_file(bin_path);
  if (!bytes) {
    push(out, ErrorCode::IoFailure, where + "cannot read file");
    return sf;
  }
  sf.bytes = std::move(*bytes);
  const std::size_t size = sf.bytes.size();
  if (size < kBinaryMagic.size() || std::memcmp(sf.bytes.data(), kBinaryMagic.data(), kBinaryMagic.size()) != 0) {
    push(out, ErrorCode::BadMagic, where + "binary magic mismatch");
    return sf;
  }
  if (!manifest.contains("file_size") || manifest["file_size"].get<std::size_t>() != size)
    push(out, ErrorCode::ManifestMismatch, where + "file length " + std::to_string(size) +
                                               " differs from declared file_size");

  std::vector<char> covered(size, 0);
  std::fill(covered.begin(), covered.begin() + static_cast<std::ptrdiff_t>(kBinaryMagic.size()), 1);
  for (const auto& s : manifest.at("sections")) {
    const auto name = s.at("name").get<std::string>();
    SectionFile::Entry e;
    e.shape = s.at("shape").get<std::vector<std::size_t>>();
    e.offset = s.at("offset").get<std::size_t>();
    e.nbytes = s.at("nbytes").get<std::size_t>();
    const auto crc = s.at("crc32").get<std::uint32_t>();
    std::size_t elems = 1;
    for (auto dim : e.shape) elems *= dim;
    if (elems * sizeof(float) != e.nbytes) {
      push(out, ErrorCode::ManifestMismatch, where + "section " + name + " nbytes disagrees with shape");
      continue;
    }
    if (e.offset % kSectionAlign != 0) {
      push(out, ErrorCode::ManifestMismatch, where + "section " + name + " is not 64-byte aligned");
      continue;
    }
    if (e.offset < kSectionAlign || e.offset > size || e.nbytes > size - e.offset) {
      push(out, ErrorCode::ManifestMismatch, where + "section " + name + " extends past end of file");
      continue;
    }
    bool overlap = false;
    for (std::size_t i = e.offset; i < e.offset + e.nbytes; ++i) {
      if (covered[i]) { overlap = true; break; }
      covered[i] = 1;
    }
    if (overlap) {
      push(out, ErrorCode::ManifestMismatch, where + "section " + name + " overlaps another section");
      continue;
    }
    if (crc32_of(sf.bytes.data() + e.offset, e.nbytes) != crc) {
      push(out, ErrorCode::ManifestMismatch, where + "section " + name + " checksum mismatch");
      continue;
    }
    if (!sf.sections.emplace(name, e).second)
      push(out, ErrorCode::ManifestMismatch, where + "duplicate section " + name);
  }
  for (std::size_t i = 0; i < size; ++i) {
    if (!covered[i] && sf.bytes[i] != '\0') {
      push(out, ErrorCode::ManifestMismatch, where + "non-zero padding byte at offset " + std::to_string(i));
      break;
    }
  }
  return sf;
}

inline bool check_header(const json& m, std::string_view magic, const std::string& where, std::vector<Issue>& out) {
  if (!m.contains("magic") || !m["magic"].is_string() || m["magic"].get<std::string>() != magic) {
    push(out, ErrorCode::BadMagic, where + "manifest magic is not " + std::string(magic));
    return false;
  }
  if (!m.contains("format_version") || !m["format_version"].is_string() ||
      m["format_version"].get<std::string>() != kFormatVersion) {
    push(out, ErrorCode::UnsupportedVersion,
         where + "unsupported format_version " + (m.contains("format_version") ? m["format_version"].dump() : "(missing)"));
    return false;
  }
  return true;
}

inline std::optional<json> read_manifest(const fs::path& p, std::vector<Issue>& out) {
  auto text = read_file(p);
  if (!text) {
    push(out, ErrorCode::IoFailure, where_of(p) + "cannot read manifest");
    return std::nullopt;
  }
  try {
    return json::parse(*text);
  } catch (const json::exception& e) {
    push(out, ErrorCode::ParseFailure, where_of(p) + e.what());
    return std::nullopt;
  }
}

inline std::string layer_section(std::string_view kind, int layer) {
  return std::string(kind) + "/layer_" + std::to_string(layer);
}

inline std::optional<ModelPack> load_pack(const fs::path& dir, std::vector<Issue>& out,
                                          std::optional<std::string>& annotations_ref) {
  const auto mpath = dir / "manifest.json";
  auto m = read_manifest(mpath, out);
  if (!m || !check_header(*m, kPackMagic, where_of(mpath), out)) return std::nullopt;
  ModelPack pack;
  try {
    pack.model_id = m->at("model_id").get<std::string>();
    pack.hidden_dim = m->at("hidden_dim").get<std::size_t>();
    pack.vocab_size = m->at("vocab_size").get<std::size_t>();
    pack.layer_count = m->at("layer_count").get<int>();
    if (m->at("layer_convention").get<std::string>() != "post_block_1_based")
      push(out, ErrorCode::ManifestMismatch, where_of(mpath) + "unknown layer_convention");
    const auto t = m->at("unembed_input_transform").get<std::string>();
    if (t == "none") pack.unembed_input_transform = UnembedInputTransform::none;
    else if (t == "final_norm_applied") pack.unembed_input_transform = UnembedInputTransform::final_norm_applied;
    else push(out, ErrorCode::ManifestMismatch, where_of(mpath) + "unknown unembed_input_transform " + t);
    if (m->contains("annotations_ref") && (*m)["annotations_ref"].is_string())
      annotations_ref = (*m)["annotations_ref"].get<std::string>();

    auto sf = parse_sections(dir / "unembed.bin", *m, out);
    pack.unembed = Matrix(pack.vocab_size, pack.hidden_dim);
    auto it = sf.sections.find("unembed");
    if (it == sf.sections.end() ||
        it->second.shape != std::vector<std::size_t>{pack.vocab_size, pack.hidden_dim} ||
        !sf.load(pack.vocab_size * pack.hidden_dim, "unembed", pack.unembed.data)) {
      if (!sf.bytes.empty())
        push(out, ErrorCode::ManifestMismatch, where_of(dir / "unembed.bin") + "unembed section missing or mis-shaped");
      pack.unembed = Matrix();
    }
  } catch (const nlohmann::json::exception& e) {
    push(out, ErrorCode::ParseFailure, where_of(mpath) + e.what());
    return std::nullopt;
  }

  const auto vpath = dir / "vocab.tsv";
  auto vocab = read_file(vpath);
  if (!vocab) {
    push(out, ErrorCode::IoFailure, where_of(vpath) + "cannot read vocabulary");
    return pack;
  }
  pack.vocab.assign(pack.vocab_size, std::string());
  std::vector<char> seen(pack.vocab_size, 0);
  std::istringstream lines(*vocab);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    long long id = -1;
    std::optional<std::string> surface;
    if (tab != std::string::npos) {
      try {
        std::size_t used = 0;
        id = std::stoll(line.substr(0, tab), &used);
        if (used != tab) id = -1;
      } catch (const std::exception&) {
        id = -1;
      }
      surface = unescape_tsv(line.substr(tab + 1));
    }
    if (id < 0 || !surface) {
      push(out, ErrorCode::ParseFailure, where_of(vpath) + "malformed line " + std::to_string(lineno));
      continue;
    }
    if (static_cast<std::size_t>(id) >= pack.vocab_size || seen[static_cast<std::size_t>(id)]) {
      push(out, ErrorCode::InvariantViolation,
           where_of(vpath) + "token_id " + std::to_string(id) + " out of range or repeated");
      continue;
    }
    seen[static_cast<std::size_t>(id)] = 1;
    pack.vocab[static_cast<std::size_t>(id)] = std::move(*surface);
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    push(out, ErrorCode::InvariantViolation, where_of(vpath) + "token_ids are not exactly 0..|V|-1");
  return pack;
}

inline std::optional<SampleTrace> load_sample(const fs::path& dir, const ModelPack& pack, std::vector<Issue>& out) {
  const auto mpath = dir / "manifest.json";
  auto m = read_manifest(mpath, out);
  if (!m || !check_header(*m, kSampleMagic, where_of(mpath), out)) return std::nullopt;
  SampleTrace s;
  try {
    s.sample_id = m->at("sample_id").get<std::string>();
    s.image_id = m->at("image_id").get<std::string>();
    const auto grid = m->at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2) throw Error(ErrorCode::ParseFailure, "grid must have two entries");
    s.grid = {grid[0], grid[1]};
    s.n_visual = m->at("n_visual").get<std::size_t>();
    s.n_generated = m->at("n_generated").get<std::size_t>();
    if (m->at("hidden_dim").get<std::size_t>() != pack.hidden_dim)
      push(out, ErrorCode::ManifestMismatch, where_of(mpath) + "hidden_dim differs from pack");
    s.exported_layers = m->at("exported_layers").get<std::vector<int>>();
    s.var_layers = m->at("var_layers").get<std::vector<int>>();
    s.generated_text = m->at("generated_text").get<std::string>();
    for (const auto& t : m->at("gen_tokens")) {
      GenToken g;
      g.token_id = t.at("token_id").get<std::int64_t>();
      g.logprob = t.at("logprob").get<double>();
      g.entropy = t.at("entropy").get<double>();
      const auto span = t.at("char_span").get<std::vector<std::size_t>>();
      if (span.size() != 2) throw Error(ErrorCode::ParseFailure, "char_span must have two entries");
      g.span = {span[0], span[1]};
      s.gen_tokens.push_back(g);
    }
    if (dir.filename().string() != s.sample_id)
      push(out, ErrorCode::ManifestMismatch, where_of(mpath) + "directory name differs from sample_id");

    const auto bin = dir / "tensors.bin";
    auto sf = parse_sections(bin, *m, out);
    if (sf.bytes.empty()) return s;
    const std::size_t N = s.n_visual, M = s.n_generated, d = pack.hidden_dim;
    std::set<std::string> expected;
    auto want = [&](const std::string& name, std::vector<std::size_t> shape, auto& dst) {
      expected.insert(name);
      auto it = sf.sections.find(name);
      if (it == sf.sections.end()) {
        push(out, ErrorCode::ManifestMismatch, where_of(bin) + "section " + name + " missing or unreadable");
        return;
      }
      if (it->second.shape != shape) {
        push(out, ErrorCode::ManifestMismatch, where_of(bin) + "section " + name + " shape disagrees with N, M, d");
        return;
      }
      std::size_t count = 1;
      for (auto dim : shape) count *= dim;
      sf.load(count, name, dst);
    };
    for (int l : s.exported_layers) {
      Matrix vh(N, d), gh(M, d);
      std::vector<float> pl;
      want(layer_section("visual_hidden", l), {N, d}, vh.data);
      want(layer_section("prompt_last_hidden", l), {d}, pl);
      want(layer_section("gen_hidden", l), {M, d}, gh.data);
      if (vh.data.size() == N * d) s.visual_hidden.emplace(l, std::move(vh));
      if (pl.size() == d) s.prompt_last_hidden.emplace(l, std::move(pl));
      if (gh.data.size() == M * d) s.gen_hidden.emplace(l, std::move(gh));
    }
    for (int l : s.var_layers) {
      std::vector<float> v;
      want(layer_section("var", l), {M}, v);
      if (v.size() == M) s.var.emplace(l, std::move(v));
    }
    for (const auto& [name, entry] : sf.sections)
      if (!expected.count(name)) push(out, ErrorCode::ManifestMismatch, where_of(bin) + "unexpected section " + name);
  } catch (const nlohmann::json::exception& e) {
    push(out, ErrorCode::ParseFailure, where_of(mpath) + e.what());
    return std::nullopt;
  } catch (const Error& e) {
    push(out, e.code(), where_of(mpath) + e.detail());
    return std::nullopt;
  }
  return s;
}

inline TraceBundle load_bundle(const fs::path& src, std::vector<Issue>& out) {
  std::error_code ec;
  if (!fs::is_directory(src, ec)) throw Error(ErrorCode::IoFailure, src.string() + " is not a readable directory");
  TraceBundle b;
  auto pack = load_pack(src / "pack", out, b.annotations_ref);
  if (!pack) return b;
  b.pack = std::move(*pack);
  for (auto& issue : check_pack(b.pack)) out.push_back(std::move(issue));

  const auto samples_dir = src / "samples";
  std::vector<fs::path> dirs;
  if (fs::is_directory(samples_dir, ec)) {
    for (const auto& entry : fs::directory_iterator(samples_dir))
      if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const std::size_t before = out.size();
    auto s = load_sample(dir, b.pack, out);
    if (!s) continue;
    if (out.size() == before)
      for (auto& issue : check_sample(*s, b.pack)) out.push_back(std::move(issue));
    b.samples.push_back(std::move(*s));
  }
  return b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public container API
// ---------------------------------------------------------------------------

/// Writes `bundle` under `dest`. Existing `pack/` and `samples/` subtrees of
/// `dest` are replaced; nothing else in `dest` is touched.
inline void write_bundle(const TraceBundle& bundle, const std::filesystem::path& dest) {
  namespace fs = std::filesystem;
  using nlohmann::json;
  auto issues = check_bundle(bundle);
  if (!issues.empty()) {
    std::string msg = issues.front().message;
    if (issues.size() > 1) msg += " (+" + std::to_string(issues.size() - 1) + " more)";
    throw Error(ErrorCode::InvariantViolation, msg);
  }

  std::error_code ec;
  fs::create_directories(dest, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dest.string() + ": " + ec.message());
  fs::remove_all(dest / "pack", ec);
  fs::remove_all(dest / "samples", ec);
  fs::create_directories(dest / "pack", ec);
  fs::create_directories(dest / "samples", ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create bundle directories under " + dest.string());

  const auto& pack = bundle.pack;
  {
    detail::SectionWriter w;
    w.add("unembed", {pack.vocab_size, pack.hidden_dim}, pack.unembed.data);
    json m = {{"magic", kPackMagic},
              {"format_version", kFormatVersion},
              {"model_id", pack.model_id},
              {"hidden_dim", pack.hidden_dim},
              {"vocab_size", pack.vocab_size},
              {"layer_count", pack.layer_count},
              {"layer_convention", "post_block_1_based"},
              {"unembed_input_transform", to_string(pack.unembed_input_transform)},
              {"tensors_file", "unembed.bin"},
              {"file_size", w.bytes.size()},
              {"sections", w.table}};
    if (bundle.annotations_ref) m["annotations_ref"] = *bundle.annotations_ref;
    detail::write_file(dest / "pack" / "manifest.json", m.dump(2) + "\n");
    detail::write_file(dest / "pack" / "unembed.bin", w.bytes);
    std::string tsv;
    for (std::size_t i = 0; i < pack.vocab.size(); ++i)
      tsv += std::to_string(i) + "\t" + detail::escape_tsv(pack.vocab[i]) + "\n";
    detail::write_file(dest / "pack" / "vocab.tsv", tsv);
  }

  for (const auto& s : bundle.samples) {
    const std::size_t N = s.n_visual, M = s.n_generated, d = pack.hidden_dim;
    detail::SectionWriter w;
    for (int l : s.exported_layers) {
      w.add(detail::layer_section("visual_hidden", l), {N, d}, s.visual_hidden.at(l).data);
      w.add(detail::layer_section("prompt_last_hidden", l), {d}, s.prompt_last_hidden.at(l));
      w.add(detail::layer_section("gen_hidden", l), {M, d}, s.gen_hidden.at(l).data);
    }
    for (int l : s.var_layers) w.add(detail::layer_section("var", l), {M}, s.var.at(l));
    json tokens = json::array();
    for (const auto& t : s.gen_tokens)
      tokens.push_back({{"token_id", t.token_id},
                        {"logprob", t.logprob},
                        {"entropy", t.entropy},
                        {"char_span", {t.span.start, t.span.end}}});
    json m = {{"magic", kSampleMagic},
              {"format_version", kFormatVersion},
              {"sample_id", s.sample_id},
              {"image_id", s.image_id},
              {"grid", {s.grid.rows, s.grid.cols}},
              {"n_visual", N},
              {"n_generated", M},
              {"hidden_dim", d},
              {"exported_layers", s.exported_layers},
              {"var_layers", s.var_layers},
              {"generated_text", s.generated_text},
              {"gen_tokens", tokens},
              {"tensors_file", "tensors.bin"},
              {"file_size", w.bytes.size()},
              {"sections", w.table}};
    const auto dir = dest / "samples" / s.sample_id;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string());
    detail::write_file(dir / "manifest.json", m.dump(2) + "\n");
    detail::write_file(dir / "tensors.bin", w.bytes);
  }
}

/// Reads a bundle, throwing the first problem found. Samples are returned in
/// ascending sample_id order.
inline TraceBundle read_bundle(const std::filesystem::path& src) {
  std::vector<Issue> issues;
  auto b = detail::load_bundle(src, issues);
  if (!issues.empty()) throw Error(issues.front().code, issues.front().message);
  return b;
}

/// Reports every violation found under `src`; throws only when `src` itself
/// cannot be read.
inline ValidationReport validate_bundle(const std::filesystem::path& src) {
  ValidationReport report;
  detail::load_bundle(src, report.issues);
  return report;
}

}  // namespace glsim
