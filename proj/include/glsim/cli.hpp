#pragma once

// Command-line front end. Exit codes: 0 success, 1 validation findings,
// 2 usage error, 3 runtime error. Diagnostics go to the error stream;
// artifacts only to the declared output paths.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "error.hpp"
#include "lexicon.hpp"
#include "metrics.hpp"
#include "presets.hpp"
#include "scoring.hpp"
#include "sweep.hpp"
#include "synth.hpp"
#include "trace.hpp"

namespace glsim::cli {

enum ExitCode : int { kOk = 0, kFindings = 1, kUsage = 2, kRuntime = 3 };

inline constexpr const char* kBundleEnv = "GLSIM_BUNDLE";

namespace detail {

namespace fs = std::filesystem;

struct ConfigFlags {
  std::vector<int> layers;
  std::optional<std::size_t> k;
  std::optional<double> w;
  std::string distance = "cosine";
  std::string anchor = "last_instruction_token";
  std::string aggregation = "mean";
  std::string token_select = "first";
  std::vector<int> svar_layers;
  bool ic_raw_logits = false;
  std::optional<int> similarity_layer;
};

inline void add_config_options(CLI::App* app, ConfigFlags& f) {
  app->add_option("--layers", f.layers, "image layer l and text layer l' (e.g. 32,31)")->delimiter(',')->expected(2);
  app->add_option("--k", f.k, "number of grounded patches K");
  app->add_option("--w", f.w, "global weight w in [0,1]");
  app->add_option("--distance", f.distance, "cosine | l2");
  app->add_option("--anchor", f.anchor, "last_instruction_token | last_image_token | mean_image_tokens");
  app->add_option("--aggregation", f.aggregation, "mean | probability_weighted_mean");
  app->add_option("--token-select", f.token_select, "first | last | mean");
  app->add_option("--svar-layers", f.svar_layers, "inclusive SVAR layer range lo,hi")->delimiter(',')->expected(2);
  app->add_flag("--ic-raw-logits", f.ic_raw_logits, "Internal Confidence over raw logits");
  app->add_option("--similarity-layer", f.similarity_layer, "experimental: patch layer for local similarity");
}

inline bool needs_layers(Method m) {
  return m == Method::glsim || m == Method::global || m == Method::local || m == Method::contextual_lens;
}

/// Preset defaults for known model ids, then explicit flags on top. Unknown
/// models must supply every hyperparameter the chosen methods use.
inline ScoringConfig build_config(const ConfigFlags& f, const ModelPack& pack, const std::vector<Method>& methods,
                                  std::ostream& err) {
  ScoringConfig cfg;
  const auto preset = find_preset(pack.model_id);
  if (preset) {
    cfg = apply_preset(cfg, *preset);
  } else {
    bool layers = false, k = false, w = false;
    for (auto m : methods) {
      layers = layers || needs_layers(m);
      k = k || m == Method::glsim || m == Method::local;
      w = w || m == Method::glsim;
    }
    std::string missing;
    if (layers && f.layers.empty()) missing += " --layers";
    if (k && !f.k) missing += " --k";
    if (w && !f.w) missing += " --w";
    if (!missing.empty())
      throw Error(ErrorCode::Usage, "model '" + pack.model_id + "' has no preset; pass" + missing);
  }
  if (!f.layers.empty()) {
    cfg.image_layer = f.layers[0];
    cfg.text_layer = f.layers[1];
  }
  if (f.k) cfg.k = *f.k;
  if (f.w) cfg.w = *f.w;
  if (!(cfg.w >= 0.0 && cfg.w <= 1.0)) throw Error(ErrorCode::Usage, "--w must lie in [0, 1]");
  cfg.distance = parse_distance(f.distance);
  cfg.global_anchor = parse_anchor(f.anchor);
  cfg.local_aggregation = parse_aggregation(f.aggregation);
  cfg.token_select = parse_token_select(f.token_select);
  if (!f.svar_layers.empty()) {
    cfg.svar_lo = f.svar_layers[0];
    cfg.svar_hi = f.svar_layers[1];
  }
  cfg.ic_raw_logits = f.ic_raw_logits;
  cfg.similarity_layer = f.similarity_layer;
  if (preset) err << "using " << preset->name << " preset for model '" << pack.model_id << "'\n";
  return cfg;
}

inline std::vector<Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.assign(kAllMethods.begin(), kAllMethods.end());
      continue;
    }
    out.push_back(parse_method(n));
  }
  if (out.empty()) out.push_back(Method::glsim);
  return out;
}

inline std::string resolve_bundle(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv(kBundleEnv); env && *env) return env;
  throw Error(ErrorCode::Usage, std::string("no bundle given and ") + kBundleEnv + " is not set");
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path + " for writing");
  return f;
}

inline std::vector<ObjectMention> read_mentions_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot read " + path);
  return read_mentions_jsonl(f);
}

inline std::string num(double x) { return nlohmann::json(x).dump(); }

// --- subcommands -----------------------------------------------------------

inline int cmd_validate(const std::string& bundle_arg, const std::string& out, std::ostream& err) {
  const auto report = validate_bundle(resolve_bundle(bundle_arg));
  for (const auto& issue : report.issues) err << to_string(issue.code) << ": " << issue.message << '\n';
  if (!out.empty()) {
    auto j = nlohmann::json::array();
    for (const auto& issue : report.issues) j.push_back({{"code", to_string(issue.code)}, {"message", issue.message}});
    open_output(out) << nlohmann::json{{"valid", report.ok()}, {"issues", j}}.dump(2) << '\n';
  }
  return report.ok() ? kOk : kFindings;
}

inline int cmd_extract(const std::string& bundle_arg, const std::string& lexicon, const std::string& annotations,
                       const std::string& out, std::ostream&) {
  const auto bundle = read_bundle(resolve_bundle(bundle_arg));
  const auto lex = load_lexicon(lexicon);
  std::optional<AnnotationSet> ann;
  if (!annotations.empty()) ann = load_annotations(annotations, lex);
  std::vector<ObjectMention> all;
  for (const auto& s : bundle.samples) {
    auto ms = extract_mentions(s, lex);
    if (ann) ms = label_mentions(std::move(ms), *ann, s.image_id);
    all.insert(all.end(), ms.begin(), ms.end());
  }
  auto f = open_output(out);
  write_mentions_jsonl(f, all);
  return kOk;
}

inline int cmd_score(const std::string& bundle_arg, const std::string& mentions_path,
                     const std::vector<std::string>& method_names, const ConfigFlags& flags, const std::string& out,
                     std::ostream& err) {
  const auto bundle = read_bundle(resolve_bundle(bundle_arg));
  const auto methods = parse_methods(method_names);
  const auto cfg = build_config(flags, bundle.pack, methods, err);
  const bool grounded = std::any_of(methods.begin(), methods.end(), needs_layers);
  if (grounded)
    for (const auto& s : bundle.samples) validate_config(cfg, s);
  const auto batch = score_all(bundle, read_mentions_file(mentions_path), cfg, methods);
  auto f = open_output(out);
  write_records_jsonl(f, batch.records);
  for (const auto& fail : batch.failures)
    err << "failed " << fail.sample_id << '/' << fail.canonical << '/' << to_string(fail.method) << ": "
        << fail.message << '\n';
  return batch.failures.empty() ? kOk : kRuntime;
}

inline int cmd_evaluate(const std::string& scores_path, const std::string& out, bool calibrate,
                        const std::string& hist_out, const std::string& hist_method, std::size_t bins,
                        std::ostream& err) {
  std::ifstream in(scores_path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + scores_path);
  const auto records = read_records_jsonl(in);
  const auto report = evaluate_records(records, calibrate);
  bool any_ok = false;
  for (const auto& g : report["groups"]) {
    if (g.contains("error")) err << g["method"].get<std::string>() << ": " << g["error"].get<std::string>() << '\n';
    else any_ok = true;
  }
  open_output(out) << report.dump(2) << '\n';
  if (!hist_out.empty()) {
    const Method m = parse_method(hist_method);
    std::vector<ScoreRecord> chosen;
    for (const auto& r : records)
      if (r.method == m) chosen.push_back(r);
    const auto h = histogram(labeled_scores(chosen), bins);
    auto f = open_output(hist_out);
    write_histogram_csv(f, h);
  }
  if (!any_ok) throw Error(ErrorCode::SingleClass, "no evaluable score group in " + scores_path);
  return kOk;
}

inline int cmd_sweep(const std::string& bundle_arg, const std::string& mentions_path, const std::string& axis_spec,
                     const std::string& method_name, const ConfigFlags& flags, const std::string& out,
                     std::ostream& err) {
  const auto bundle = read_bundle(resolve_bundle(bundle_arg));
  const auto axis = parse_sweep_axis(axis_spec);
  const Method method = parse_method(method_name);
  ConfigFlags f = flags;
  // The swept parameter need not be given explicitly.
  if (axis.kind == SweepAxis::Kind::w && !f.w) f.w = axis.ws.front();
  if (axis.kind == SweepAxis::Kind::k && !f.k) f.k = axis.ks.front();
  if (axis.kind == SweepAxis::Kind::layers && f.layers.empty())
    f.layers = {axis.image_layers.front(), axis.text_layers.front()};
  const auto cfg = build_config(f, bundle.pack, {method}, err);
  const auto grid = sweep(bundle, read_mentions_file(mentions_path), cfg, axis, method);
  for (const auto& msg : grid.failures) err << "cell failed: " << msg << '\n';
  auto o = open_output(out);
  write_sweep_csv(o, grid);
  return kOk;
}

inline void write_pgm(const std::string& path, const GroundingHeatmap& h) {
  const auto [lo_it, hi_it] = std::minmax_element(h.probs.begin(), h.probs.end());
  const double lo = *lo_it, hi = *hi_it;
  std::string pixels(h.probs.size(), '\0');
  for (std::size_t i = 0; i < h.probs.size(); ++i) {
    const double v = hi > lo ? (h.probs[i] - lo) / (hi - lo) : 0.0;
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  auto f = open_output(path);
  f << "P5\n" << h.cols << ' ' << h.rows << "\n255\n";
  f.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  open_output(path + ".json") << nlohmann::json{{"min", lo}, {"max", hi}, {"rows", h.rows}, {"cols", h.cols}}.dump(2)
                              << '\n';
}

inline int cmd_ground(const std::string& bundle_arg, const std::string& sample_id, const std::string& object,
                      const std::string& mentions_path, const std::string& lexicon_path, const ConfigFlags& flags,
                      const std::string& out, const std::string& mask_out, const std::string& pgm_out,
                      std::ostream& err) {
  const auto bundle = read_bundle(resolve_bundle(bundle_arg));
  const SampleTrace* trace = bundle.find(sample_id);
  if (!trace) throw Error(ErrorCode::Usage, "no sample '" + sample_id + "' in bundle");
  std::vector<ObjectMention> mentions;
  if (!mentions_path.empty()) mentions = read_mentions_file(mentions_path);
  else if (!lexicon_path.empty()) mentions = extract_mentions(*trace, load_lexicon(lexicon_path));
  else throw Error(ErrorCode::Usage, "ground needs --mentions or --lexicon");
  const std::string wanted = glsim::detail::normalize_surface(object);
  auto it = std::find_if(mentions.begin(), mentions.end(), [&](const ObjectMention& m) {
    return m.sample_id == sample_id && m.canonical == wanted;
  });
  if (it == mentions.end())
    throw Error(ErrorCode::Usage, "object '" + object + "' is not mentioned in sample " + sample_id);

  ConfigFlags f = flags;
  if (!f.w) f.w = 0.5;  // not used for grounding
  const auto cfg = build_config(f, bundle.pack, {Method::local}, err);
  validate_config(cfg, *trace);
  const auto h = grounding_heatmap(*trace, bundle.pack, *it, cfg);
  {
    auto o = open_output(out);
    for (std::size_t r = 0; r < h.rows; ++r) {
      for (std::size_t c = 0; c < h.cols; ++c) o << (c ? "," : "") << num(h.at(r, c));
      o << '\n';
    }
  }
  if (!mask_out.empty()) {
    auto o = open_output(mask_out);
    for (std::size_t r = 0; r < h.rows; ++r) {
      for (std::size_t c = 0; c < h.cols; ++c) o << (c ? "," : "") << (h.mask[r * h.cols + c] ? 1 : 0);
      o << '\n';
    }
  }
  if (!pgm_out.empty()) write_pgm(pgm_out, h);
  return kOk;
}

inline int cmd_synth(const std::string& spec_path, const std::string& out, std::ostream&) {
  const auto spec = spec_from_json(glsim::detail::parse_json_file(spec_path));
  write_synth_output(generate(spec), out);
  return kOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Object hallucination scoring over exported vision-language model traces", "glsim"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "glsim 1.0.0");

  std::string bundle, out, lexicon, annotations, mentions, axis, method = "glsim", sample, object, mask, pgm;
  std::string scores, spec, hist_out, hist_method = "glsim";
  std::size_t bins = 20;
  bool calibrate = false;
  std::vector<std::string> methods;
  ConfigFlags flags;

  auto* validate = app.add_subcommand("validate", "check a trace bundle against every container invariant");
  validate->add_option("bundle", bundle, "bundle directory (default: $GLSIM_BUNDLE)");
  validate->add_option("-o,--output", out, "optional JSON report");

  auto* extract = app.add_subcommand("extract-mentions", "find object mentions in generated captions");
  extract->add_option("bundle", bundle, "bundle directory (default: $GLSIM_BUNDLE)");
  extract->add_option("--lexicon", lexicon, "lexicon JSON")->required();
  extract->add_option("--annotations", annotations, "ground-truth annotation JSON; labels the mentions");
  extract->add_option("-o,--output", out, "mentions JSONL")->required();

  auto* score = app.add_subcommand("score", "score mentions with one or more methods");
  score->add_option("bundle", bundle, "bundle directory (default: $GLSIM_BUNDLE)");
  score->add_option("--mentions", mentions, "mentions JSONL")->required();
  score->add_option("--method", methods, "glsim, global, local, nll, entropy, internal_confidence, svar, "
                                         "contextual_lens or all")
      ->delimiter(',');
  add_config_options(score, flags);
  score->add_option("-o,--output", out, "scores JSONL")->required();

  auto* evaluate = app.add_subcommand("evaluate", "AUROC / AUPR report for a scores file");
  evaluate->add_option("scores", scores, "scores JSONL")->required();
  evaluate->add_option("-o,--output", out, "report JSON")->required();
  evaluate->add_flag("--calibrate-f1", calibrate, "add the F1-maximizing threshold and its metrics");
  evaluate->add_option("--histogram", hist_out, "per-class score histogram CSV");
  evaluate->add_option("--histogram-method", hist_method, "method whose scores are binned");
  evaluate->add_option("--bins", bins, "histogram bin count");

  auto* sweep_cmd = app.add_subcommand("sweep", "AUROC over a grid of K, w or (l, l') values");
  sweep_cmd->add_option("bundle", bundle, "bundle directory (default: $GLSIM_BUNDLE)");
  sweep_cmd->add_option("--mentions", mentions, "labeled mentions JSONL")->required();
  sweep_cmd->add_option("--axis", axis, "w=0:1:0.1 | k=1,4,16 | layers=30,31,32/27:31")->required();
  sweep_cmd->add_option("--method", method, "scoring method");
  add_config_options(sweep_cmd, flags);
  sweep_cmd->add_option("-o,--output", out, "grid CSV")->required();

  auto* ground = app.add_subcommand("ground", "logit-lens grounding heatmap for one object mention");
  ground->add_option("bundle", bundle, "bundle directory (default: $GLSIM_BUNDLE)");
  ground->add_option("--sample", sample, "sample id")->required();
  ground->add_option("--object", object, "canonical object class")->required();
  ground->add_option("--mentions", mentions, "mentions JSONL");
  ground->add_option("--lexicon", lexicon, "lexicon JSON (extract mentions on the fly)");
  add_config_options(ground, flags);
  ground->add_option("-o,--output", out, "heatmap CSV")->required();
  ground->add_option("--mask", mask, "Top-K mask CSV");
  ground->add_option("--pgm", pgm, "8-bit PGM image; bounds go to <pgm>.json");

  auto* synth = app.add_subcommand("synth", "generate a synthetic bundle with planted geometry");
  synth->add_option("spec", spec, "synth spec JSON")->required();
  synth->add_option("-o,--output", out, "output bundle directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream sink_out;
    const int code = app.exit(e, e.get_exit_code() == 0 ? std::cout : sink_out, err);
    if (code == 0) return kOk;
    err << sink_out.str();
    return kUsage;
  }

  try {
    if (*validate) return cmd_validate(bundle, out, err);
    if (*extract) return cmd_extract(bundle, lexicon, annotations, out, err);
    if (*score) return cmd_score(bundle, mentions, methods, flags, out, err);
    if (*evaluate) return cmd_evaluate(scores, out, calibrate, hist_out, hist_method, bins, err);
    if (*sweep_cmd) return cmd_sweep(bundle, mentions, axis, method, flags, out, err);
    if (*ground) return cmd_ground(bundle, sample, object, mentions, lexicon, flags, out, mask, pgm, err);
    if (*synth) return cmd_synth(spec, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::Usage ? kUsage : kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace glsim::cli
