#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include <glsim/metrics.hpp>
#include <glsim/oracle.hpp>
#include <glsim/synth.hpp>

#include "fixtures.hpp"

using namespace glsim;

namespace {

SynthSpec small_spec(std::uint64_t seed, ScenarioMix mix, double sigma) {
  SynthSpec s;
  s.seed = seed;
  s.samples = 60;
  s.mix = mix;
  s.sigma = sigma;
  return s;
}

std::vector<ObjectMention> labeled(const SynthOutput& out) {
  std::vector<ObjectMention> all;
  for (const auto& t : out.bundle.samples)
    for (auto& m : label_mentions(extract_mentions(t, out.lexicon), out.annotations, t.image_id)) all.push_back(m);
  return all;
}

/// Every file under `root` as relative path -> bytes.
std::map<std::string, std::string> tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).generic_string()] = fixtures::slurp(e.path());
  return out;
}

ScoringConfig synth_cfg(std::size_t k = 2) {
  ScoringConfig c;
  c.image_layer = 32;
  c.text_layer = 31;
  c.k = k;
  return c;
}

double method_auroc(const SynthOutput& out, const std::vector<ObjectMention>& ms, Method m, ScoringConfig cfg = synth_cfg()) {
  const auto batch = score_all(out.bundle, ms, cfg, {m});
  EXPECT_TRUE(batch.failures.empty());
  return auroc(labeled_scores(batch.records));
}

}  // namespace

TEST(Synth, SameSeedSameBytes) {
  const auto spec = small_spec(5, {0.4, 0.2, 0.2, 0.2}, 0.5);
  fixtures::TempDir dir;
  write_synth_output(generate(spec), dir / "a");
  write_synth_output(generate(spec), dir / "b");
  const auto a = tree(dir / "a");
  EXPECT_EQ(a.size(), 3u + 2u + 2u * 60u);  // pack, lexicon + annotations, one pair per sample
  EXPECT_EQ(a, tree(dir / "b"));
  auto other = spec;
  other.seed = 6;
  write_synth_output(generate(other), dir / "c");
  EXPECT_NE(a, tree(dir / "c"));
}

TEST(Synth, CounterRngIsAddressable) {
  CounterRng a(42, 3), b(42, 3);
  for (int i = 0; i < 10; ++i) a.next();
  EXPECT_EQ(a.next(), b.at(10));
  EXPECT_NE(CounterRng(42, 4).at(0), b.at(0));
  // splitmix64 finalizer of 0x9E3779B97F4A7C15, the standard first output for seed 0.
  EXPECT_EQ(CounterRng::mix(0x9E3779B97F4A7C15ull), 0xE220A8397B1DCDAFull);
}

TEST(Synth, OutputPassesValidation) {
  const auto out = generate(small_spec(8, {0.25, 0.25, 0.25, 0.25}, 1.0));
  fixtures::TempDir dir;
  write_synth_output(out, dir.path());
  EXPECT_TRUE(validate_bundle(dir.path()).ok());
  const auto back = read_bundle(dir.path());
  EXPECT_EQ(back, out.bundle);
  EXPECT_EQ(load_lexicon(dir / "lexicon.json").size(), out.lexicon.size());
}

TEST(Synth, ScenarioCountsFollowTheMix) {
  auto spec = small_spec(9, {0.35, 0.25, 0.2, 0.2}, 0.0);
  spec.samples = 100;
  const auto out = generate(spec);
  std::array<int, 4> counts{};
  for (auto s : out.scenarios) ++counts[static_cast<std::size_t>(s)];
  EXPECT_EQ(counts, (std::array<int, 4>{35, 25, 20, 20}));
  const auto ms = labeled(out);
  ASSERT_EQ(ms.size(), 100u);
  for (std::size_t i = 0; i < ms.size(); ++i)
    EXPECT_EQ(ms[i].label == MentionLabel::real, out.scenarios[i] == Scenario::clean_real) << i;
}

TEST(Synth, NoiselessCleanMixSeparatesPerfectly) {
  const auto out = generate(small_spec(10, {0.5, 0.5, 0.0, 0.0}, 0.0));
  EXPECT_EQ(method_auroc(out, labeled(out), Method::glsim), 1.0);
}

TEST(Synth, ContextConfoundFoolsGlobalMoreThanLocal) {
  auto spec = small_spec(11, {0.5, 0.0, 0.5, 0.0}, 0.2);
  spec.samples = 200;
  const auto out = generate(spec);
  const auto ms = labeled(out);
  EXPECT_LT(method_auroc(out, ms, Method::global), method_auroc(out, ms, Method::local));
}

TEST(Synth, LookalikeConfoundFoolsLocalMoreThanGlobal) {
  auto spec = small_spec(12, {0.5, 0.0, 0.0, 0.5}, 0.2);
  spec.samples = 200;
  const auto out = generate(spec);
  const auto ms = labeled(out);
  EXPECT_LT(method_auroc(out, ms, Method::local), method_auroc(out, ms, Method::global));
}

TEST(Synth, PlantedPatchOutshinesHallucinatedImages) {
  auto spec = small_spec(13, {0.5, 0.5, 0.0, 0.0}, 0.0);
  spec.samples = 80;
  const auto out = generate(spec);
  const auto ms = labeled(out);
  const std::size_t classes = out.lexicon.size();
  std::vector<double> best_halluc(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const auto& t = out.bundle.samples[i];
      if (out.scenarios[i] != Scenario::clean_halluc || out.annotations.at(t.image_id).count(out.bundle.pack.vocab[c]))
        continue;
      for (double p : visual_logit_lens_probs(t, out.bundle.pack, 32, static_cast<std::int64_t>(c)))
        best_halluc[c] = std::max(best_halluc[c], p);
    }
  int checked = 0;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    if (out.scenarios[i] != Scenario::clean_real) continue;
    const auto probs = visual_logit_lens_probs(out.bundle.samples[i], out.bundle.pack, 32, ms[i].first_token_id);
    EXPECT_GT(*std::max_element(probs.begin(), probs.end()), best_halluc[static_cast<std::size_t>(ms[i].first_token_id)]);
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(Synth, EngineMatchesOracle) {
  const auto out = generate(small_spec(14, {0.25, 0.25, 0.25, 0.25}, 0.7));
  const auto ms = labeled(out);
  auto cfg = synth_cfg(3);
  for (Method method : kAllMethods) {
    const auto engine = score_all(out.bundle, ms, cfg, {method});
    const auto ref = oracle::oracle_scores(out.bundle, ms, cfg, method);
    ASSERT_EQ(engine.records.size(), ref.records.size());
    for (std::size_t i = 0; i < ref.records.size(); ++i) {
      if (method == Method::svar) EXPECT_EQ(engine.records[i].score, ref.records[i].score);
      else EXPECT_NEAR(engine.records[i].score, ref.records[i].score, 1e-6) << to_string(method);
    }
  }
}

TEST(Synth, SpecValidation) {
  auto expect_invalid = [](const char* text) {
    try {
      spec_from_json(nlohmann::json::parse(text));
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::SpecInvalid) << text;
    }
  };
  expect_invalid(R"({"mix": {"clean_real": 0.5, "clean_halluc": 0.4}})");
  expect_invalid(R"({"hidden_dim": 3})");
  expect_invalid(R"({"vocab_size": 7})");
  expect_invalid(R"({"alpha": 0})");
  expect_invalid(R"({"sigma": -1})");
  expect_invalid(R"({"samples": "many"})");
  expect_invalid(R"({"exported_layers": [40]})");
  const auto ok = spec_from_json(nlohmann::json::parse(R"({"seed": 3, "sigma": 0.25})"));
  EXPECT_EQ(ok.seed, 3u);
  EXPECT_EQ(spec_from_json(spec_to_json(ok)).sigma, 0.25);
}

TEST(Synth, CommittedSpecsLoad) {
  for (const char* name : {"clean", "complementarity", "golden"}) {
    const auto path = std::filesystem::path(GLSIM_SOURCE_DIR) / "data" / "specs" / (std::string(name) + ".json");
    EXPECT_NO_THROW(spec_from_json(detail::parse_json_file(path))) << name;
  }
}
