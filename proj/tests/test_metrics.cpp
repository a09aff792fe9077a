#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <glsim/metrics.hpp>
#include <glsim/sweep.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace glsim;

namespace {

LabeledScores make(std::vector<double> s, std::vector<int> y) { return {std::move(s), std::move(y)}; }

/// Scores drawn from a small grid so ties are common, with both classes present.
LabeledScores random_scores(std::mt19937_64& rng, std::size_t n, int levels = 0) {
  LabeledScores ls;
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = i < 2 ? static_cast<int>(i) : static_cast<int>(rng() % 2);
    double s = g(rng) + 0.8 * y;
    if (levels > 0) s = std::round(s * levels) / levels;
    ls.add(s, y);
  }
  return ls;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Usage;  // sentinel: nothing thrown
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(make({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})), 1.0);
  EXPECT_EQ(auroc(make({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1})), 0.0);
  EXPECT_EQ(auroc(make({0.5, 0.5, 0.5}, {1, 0, 1})), 0.5);
  EXPECT_EQ(auroc(make({0.3, 0.3, 0.1, 0.9}, {1, 0, 0, 1})), 0.875);
}

TEST(Auroc, SingleClass) {
  EXPECT_EQ(code_of([] { auroc(make({0.1, 0.2}, {1, 1})); }), ErrorCode::SingleClass);
  EXPECT_EQ(code_of([] { aupr(make({0.1, 0.2}, {0, 0})); }), ErrorCode::SingleClass);
  EXPECT_EQ(code_of([] { auroc(make({}, {})); }), ErrorCode::SingleClass);
  EXPECT_EQ(code_of([] { auroc(make({NAN, 0.2}, {0, 1})); }), ErrorCode::InvariantViolation);
}

TEST(Auroc, MatchesPairwiseOracleWithTies) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ls = random_scores(rng, 50, trial % 2 ? 3 : 0);
    EXPECT_NEAR(auroc(ls), oracles::auroc_pairwise(ls.scores, ls.labels), 1e-12);
  }
  for (std::size_t n : {2u, 7u, 120u, 500u}) {
    const auto ls = random_scores(rng, n, 4);
    EXPECT_NEAR(auroc(ls), oracles::auroc_pairwise(ls.scores, ls.labels), 1e-12);
  }
}

TEST(Auroc, MonotoneTransformInvariance) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto ls = random_scores(rng, 40, trial % 3 ? 0 : 5);
    const double base = auroc(ls);
    auto t1 = ls, t2 = ls;
    for (auto& s : t1.scores) s = std::exp(s);
    for (auto& s : t2.scores) s = 3.0 * s + 1.0;
    EXPECT_NEAR(auroc(t1), base, 1e-12);
    EXPECT_NEAR(auroc(t2), base, 1e-12);
  }
}

TEST(Auroc, NegationComplements) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto ls = random_scores(rng, 30);
    auto neg = ls;
    for (auto& s : neg.scores) s = -s;
    EXPECT_NEAR(auroc(ls) + auroc(neg), 1.0, 1e-12);
  }
}

TEST(Aupr, Examples) {
  EXPECT_EQ(aupr(make({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})), 1.0);
  EXPECT_DOUBLE_EQ(aupr(make({0.4, 0.4, 0.4, 0.4, 0.4}, {1, 0, 0, 1, 0})), 0.4);
  // ranks: 1 (+), 0 (-), 1 (+): AP = (1/1 + 2/3) / 2
  EXPECT_DOUBLE_EQ(aupr(make({0.9, 0.5, 0.1}, {1, 0, 1})), (1.0 + 2.0 / 3.0) / 2.0);
}

TEST(Aupr, MatchesEnumerationOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 60; ++trial) {
    const auto ls = random_scores(rng, 2 + rng() % 300, trial % 2 ? 4 : 0);
    EXPECT_NEAR(aupr(ls), oracles::aupr_enumerate(ls.scores, ls.labels), 1e-12);
  }
}

TEST(Detect, BoundaryAndSurrogates) {
  const std::vector<double> s{0.2, 0.5, 0.9};
  EXPECT_EQ(detect(s, 0.5), (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(detect(s, 0.2 - 1.0), (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(detect(s, 0.9 + 1.0), (std::vector<int>{0, 0, 0}));
}

TEST(Detect, MonotoneInTau) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(25);
    for (auto& x : s) x = u(rng);
    double lo = u(rng), hi = u(rng);
    if (lo > hi) std::swap(lo, hi);
    const auto a = detect(s, lo), b = detect(s, hi);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_LE(b[i], a[i]);
  }
}

TEST(CalibrateF1, PerfectSeparation) {
  const auto r = calibrate_threshold_f1(make({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}));
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.tau, 0.5);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.precision_real, 1.0);
  EXPECT_EQ(r.precision_halluc, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(code_of([] { calibrate_threshold_f1(make({0.1, 0.4}, {1, 1})); }), ErrorCode::SingleClass);
}

TEST(CalibrateF1, MatchesExhaustiveScan) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto ls = random_scores(rng, 30, trial % 2 ? 3 : 0);
    const auto best = oracles::f1_scan(ls.scores, ls.labels);
    const auto r = calibrate_threshold_f1(ls);
    EXPECT_EQ(r.tau, best.tau);
    EXPECT_NEAR(r.f1, best.f1, 1e-12);
  }
}

TEST(Histogram, Examples) {
  const auto h = histogram(make({0.0, 1.0}, {1, 0}), 2);
  EXPECT_EQ(h.edges, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(h.count_real, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(h.count_halluc, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(code_of([] { histogram(make({0.3, 0.3}, {1, 0}), 4); }), ErrorCode::DegenerateRange);
  const auto pure = histogram(make({0.1, 0.5, 0.7}, {1, 1, 1}), 3);
  EXPECT_EQ(pure.count_halluc, (std::vector<std::size_t>(3, 0)));
}

TEST(Histogram, ConservesCounts) {
  std::mt19937_64 rng(7);
  for (std::size_t bins : {1u, 2u, 7u, 20u}) {
    const auto ls = random_scores(rng, 333);
    const auto h = histogram(ls, bins);
    std::size_t r = 0, f = 0;
    for (auto c : h.count_real) r += c;
    for (auto c : h.count_halluc) f += c;
    EXPECT_EQ(r, ls.n_real());
    EXPECT_EQ(f, ls.n_halluc());
    EXPECT_EQ(h.edges.size(), bins + 1);
  }
}

TEST(Histogram, CsvLayout) {
  std::ostringstream os;
  write_histogram_csv(os, histogram(make({0.0, 1.0}, {1, 0}), 2));
  EXPECT_EQ(os.str(), "edge_lo,edge_hi,count_real,count_halluc\n0.0,0.5,1,0\n0.5,1.0,0,1\n");
}

TEST(EvaluateRecords, GroupsByMethodAndFingerprint) {
  std::vector<ScoreRecord> rs;
  rs.push_back({"a", "dog", Method::nll, -0.1, "f1", MentionLabel::real});
  rs.push_back({"b", "cat", Method::nll, -2.0, "f1", MentionLabel::hallucinated});
  rs.push_back({"c", "cup", Method::nll, -1.0, "f1", MentionLabel::unlabeled});
  rs.push_back({"a", "dog", Method::glsim, 0.1, "f2", MentionLabel::real});
  const auto report = evaluate_records(rs, true);
  ASSERT_EQ(report["groups"].size(), 2u);
  const auto& g0 = report["groups"][0];
  EXPECT_EQ(g0["method"], "glsim");
  EXPECT_TRUE(g0.contains("error"));
  const auto& g1 = report["groups"][1];
  EXPECT_EQ(g1["method"], "nll");
  EXPECT_EQ(g1["auroc"], 1.0);
  EXPECT_EQ(g1["n_real"], 1);
  EXPECT_EQ(g1["threshold"]["f1"], 1.0);
}

// --- sweeps -------------------------------------------------------------------------

namespace {

struct SweepFixture {
  TraceBundle bundle;
  std::vector<ObjectMention> mentions;
  ScoringConfig cfg;
};

SweepFixture sweep_fixture(std::uint64_t seed) {
  SweepFixture f;
  f.bundle = fixtures::random_bundle(seed, {.n = 9, .d = 12, .v = 40, .layers = {30, 31, 32}}, 6);
  for (const auto& t : f.bundle.samples)
    for (std::size_t j = 0; j < t.n_generated; ++j)
      f.mentions.push_back(fixtures::mention_at(t, j, j % 2 ? MentionLabel::real : MentionLabel::hallucinated));
  f.cfg.image_layer = 32;
  f.cfg.text_layer = 31;
  f.cfg.k = 3;
  return f;
}

double standalone(const SweepFixture& f, const ScoringConfig& cfg, Method method) {
  return auroc(labeled_scores(score_all(f.bundle, f.mentions, cfg, {method}).records));
}

}  // namespace

TEST(Sweep, WEndpoints) {
  const auto f = sweep_fixture(40);
  const auto g = sweep(f.bundle, f.mentions, f.cfg, parse_sweep_axis("w=0,1"));
  EXPECT_EQ(g.cells[0][0], standalone(f, f.cfg, Method::local));
  EXPECT_EQ(g.cells[1][0], standalone(f, f.cfg, Method::global));
}

TEST(Sweep, KEqualsN) {
  const auto f = sweep_fixture(41);
  const auto g = sweep(f.bundle, f.mentions, f.cfg, parse_sweep_axis("k=9"), Method::local);
  // All-patch mean similarity, scored independently of the Top-K path.
  LabeledScores ls;
  for (const auto& m : f.mentions) {
    const auto& t = *f.bundle.find(m.sample_id);
    const auto obj = object_token_embedding(t, m, 31, TokenSelect::first);
    const auto& vh = t.visual_hidden.at(32);
    double mean = 0.0;
    for (std::size_t i = 0; i < vh.rows; ++i) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t c = 0; c < vh.cols; ++c) {
        ab += vh(i, c) * obj[c];
        aa += vh(i, c) * vh(i, c);
        bb += obj[c] * obj[c];
      }
      mean += ab / std::sqrt(aa * bb) / static_cast<double>(vh.rows);
    }
    ls.add(mean, m.label == MentionLabel::real);
  }
  EXPECT_NEAR(g.cells[0][0], auroc(ls), 1e-12);
}

TEST(Sweep, LayerGridCellsEqualStandaloneRuns) {
  const auto f = sweep_fixture(42);
  const auto g = sweep(f.bundle, f.mentions, f.cfg, parse_sweep_axis("layers=30,31,32/30,31,32"));
  ASSERT_EQ(g.cells.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    ASSERT_EQ(g.cells[r].size(), 3u);
    for (std::size_t c = 0; c < 3; ++c) {
      auto cfg = f.cfg;
      cfg.image_layer = 30 + static_cast<int>(r);
      cfg.text_layer = 30 + static_cast<int>(c);
      EXPECT_EQ(g.cells[r][c], standalone(f, cfg, Method::glsim));
    }
  }
  EXPECT_TRUE(g.failures.empty());
}

TEST(Sweep, FailingCellsBecomeNan) {
  const auto f = sweep_fixture(43);
  const auto g = sweep(f.bundle, f.mentions, f.cfg, parse_sweep_axis("k=2,10"));
  EXPECT_FALSE(std::isnan(g.cells[0][0]));
  EXPECT_TRUE(std::isnan(g.cells[1][0]));
  ASSERT_EQ(g.failures.size(), 1u);
  std::ostringstream os;
  write_sweep_csv(os, g);
  EXPECT_NE(os.str().find("10,nan"), std::string::npos);
}

TEST(Sweep, AxisParsing) {
  EXPECT_EQ(parse_sweep_axis("w=0:1:0.25").ws, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(parse_sweep_axis("k=1,4,8").ks, (std::vector<std::size_t>{1, 4, 8}));
  const auto l = parse_sweep_axis("layers=31,32/30");
  EXPECT_EQ(l.image_layers, (std::vector<int>{31, 32}));
  EXPECT_EQ(l.text_layers, (std::vector<int>{30}));
  for (const char* bad : {"w=2", "k=0", "k=1.5", "layers=31", "depth=3", "w"})
    EXPECT_EQ(code_of([&] { parse_sweep_axis(bad); }), ErrorCode::Usage) << bad;
}
