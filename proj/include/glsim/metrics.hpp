#pragma once

// Threshold-free (AUROC, AUPR) and thresholded evaluation of object-level
// scores. Positives are real objects (label 1), negatives hallucinated (0).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iosfwd>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "scoring.hpp"

namespace glsim {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = real, 0 = hallucinated

  void add(double score, int label) {
    scores.push_back(score);
    labels.push_back(label);
  }
  std::size_t size() const { return scores.size(); }
  std::size_t n_real() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
  std::size_t n_halluc() const { return size() - n_real(); }
};

/// Labeled records of one method; unlabeled records are skipped.
inline LabeledScores labeled_scores(const std::vector<ScoreRecord>& records) {
  LabeledScores ls;
  for (const auto& r : records) {
    if (r.label == MentionLabel::unlabeled) continue;
    ls.add(r.score, r.label == MentionLabel::real ? 1 : 0);
  }
  return ls;
}

namespace detail {

inline void require_two_classes(const LabeledScores& ls) {
  if (ls.scores.size() != ls.labels.size())
    throw Error(ErrorCode::InvariantViolation, "scores and labels differ in length");
  for (double s : ls.scores)
    if (!std::isfinite(s)) throw Error(ErrorCode::InvariantViolation, "non-finite score");
  for (int l : ls.labels)
    if (l != 0 && l != 1) throw Error(ErrorCode::InvariantViolation, "labels must be 0 or 1");
  if (ls.n_real() == 0 || ls.n_halluc() == 0)
    throw Error(ErrorCode::SingleClass, "need both real and hallucinated objects (n_real=" +
                                            std::to_string(ls.n_real()) + ", n_halluc=" + std::to_string(ls.n_halluc()) +
                                            ")");
}

inline std::vector<std::size_t> order_by_score(const std::vector<double>& scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace detail

/// Mann-Whitney AUROC with average ranks for ties:
/// P(real > halluc) + 0.5 P(real == halluc).
inline double auroc(const LabeledScores& ls) {
  detail::require_two_classes(ls);
  const auto idx = detail::order_by_score(ls.scores, false);
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    std::size_t pos = 0;
    while (j < idx.size() && ls.scores[idx[j]] == ls.scores[idx[i]]) pos += static_cast<std::size_t>(ls.labels[idx[j++]]);
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    rank_sum += avg_rank * static_cast<double>(pos);
    i = j;
  }
  const double nr = static_cast<double>(ls.n_real());
  const double nh = static_cast<double>(ls.n_halluc());
  return (rank_sum - nr * (nr + 1.0) / 2.0) / (nr * nh);
}

/// Step-wise average precision: sum over descending tie groups of
/// precision-at-group times the recall gained by the group.
inline double aupr(const LabeledScores& ls) {
  detail::require_two_classes(ls);
  const auto idx = detail::order_by_score(ls.scores, true);
  const double nr = static_cast<double>(ls.n_real());
  double tp = 0.0, fp = 0.0, area = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    double gpos = 0.0, gneg = 0.0;
    for (; j < idx.size() && ls.scores[idx[j]] == ls.scores[idx[i]]; ++j) (ls.labels[idx[j]] ? gpos : gneg) += 1.0;
    tp += gpos;
    fp += gneg;
    if (gpos > 0.0) area += (tp / (tp + fp)) * gpos;
    i = j;
  }
  return area / nr;
}

/// 1 (real) iff score >= tau.
inline std::vector<int> detect(const std::vector<double>& scores, double tau) {
  std::vector<int> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(), [tau](double s) { return s >= tau ? 1 : 0; });
  return out;
}

struct ThresholdReport {
  double tau = 0.0;
  double accuracy = 0.0;
  double precision_real = 0.0;
  double precision_halluc = 0.0;
  double recall = 0.0;  // of the real class
  double f1 = 0.0;
};

inline ThresholdReport threshold_report(const LabeledScores& ls, double tau) {
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const bool pred = ls.scores[i] >= tau;
    if (ls.labels[i]) (pred ? tp : fn) += 1;
    else (pred ? fp : tn) += 1;
  }
  ThresholdReport r;
  r.tau = tau;
  r.accuracy = (tp + tn) / static_cast<double>(ls.size());
  r.precision_real = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.precision_halluc = tn + fn > 0 ? tn / (tn + fn) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
  return r;
}

/// Threshold maximizing real-class F1 among midpoints of adjacent distinct
/// scores and the two out-of-range surrogates; ties go to the smallest tau.
inline ThresholdReport calibrate_threshold_f1(const LabeledScores& ls) {
  detail::require_two_classes(ls);
  std::vector<double> distinct = ls.scores;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  std::vector<double> candidates;
  candidates.push_back(distinct.front() - 1.0);
  for (std::size_t i = 0; i + 1 < distinct.size(); ++i) candidates.push_back(0.5 * (distinct[i] + distinct[i + 1]));
  candidates.push_back(distinct.back() + 1.0);

  // Sweep descending scores once: the counts above each candidate are prefix sums.
  const auto idx = detail::order_by_score(ls.scores, true);
  const double nr = static_cast<double>(ls.n_real());
  ThresholdReport best;
  best.f1 = -1.0;
  std::size_t pos = 0;
  double tp = 0, fp = 0;
  for (auto c = candidates.rbegin(); c != candidates.rend(); ++c) {
    while (pos < idx.size() && ls.scores[idx[pos]] >= *c) (ls.labels[idx[pos++]] ? tp : fp) += 1;
    const double fn = nr - tp;
    const double f1 = tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    if (f1 >= best.f1) {  // descending candidates: >= keeps the smallest tau
      best.f1 = f1;
      best.tau = *c;
    }
  }
  return threshold_report(ls, best.tau);
}

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> count_real;
  std::vector<std::size_t> count_halluc;
};

/// Equal-width bins over [min, max] of all scores; the last bin is closed.
inline Histogram histogram(const LabeledScores& ls, std::size_t bins) {
  if (bins < 1) throw Error(ErrorCode::InvariantViolation, "histogram needs at least one bin");
  if (ls.scores.empty()) throw Error(ErrorCode::DegenerateRange, "no scores");
  const auto [lo_it, hi_it] = std::minmax_element(ls.scores.begin(), ls.scores.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error(ErrorCode::DegenerateRange, "all scores equal " + std::to_string(lo));
  Histogram h;
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * static_cast<double>(b));
  h.count_real.assign(bins, 0);
  h.count_halluc.assign(bins, 0);
  for (std::size_t i = 0; i < ls.size(); ++i) {
    auto b = static_cast<std::size_t>((ls.scores[i] - lo) / width);
    b = std::min(b, bins - 1);
    (ls.labels[i] ? h.count_real : h.count_halluc)[b] += 1;
  }
  return h;
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h) {
  os << "edge_lo,edge_hi,count_real,count_halluc\n";
  for (std::size_t b = 0; b < h.count_real.size(); ++b) {
    os << nlohmann::json(h.edges[b]).dump() << ',' << nlohmann::json(h.edges[b + 1]).dump() << ','
       << h.count_real[b] << ',' << h.count_halluc[b] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalGroup {
  Method method = Method::glsim;
  std::string fingerprint;
  LabeledScores scores;
};

/// Groups records by (method, config fingerprint), in method order.
inline std::vector<EvalGroup> group_records(const std::vector<ScoreRecord>& records) {
  std::map<std::pair<Method, std::string>, EvalGroup> groups;
  for (const auto& r : records) {
    auto& g = groups[{r.method, r.fingerprint}];
    g.method = r.method;
    g.fingerprint = r.fingerprint;
    if (r.label != MentionLabel::unlabeled) g.scores.add(r.score, r.label == MentionLabel::real ? 1 : 0);
  }
  std::vector<EvalGroup> out;
  for (auto& [key, g] : groups) out.push_back(std::move(g));
  return out;
}

inline nlohmann::json threshold_to_json(const ThresholdReport& r) {
  return {{"tau", r.tau},
          {"accuracy", r.accuracy},
          {"precision_real", r.precision_real},
          {"precision_halluc", r.precision_halluc},
          {"recall", r.recall},
          {"f1", r.f1}};
}

/// EvalReport JSON. Groups lacking one of the classes carry an "error" entry.
inline nlohmann::json evaluate_records(const std::vector<ScoreRecord>& records, bool calibrate_f1) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : group_records(records)) {
    nlohmann::json j = {{"method", to_string(g.method)},
                        {"fingerprint", g.fingerprint},
                        {"n_real", g.scores.n_real()},
                        {"n_halluc", g.scores.n_halluc()}};
    try {
      j["auroc"] = auroc(g.scores);
      j["aupr"] = aupr(g.scores);
      if (calibrate_f1) j["threshold"] = threshold_to_json(calibrate_threshold_f1(g.scores));
    } catch (const Error& e) {
      j["error"] = e.what();
    }
    groups.push_back(std::move(j));
  }
  return {{"groups", groups}};
}

}  // namespace glsim
