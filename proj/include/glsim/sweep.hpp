#pragma once

// Ablation grids: AUROC of one scoring method while a single axis of the
// scoring configuration is varied. Each cell is an independent batch run.

#include <algorithm>
#include <cmath>
#include <iosfwd>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metrics.hpp"
#include "scoring.hpp"

namespace glsim {

struct SweepAxis {
  enum class Kind { k, w, layers };
  Kind kind = Kind::w;
  std::vector<std::size_t> ks;
  std::vector<double> ws;
  std::vector<int> image_layers;  // rows of a layer grid
  std::vector<int> text_layers;   // columns of a layer grid
};

struct SweepGrid {
  SweepAxis axis;
  Method method = Method::glsim;
  std::vector<std::vector<double>> cells;  // rows x cols, NaN on failure
  std::vector<std::string> failures;
};

namespace detail {

inline std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  const auto colon = std::count(text.begin(), text.end(), ':');
  try {
    if (colon == 2) {
      std::istringstream ss(text);
      std::string a, b, c;
      std::getline(ss, a, ':');
      std::getline(ss, b, ':');
      std::getline(ss, c, ':');
      const double lo = std::stod(a), hi = std::stod(b), step = std::stod(c);
      if (!(step > 0.0) || hi < lo) throw Error(ErrorCode::Usage, "bad range '" + text + "'");
      const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
      for (std::size_t i = 0; i <= n; ++i) out.push_back(lo + step * static_cast<double>(i));
    } else if (colon == 0) {
      std::istringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    } else {
      throw Error(ErrorCode::Usage, "bad axis values '" + text + "'");
    }
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::Usage, "bad axis values '" + text + "'");
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::Usage, "bad axis values '" + text + "'");
  }
  if (out.empty()) throw Error(ErrorCode::Usage, "empty axis '" + text + "'");
  return out;
}

inline std::vector<int> to_ints(const std::vector<double>& v, const std::string& what) {
  std::vector<int> out;
  for (double x : v) {
    if (x != std::floor(x)) throw Error(ErrorCode::Usage, what + " values must be integers");
    out.push_back(static_cast<int>(x));
  }
  return out;
}

inline std::string csv_number(double x) { return std::isnan(x) ? "nan" : nlohmann::json(x).dump(); }

}  // namespace detail

/// "w=0:1:0.1", "w=0,0.5,1", "k=1,4,16,32", "k=4:32:4", "layers=30,31,32/27:31"
inline SweepAxis parse_sweep_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::Usage, "axis must look like name=values");
  const std::string name = spec.substr(0, eq), values = spec.substr(eq + 1);
  SweepAxis axis;
  if (name == "w") {
    axis.kind = SweepAxis::Kind::w;
    axis.ws = detail::parse_number_list(values);
    for (double w : axis.ws)
      if (w < 0.0 || w > 1.0) throw Error(ErrorCode::Usage, "w values must lie in [0, 1]");
  } else if (name == "k") {
    axis.kind = SweepAxis::Kind::k;
    for (int k : detail::to_ints(detail::parse_number_list(values), "k")) {
      if (k < 1) throw Error(ErrorCode::Usage, "k values must be positive");
      axis.ks.push_back(static_cast<std::size_t>(k));
    }
  } else if (name == "layers") {
    const auto slash = values.find('/');
    if (slash == std::string::npos) throw Error(ErrorCode::Usage, "layers axis needs image/text layer lists");
    axis.kind = SweepAxis::Kind::layers;
    axis.image_layers = detail::to_ints(detail::parse_number_list(values.substr(0, slash)), "layer");
    axis.text_layers = detail::to_ints(detail::parse_number_list(values.substr(slash + 1)), "layer");
  } else {
    throw Error(ErrorCode::Usage, "unknown sweep axis '" + name + "' (expected w, k or layers)");
  }
  return axis;
}

/// AUROC of `method` over labeled mentions for one configuration; NaN and a
/// log entry when any record fails or a class is missing.
inline double sweep_cell(const TraceBundle& bundle, const std::vector<ObjectMention>& mentions,
                         const ScoringConfig& cfg, Method method, std::vector<std::string>& failures,
                         const std::string& label) {
  const auto batch = score_all(bundle, mentions, cfg, {method});
  if (!batch.failures.empty()) {
    failures.push_back(label + ": " + batch.failures.front().message + " (" +
                       std::to_string(batch.failures.size()) + " failed records)");
    return std::numeric_limits<double>::quiet_NaN();
  }
  try {
    return auroc(labeled_scores(batch.records));
  } catch (const Error& e) {
    failures.push_back(label + ": " + e.what());
    return std::numeric_limits<double>::quiet_NaN();
  }
}

inline SweepGrid sweep(const TraceBundle& bundle, const std::vector<ObjectMention>& mentions,
                       const ScoringConfig& base, const SweepAxis& axis, Method method = Method::glsim) {
  SweepGrid grid;
  grid.axis = axis;
  grid.method = method;
  switch (axis.kind) {
    case SweepAxis::Kind::w:
      for (double w : axis.ws) {
        ScoringConfig cfg = base;
        cfg.w = w;
        grid.cells.push_back({sweep_cell(bundle, mentions, cfg, method, grid.failures, "w=" + detail::csv_number(w))});
      }
      break;
    case SweepAxis::Kind::k:
      for (auto k : axis.ks) {
        ScoringConfig cfg = base;
        cfg.k = k;
        grid.cells.push_back({sweep_cell(bundle, mentions, cfg, method, grid.failures, "k=" + std::to_string(k))});
      }
      break;
    case SweepAxis::Kind::layers:
      for (int l : axis.image_layers) {
        std::vector<double> row;
        for (int lt : axis.text_layers) {
          ScoringConfig cfg = base;
          cfg.image_layer = l;
          cfg.text_layer = lt;
          row.push_back(sweep_cell(bundle, mentions, cfg, method, grid.failures,
                                   "layers=" + std::to_string(l) + "," + std::to_string(lt)));
        }
        grid.cells.push_back(std::move(row));
      }
      break;
  }
  return grid;
}

/// 1-D axes: one row per axis value. Layer grids: header row of text
/// layers, header column of image layers.
inline void write_sweep_csv(std::ostream& os, const SweepGrid& g) {
  switch (g.axis.kind) {
    case SweepAxis::Kind::w:
      os << "w,auroc\n";
      for (std::size_t i = 0; i < g.axis.ws.size(); ++i)
        os << detail::csv_number(g.axis.ws[i]) << ',' << detail::csv_number(g.cells[i][0]) << '\n';
      break;
    case SweepAxis::Kind::k:
      os << "k,auroc\n";
      for (std::size_t i = 0; i < g.axis.ks.size(); ++i)
        os << g.axis.ks[i] << ',' << detail::csv_number(g.cells[i][0]) << '\n';
      break;
    case SweepAxis::Kind::layers:
      os << "image_layer\\text_layer";
      for (int lt : g.axis.text_layers) os << ',' << lt;
      os << '\n';
      for (std::size_t r = 0; r < g.axis.image_layers.size(); ++r) {
        os << g.axis.image_layers[r];
        for (double v : g.cells[r]) os << ',' << detail::csv_number(v);
        os << '\n';
      }
      break;
  }
}

}  // namespace glsim
