#pragma once

// Self-contained SVG line plots: level curves (accuracy per shift level) and
// training curves (accuracy per iteration).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "oodtest/error.hpp"
#include "oodtest/toylab.hpp"

namespace oodtest {

enum class PlotKind { kLevelCurve, kTrainCurve };

inline const char* to_string(PlotKind k) { return k == PlotKind::kLevelCurve ? "level_curve" : "train_curve"; }

inline PlotKind plot_kind_from_string(std::string_view s) {
  if (s == "level_curve") return PlotKind::kLevelCurve;
  if (s == "train_curve") return PlotKind::kTrainCurve;
  fail("unknown plot kind '" + std::string(s) + "'");
}

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  PlotKind kind = PlotKind::kLevelCurve;
  std::string title;
  std::string x_label;
  std::string y_label = "accuracy";
  std::vector<PlotSeries> series;
  std::vector<std::string> x_ticks;  // level names for level curves, placed at x = 1, 2, ...
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_text(double v) {
  char buf[64];
  if (std::abs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", v);
  }
  return buf;
}

}  // namespace detail

inline std::string render_svg(const PlotSpec& spec) {
  if (spec.series.empty()) fail("plot: no series");
  double x_lo = INFINITY, x_hi = -INFINITY, y_lo = 0.0, y_hi = 1.0;
  for (const auto& s : spec.series) {
    if (s.x.empty()) fail("plot: series '" + s.name + "' is empty");
    if (s.x.size() != s.y.size()) fail("plot: series '" + s.name + "' has mismatched x and y lengths");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) fail("plot: series '" + s.name + "' has a non-finite point");
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
    }
  }
  if (x_hi == x_lo) {
    x_lo -= 0.5;
    x_hi += 0.5;
  }

  constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
  const double pw = kWidth - kLeft - kRight;
  const double ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph; };
  static const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  using detail::fixed2;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" data-kind=\"" << to_string(spec.kind) << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty()) {
    o << "<text x=\"" << fixed2(kLeft + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
      << detail::svg_escape(spec.title) << "</text>\n";
  }
  o << "<g stroke=\"black\" fill=\"none\">\n"
    << "<line x1=\"" << fixed2(kLeft) << "\" y1=\"" << fixed2(kTop + ph) << "\" x2=\"" << fixed2(kLeft + pw)
    << "\" y2=\"" << fixed2(kTop + ph) << "\"/>\n"
    << "<line x1=\"" << fixed2(kLeft) << "\" y1=\"" << fixed2(kTop) << "\" x2=\"" << fixed2(kLeft) << "\" y2=\""
    << fixed2(kTop + ph) << "\"/>\n</g>\n";

  o << "<g font-size=\"11\" text-anchor=\"end\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = y_lo + (y_hi - y_lo) * i / 5.0;
    o << "<text x=\"" << fixed2(kLeft - 6) << "\" y=\"" << fixed2(py(v) + 4) << "\">" << detail::tick_text(v)
      << "</text>\n";
  }
  o << "</g>\n<g font-size=\"11\" text-anchor=\"middle\">\n";
  if (spec.kind == PlotKind::kLevelCurve && !spec.x_ticks.empty()) {
    for (std::size_t i = 0; i < spec.x_ticks.size(); ++i) {
      o << "<text x=\"" << fixed2(px(static_cast<double>(i + 1))) << "\" y=\"" << fixed2(kTop + ph + 18) << "\">"
        << detail::svg_escape(spec.x_ticks[i]) << "</text>\n";
    }
  } else {
    for (int i = 0; i <= 5; ++i) {
      const double v = x_lo + (x_hi - x_lo) * i / 5.0;
      o << "<text x=\"" << fixed2(px(v)) << "\" y=\"" << fixed2(kTop + ph + 18) << "\">" << detail::tick_text(v)
        << "</text>\n";
    }
  }
  o << "</g>\n";
  o << "<text x=\"" << fixed2(kLeft + pw / 2) << "\" y=\"" << fixed2(kHeight - 16)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << detail::svg_escape(spec.x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << fixed2(kTop + ph / 2) << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
    << fixed2(kTop + ph / 2) << ")\">" << detail::svg_escape(spec.y_label) << "</text>\n";

  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const auto& s = spec.series[k];
    const char* color = kColors[k % std::size(kColors)];
    o << "<polyline class=\"series\" data-name=\"" << detail::svg_escape(s.name) << "\" fill=\"none\" stroke=\""
      << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i > 0) o << ' ';
      o << fixed2(px(s.x[i])) << ',' << fixed2(py(s.y[i]));
    }
    o << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    o << "<line x1=\"" << fixed2(kLeft + pw + 12) << "\" y1=\"" << fixed2(ly) << "\" x2=\"" << fixed2(kLeft + pw + 32)
      << "\" y2=\"" << fixed2(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << fixed2(kLeft + pw + 36) << "\" y=\"" << fixed2(ly + 4) << "\" font-size=\"11\">"
      << detail::svg_escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Two curves, ID validation and OOD test accuracy, against iteration.
inline PlotSpec train_curve_spec(const TrainLog& log, std::string title = {}) {
  PlotSpec spec;
  spec.kind = PlotKind::kTrainCurve;
  spec.title = std::move(title);
  spec.x_label = "iteration";
  PlotSeries id{"ID validation", {}, {}};
  PlotSeries ood{"OOD test", {}, {}};
  for (const auto& r : log.records) {
    id.x.push_back(static_cast<double>(r.iteration));
    id.y.push_back(r.id_val_acc);
    ood.x.push_back(static_cast<double>(r.iteration));
    ood.y.push_back(r.ood_test_acc);
  }
  spec.series = {std::move(id), std::move(ood)};
  return spec;
}

/// Reads the delimited train log written by write_train_log. Loss is not kept.
inline TrainLog read_train_log(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "iteration,loss,id_val_acc,ood_test_acc") {
    fail("train log: missing or unexpected header");
  }
  TrainLog log;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) fail("train log line " + std::to_string(lineno) + ": expected 4 columns");
    try {
      TrainRecord r;
      r.iteration = std::stoull(cells[0]);
      r.loss = std::stod(cells[1]);
      r.id_val_acc = std::stod(cells[2]);
      r.ood_test_acc = std::stod(cells[3]);
      log.records.push_back(r);
    } catch (const std::logic_error&) {
      fail("train log line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return log;
}

}  // namespace oodtest
