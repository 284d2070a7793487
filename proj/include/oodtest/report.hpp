#pragma once

// Report emission. Delimited output is tab-separated with accuracies as
// fractions in full precision; table output is aligned text with percentages
// rounded to 2 decimals.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "oodtest/bugfinder.hpp"
#include "oodtest/cluster.hpp"
#include "oodtest/error.hpp"
#include "oodtest/eval.hpp"
#include "oodtest/svg_plot.hpp"
#include "oodtest/toylab.hpp"

namespace oodtest {

enum class ReportFormat { kTable, kDelimited };

inline ReportFormat report_format_from_string(std::string_view s) {
  if (s == "table") return ReportFormat::kTable;
  if (s == "delimited") return ReportFormat::kDelimited;
  fail("unknown format '" + std::string(s) + "'");
}

inline std::string percent2(double fraction) {
  if (!std::isfinite(fraction)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

inline std::string decimal2(double v) {
  if (!std::isfinite(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

namespace detail {

inline bool numeric_cell(const std::string& s) {
  if (s.empty() || s == "-") return true;
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

}  // namespace detail

/// Columns separated by two spaces; numeric columns are right-aligned.
inline void write_aligned(std::ostream& out, const std::vector<std::string>& header,
                          const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  std::vector<bool> numeric(header.size(), true);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) {
      width[c] = std::max(width[c], r[c].size());
      if (!detail::numeric_cell(r[c])) numeric[c] = false;
    }
  }
  auto emit = [&](const std::vector<std::string>& r) {
    std::string line;
    for (std::size_t c = 0; c < header.size(); ++c) {
      const std::string& cell = c < r.size() ? r[c] : std::string();
      const std::string pad(width[c] - cell.size(), ' ');
      if (c > 0) line += "  ";
      line += numeric[c] ? pad + cell : cell + pad;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) emit(r);
}

inline void write_delimited(std::ostream& out, const std::vector<std::string>& header,
                            const std::vector<std::vector<std::string>>& rows) {
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "\t" : "") << r[c];
    out << '\n';
  };
  emit(header);
  for (const auto& r : rows) emit(r);
}

// ---------------------------------------------------------------------------
// Evaluation report

inline void write_eval_report(std::ostream& out, const SuiteReport& suite, ReportFormat format) {
  const bool partitioned = std::any_of(suite.results.begin(), suite.results.end(),
                                       [](const EvalResult& r) { return !r.ood_by_partition.empty(); });
  std::vector<std::vector<std::string>> rows;
  if (format == ReportFormat::kDelimited) {
    for (const auto& r : suite.results) {
      rows.push_back({r.model_id, r.split, format_real(r.id_acc.value()), format_real(r.ood_acc.value()),
                      format_real(r.ood_partition_mean()), format_real(r.drop_pct)});
    }
    for (const auto& a : suite.averages) {
      rows.push_back({"Average", a.split, format_real(a.id_acc), format_real(a.ood_acc), "", format_real(a.drop_pct)});
    }
    write_delimited(out, {"model", "split", "id_acc", "ood_acc", "ood_acc_avg", "drop_pct"}, rows);
    return;
  }
  std::vector<std::string> header{"Model", "Split", "ID", "OOD"};
  if (partitioned) header.push_back("OOD (Avg)");
  header.push_back("Drop%");
  auto add = [&](std::vector<std::string> row, const std::string& avg, double drop) {
    if (partitioned) row.push_back(avg);
    row.push_back(decimal2(drop));
    rows.push_back(std::move(row));
  };
  for (const auto& r : suite.results) {
    add({r.model_id, r.split, percent2(r.id_acc.value()), percent2(r.ood_acc.value())},
        percent2(r.ood_partition_mean()), r.drop_pct);
  }
  for (const auto& a : suite.averages) {
    add({"Average", a.split, percent2(a.id_acc), percent2(a.ood_acc)}, "-", a.drop_pct);
  }
  write_aligned(out, header, rows);
}

struct EvalRow {
  std::string model;
  std::string split;
  double id_acc = kNaN;
  double ood_acc = kNaN;
  double ood_acc_avg = kNaN;
  double drop_pct = kNaN;
};

/// Reads the delimited evaluation report back.
inline std::vector<EvalRow> read_eval_report(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "model\tsplit\tid_acc\tood_acc\tood_acc_avg\tdrop_pct") {
    fail("evaluation report: missing or unexpected header");
  }
  auto number = [](const std::string& s) { return s.empty() ? kNaN : std::stod(s); };
  std::vector<EvalRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cells.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cells.size() != 6) fail("evaluation report line " + std::to_string(lineno) + ": expected 6 columns");
    try {
      rows.push_back({cells[0], cells[1], number(cells[2]), number(cells[3]), number(cells[4]), number(cells[5])});
    } catch (const std::logic_error&) {
      fail("evaluation report line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

/// One OOD-accuracy polyline per model over the splits in order of first appearance.
inline PlotSpec level_curve_spec(const std::vector<EvalRow>& rows, std::string title = {}) {
  PlotSpec spec;
  spec.kind = PlotKind::kLevelCurve;
  spec.title = std::move(title);
  spec.x_label = "shift level";
  spec.y_label = "OOD accuracy";
  std::map<std::string, std::size_t> position;
  std::map<std::string, std::size_t> series_of;
  for (const auto& r : rows) {
    if (r.model == "Average") continue;
    if (!position.contains(r.split)) {
      position[r.split] = spec.x_ticks.size() + 1;
      spec.x_ticks.push_back(r.split);
    }
    if (!series_of.contains(r.model)) {
      series_of[r.model] = spec.series.size();
      spec.series.push_back({r.model, {}, {}});
    }
    auto& s = spec.series[series_of[r.model]];
    s.x.push_back(static_cast<double>(position[r.split]));
    s.y.push_back(r.ood_acc);
  }
  return spec;
}

inline void write_rank_report(std::ostream& out, const RankReport& ranks, ReportFormat format) {
  std::vector<std::vector<std::string>> rows;
  const bool delimited = format == ReportFormat::kDelimited;
  for (const auto& s : ranks.settings) {
    for (std::size_t i = 0; i < s.models.size(); ++i) {
      rows.push_back({s.setting, s.models[i], delimited ? format_real(s.id_rank[i]) : decimal2(s.id_rank[i]),
                      delimited ? format_real(s.ood_rank[i]) : decimal2(s.ood_rank[i]),
                      delimited ? format_real(s.tau) : decimal2(s.tau)});
    }
  }
  if (delimited) {
    write_delimited(out, {"split", "model", "id_rank", "ood_rank", "kendall_tau"}, rows);
  } else {
    write_aligned(out, {"Split", "Model", "ID rank", "OOD rank", "Kendall tau"}, rows);
  }
}

// ---------------------------------------------------------------------------
// Cluster and bug summaries

inline void write_cluster_summary(std::ostream& out, const SubDatasetSeries& series, ReportFormat format) {
  std::vector<std::string> header{"subdataset", "size"};
  for (const auto& [y, _] : series.per_class_cluster_sizes) header.push_back("cluster_" + y);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t j = 0; j < series.subdatasets.size(); ++j) {
    std::vector<std::string> row{"D" + std::to_string(j + 1), std::to_string(series.subdatasets[j].size())};
    for (const auto& [_, sizes] : series.per_class_cluster_sizes) row.push_back(std::to_string(sizes[j]));
    rows.push_back(std::move(row));
  }
  if (format == ReportFormat::kDelimited) {
    write_delimited(out, header, rows);
  } else {
    write_aligned(out, header, rows);
  }
}

inline void write_bug_summary(std::ostream& out, const BugSummary& summary, ReportFormat format) {
  const bool delimited = format == ReportFormat::kDelimited;
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < summary.ranking.size(); ++i) {
    const auto& r = summary.ranking[i];
    rows.push_back({std::to_string(i + 1), r.attr, delimited ? format_real(r.severity) : decimal2(r.severity),
                    delimited ? format_real(r.aul) : decimal2(r.aul), r.is_bug ? "yes" : "no", to_string(r.verdict),
                    r.dominant_type, r.hint});
  }
  const std::vector<std::string> header{"rank", "attr", "severity", "aul", "bug", "verdict", "type", "hint"};
  if (delimited) {
    write_delimited(out, header, rows);
  } else {
    write_aligned(out, header, rows);
  }
}

}  // namespace oodtest
