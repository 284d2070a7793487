#pragma once

// Evaluation metrics: accuracy, relative drop, rank agreement between ID and
// OOD orderings, cross-value transfer matrices and spurious-correlation
// diagnosis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oodtest/error.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/splitgen.hpp"

namespace oodtest {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct PredictionSet {
  std::string model_id;
  std::map<std::string, std::string> predictions;
  // Per-sample label probabilities; empty when the provider gave none.
  std::map<std::string, std::map<std::string, double>> scores;

  bool operator==(const PredictionSet&) const = default;
};

/// Reads line-delimited {"id", "model", "predicted", "scores"?} records and
/// groups them by model in first-occurrence order.
inline std::vector<PredictionSet> load_predictions(std::istream& in) {
  std::vector<PredictionSet> out;
  std::map<std::string, std::size_t> slot;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    const std::string where = "prediction line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(where + "malformed record: " + e.what());
    }
    if (!j.is_object()) fail(where + "record is not an object");
    for (const char* key : {"id", "model", "predicted"}) {
      if (!j.contains(key) || !j[key].is_string()) fail(where + "missing string field \"" + key + "\"");
    }
    const auto model = j["model"].get<std::string>();
    const auto id = j["id"].get<std::string>();
    auto [it, inserted] = slot.emplace(model, out.size());
    if (inserted) out.push_back(PredictionSet{model, {}, {}});
    PredictionSet& ps = out[it->second];
    if (!ps.predictions.emplace(id, j["predicted"].get<std::string>()).second) {
      fail(where + "duplicate prediction for id '" + id + "' of model '" + model + "'");
    }
    if (j.contains("scores") && !j["scores"].is_null()) {
      if (!j["scores"].is_object()) fail(where + "\"scores\" must be an object");
      auto& row = ps.scores[id];
      double sum = 0.0;
      for (const auto& [label, p] : j["scores"].items()) {
        if (!p.is_number()) fail(where + "score for '" + label + "' is not a number");
        const double v = p.get<double>();
        if (v < 0.0 || v > 1.0) fail(where + "score for '" + label + "' outside [0, 1]");
        row[label] = v;
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-6) fail(where + "scores do not sum to 1");
    }
  }
  return out;
}

inline std::vector<PredictionSet> load_predictions_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open prediction file '" + path + "'");
  return load_predictions(in);
}

inline void write_predictions(std::ostream& out, const PredictionSet& ps) {
  for (const auto& [id, label] : ps.predictions) {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["model"] = ps.model_id;
    j["predicted"] = label;
    if (auto it = ps.scores.find(id); it != ps.scores.end()) {
      j["scores"] = nlohmann::ordered_json::object();
      for (const auto& [y, p] : it->second) j["scores"][y] = p;
    }
    out << j.dump() << '\n';
  }
}

inline void validate_predictions(const PredictionSet& ps, const Manifest& manifest) {
  const auto& labels = manifest.label_set();
  auto known = [&](const std::string& y) { return std::find(labels.begin(), labels.end(), y) != labels.end(); };
  for (const auto& [id, y] : ps.predictions) {
    if (!known(y)) fail("model '" + ps.model_id + "' predicts unknown label '" + y + "' for '" + id + "'");
  }
  for (const auto& [id, row] : ps.scores) {
    for (const auto& [y, _] : row) {
      if (!known(y)) fail("model '" + ps.model_id + "' scores unknown label '" + y + "' for '" + id + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Accuracy and drop

/// Exact correct/total count; converted to a real only when reported.
struct Fraction {
  std::size_t correct = 0;
  std::size_t total = 0;

  [[nodiscard]] double value() const {
    return total == 0 ? kNaN : static_cast<double>(correct) / static_cast<double>(total);
  }
  Fraction& operator+=(const Fraction& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
  bool operator==(const Fraction&) const = default;
};

inline Fraction accuracy_fraction(const PredictionSet& ps, const Manifest& manifest,
                                  std::span<const std::string> ids) {
  if (ids.empty()) fail("accuracy over an empty id set");
  Fraction f;
  std::size_t missing = 0;
  const std::string* first_missing = nullptr;
  for (const auto& id : ids) {
    const Sample& s = manifest.at(id);
    auto it = ps.predictions.find(id);
    if (it == ps.predictions.end()) {
      if (missing++ == 0) first_missing = &id;
      continue;
    }
    ++f.total;
    if (it->second == s.label) ++f.correct;
  }
  if (missing > 0) {
    fail("model '" + ps.model_id + "' lacks predictions for " + std::to_string(missing) + " ids (first: '" +
         *first_missing + "')");
  }
  return f;
}

inline double accuracy(const PredictionSet& ps, const Manifest& manifest, std::span<const std::string> ids) {
  return accuracy_fraction(ps, manifest, ids).value();
}

/// Relative decline (id - ood) / id * 100. Works in fractions or percent alike.
inline double drop_percent(double id_acc, double ood_acc) {
  if (!(id_acc > 0.0)) fail("drop_percent: ID accuracy must be positive");
  return (id_acc - ood_acc) / id_acc * 100.0;
}

struct EvalResult {
  std::string model_id;
  std::string split;
  Fraction id_acc;
  Fraction ood_acc;
  std::vector<std::pair<std::string, Fraction>> ood_by_partition;
  double drop_pct = kNaN;  // NaN when id accuracy is 0

  // Unweighted mean over partitions, the "OOD Acc (Avg)" of the clustered protocol.
  [[nodiscard]] double ood_partition_mean() const {
    if (ood_by_partition.empty()) return ood_acc.value();
    double sum = 0.0;
    for (const auto& [_, f] : ood_by_partition) sum += f.value();
    return sum / static_cast<double>(ood_by_partition.size());
  }
};

struct AverageRow {
  std::string split;
  std::size_t n_models = 0;
  double id_acc = 0.0;
  double ood_acc = 0.0;
  double drop_pct = kNaN;  // drop of the averaged accuracies
};

struct SuiteReport {
  std::vector<EvalResult> results;  // split-major, models in input order
  std::vector<AverageRow> averages;
};

inline EvalResult evaluate_split(const PredictionSet& ps, const SplitPair& split, const Manifest& manifest) {
  if (split.val_ids.empty()) fail("split '" + split.name + "' has no ID validation ids");
  EvalResult r;
  r.model_id = ps.model_id;
  r.split = split.name;
  r.id_acc = accuracy_fraction(ps, manifest, split.val_ids);
  if (split.partitioned()) {
    for (const auto& part : split.partitions) {
      const Fraction f = accuracy_fraction(ps, manifest, part.ids);
      r.ood_by_partition.emplace_back(part.name, f);
      r.ood_acc += f;
    }
  } else {
    r.ood_acc = accuracy_fraction(ps, manifest, split.test_ids);
  }
  if (r.id_acc.correct > 0) r.drop_pct = drop_percent(r.id_acc.value(), r.ood_acc.value());
  return r;
}

inline SuiteReport eval_suite(std::span<const PredictionSet> models, std::span<const SplitPair> splits,
                              const Manifest& manifest) {
  if (models.empty()) fail("eval_suite: no prediction sets");
  if (splits.empty()) fail("eval_suite: no splits");
  for (const auto& ps : models) validate_predictions(ps, manifest);
  SuiteReport out;
  for (const auto& split : splits) {
    AverageRow avg;
    avg.split = split.name;
    for (const auto& ps : models) {
      out.results.push_back(evaluate_split(ps, split, manifest));
      avg.id_acc += out.results.back().id_acc.value();
      avg.ood_acc += out.results.back().ood_acc.value();
      ++avg.n_models;
    }
    avg.id_acc /= static_cast<double>(avg.n_models);
    avg.ood_acc /= static_cast<double>(avg.n_models);
    if (avg.id_acc > 0.0) avg.drop_pct = drop_percent(avg.id_acc, avg.ood_acc);
    out.averages.push_back(avg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rank agreement

/// Ranks with 1 = highest score; tied scores share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> ranks(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

// Counts inversions of v while merge-sorting it.
inline std::uint64_t count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = count_swaps(v, buf, lo, mid) + count_swaps(v, buf, mid, hi);
  std::size_t i = lo;
  std::size_t j = mid;
  std::size_t k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

inline std::uint64_t tied_pairs(std::span<const double> sorted) {
  std::uint64_t ties = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i + 1;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const std::uint64_t run = j - i;
    ties += run * (run - 1) / 2;
    i = j;
  }
  return ties;
}

}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm). Without ties this equals
/// tau-a. NaN when either side is constant.
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail("kendall_tau: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return kNaN;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  std::vector<double> xs(n);
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }
  const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t x_ties = detail::tied_pairs(xs);
  std::uint64_t joint_ties = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && xs[j] == xs[i] && ys[j] == ys[i]) ++j;
    const std::uint64_t run = j - i;
    joint_ties += run * (run - 1) / 2;
    i = j;
  }
  std::vector<double> buf(n);
  const std::uint64_t swaps = detail::count_swaps(ys, buf, 0, n);
  const std::uint64_t y_ties = detail::tied_pairs(ys);  // ys is now sorted

  const double numerator = static_cast<double>(total) - static_cast<double>(x_ties) - static_cast<double>(y_ties) +
                           static_cast<double>(joint_ties) - 2.0 * static_cast<double>(swaps);
  const double denominator = std::sqrt(static_cast<double>(total - x_ties) * static_cast<double>(total - y_ties));
  if (denominator == 0.0) return kNaN;
  return numerator / denominator;
}

struct SettingRanks {
  std::string setting;
  std::vector<std::string> models;
  std::vector<double> id_rank;
  std::vector<double> ood_rank;
  double tau = kNaN;
};

struct RankReport {
  std::vector<SettingRanks> settings;
};

/// Per split: ID ranking by id accuracy, OOD ranking by overall OOD accuracy,
/// and Kendall tau between the two.
inline RankReport rank_models(std::span<const EvalResult> results) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalResult*>> by_split;
  for (const auto& r : results) {
    if (!by_split.contains(r.split)) order.push_back(r.split);
    by_split[r.split].push_back(&r);
  }
  if (order.empty()) fail("rank_models: no results");

  std::optional<std::set<std::string>> model_set;
  RankReport out;
  for (const auto& split : order) {
    const auto& rows = by_split[split];
    std::set<std::string> models;
    for (const auto* r : rows) {
      if (!models.insert(r->model_id).second) {
        fail("rank_models: model '" + r->model_id + "' appears twice for split '" + split + "'");
      }
    }
    if (models.size() < 2) fail("rank_models: need at least 2 models for split '" + split + "'");
    if (model_set && *model_set != models) fail("rank_models: model sets differ across splits");
    model_set = models;

    SettingRanks s;
    s.setting = split;
    std::vector<double> id;
    std::vector<double> ood;
    for (const auto* r : rows) {
      s.models.push_back(r->model_id);
      id.push_back(r->id_acc.value());
      ood.push_back(r->ood_acc.value());
    }
    s.id_rank = average_ranks(id);
    s.ood_rank = average_ranks(ood);
    s.tau = kendall_tau(s.id_rank, s.ood_rank);
    out.settings.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transfer matrices

enum class TransferDropConvention {
  // Drop of the row mean over every test column, the ID column included.
  kRowMean,
  // Mean of the per-cell drops over off-diagonal columns only.
  kOffDiagonalMean,
};

struct TransferRow {
  std::string train_value;
  double id_acc = 0.0;
  std::vector<double> cells;  // one per value, diagonal = id_acc
  double avg_ood = 0.0;
  double drop_pct = 0.0;
};

struct TransferMatrix {
  std::vector<std::string> values;
  std::vector<TransferRow> rows;
};

using TransferGrid = std::map<std::pair<std::string, std::string>, double>;

inline TransferMatrix transfer_matrix(const std::vector<std::string>& values, const TransferGrid& grid,
                                      const std::map<std::string, double>& id_acc,
                                      TransferDropConvention convention = TransferDropConvention::kRowMean) {
  if (values.size() < 2) fail("transfer_matrix: need at least 2 values");
  TransferMatrix tm;
  tm.values = values;
  for (const auto& train : values) {
    TransferRow row;
    row.train_value = train;
    auto id = id_acc.find(train);
    if (id == id_acc.end()) fail("transfer_matrix: missing ID accuracy for '" + train + "'");
    row.id_acc = id->second;
    double off_sum = 0.0;
    for (const auto& test : values) {
      if (test == train) {
        row.cells.push_back(row.id_acc);
        continue;
      }
      auto cell = grid.find({train, test});
      if (cell == grid.end()) fail("transfer_matrix: missing cell (" + train + ", " + test + ")");
      row.cells.push_back(cell->second);
      off_sum += cell->second;
    }
    const auto n = static_cast<double>(values.size());
    row.avg_ood = off_sum / (n - 1.0);
    if (convention == TransferDropConvention::kRowMean) {
      row.drop_pct = drop_percent(row.id_acc, (off_sum + row.id_acc) / n);
    } else {
      double drops = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] != train) drops += drop_percent(row.id_acc, row.cells[i]);
      }
      row.drop_pct = drops / (n - 1.0);
    }
    tm.rows.push_back(std::move(row));
  }
  return tm;
}

/// Grid and ID accuracies from evaluated value hold-out splits: split
/// `holdout_split_names[v]` trains on v and has one test partition per other value.
inline TransferMatrix transfer_from_holdouts(const std::vector<std::string>& values,
                                             std::span<const EvalResult> results, const std::string& model_id,
                                             TransferDropConvention convention = TransferDropConvention::kRowMean) {
  TransferGrid grid;
  std::map<std::string, double> id_acc;
  for (const auto& value : values) {
    const std::string split = "holdout-" + value;
    auto it = std::find_if(results.begin(), results.end(),
                           [&](const EvalResult& r) { return r.model_id == model_id && r.split == split; });
    if (it == results.end()) fail("transfer matrix: no result for model '" + model_id + "' on '" + split + "'");
    id_acc[value] = it->id_acc.value();
    for (const auto& [part, f] : it->ood_by_partition) grid[{value, part}] = f.value();
  }
  return transfer_matrix(values, grid, id_acc, convention);
}

// ---------------------------------------------------------------------------
// Spurious-correlation diagnosis

enum class Verdict { kNone, kMarginalSpurious, kConditionalSpurious, kBoth };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::kNone: return "none";
    case Verdict::kMarginalSpurious: return "marginal_spurious";
    case Verdict::kConditionalSpurious: return "conditional_spurious";
    case Verdict::kBoth: return "both";
  }
  return "none";
}

struct SplitEvidence {
  std::string split;
  ShiftType type = ShiftType::kMarginal;
  double correlation_test = 0.0;
  double id_acc = kNaN;
  double ood_acc = kNaN;
  double drop_pct = kNaN;
  // Largest deviation of a training conditional row from uniform; the premise of
  // a marginal spurious correlation needs it within tolerance.
  double train_uniformity_gap = std::numeric_limits<double>::infinity();
};

/// max over training values and labels of |P(y | v) - 1/K|.
inline double uniformity_gap(const DistStats& stats, const std::vector<std::string>& labels) {
  const double u = 1.0 / static_cast<double>(labels.size());
  double gap = 0.0;
  for (const auto& [_, row] : stats.p_label_given_attr) {
    for (const auto& y : labels) {
      auto it = row.find(y);
      gap = std::max(gap, std::abs((it == row.end() ? 0.0 : it->second) - u));
    }
  }
  return gap;
}

inline SplitEvidence make_evidence(const EvalResult& result, const SplitPair& split,
                                   const std::vector<std::string>& labels) {
  SplitEvidence e;
  e.split = split.name;
  e.type = split.spec.shift_type;
  e.correlation_test = split.spec.correlation_test;
  e.id_acc = result.id_acc.value();
  e.ood_acc = result.ood_acc.value();
  e.drop_pct = result.drop_pct;
  if (split.train_stats) e.train_uniformity_gap = uniformity_gap(*split.train_stats, labels);
  return e;
}

struct DiagnosisThresholds {
  double theta_drop = 10.0;  // percent
  double tau_c = 0.05;
  bool require_both_types = true;
};

struct Diagnosis {
  std::string attr;
  Verdict verdict = Verdict::kNone;
  double chance = kNaN;
  std::vector<SplitEvidence> evidence;
  bool marginal_flag = false;
  bool conditional_flag = false;
};

/// Marginal spurious: a marginal split drops more than theta_drop while its
/// training conditionals are uniform. Conditional spurious: a reversed
/// correlation split lands below chance, or a conditional split drops more than
/// theta_drop.
inline Diagnosis diagnose_spurious(const std::string& attr, std::span<const SplitEvidence> evidence,
                                   std::size_t n_labels, const DiagnosisThresholds& t = {}) {
  if (n_labels < 2) fail("diagnose_spurious: need at least 2 labels");
  const bool has_marginal = std::any_of(evidence.begin(), evidence.end(),
                                        [](const auto& e) { return e.type == ShiftType::kMarginal; });
  const bool has_conditional = std::any_of(evidence.begin(), evidence.end(), [](const auto& e) {
    return e.type == ShiftType::kConditional || e.type == ShiftType::kJoint;
  });
  if (t.require_both_types && (!has_marginal || !has_conditional)) {
    fail("diagnose_spurious: evidence for '" + attr + "' needs both a marginal and a conditional-type split");
  }

  Diagnosis d;
  d.attr = attr;
  d.chance = 1.0 / static_cast<double>(n_labels);
  d.evidence.assign(evidence.begin(), evidence.end());
  for (const auto& e : evidence) {
    const bool dropped = std::isfinite(e.drop_pct) && e.drop_pct > t.theta_drop;
    switch (e.type) {
      case ShiftType::kMarginal:
        if (dropped && e.train_uniformity_gap <= t.tau_c) d.marginal_flag = true;
        break;
      case ShiftType::kConditional:
      case ShiftType::kJoint:
        if (e.correlation_test < 0.0 && e.ood_acc < d.chance) d.conditional_flag = true;
        if (e.type == ShiftType::kConditional && dropped) d.conditional_flag = true;
        break;
      case ShiftType::kCluster:
        break;
    }
  }
  if (d.marginal_flag && d.conditional_flag) {
    d.verdict = Verdict::kBoth;
  } else if (d.marginal_flag) {
    d.verdict = Verdict::kMarginalSpurious;
  } else if (d.conditional_flag) {
    d.verdict = Verdict::kConditionalSpurious;
  }
  return d;
}

}  // namespace oodtest
