#pragma once

// Train/test split construction for marginal, conditional and joint shifts on a
// single categorical attribute.
//
// Every constructor works on the (attribute value, label) cell grid. A split is
// first planned as a target joint distribution per side, then realized by
// sizing both sides against the cell with the least headroom and sampling
// without replacement inside each cell. Samples are never selected by feature
// or embedding content.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oodtest/error.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/random.hpp"

namespace oodtest {

enum class ShiftType { kMarginal, kConditional, kJoint, kCluster };

inline const char* to_string(ShiftType t) {
  switch (t) {
    case ShiftType::kMarginal: return "marginal";
    case ShiftType::kConditional: return "conditional";
    case ShiftType::kJoint: return "joint";
    case ShiftType::kCluster: return "cluster";
  }
  return "marginal";
}

inline ShiftType shift_type_from_string(std::string_view s) {
  if (s == "marginal") return ShiftType::kMarginal;
  if (s == "conditional") return ShiftType::kConditional;
  if (s == "joint") return ShiftType::kJoint;
  if (s == "cluster") return ShiftType::kCluster;
  fail("unknown shift type '" + std::string(s) + "'");
}

// attribute value -> non-negative weight; an empty map means uniform
using ValueWeights = std::map<std::string, double>;

struct ShiftSpec {
  ShiftType shift_type = ShiftType::kMarginal;
  std::string attr;
  ValueWeights train_value_weights;
  double correlation_train = 0.0;
  double correlation_test = 0.0;
  double train_fraction = 0.8;
  std::uint64_t seed = kDefaultSeed;

  bool operator==(const ShiftSpec&) const = default;
};

struct TestPartition {
  std::string name;
  std::vector<std::string> ids;

  bool operator==(const TestPartition&) const = default;
};

struct SplitPair {
  std::string name;
  ShiftSpec spec;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;  // ID validation slice, same distribution as train
  std::vector<std::string> test_ids;
  std::vector<TestPartition> partitions;  // empty when the test side is not partitioned
  std::optional<ShiftProfile> achieved;
  std::optional<DistStats> train_stats;
  std::optional<DistStats> test_stats;

  [[nodiscard]] bool partitioned() const noexcept { return !partitions.empty(); }

  bool operator==(const SplitPair&) const = default;
};

struct SplitOptions {
  ShiftThresholds thresholds;
  double val_fraction = 0.1;
  double tolerance = 0.02;  // allowed deviation of achieved from requested proportions
};

struct LevelParams {
  ValueWeights weights;
  double correlation_train = 0.0;
  double correlation_test = 0.0;
};

namespace detail {

// Attribute values and labels in lexicographic order; cell (v, y) at v * K + y.
struct CellGrid {
  std::vector<std::string> values;
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> members;

  [[nodiscard]] std::size_t n_values() const { return values.size(); }
  [[nodiscard]] std::size_t n_labels() const { return labels.size(); }
  [[nodiscard]] std::size_t cell(std::size_t v, std::size_t y) const { return v * labels.size() + y; }
};

inline CellGrid build_grid(const Manifest& manifest, const std::string& attr) {
  CellGrid g;
  g.values = manifest.values_of(attr);
  g.labels = manifest.label_set();
  std::sort(g.values.begin(), g.values.end());
  std::sort(g.labels.begin(), g.labels.end());
  g.members.resize(g.values.size() * g.labels.size());
  std::map<std::string, std::size_t> vpos;
  std::map<std::string, std::size_t> ypos;
  for (std::size_t i = 0; i < g.values.size(); ++i) vpos[g.values[i]] = i;
  for (std::size_t i = 0; i < g.labels.size(); ++i) ypos[g.labels[i]] = i;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples()[i];
    g.members[g.cell(vpos.at(s.attributes.at(attr)), ypos.at(s.label))].push_back(i);
  }
  return g;
}

inline std::vector<double> label_proportions(const CellGrid& g) {
  std::vector<double> pi(g.n_labels(), 0.0);
  double total = 0.0;
  for (std::size_t v = 0; v < g.n_values(); ++v) {
    for (std::size_t y = 0; y < g.n_labels(); ++y) {
      pi[y] += static_cast<double>(g.members[g.cell(v, y)].size());
    }
  }
  for (double c : pi) total += c;
  for (double& p : pi) p /= total;
  return pi;
}

inline std::vector<double> normalized_weights(const ValueWeights& weights, const CellGrid& g) {
  const std::size_t m = g.n_values();
  if (weights.empty()) return std::vector<double>(m, 1.0 / static_cast<double>(m));
  std::vector<double> w(m, 0.0);
  double sum = 0.0;
  for (const auto& [value, weight] : weights) {
    auto it = std::find(g.values.begin(), g.values.end(), value);
    if (it == g.values.end()) fail("weight given for unknown attribute value '" + value + "'");
    if (!(weight >= 0.0) || !std::isfinite(weight)) fail("weight for '" + value + "' must be non-negative");
    w[static_cast<std::size_t>(it - g.values.begin())] = weight;
    sum += weight;
  }
  if (!(sum > 0.0)) fail("degenerate weights: no positive entry");
  for (double& x : w) x /= sum;
  return w;
}

inline bool is_uniform(std::span<const double> w) {
  const double u = 1.0 / static_cast<double>(w.size());
  return std::all_of(w.begin(), w.end(), [u](double x) { return std::abs(x - u) <= 1e-12; });
}

// Test-side value proportions emphasizing what training under-weights: q ∝ max(w) - w.
inline std::vector<double> complement_emphasis(std::span<const double> w) {
  const double top = *std::max_element(w.begin(), w.end());
  std::vector<double> q(w.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) sum += (q[i] = top - w[i]);
  for (double& x : q) x /= sum;
  return q;
}

// Round-robin pairing of sorted values to sorted labels; the reversed pairing
// rotates every assignment by ceil(K/2), which leaves no value on its label.
inline std::size_t paired_label(std::size_t value_pos, std::size_t n_labels, bool reversed) {
  const std::size_t base = value_pos % n_labels;
  return reversed ? (base + (n_labels + 1) / 2) % n_labels : base;
}

// P(y | v) = (1 - |rho|) pi_y + |rho| [y == pair(v)]; negative rho uses the reversed pairing.
inline std::vector<double> conditional_rows(const CellGrid& g, const std::vector<double>& pi, double rho) {
  const std::size_t m = g.n_values();
  const std::size_t k = g.n_labels();
  const double strength = std::abs(rho);
  std::vector<double> rows(m * k);
  for (std::size_t v = 0; v < m; ++v) {
    const std::size_t target = paired_label(v, k, rho < 0.0);
    for (std::size_t y = 0; y < k; ++y) {
      rows[v * k + y] = (1.0 - strength) * pi[y] + (y == target ? strength : 0.0);
    }
  }
  return rows;
}

inline std::vector<double> joint_from(std::span<const double> p_value, std::span<const double> rows,
                                      std::size_t k) {
  std::vector<double> j(rows.size());
  for (std::size_t v = 0; v < p_value.size(); ++v) {
    for (std::size_t y = 0; y < k; ++y) j[v * k + y] = p_value[v] * rows[v * k + y];
  }
  return j;
}

inline std::vector<double> independent_rows(const CellGrid& g, const std::vector<double>& pi) {
  std::vector<double> rows(g.n_values() * g.n_labels());
  for (std::size_t v = 0; v < g.n_values(); ++v) {
    std::copy(pi.begin(), pi.end(), rows.begin() + static_cast<std::ptrdiff_t>(v * g.n_labels()));
  }
  return rows;
}

inline DistStats stats_from_joint(const CellGrid& g, std::span<const double> joint, const std::string& attr) {
  DistStats d;
  d.attr = attr;
  for (std::size_t v = 0; v < g.n_values(); ++v) {
    double pv = 0.0;
    for (std::size_t y = 0; y < g.n_labels(); ++y) pv += joint[g.cell(v, y)];
    if (pv <= 0.0) continue;
    d.p_attr[g.values[v]] = pv;
    d.support.insert(g.values[v]);
    auto& row = d.p_label_given_attr[g.values[v]];
    for (std::size_t y = 0; y < g.n_labels(); ++y) {
      const double p = joint[g.cell(v, y)];
      if (p > 0.0) row[g.labels[y]] = p / pv;
      if (p > 0.0) d.p_label[g.labels[y]] += p;
    }
  }
  return d;
}

// Largest-remainder apportionment of `total` over non-negative weights.
// Ties in the fractional part go to the lower index.
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  if (total == 0 || !(sum > 0.0)) return out;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(quota));
    assigned += out[i];
    if (weights[i] > 0.0) remainders.emplace_back(quota - std::floor(quota), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total && r < remainders.size(); ++r, ++assigned) {
    ++out[remainders[r].second];
  }
  return out;
}

inline std::string cell_name(const CellGrid& g, std::size_t c) {
  return "(" + g.values[c / g.n_labels()] + ", " + g.labels[c % g.n_labels()] + ")";
}

inline std::string format_number(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

inline std::vector<std::string> ids_in_manifest_order(const Manifest& manifest, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(manifest.samples()[i].id);
  return out;
}

// Picks a stratified validation slice out of `pool`, grouped by `strata`.
// Returns {fit, val}, both in pool order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(
    const std::vector<std::vector<std::size_t>>& strata, double val_fraction, Rng& rng) {
  std::size_t total = 0;
  std::vector<double> sizes;
  for (const auto& s : strata) {
    total += s.size();
    sizes.push_back(static_cast<double>(s.size()));
  }
  if (total < 2) fail_infeasible("training side too small to reserve a validation slice");
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(total))), 1, total - 1);
  auto per = apportion(n_val, sizes);
  std::vector<std::size_t> fit;
  std::vector<std::size_t> val;
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto members = strata[s];
    shuffle_in_place(members, rng);
    const std::size_t take = std::min(per[s], members.size());
    val.insert(val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    fit.insert(fit.end(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end());
  }
  return {fit, val};
}

}  // namespace detail

/// A split resolved into target joint distributions over the cell grid, before sampling.
struct SplitPlan {
  detail::CellGrid grid;
  std::vector<double> train_target;
  std::vector<double> test_target;
  ShiftProfile planned;
};

/// Validates a spec against its shift type and computes the target distributions.
inline SplitPlan plan_split(const Manifest& manifest, const ShiftSpec& spec, const SplitOptions& opts = {}) {
  if (!manifest.has_attribute(spec.attr)) fail("unknown attribute '" + spec.attr + "'");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) fail("train_fraction must be in (0, 1)");
  if (!(spec.correlation_train >= 0.0 && spec.correlation_train <= 1.0)) {
    fail("correlation_train must be in [0, 1]");
  }
  if (!(spec.correlation_test >= -1.0 && spec.correlation_test <= 1.0)) {
    fail("correlation_test must be in [-1, 1]");
  }

  SplitPlan plan;
  plan.grid = detail::build_grid(manifest, spec.attr);
  const auto& g = plan.grid;
  const std::size_t m = g.n_values();
  const std::size_t k = g.n_labels();
  if (m < 2) fail("attribute '" + spec.attr + "' has a single value; no shift is possible");
  const auto pi = detail::label_proportions(g);
  const auto w = detail::normalized_weights(spec.train_value_weights, g);
  const bool uniform = detail::is_uniform(w);
  const bool correlated = spec.correlation_train != 0.0 || spec.correlation_test != 0.0;
  const std::vector<double> flat(m, 1.0 / static_cast<double>(m));

  switch (spec.shift_type) {
    case ShiftType::kMarginal: {
      if (correlated) fail("marginal splits require correlation_train = correlation_test = 0");
      if (uniform) fail("no shift requested: value weights are uniform");
      const auto q = detail::complement_emphasis(w);
      const auto rows = detail::independent_rows(g, pi);
      plan.train_target = detail::joint_from(w, rows, k);
      plan.test_target = detail::joint_from(q, rows, k);
      break;
    }
    case ShiftType::kConditional: {
      if (!uniform) fail("conditional splits require uniform value weights");
      plan.train_target = detail::joint_from(flat, detail::conditional_rows(g, pi, spec.correlation_train), k);
      plan.test_target = detail::joint_from(flat, detail::conditional_rows(g, pi, spec.correlation_test), k);
      break;
    }
    case ShiftType::kJoint: {
      if (uniform && !correlated) fail("no shift requested: uniform weights and zero correlations");
      if (uniform) fail("joint splits need non-uniform value weights");
      const auto c = detail::complement_emphasis(w);
      std::vector<double> q(m);
      for (std::size_t v = 0; v < m; ++v) q[v] = 0.5 * flat[v] + 0.5 * c[v];
      plan.train_target = detail::joint_from(w, detail::conditional_rows(g, pi, spec.correlation_train), k);
      plan.test_target = detail::joint_from(q, detail::conditional_rows(g, pi, spec.correlation_test), k);
      break;
    }
    case ShiftType::kCluster:
      fail("cluster splits are built by the cluster protocol, not from a shift spec");
  }

  plan.planned = profile_from_stats(detail::stats_from_joint(g, plan.train_target, spec.attr),
                                    detail::stats_from_joint(g, plan.test_target, spec.attr), opts.thresholds);
  if (spec.shift_type == ShiftType::kJoint &&
      (plan.planned.tv_attr <= opts.thresholds.marginal || plan.planned.max_cond_gap <= opts.thresholds.conditional)) {
    fail("no joint shift requested: needs both a marginal and a conditional component");
  }
  if (plan.planned.tv_label > opts.thresholds.label) {
    fail_infeasible("requested correlation changes label proportions between sides (tv_label " +
                    detail::format_number(plan.planned.tv_label) + "); pairing of values to labels is unbalanced");
  }
  return plan;
}

/// Samples a planned split. Throws kInfeasible when cell counts cannot meet the
/// plan within `opts.tolerance`, naming the binding cell.
inline SplitPair realize_split(const Manifest& manifest, const SplitPlan& plan, const ShiftSpec& spec,
                               std::string name, const SplitOptions& opts = {}) {
  const auto& g = plan.grid;
  const std::size_t n_cells = g.members.size();
  const double f = spec.train_fraction;

  double usable = std::numeric_limits<double>::infinity();
  std::size_t binding = 0;
  for (std::size_t c = 0; c < n_cells; ++c) {
    const double demand = f * plan.train_target[c] + (1.0 - f) * plan.test_target[c];
    if (demand <= 0.0) continue;
    const double cap = static_cast<double>(g.members[c].size()) / demand;
    if (cap < usable) {
      usable = cap;
      binding = c;
    }
  }
  const std::string binding_desc =
      "binding cell " + detail::cell_name(g, binding) + " has " + std::to_string(g.members[binding].size()) +
      " samples";
  if (!(usable > 0.0)) fail_infeasible("cell " + detail::cell_name(g, binding) + " is empty but required");

  const auto n_train = static_cast<std::size_t>(std::floor(f * usable + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor((1.0 - f) * usable + 1e-9));
  auto train_counts = detail::apportion(n_train, plan.train_target);
  auto test_counts = detail::apportion(n_test, plan.test_target);
  for (std::size_t c = 0; c < n_cells; ++c) {
    train_counts[c] = std::min(train_counts[c], g.members[c].size());
    test_counts[c] = std::min(test_counts[c], g.members[c].size() - train_counts[c]);
  }

  // Achieved proportions must track the plan.
  auto check_side = [&](const std::vector<std::size_t>& counts, const std::vector<double>& target,
                        const char* side) {
    const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    if (total <= 0.0) fail_infeasible(std::string(side) + " side would be empty; " + binding_desc);
    for (std::size_t v = 0; v < g.n_values(); ++v) {
      double got_v = 0.0;
      double want_v = 0.0;
      for (std::size_t y = 0; y < g.n_labels(); ++y) {
        got_v += static_cast<double>(counts[g.cell(v, y)]);
        want_v += target[g.cell(v, y)];
      }
      if (std::abs(got_v / total - want_v) > opts.tolerance) {
        fail_infeasible(std::string(side) + " proportion of value '" + g.values[v] +
                        "' misses the request by more than the tolerance; " + binding_desc);
      }
      if (want_v <= 0.0) continue;
      for (std::size_t y = 0; y < g.n_labels(); ++y) {
        const double got = got_v > 0.0 ? static_cast<double>(counts[g.cell(v, y)]) / got_v : 0.0;
        if (std::abs(got - target[g.cell(v, y)] / want_v) > opts.tolerance) {
          fail_infeasible(std::string(side) + " label proportion in cell " + detail::cell_name(g, g.cell(v, y)) +
                          " misses the request by more than the tolerance; " + binding_desc);
        }
      }
    }
  };
  check_side(train_counts, plan.train_target, "train");
  check_side(test_counts, plan.test_target, "test");

  Rng rng(spec.seed);
  std::vector<std::vector<std::size_t>> train_strata(n_cells);
  std::vector<std::size_t> test_idx;
  for (std::size_t c = 0; c < n_cells; ++c) {
    if (train_counts[c] + test_counts[c] == 0) continue;
    auto members = g.members[c];
    shuffle_in_place(members, rng);
    const auto split_at = members.begin() + static_cast<std::ptrdiff_t>(train_counts[c]);
    train_strata[c].assign(members.begin(), split_at);
    test_idx.insert(test_idx.end(), split_at, split_at + static_cast<std::ptrdiff_t>(test_counts[c]));
  }
  auto [fit_idx, val_idx] = detail::carve_validation(train_strata, opts.val_fraction, rng);

  SplitPair out;
  out.name = std::move(name);
  out.spec = spec;
  ValueWeights full;
  const auto w = detail::normalized_weights(spec.train_value_weights, g);
  for (std::size_t v = 0; v < g.n_values(); ++v) full[g.values[v]] = w[v];
  out.spec.train_value_weights = full;
  out.train_ids = detail::ids_in_manifest_order(manifest, fit_idx);
  out.val_ids = detail::ids_in_manifest_order(manifest, val_idx);
  out.test_ids = detail::ids_in_manifest_order(manifest, test_idx);
  out.train_stats = estimate_dist(manifest, out.train_ids, spec.attr);
  out.test_stats = estimate_dist(manifest, out.test_ids, spec.attr);
  out.achieved = profile_from_stats(*out.train_stats, *out.test_stats, opts.thresholds);
  if (out.achieved->tv_label > opts.thresholds.label) {
    fail_infeasible("achieved label shift " + detail::format_number(out.achieved->tv_label) +
                    " exceeds the label threshold; " + binding_desc);
  }
  return out;
}

inline SplitPair make_split(const Manifest& manifest, const ShiftSpec& spec, std::string name = {},
                            const SplitOptions& opts = {}) {
  if (name.empty()) name = std::string(to_string(spec.shift_type)) + "-" + spec.attr;
  return realize_split(manifest, plan_split(manifest, spec, opts), spec, std::move(name), opts);
}

inline SplitPair marginal_split(const Manifest& manifest, const std::string& attr, const ValueWeights& weights,
                                double train_fraction = 0.8, std::uint64_t seed = kDefaultSeed,
                                const SplitOptions& opts = {}) {
  ShiftSpec spec{ShiftType::kMarginal, attr, weights, 0.0, 0.0, train_fraction, seed};
  return make_split(manifest, spec, {}, opts);
}

inline SplitPair conditional_split(const Manifest& manifest, const std::string& attr, double correlation_train,
                                   double correlation_test, double train_fraction = 0.8,
                                   std::uint64_t seed = kDefaultSeed, const SplitOptions& opts = {}) {
  ShiftSpec spec{ShiftType::kConditional, attr, {}, correlation_train, correlation_test, train_fraction, seed};
  return make_split(manifest, spec, {}, opts);
}

inline SplitPair joint_split(const Manifest& manifest, const std::string& attr, const ValueWeights& weights,
                             double correlation_train, double correlation_test, double train_fraction = 0.8,
                             std::uint64_t seed = kDefaultSeed, const SplitOptions& opts = {}) {
  ShiftSpec spec{ShiftType::kJoint, attr, weights, correlation_train, correlation_test, train_fraction, seed};
  return make_split(manifest, spec, {}, opts);
}

// ---------------------------------------------------------------------------
// Shift ladders

inline char level_prefix(ShiftType t) {
  switch (t) {
    case ShiftType::kMarginal: return 'M';
    case ShiftType::kConditional: return 'C';
    case ShiftType::kJoint: return 'J';
    case ShiftType::kCluster: return 'D';
  }
  return 'L';
}

/// Canonical marginal ladder over the lexicographically sorted values.
/// Four values use the fixed vectors (0.4,0.3,0.2,0.1), (0.55,0.3,0.15,0),
/// (0.7,0.3,0,0), (1,0,0,0); other counts interpolate from uniform towards a
/// one-hot on the first value at s = 0.25, 0.5, 0.75, 1.
inline std::vector<LevelParams> canonical_marginal_ladder(std::vector<std::string> values) {
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size();
  std::vector<LevelParams> out;
  if (m == 4) {
    const double table[4][4] = {{0.4, 0.3, 0.2, 0.1}, {0.55, 0.3, 0.15, 0.0}, {0.7, 0.3, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}};
    for (const auto& row : table) {
      LevelParams p;
      for (std::size_t v = 0; v < 4; ++v) p.weights[values[v]] = row[v];
      out.push_back(std::move(p));
    }
    return out;
  }
  for (double s : {0.25, 0.5, 0.75, 1.0}) {
    LevelParams p;
    for (std::size_t v = 0; v < m; ++v) {
      p.weights[values[v]] = (1.0 - s) / static_cast<double>(m) + (v == 0 ? s : 0.0);
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// rho_train in {0, 0.2, 0.4, 0.6, 0.8, 1.0} with rho_test = -rho_train.
inline std::vector<LevelParams> canonical_conditional_ladder() {
  std::vector<LevelParams> out;
  for (double rho : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) out.push_back({{}, rho, -rho});
  return out;
}

/// Joint ladder: weights move from uniform towards the first round-robin round
/// of values (one value per label, so label balance survives the correlation)
/// while rho_train = -rho_test = s, for s = 0.25, 0.5, 0.75, 1.
inline std::vector<LevelParams> canonical_joint_ladder(std::vector<std::string> values, std::size_t n_labels) {
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size();
  const std::size_t first_round = std::min(m, n_labels);
  std::vector<LevelParams> out;
  for (double s : {0.25, 0.5, 0.75, 1.0}) {
    LevelParams p;
    for (std::size_t v = 0; v < m; ++v) {
      p.weights[values[v]] =
          (1.0 - s) / static_cast<double>(m) + (v < first_round ? s / static_cast<double>(first_round) : 0.0);
    }
    p.correlation_train = s;
    p.correlation_test = -s;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<LevelParams> canonical_ladder(const Manifest& manifest, const std::string& attr, ShiftType type) {
  switch (type) {
    case ShiftType::kMarginal: return canonical_marginal_ladder(manifest.values_of(attr));
    case ShiftType::kConditional: return canonical_conditional_ladder();
    case ShiftType::kJoint: return canonical_joint_ladder(manifest.values_of(attr), manifest.label_set().size());
    case ShiftType::kCluster: break;
  }
  fail("no canonical ladder for shift type '" + std::string(to_string(type)) + "'");
}

inline ShiftSpec level_spec(const std::string& attr, ShiftType type, const LevelParams& level,
                            double train_fraction, std::uint64_t seed) {
  return ShiftSpec{type, attr, level.weights, level.correlation_train, level.correlation_test, train_fraction, seed};
}

inline double planned_severity(const ShiftProfile& planned, ShiftType type) {
  switch (type) {
    case ShiftType::kMarginal: return planned.tv_attr;
    case ShiftType::kConditional: return planned.max_cond_gap;
    default: return planned.tv_attr + planned.max_cond_gap;
  }
}

/// One split per level, named M1.., C1.. or J1... Level i is drawn with
/// sub_seed(seed, i). Levels must be strictly increasing in planned severity.
inline std::vector<SplitPair> level_series(const Manifest& manifest, const std::string& attr, ShiftType type,
                                           std::span<const LevelParams> levels, std::uint64_t seed,
                                           double train_fraction = 0.8, const SplitOptions& opts = {}) {
  if (levels.empty()) fail("level list is empty");
  std::vector<SplitPlan> plans;
  std::vector<ShiftSpec> specs;
  double previous = -1.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    specs.push_back(level_spec(attr, type, levels[i], train_fraction, sub_seed(seed, i)));
    plans.push_back(plan_split(manifest, specs.back(), opts));
    const double severity = planned_severity(plans.back().planned, type);
    if (i > 0 && !(severity > previous + 1e-12)) {
      fail("level list is not strictly increasing in severity at level " + std::to_string(i + 1));
    }
    previous = severity;
  }
  std::vector<SplitPair> out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    out.push_back(realize_split(manifest, plans[i], specs[i], level_prefix(type) + std::to_string(i + 1), opts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitioned protocols

/// Builds a split whose training pool and test partitions are fixed up front.
/// The validation slice is stratified by label. When `attr` is non-empty the
/// split also carries distribution stats and an achieved profile for it.
inline SplitPair partitioned_split(const Manifest& manifest, std::string name, ShiftSpec spec,
                                   const std::vector<std::size_t>& train_pool,
                                   const std::vector<std::pair<std::string, std::vector<std::size_t>>>& parts,
                                   const SplitOptions& opts = {}) {
  std::vector<std::vector<std::size_t>> strata(manifest.label_set().size());
  for (std::size_t i : train_pool) strata[manifest.label_index(manifest.samples()[i].label)].push_back(i);
  Rng rng(spec.seed);
  auto [fit, val] = detail::carve_validation(strata, opts.val_fraction, rng);

  SplitPair out;
  out.name = std::move(name);
  out.train_ids = detail::ids_in_manifest_order(manifest, fit);
  out.val_ids = detail::ids_in_manifest_order(manifest, val);
  // Partitioned test ids are the concatenation of the partitions in order, so
  // the flat list is recoverable from a split file.
  std::vector<std::size_t> all_test;
  for (const auto& [part_name, idx] : parts) {
    if (idx.empty()) fail("test partition '" + part_name + "' is empty");
    out.partitions.push_back({part_name, detail::ids_in_manifest_order(manifest, idx)});
    out.test_ids.insert(out.test_ids.end(), out.partitions.back().ids.begin(), out.partitions.back().ids.end());
    all_test.insert(all_test.end(), idx.begin(), idx.end());
  }
  if (all_test.empty()) fail("test side is empty");
  spec.train_fraction = static_cast<double>(train_pool.size()) /
                        static_cast<double>(train_pool.size() + all_test.size());
  out.spec = std::move(spec);
  if (!out.spec.attr.empty()) {
    out.train_stats = estimate_dist(manifest, out.train_ids, out.spec.attr);
    out.test_stats = estimate_dist(manifest, out.test_ids, out.spec.attr);
    out.achieved = profile_from_stats(*out.train_stats, *out.test_stats, opts.thresholds);
  }
  return out;
}

/// One split per attribute value: train on that value, test on every other
/// value, partitioned per value (schema order).
inline std::vector<std::pair<std::string, SplitPair>> value_holdout_splits(
    const Manifest& manifest, const std::string& attr, std::uint64_t seed = kDefaultSeed,
    std::size_t min_cell_size = 10, const SplitOptions& opts = {}) {
  const auto& values = manifest.values_of(attr);
  if (values.size() < 2) fail("attribute '" + attr + "' needs at least 2 values for hold-out splits");
  const auto& labels = manifest.label_set();

  std::map<std::string, std::vector<std::size_t>> by_value;
  std::map<std::pair<std::string, std::string>, std::size_t> cell_counts;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples()[i];
    const auto& v = s.attributes.at(attr);
    by_value[v].push_back(i);
    ++cell_counts[{v, s.label}];
  }
  for (const auto& v : values) {
    for (const auto& y : labels) {
      const std::size_t n = cell_counts[{v, y}];
      if (n < min_cell_size) {
        fail_infeasible("value '" + v + "' has " + std::to_string(n) + " samples with label '" + y +
                        "', below the minimum cell size " + std::to_string(min_cell_size));
      }
    }
  }

  std::vector<std::pair<std::string, SplitPair>> out;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    const auto& v = values[vi];
    std::vector<std::pair<std::string, std::vector<std::size_t>>> parts;
    for (const auto& other : values) {
      if (other != v) parts.emplace_back(other, by_value[other]);
    }
    ShiftSpec spec{ShiftType::kMarginal, attr, {}, 0.0, 0.0, 0.8, sub_seed(seed, vi)};
    for (const auto& x : values) spec.train_value_weights[x] = (x == v) ? 1.0 : 0.0;
    out.emplace_back(v, partitioned_split(manifest, "holdout-" + v, spec, by_value[v], parts, opts));
  }
  return out;
}

}  // namespace oodtest
