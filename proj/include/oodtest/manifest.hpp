#pragma once

// Attributed dataset manifests and the empirical distributions that every
// split and diagnosis is defined on: P(attr), P(label), P(label | attr).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oodtest/error.hpp"

namespace oodtest {

struct Sample {
  std::string id;
  std::string label;
  std::map<std::string, std::string> attributes;
  std::optional<std::vector<double>> embedding;
  std::optional<std::vector<double>> features;

  bool operator==(const Sample&) const = default;
};

// attribute name -> distinct values in first-occurrence order
using AttributeSchema = std::map<std::string, std::vector<std::string>>;

/// Immutable, validated collection of samples.
///
/// Label set and attribute schema are derived by scanning the samples and keep
/// first-occurrence order. Construction fails on duplicate ids, inconsistent
/// attribute names, inconsistent vector lengths, fewer than two labels, or an
/// empty sample list.
class Manifest {
 public:
  Manifest() = default;

  static Manifest from_samples(std::vector<Sample> samples) {
    Manifest m;
    if (samples.empty()) fail("manifest is empty");
    m.samples_ = std::move(samples);

    const auto& first = m.samples_.front();
    std::set<std::string> label_seen;
    std::map<std::string, std::set<std::string>> value_seen;
    for (const auto& [name, _] : first.attributes) m.schema_[name];
    if (first.embedding) m.embedding_dim_ = first.embedding->size();
    if (first.features) m.feature_dim_ = first.features->size();

    m.index_.reserve(m.samples_.size());
    for (std::size_t i = 0; i < m.samples_.size(); ++i) {
      const Sample& s = m.samples_[i];
      const std::string where = "sample '" + s.id + "'";
      if (s.id.empty()) fail("sample " + std::to_string(i) + " has an empty id");
      if (s.label.empty()) fail(where + " has an empty label");
      if (!m.index_.emplace(s.id, i).second) fail("duplicate id '" + s.id + "'");

      if (s.attributes.size() != m.schema_.size() ||
          !std::equal(s.attributes.begin(), s.attributes.end(), m.schema_.begin(),
                      [](const auto& a, const auto& b) { return a.first == b.first; })) {
        fail(where + " has an attribute-name set different from the first sample");
      }
      if (s.embedding.has_value() != m.embedding_dim_.has_value() ||
          (s.embedding && s.embedding->size() != *m.embedding_dim_)) {
        fail(where + " has inconsistent embedding length");
      }
      if (s.features.has_value() != m.feature_dim_.has_value() ||
          (s.features && s.features->size() != *m.feature_dim_)) {
        fail(where + " has inconsistent feature length");
      }

      if (label_seen.insert(s.label).second) m.labels_.push_back(s.label);
      for (const auto& [name, value] : s.attributes) {
        if (value_seen[name].insert(value).second) m.schema_[name].push_back(value);
      }
    }
    if (m.labels_.size() < 2) fail("manifest needs at least 2 distinct labels");
    if (m.embedding_dim_ == 0u) fail("embedding vectors are zero-dimensional");
    if (m.feature_dim_ == 0u) fail("feature vectors are zero-dimensional");
    return m;
  }

  [[nodiscard]] const std::vector<Sample>& samples() const noexcept { return samples_; }
  [[nodiscard]] const std::vector<std::string>& label_set() const noexcept { return labels_; }
  [[nodiscard]] const AttributeSchema& attribute_schema() const noexcept { return schema_; }
  [[nodiscard]] std::size_t size() const noexcept { return samples_.size(); }
  [[nodiscard]] std::optional<std::size_t> embedding_dim() const noexcept { return embedding_dim_; }
  [[nodiscard]] std::optional<std::size_t> feature_dim() const noexcept { return feature_dim_; }

  [[nodiscard]] bool has_attribute(const std::string& attr) const { return schema_.contains(attr); }

  [[nodiscard]] const std::vector<std::string>& values_of(const std::string& attr) const {
    auto it = schema_.find(attr);
    if (it == schema_.end()) fail("unknown attribute '" + attr + "'");
    return it->second;
  }

  [[nodiscard]] std::optional<std::size_t> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  [[nodiscard]] std::size_t index_of(std::string_view id) const {
    auto idx = find(id);
    if (!idx) fail("id '" + std::string(id) + "' not in manifest");
    return *idx;
  }

  [[nodiscard]] const Sample& at(std::string_view id) const { return samples_[index_of(id)]; }

  [[nodiscard]] std::size_t label_index(std::string_view label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) fail("label '" + std::string(label) + "' not in label set");
    return static_cast<std::size_t>(it - labels_.begin());
  }

  [[nodiscard]] std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.id);
    return out;
  }

  bool operator==(const Manifest& other) const { return samples_ == other.samples_; }

 private:
  std::vector<Sample> samples_;
  std::vector<std::string> labels_;
  AttributeSchema schema_;
  std::optional<std::size_t> embedding_dim_;
  std::optional<std::size_t> feature_dim_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<double> parse_vector(const nlohmann::json& j, const char* field) {
  if (!j.is_array()) fail(std::string("\"") + field + "\" must be an array of numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_number()) fail(std::string("\"") + field + "\" must be an array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

inline Sample parse_sample(const nlohmann::json& j) {
  if (!j.is_object()) fail("record is not an object");
  Sample s;
  auto id = j.find("id");
  if (id == j.end() || !id->is_string()) fail("missing string field \"id\"");
  s.id = id->get<std::string>();
  auto label = j.find("label");
  if (label == j.end() || !label->is_string()) fail("missing string field \"label\"");
  s.label = label->get<std::string>();
  auto attrs = j.find("attributes");
  if (attrs == j.end() || !attrs->is_object()) fail("missing object field \"attributes\"");
  for (const auto& [k, v] : attrs->items()) {
    if (!v.is_string()) fail("attribute '" + k + "' is not a string");
    s.attributes.emplace(k, v.get<std::string>());
  }
  if (auto e = j.find("embedding"); e != j.end() && !e->is_null()) {
    s.embedding = parse_vector(*e, "embedding");
  }
  if (auto f = j.find("features"); f != j.end() && !f->is_null()) {
    s.features = parse_vector(*f, "features");
  }
  return s;
}

inline bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

}  // namespace detail

/// Reads a line-delimited manifest. Blank lines are skipped; parse errors carry
/// the 1-based line number.
inline Manifest load_manifest(std::istream& in) {
  std::vector<Sample> samples;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    Sample s;
    try {
      s = detail::parse_sample(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail("line " + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const Error& e) {
      fail("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(s.id).second) {
      fail("line " + std::to_string(lineno) + ": duplicate id '" + s.id + "'");
    }
    samples.push_back(std::move(s));
  }
  try {
    return Manifest::from_samples(std::move(samples));
  } catch (const Error& e) {
    fail(std::string("invalid manifest: ") + e.what());
  }
}

inline Manifest load_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open manifest '" + path + "'");
  return load_manifest(in);
}

inline void write_manifest(std::ostream& out, const Manifest& manifest) {
  for (const auto& s : manifest.samples()) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["label"] = s.label;
    j["attributes"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : s.attributes) j["attributes"][k] = v;
    if (s.embedding) j["embedding"] = *s.embedding;
    if (s.features) j["features"] = *s.features;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Empirical distributions

struct DistStats {
  std::string attr;
  std::size_t count = 0;
  std::map<std::string, double> p_attr;
  std::map<std::string, double> p_label;
  // Rows exist only for attribute values with nonzero count.
  std::map<std::string, std::map<std::string, double>> p_label_given_attr;
  std::set<std::string> support;

  bool operator==(const DistStats&) const = default;
};

inline DistStats estimate_dist_indices(const Manifest& manifest, std::span<const std::size_t> indices,
                                       const std::string& attr) {
  if (indices.empty()) fail("estimate_dist: empty subset");
  if (!manifest.has_attribute(attr)) fail("estimate_dist: unknown attribute '" + attr + "'");

  std::map<std::string, std::size_t> value_counts;
  std::map<std::string, std::size_t> label_counts;
  std::map<std::string, std::map<std::string, std::size_t>> cell_counts;
  for (std::size_t i : indices) {
    const Sample& s = manifest.samples().at(i);
    const std::string& v = s.attributes.at(attr);
    ++value_counts[v];
    ++label_counts[s.label];
    ++cell_counts[v][s.label];
  }

  DistStats d;
  d.attr = attr;
  d.count = indices.size();
  const auto n = static_cast<double>(indices.size());
  for (const auto& [v, c] : value_counts) {
    d.p_attr[v] = static_cast<double>(c) / n;
    d.support.insert(v);
    auto& row = d.p_label_given_attr[v];
    for (const auto& [y, cy] : cell_counts[v]) row[y] = static_cast<double>(cy) / static_cast<double>(c);
  }
  for (const auto& [y, c] : label_counts) d.p_label[y] = static_cast<double>(c) / n;
  return d;
}

inline std::vector<std::size_t> resolve_ids(const Manifest& manifest, std::span<const std::string> ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(manifest.index_of(id));
  return out;
}

inline DistStats estimate_dist(const Manifest& manifest, std::span<const std::string> ids,
                               const std::string& attr) {
  if (ids.empty()) fail("estimate_dist: empty subset");
  const auto idx = resolve_ids(manifest, ids);
  return estimate_dist_indices(manifest, idx, attr);
}

// ---------------------------------------------------------------------------
// Shift profiles

enum class InferredShift { kNone, kMarginal, kConditional, kJoint };

inline const char* to_string(InferredShift t) {
  switch (t) {
    case InferredShift::kNone: return "none";
    case InferredShift::kMarginal: return "marginal";
    case InferredShift::kConditional: return "conditional";
    case InferredShift::kJoint: return "joint";
  }
  return "none";
}

inline InferredShift inferred_shift_from_string(std::string_view s) {
  if (s == "none") return InferredShift::kNone;
  if (s == "marginal") return InferredShift::kMarginal;
  if (s == "conditional") return InferredShift::kConditional;
  if (s == "joint") return InferredShift::kJoint;
  fail("unknown inferred shift type '" + std::string(s) + "'");
}

struct ShiftThresholds {
  double marginal = 0.05;     // on tv_attr
  double conditional = 0.05;  // on max_cond_gap
  double label = 0.02;        // on tv_label
};

struct ShiftProfile {
  double tv_attr = 0.0;
  double max_cond_gap = 0.0;
  double tv_label = 0.0;
  InferredShift inferred_type = InferredShift::kNone;

  bool operator==(const ShiftProfile&) const = default;
};

/// Half the L1 distance; keys missing from one side count as probability 0.
inline double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q) {
  double sum = 0.0;
  auto pi = p.begin();
  auto qi = q.begin();
  while (pi != p.end() || qi != q.end()) {
    if (qi == q.end() || (pi != p.end() && pi->first < qi->first)) {
      sum += std::abs(pi->second);
      ++pi;
    } else if (pi == p.end() || qi->first < pi->first) {
      sum += std::abs(qi->second);
      ++qi;
    } else {
      sum += std::abs(pi->second - qi->second);
      ++pi;
      ++qi;
    }
  }
  return std::clamp(0.5 * sum, 0.0, 1.0);
}

inline double linf_distance(const std::map<std::string, double>& p, const std::map<std::string, double>& q) {
  double m = 0.0;
  for (const auto& [k, v] : p) {
    auto it = q.find(k);
    m = std::max(m, std::abs(v - (it == q.end() ? 0.0 : it->second)));
  }
  for (const auto& [k, v] : q) {
    if (!p.contains(k)) m = std::max(m, std::abs(v));
  }
  return m;
}

inline InferredShift infer_shift(double tv_attr, double max_cond_gap, const ShiftThresholds& t) {
  const bool marginal = tv_attr > t.marginal;
  const bool conditional = max_cond_gap > t.conditional;
  if (marginal && conditional) return InferredShift::kJoint;
  if (marginal) return InferredShift::kMarginal;
  if (conditional) return InferredShift::kConditional;
  return InferredShift::kNone;
}

inline ShiftProfile profile_from_stats(const DistStats& train, const DistStats& test,
                                       const ShiftThresholds& thresholds = {}) {
  ShiftProfile p;
  p.tv_attr = total_variation(train.p_attr, test.p_attr);
  p.tv_label = total_variation(train.p_label, test.p_label);
  for (const auto& [v, row] : train.p_label_given_attr) {
    auto it = test.p_label_given_attr.find(v);
    if (it == test.p_label_given_attr.end()) continue;
    p.max_cond_gap = std::max(p.max_cond_gap, linf_distance(row, it->second));
  }
  p.max_cond_gap = std::clamp(p.max_cond_gap, 0.0, 1.0);
  p.inferred_type = infer_shift(p.tv_attr, p.max_cond_gap, thresholds);
  return p;
}

inline ShiftProfile shift_profile(const Manifest& manifest, std::span<const std::string> train_ids,
                                  std::span<const std::string> test_ids, const std::string& attr,
                                  const ShiftThresholds& thresholds = {}) {
  if (train_ids.empty() || test_ids.empty()) fail("shift_profile: empty side");
  const auto train_idx = resolve_ids(manifest, train_ids);
  const auto test_idx = resolve_ids(manifest, test_ids);
  std::unordered_set<std::size_t> train_set(train_idx.begin(), train_idx.end());
  for (std::size_t i : test_idx) {
    if (train_set.contains(i)) {
      fail("shift_profile: id '" + manifest.samples()[i].id + "' is on both sides");
    }
  }
  return profile_from_stats(estimate_dist_indices(manifest, train_idx, attr),
                            estimate_dist_indices(manifest, test_idx, attr), thresholds);
}

}  // namespace oodtest
