#pragma once

// Split files: one JSON document per split, consumed by eval and bugfinder.
//
//   {"name", "spec": {...}, "train": [ids], "val": [ids],
//    "test": [ids] | {"partition": [ids], ...},
//    "achieved": {"tv_attr", "max_cond_gap", "tv_label", "inferred_type"},
//    "train_stats": {...}, "test_stats": {...}}
//
// "achieved" and the stats blocks are omitted for splits without an attribute
// (cluster protocol).

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "oodtest/error.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/splitgen.hpp"

namespace oodtest {

using ojson = nlohmann::ordered_json;

namespace detail {

inline ojson dist_to_json(const DistStats& d) {
  ojson j;
  j["attr"] = d.attr;
  j["count"] = d.count;
  j["p_attr"] = ojson::object();
  for (const auto& [k, v] : d.p_attr) j["p_attr"][k] = v;
  j["p_label"] = ojson::object();
  for (const auto& [k, v] : d.p_label) j["p_label"][k] = v;
  j["p_label_given_attr"] = ojson::object();
  for (const auto& [k, row] : d.p_label_given_attr) {
    ojson r = ojson::object();
    for (const auto& [y, p] : row) r[y] = p;
    j["p_label_given_attr"][k] = std::move(r);
  }
  return j;
}

inline std::map<std::string, double> prob_map(const ojson& j) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : j.items()) out[k] = v.get<double>();
  return out;
}

inline DistStats dist_from_json(const ojson& j) {
  DistStats d;
  d.attr = j.at("attr").get<std::string>();
  d.count = j.at("count").get<std::size_t>();
  d.p_attr = prob_map(j.at("p_attr"));
  d.p_label = prob_map(j.at("p_label"));
  for (const auto& [k, row] : j.at("p_label_given_attr").items()) d.p_label_given_attr[k] = prob_map(row);
  for (const auto& [k, _] : d.p_attr) d.support.insert(k);
  return d;
}

}  // namespace detail

inline ojson profile_to_json(const ShiftProfile& p) {
  ojson j;
  j["tv_attr"] = p.tv_attr;
  j["max_cond_gap"] = p.max_cond_gap;
  j["tv_label"] = p.tv_label;
  j["inferred_type"] = to_string(p.inferred_type);
  return j;
}

inline ShiftProfile profile_from_json(const ojson& j) {
  ShiftProfile p;
  p.tv_attr = j.at("tv_attr").get<double>();
  p.max_cond_gap = j.at("max_cond_gap").get<double>();
  p.tv_label = j.at("tv_label").get<double>();
  p.inferred_type = inferred_shift_from_string(j.at("inferred_type").get<std::string>());
  return p;
}

inline ojson spec_to_json(const ShiftSpec& s) {
  ojson j;
  j["shift_type"] = to_string(s.shift_type);
  j["attr"] = s.attr;
  j["train_value_weights"] = ojson::object();
  for (const auto& [k, v] : s.train_value_weights) j["train_value_weights"][k] = v;
  j["correlation_train"] = s.correlation_train;
  j["correlation_test"] = s.correlation_test;
  j["train_fraction"] = s.train_fraction;
  j["seed"] = s.seed;
  return j;
}

inline ShiftSpec spec_from_json(const ojson& j) {
  ShiftSpec s;
  s.shift_type = shift_type_from_string(j.at("shift_type").get<std::string>());
  s.attr = j.at("attr").get<std::string>();
  s.train_value_weights = detail::prob_map(j.at("train_value_weights"));
  s.correlation_train = j.at("correlation_train").get<double>();
  s.correlation_test = j.at("correlation_test").get<double>();
  s.train_fraction = j.at("train_fraction").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline ojson split_to_json(const SplitPair& sp) {
  ojson j;
  j["name"] = sp.name;
  j["spec"] = spec_to_json(sp.spec);
  j["train"] = sp.train_ids;
  j["val"] = sp.val_ids;
  if (sp.partitioned()) {
    j["test"] = ojson::object();
    for (const auto& p : sp.partitions) j["test"][p.name] = p.ids;
  } else {
    j["test"] = sp.test_ids;
  }
  if (sp.achieved) j["achieved"] = profile_to_json(*sp.achieved);
  if (sp.train_stats) j["train_stats"] = detail::dist_to_json(*sp.train_stats);
  if (sp.test_stats) j["test_stats"] = detail::dist_to_json(*sp.test_stats);
  return j;
}

inline SplitPair split_from_json(const ojson& j) {
  SplitPair sp;
  try {
    sp.name = j.at("name").get<std::string>();
    sp.spec = spec_from_json(j.at("spec"));
    sp.train_ids = j.at("train").get<std::vector<std::string>>();
    if (j.contains("val")) sp.val_ids = j.at("val").get<std::vector<std::string>>();
    const auto& test = j.at("test");
    if (test.is_object()) {
      for (const auto& [name, ids] : test.items()) {
        sp.partitions.push_back({name, ids.get<std::vector<std::string>>()});
        sp.test_ids.insert(sp.test_ids.end(), sp.partitions.back().ids.begin(), sp.partitions.back().ids.end());
      }
    } else {
      sp.test_ids = test.get<std::vector<std::string>>();
    }
    if (j.contains("achieved")) sp.achieved = profile_from_json(j.at("achieved"));
    if (j.contains("train_stats")) sp.train_stats = detail::dist_from_json(j.at("train_stats"));
    if (j.contains("test_stats")) sp.test_stats = detail::dist_from_json(j.at("test_stats"));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed split file: ") + e.what());
  }
  if (sp.train_ids.empty() || sp.test_ids.empty()) fail("split '" + sp.name + "' has an empty side");
  return sp;
}

inline void write_split(std::ostream& out, const SplitPair& sp) { out << split_to_json(sp).dump(2) << '\n'; }

inline SplitPair load_split(std::istream& in) {
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed split file: ") + e.what());
  }
  return split_from_json(j);
}

inline SplitPair load_split_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open split file '" + path + "'");
  return load_split(in);
}

}  // namespace oodtest
