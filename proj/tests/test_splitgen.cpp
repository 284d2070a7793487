#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

#include "test_support.hpp"

using namespace oodtest;
using namespace testing_support;

namespace {

const Manifest& balanced() {
  static const Manifest m = balanced_manifest();
  return m;
}

const Manifest& hair_manifest() {
  static const Manifest m = grid_manifest({"black", "blond", "brown", "gray"}, {"female", "male"}, 500, "hair");
  return m;
}

std::set<std::string> values_in(const Manifest& m, const std::vector<std::string>& ids, const std::string& attr) {
  std::set<std::string> out;
  for (const auto& id : ids) out.insert(m.at(id).attributes.at(attr));
  return out;
}

void expect_structural(const Manifest& m, const SplitPair& sp) {
  ASSERT_FALSE(sp.train_ids.empty());
  ASSERT_FALSE(sp.test_ids.empty());
  std::set<std::string> seen;
  for (const auto* side : {&sp.train_ids, &sp.val_ids, &sp.test_ids}) {
    for (const auto& id : *side) {
      EXPECT_TRUE(m.find(id).has_value()) << id;
      EXPECT_TRUE(seen.insert(id).second) << "id on two sides: " << id;
    }
  }
  ASSERT_TRUE(sp.achieved.has_value());
  EXPECT_LE(sp.achieved->tv_label, 0.02);
  // achieved profile is recomputable from the ids
  const auto again = shift_profile(m, sp.train_ids, sp.test_ids, sp.spec.attr);
  EXPECT_EQ(again, *sp.achieved);
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::kIo;
}

}  // namespace

TEST(MarginalSplit, ExcludedValuesGoToTest) {
  const auto& m = hair_manifest();
  const auto sp = marginal_split(m, "hair", {{"black", 1}, {"blond", 1}, {"brown", 0}, {"gray", 0}}, 0.8, 7);
  expect_structural(m, sp);
  EXPECT_EQ(values_in(m, sp.train_ids, "hair"), (std::set<std::string>{"black", "blond"}));
  EXPECT_EQ(values_in(m, sp.test_ids, "hair"), (std::set<std::string>{"brown", "gray"}));
  for (const auto* stats : {&*sp.train_stats, &*sp.test_stats}) {
    for (const auto& [v, row] : stats->p_label_given_attr) {
      EXPECT_NEAR(row.at("female"), 0.5, 0.02) << v;
    }
  }
  EXPECT_EQ(sp.achieved->inferred_type, InferredShift::kMarginal);
}

TEST(MarginalSplit, UniformWeightsAreRejected) {
  const auto& m = balanced();
  EXPECT_EQ(kind_of([&] { marginal_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 1}, {"v4", 1}}); }),
            ErrorKind::kValidation);
  EXPECT_EQ(kind_of([&] { marginal_split(m, "attr", {}); }), ErrorKind::kValidation);
  EXPECT_THROW(marginal_split(m, "attr", {{"v1", -1}, {"v2", 1}}), Error);
  EXPECT_THROW(marginal_split(m, "nope", {{"v1", 1}}), Error);
}

TEST(MarginalSplit, AchievesRequestedProportions) {
  const auto& m = balanced();
  const auto sp = marginal_split(m, "attr", {{"v1", 0.4}, {"v2", 0.3}, {"v3", 0.2}, {"v4", 0.1}}, 0.8, 1);
  expect_structural(m, sp);
  const auto d = estimate_dist(m, sp.train_ids, "attr");
  const double want[] = {0.4, 0.3, 0.2, 0.1};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(d.p_attr.at("v" + std::to_string(i + 1)), want[i], 0.02);
  EXPECT_LE(sp.achieved->max_cond_gap, 0.05);
  // the test side leans on the values that training down-weights
  const auto t = estimate_dist(m, sp.test_ids, "attr");
  EXPECT_GT(t.p_attr.at("v4"), t.p_attr.contains("v1") ? t.p_attr.at("v1") : 0.0);
}

TEST(MarginalSplit, EmptyRequiredCellIsInfeasible) {
  std::vector<Sample> samples;
  std::size_t n = 0;
  for (const char* v : {"v1", "v2", "v3", "v4"}) {
    for (const char* y : {"a", "b"}) {
      if (std::string(v) == "v1" && std::string(y) == "a") continue;
      for (int r = 0; r < 50; ++r) samples.push_back({"s" + std::to_string(n++), y, {{"attr", v}}, {}, {}});
    }
  }
  const auto m = Manifest::from_samples(samples);
  try {
    marginal_split(m, "attr", {{"v1", 0.4}, {"v2", 0.3}, {"v3", 0.2}, {"v4", 0.1}});
    FAIL() << "expected an infeasible split";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
    EXPECT_NE(std::string(e.what()).find("v1"), std::string::npos) << e.what();
  }
}

TEST(MarginalSplit, ScarceCellReportsBindingCell) {
  // v1 has only 3 samples of label a: a 2% tolerance cannot be met at any size
  std::vector<Sample> samples;
  std::size_t n = 0;
  for (const char* v : {"v1", "v2"}) {
    for (const char* y : {"a", "b"}) {
      const int count = (std::string(v) == "v1" && std::string(y) == "a") ? 3 : 400;
      for (int r = 0; r < count; ++r) samples.push_back({"s" + std::to_string(n++), y, {{"attr", v}}, {}, {}});
    }
  }
  const auto m = Manifest::from_samples(samples);
  try {
    marginal_split(m, "attr", {{"v1", 0.9}, {"v2", 0.1}});
    FAIL() << "expected an infeasible split";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
    EXPECT_NE(std::string(e.what()).find("binding cell"), std::string::npos) << e.what();
  }
}

TEST(ConditionalSplit, FullReversal) {
  const auto& m = balanced();
  const auto sp = conditional_split(m, "attr", 1.0, -1.0, 0.8, 3);
  expect_structural(m, sp);
  // sorted pairing: v1, v3 -> a and v2, v4 -> b
  const auto& tr = *sp.train_stats;
  const auto& te = *sp.test_stats;
  EXPECT_DOUBLE_EQ(tr.p_label_given_attr.at("v1").at("a"), 1.0);
  EXPECT_DOUBLE_EQ(tr.p_label_given_attr.at("v3").at("a"), 1.0);
  EXPECT_DOUBLE_EQ(tr.p_label_given_attr.at("v2").at("b"), 1.0);
  EXPECT_EQ(te.p_label_given_attr.at("v1").count("a") ? te.p_label_given_attr.at("v1").at("a") : 0.0, 0.0);
  for (const auto& [v, p] : tr.p_attr) EXPECT_NEAR(p, 0.25, 0.02);
  for (const auto& [v, p] : te.p_attr) EXPECT_NEAR(p, 0.25, 0.02);
  EXPECT_EQ(sp.achieved->inferred_type, InferredShift::kConditional);
  EXPECT_DOUBLE_EQ(sp.achieved->max_cond_gap, 1.0);
}

TEST(ConditionalSplit, ZeroCorrelationIsInDistribution) {
  const auto& m = balanced();
  const auto sp = conditional_split(m, "attr", 0.0, 0.0, 0.8, 5);
  expect_structural(m, sp);
  EXPECT_LE(sp.achieved->max_cond_gap, 0.05);
  EXPECT_LE(sp.achieved->tv_attr, 0.05);
  EXPECT_EQ(sp.achieved->inferred_type, InferredShift::kNone);
}

TEST(ConditionalSplit, PartialCorrelationUsesMixtureRows) {
  // P(paired | v) = (1 - rho) / 2 + rho for two balanced labels
  const auto m = balanced_manifest(5000);
  const auto sp = conditional_split(m, "attr", 0.8, 0.0, 0.8, 9);
  expect_structural(m, sp);
  const auto& tr = *sp.train_stats;
  const auto& te = *sp.test_stats;
  EXPECT_NEAR(tr.p_label_given_attr.at("v1").at("a"), 0.9, 0.02);
  EXPECT_NEAR(tr.p_label_given_attr.at("v2").at("b"), 0.9, 0.02);
  for (const auto& [v, row] : te.p_label_given_attr) {
    for (const auto& [y, p] : row) EXPECT_NEAR(p, 0.5, 0.02);
  }
}

TEST(ConditionalSplit, RejectsBadCorrelationsAndWeights) {
  const auto& m = balanced();
  EXPECT_THROW(conditional_split(m, "attr", 1.2, 0.0), Error);
  EXPECT_THROW(conditional_split(m, "attr", 0.5, -1.5), Error);
  EXPECT_THROW(conditional_split(m, "attr", -0.5, 0.0), Error);
  ShiftSpec spec{ShiftType::kConditional, "attr", {{"v1", 2}, {"v2", 1}, {"v3", 1}, {"v4", 1}}, 1.0, -1.0, 0.8, 1};
  EXPECT_THROW(make_split(m, spec), Error);
  ShiftSpec bad_fraction{ShiftType::kConditional, "attr", {}, 1.0, -1.0, 1.0, 1};
  EXPECT_THROW(make_split(m, bad_fraction), Error);
}

TEST(ConditionalSplit, ThreeLabelsStayBalanced) {
  const auto m = grid_manifest({"p", "q", "r", "s", "t", "u"}, {"x", "y", "z"}, 300);
  const auto sp = conditional_split(m, "attr", 1.0, -1.0, 0.8, 4);
  expect_structural(m, sp);
  EXPECT_GE(sp.achieved->max_cond_gap, 0.99);
}

TEST(PairingRule, ReversalLeavesNoValueOnItsLabel) {
  for (std::size_t k = 2; k <= 7; ++k) {
    for (std::size_t v = 0; v < 3 * k; ++v) {
      EXPECT_EQ(detail::paired_label(v, k, false), v % k);
      EXPECT_NE(detail::paired_label(v, k, true), v % k);
    }
  }
}

TEST(Apportion, LargestRemainder) {
  const std::vector<double> w{0.5, 0.25, 0.25};
  EXPECT_EQ(detail::apportion(3, w), (std::vector<std::size_t>{1, 1, 1}));
  const std::vector<double> tie{0.55, 0.45};
  EXPECT_EQ(detail::apportion(10, tie), (std::vector<std::size_t>{6, 4}));
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> ws(1 + rng() % 8);
    for (auto& x : ws) x = uniform01(rng) < 0.2 ? 0.0 : uniform01(rng);
    if (std::accumulate(ws.begin(), ws.end(), 0.0) == 0.0) ws[0] = 1.0;
    const std::size_t total = rng() % 1000;
    const auto out = detail::apportion(total, ws);
    EXPECT_EQ(std::accumulate(out.begin(), out.end(), std::size_t{0}), total);
    const double sum = std::accumulate(ws.begin(), ws.end(), 0.0);
    for (std::size_t i = 0; i < ws.size(); ++i) {
      EXPECT_LT(std::abs(static_cast<double>(out[i]) - static_cast<double>(total) * ws[i] / sum), 1.0);
      if (ws[i] == 0.0) {
        EXPECT_EQ(out[i], 0u);
      }
    }
  }
}

TEST(JointSplit, ExcludedValuesPlusReversal) {
  const auto& m = balanced();
  const auto sp = joint_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 1.0, -1.0, 0.8, 2);
  expect_structural(m, sp);
  EXPECT_EQ(sp.achieved->inferred_type, InferredShift::kJoint);
}

TEST(JointSplit, NoShiftRequested) {
  const auto& m = balanced();
  EXPECT_THROW(joint_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 1}, {"v4", 1}}, 0.0, 0.0), Error);
  // a marginal-only request is not a joint shift
  EXPECT_THROW(joint_split(m, "attr", {{"v1", 0.4}, {"v2", 0.3}, {"v3", 0.2}, {"v4", 0.1}}, 0.0, 0.0), Error);
}

TEST(JointSplit, MidLevelExceedsBothThresholds) {
  const auto& m = balanced();
  const auto ladder = canonical_ladder(m, "attr", ShiftType::kJoint);
  const auto sp = make_split(m, level_spec("attr", ShiftType::kJoint, ladder[1], 0.8, 8));
  expect_structural(m, sp);
  EXPECT_GT(sp.achieved->tv_attr, 0.05);
  EXPECT_GT(sp.achieved->max_cond_gap, 0.05);
}

// Property: every constructor honors its shift-type contract across seeds.
TEST(SplitProperties, ContractsAcrossSeeds) {
  const auto& m = balanced();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mar = marginal_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 0.8, seed);
    expect_structural(m, mar);
    EXPECT_GE(mar.achieved->tv_attr, 0.3);
    EXPECT_LE(mar.achieved->max_cond_gap, 0.05);

    const auto con = conditional_split(m, "attr", 1.0, -1.0, 0.8, seed);
    expect_structural(m, con);
    EXPECT_LE(con.achieved->tv_attr, 0.05);
    EXPECT_GE(con.achieved->max_cond_gap, 0.3);

    const auto joi = joint_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 1.0, -1.0, 0.8, seed);
    expect_structural(m, joi);
    EXPECT_GE(joi.achieved->tv_attr, 0.3);
    EXPECT_GE(joi.achieved->max_cond_gap, 0.3);
  }
}

TEST(SplitProperties, ValidationSliceMatchesTraining) {
  const auto& m = balanced();
  const auto sp = marginal_split(m, "attr", {{"v1", 0.4}, {"v2", 0.3}, {"v3", 0.2}, {"v4", 0.1}}, 0.8, 6);
  const double n_fit = static_cast<double>(sp.train_ids.size());
  const double n_val = static_cast<double>(sp.val_ids.size());
  EXPECT_NEAR(n_val / (n_fit + n_val), 0.1, 0.01);
  const auto profile = shift_profile(m, sp.train_ids, sp.val_ids, "attr");
  EXPECT_LE(profile.tv_attr, 0.05);
  EXPECT_LE(profile.max_cond_gap, 0.1);
}

TEST(SplitProperties, DeterministicGivenSeed) {
  const auto& m = balanced();
  const ShiftSpec spec{ShiftType::kJoint, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 1.0, -1.0, 0.8, 77};
  const auto a = make_split(m, spec);
  const auto b = make_split(m, spec);
  EXPECT_EQ(a, b);
  std::ostringstream sa;
  std::ostringstream sb;
  write_split(sa, a);
  write_split(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  auto other = spec;
  other.seed = 78;
  EXPECT_NE(make_split(m, other).train_ids, a.train_ids);
}

TEST(SplitProperties, SelectionIgnoresFeatureContent) {
  const auto& plain = balanced();
  std::vector<Sample> samples = plain.samples();
  Rng rng(5);
  for (auto& s : samples) s.embedding = std::vector<double>{standard_normal(rng), standard_normal(rng)};
  const auto embedded = Manifest::from_samples(samples);
  const auto a = conditional_split(plain, "attr", 0.6, -0.6, 0.8, 12);
  const auto b = conditional_split(embedded, "attr", 0.6, -0.6, 0.8, 12);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.test_ids, b.test_ids);
}

TEST(LevelSeries, MarginalLadderIncreasesTv) {
  const auto& m = balanced();
  const auto ladder = canonical_ladder(m, "attr", ShiftType::kMarginal);
  ASSERT_EQ(ladder.size(), 4u);
  const auto series = level_series(m, "attr", ShiftType::kMarginal, ladder, 21);
  ASSERT_EQ(series.size(), 4u);
  for (std::size_t i = 0; i < series.size(); ++i) {
    EXPECT_EQ(series[i].name, "M" + std::to_string(i + 1));
    expect_structural(m, series[i]);
    if (i > 0) {
      EXPECT_GT(series[i].achieved->tv_attr, series[i - 1].achieved->tv_attr);
    }
  }
}

TEST(LevelSeries, ConditionalLadderNonDecreasingGap) {
  const auto& m = balanced();
  const auto ladder = canonical_ladder(m, "attr", ShiftType::kConditional);
  ASSERT_EQ(ladder.size(), 6u);
  const auto series = level_series(m, "attr", ShiftType::kConditional, ladder, 22);
  for (std::size_t i = 0; i < series.size(); ++i) {
    EXPECT_EQ(series[i].name, "C" + std::to_string(i + 1));
    EXPECT_EQ(series[i].spec.correlation_test, -series[i].spec.correlation_train);
    if (i > 0) {
      EXPECT_GE(series[i].achieved->max_cond_gap, series[i - 1].achieved->max_cond_gap);
    }
  }
  EXPECT_LE(series.front().achieved->max_cond_gap, 0.05);
  EXPECT_DOUBLE_EQ(series.back().achieved->max_cond_gap, 1.0);
}

TEST(LevelSeries, SingleLevelMatchesConstructor) {
  const auto& m = balanced();
  const LevelParams level{{{"v1", 0.7}, {"v2", 0.3}, {"v3", 0}, {"v4", 0}}, 0.0, 0.0};
  const auto series = level_series(m, "attr", ShiftType::kMarginal, std::span(&level, 1), 31);
  ASSERT_EQ(series.size(), 1u);
  EXPECT_EQ(series[0], make_split(m, level_spec("attr", ShiftType::kMarginal, level, 0.8, 31), "M1"));
}

TEST(LevelSeries, NonMonotoneLevelsRejected) {
  const auto& m = balanced();
  auto ladder = canonical_ladder(m, "attr", ShiftType::kMarginal);
  std::swap(ladder[1], ladder[2]);
  EXPECT_THROW(level_series(m, "attr", ShiftType::kMarginal, ladder, 1), Error);
  EXPECT_THROW(level_series(m, "attr", ShiftType::kMarginal, std::vector<LevelParams>{}, 1), Error);
  std::vector<LevelParams> repeated{{{}, 0.4, -0.4}, {{}, 0.4, -0.4}};
  EXPECT_THROW(level_series(m, "attr", ShiftType::kConditional, repeated, 1), Error);
}

TEST(LevelSeries, OtherValueCountsInterpolate) {
  const auto ladder = canonical_marginal_ladder({"c", "a", "b"});
  ASSERT_EQ(ladder.size(), 4u);
  EXPECT_DOUBLE_EQ(ladder.back().weights.at("a"), 1.0);
  EXPECT_DOUBLE_EQ(ladder.back().weights.at("c"), 0.0);
  for (const auto& l : ladder) {
    double s = 0;
    for (const auto& [_, w] : l.weights) s += w;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Holdouts, FourColorsGiveFourSplits) {
  const auto m = grid_manifest({"R", "Y", "G", "B"}, {"0", "1", "2"}, 30, "color");
  const auto splits = value_holdout_splits(m, "color", 3);
  ASSERT_EQ(splits.size(), 4u);
  EXPECT_EQ(splits[0].first, "R");
  EXPECT_EQ(splits[0].second.name, "holdout-R");
  std::vector<std::string> names;
  for (const auto& p : splits[0].second.partitions) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"Y", "G", "B"}));
  for (const auto& [value, sp] : splits) {
    EXPECT_EQ(values_in(m, sp.train_ids, "color"), std::set<std::string>{value});
    EXPECT_EQ(values_in(m, sp.val_ids, "color"), std::set<std::string>{value});
    std::set<std::string> seen(sp.train_ids.begin(), sp.train_ids.end());
    for (const auto& id : sp.val_ids) EXPECT_TRUE(seen.insert(id).second);
    for (const auto& id : sp.test_ids) EXPECT_TRUE(seen.insert(id).second);
    EXPECT_EQ(seen.size(), m.size());
    for (const auto& part : sp.partitions) {
      const auto d = estimate_dist(m, part.ids, "color");
      for (const auto& [_, p] : d.p_label) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
    }
  }
}

TEST(Holdouts, TwoValues) {
  const auto m = grid_manifest({"x", "y"}, {"a", "b"}, 20);
  const auto splits = value_holdout_splits(m, "attr");
  ASSERT_EQ(splits.size(), 2u);
  ASSERT_EQ(splits[0].second.partitions.size(), 1u);
  EXPECT_EQ(splits[0].second.partitions[0].name, "y");
  EXPECT_EQ(splits[1].second.partitions[0].name, "x");
}

TEST(Holdouts, SmallCellsAndSingleValue) {
  const auto m = grid_manifest({"x", "y"}, {"a", "b"}, 5);
  EXPECT_EQ(kind_of([&] { value_holdout_splits(m, "attr"); }), ErrorKind::kInfeasible);
  EXPECT_NO_THROW(value_holdout_splits(m, "attr", 1, 5));
  const auto single = grid_manifest({"x"}, {"a", "b"}, 20);
  EXPECT_THROW(value_holdout_splits(single, "attr"), Error);
}

TEST(SplitFile, RoundTrip) {
  const auto& m = balanced();
  const auto sp = joint_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 1.0, -1.0, 0.8, 2);
  std::ostringstream out;
  write_split(out, sp);
  std::istringstream in(out.str());
  EXPECT_EQ(load_split(in), sp);

  const auto holdouts = value_holdout_splits(grid_manifest({"x", "y", "z"}, {"a", "b"}, 20), "attr");
  std::ostringstream part_out;
  write_split(part_out, holdouts[0].second);
  std::istringstream part_in(part_out.str());
  EXPECT_EQ(load_split(part_in), holdouts[0].second);
}

TEST(SplitFile, RejectsMalformedDocuments) {
  std::istringstream garbage("{not json");
  EXPECT_THROW(load_split(garbage), Error);
  std::istringstream missing(R"({"name":"x"})");
  EXPECT_THROW(load_split(missing), Error);
  EXPECT_THROW(load_split_file("/nonexistent/split.json"), Error);
}
