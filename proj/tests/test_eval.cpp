#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "test_support.hpp"

using namespace oodtest;
using namespace testing_support;

namespace {

double round2(double x) { return std::round(x * 100.0) / 100.0; }

Manifest four_samples() {
  std::vector<Sample> s;
  for (int i = 0; i < 4; ++i) s.push_back({"id" + std::to_string(i), i % 2 ? "b" : "a", {{"attr", "x"}}, {}, {}});
  return Manifest::from_samples(s);
}

PredictionSet predict_all(const Manifest& m, const std::string& model, const std::function<bool(std::size_t)>& right) {
  PredictionSet ps{model, {}, {}};
  const auto& labels = m.label_set();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& s = m.samples()[i];
    const auto wrong = s.label == labels[0] ? labels[1] : labels[0];
    ps.predictions[s.id] = right(i) ? s.label : wrong;
  }
  return ps;
}

SplitPair manual_split(std::vector<std::string> val, std::vector<std::string> test) {
  SplitPair sp;
  sp.name = "manual";
  sp.spec.attr = "attr";
  sp.val_ids = std::move(val);
  sp.test_ids = std::move(test);
  return sp;
}

}  // namespace

TEST(Accuracy, HandCounts) {
  const auto m = four_samples();
  const auto ids = m.ids();
  EXPECT_DOUBLE_EQ(accuracy(predict_all(m, "x", [](std::size_t) { return true; }), m, ids), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(predict_all(m, "x", [](std::size_t) { return false; }), m, ids), 0.0);
  const auto three = predict_all(m, "x", [](std::size_t i) { return i != 2; });
  EXPECT_DOUBLE_EQ(accuracy(three, m, ids), 0.75);
  EXPECT_EQ(accuracy_fraction(three, m, ids), (Fraction{3, 4}));
}

TEST(Accuracy, MissingPredictionsReportCountAndFirst) {
  const auto m = four_samples();
  auto ps = predict_all(m, "x", [](std::size_t) { return true; });
  ps.predictions.erase("id1");
  ps.predictions.erase("id3");
  try {
    accuracy(ps, m, m.ids());
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2 ids"), std::string::npos) << msg;
    EXPECT_NE(msg.find("id1"), std::string::npos) << msg;
  }
  EXPECT_THROW(accuracy(ps, m, std::vector<std::string>{}), Error);
}

TEST(Accuracy, PermutationInvariant) {
  const auto m = balanced_manifest(20);
  Rng rng(4);
  const auto ps = predict_all(m, "x", [&](std::size_t) { return uniform01(rng) < 0.6; });
  auto ids = m.ids();
  const double base = accuracy(ps, m, ids);
  for (int t = 0; t < 20; ++t) {
    shuffle_in_place(ids, rng);
    EXPECT_EQ(accuracy(ps, m, ids), base);
  }
}

TEST(DropPercent, PrintedExamples) {
  EXPECT_DOUBLE_EQ(round2(drop_percent(96.68, 84.64)), 12.45);
  EXPECT_DOUBLE_EQ(round2(drop_percent(99.36, 25.27)), 74.57);
  EXPECT_DOUBLE_EQ(drop_percent(0.7, 0.7), 0.0);
  EXPECT_NEAR(drop_percent(0.9668, 0.8464), drop_percent(96.68, 84.64), 1e-9);
  EXPECT_THROW(drop_percent(0.0, 0.5), Error);
}

TEST(DropPercent, ReproducesTableOneRows) {
  const auto rows = read_csv(fixture("table1.csv"));
  ASSERT_EQ(rows.size(), 39u);
  for (const auto& r : rows) {
    const double got = round2(drop_percent(std::stod(r[3]), std::stod(r[4])));
    EXPECT_NEAR(got, std::stod(r[5]), 0.01 + 1e-9) << r[0] << " " << r[1] << " " << r[2];
  }
}

TEST(DropPercent, ClusteredProtocolRowsDropBelowId) {
  const auto rows = read_csv(fixture("table3.csv"));
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    for (int model = 0; model < 2; ++model) {
      const double id = std::stod(r[1 + model]);
      const double ood = std::stod(r[3 + model]);
      const double drop = drop_percent(id, ood);
      EXPECT_NEAR(id - drop * id / 100.0, ood, 1e-9);
      EXPECT_GT(drop, 0.0) << r[0];
    }
  }
}

TEST(Predictions, LoadGroupsByModel) {
  std::istringstream in(R"({"id":"id0","model":"m1","predicted":"a"}
{"id":"id0","model":"m2","predicted":"b","scores":{"a":0.25,"b":0.75}}

{"id":"id1","model":"m1","predicted":"b"}
)");
  const auto sets = load_predictions(in);
  ASSERT_EQ(sets.size(), 2u);
  EXPECT_EQ(sets[0].model_id, "m1");
  EXPECT_EQ(sets[0].predictions.size(), 2u);
  EXPECT_DOUBLE_EQ(sets[1].scores.at("id0").at("b"), 0.75);
  std::ostringstream out;
  write_predictions(out, sets[1]);
  std::istringstream back(out.str());
  EXPECT_EQ(load_predictions(back)[0], sets[1]);
}

TEST(Predictions, RejectsBadRecords) {
  auto bad = [](const std::string& text) {
    std::istringstream in(text);
    return load_predictions(in);
  };
  EXPECT_THROW(bad(R"({"id":"x","model":"m","predicted":"a","scores":{"a":0.5,"b":0.4}})"), Error);
  EXPECT_THROW(bad(R"({"id":"x","model":"m"})"), Error);
  EXPECT_THROW(bad("{oops"), Error);
  EXPECT_THROW(bad(R"({"id":"x","model":"m","predicted":"a"}
{"id":"x","model":"m","predicted":"b"})"),
               Error);
  const auto m = four_samples();
  PredictionSet ps{"m", {{"id0", "zebra"}}, {}};
  EXPECT_THROW(validate_predictions(ps, m), Error);
}

TEST(EvalSuite, SixModelsThreeSplits) {
  const auto m = balanced_manifest(200);
  std::vector<SplitPair> splits{
      marginal_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 0.8, 1),
      conditional_split(m, "attr", 1.0, -1.0, 0.8, 2),
      joint_split(m, "attr", {{"v1", 1}, {"v2", 1}, {"v3", 0}, {"v4", 0}}, 1.0, -1.0, 0.8, 3)};
  std::vector<PredictionSet> models;
  for (int k = 0; k < 6; ++k) {
    models.push_back(predict_all(m, "model" + std::to_string(k), [k](std::size_t i) { return (i * 7 + k) % 5 != 0; }));
  }
  const auto suite = eval_suite(models, splits, m);
  ASSERT_EQ(suite.results.size(), 18u);
  ASSERT_EQ(suite.averages.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    double id = 0;
    double ood = 0;
    for (std::size_t k = 0; k < 6; ++k) {
      const auto& r = suite.results[s * 6 + k];
      EXPECT_EQ(r.split, splits[s].name);
      EXPECT_TRUE(r.ood_by_partition.empty());
      id += r.id_acc.value();
      ood += r.ood_acc.value();
      EXPECT_NEAR(r.drop_pct, (r.id_acc.value() - r.ood_acc.value()) / r.id_acc.value() * 100, 1e-9);
    }
    EXPECT_NEAR(suite.averages[s].id_acc, id / 6, 1e-12);
    EXPECT_NEAR(suite.averages[s].ood_acc, ood / 6, 1e-12);
    EXPECT_EQ(suite.averages[s].n_models, 6u);
  }
}

TEST(EvalSuite, SingleModelSingleSplit) {
  const auto m = four_samples();
  const auto ps = predict_all(m, "only", [](std::size_t i) { return i != 3; });
  const std::vector<SplitPair> splits{manual_split({"id0", "id1"}, {"id2", "id3"})};
  const auto suite = eval_suite(std::span(&ps, 1), splits, m);
  ASSERT_EQ(suite.results.size(), 1u);
  EXPECT_TRUE(suite.results[0].ood_by_partition.empty());
  EXPECT_DOUBLE_EQ(suite.results[0].id_acc.value(), 1.0);
  EXPECT_DOUBLE_EQ(suite.results[0].ood_acc.value(), 0.5);
  EXPECT_DOUBLE_EQ(suite.results[0].drop_pct, 50.0);
}

TEST(EvalSuite, PartitionedOverallIsSampleWeighted) {
  const auto m = grid_manifest({"R", "Y", "G"}, {"a", "b"}, 30, "color");
  const auto holdouts = value_holdout_splits(m, "color", 1);
  Rng rng(8);
  const auto ps = predict_all(m, "x", [&](std::size_t i) {
    return uniform01(rng) < (m.samples()[i].attributes.at("color") == "G" ? 0.2 : 0.9);
  });
  for (const auto& [value, sp] : holdouts) {
    const auto r = evaluate_split(ps, sp, m);
    ASSERT_EQ(r.ood_by_partition.size(), 2u);
    double correct = 0;
    double total = 0;
    for (const auto& [name, f] : r.ood_by_partition) {
      correct += static_cast<double>(f.correct);
      total += static_cast<double>(f.total);
    }
    EXPECT_DOUBLE_EQ(r.ood_acc.value(), correct / total);
    EXPECT_DOUBLE_EQ(r.ood_acc.value(), accuracy(ps, m, sp.test_ids));
  }
}

TEST(EvalSuite, CoverageGapIsAnError) {
  const auto m = four_samples();
  auto ps = predict_all(m, "x", [](std::size_t) { return true; });
  ps.predictions.erase("id3");
  const std::vector<SplitPair> splits{manual_split({"id0"}, {"id3"})};
  EXPECT_THROW(eval_suite(std::span(&ps, 1), splits, m), Error);
  EXPECT_THROW(eval_suite(std::span<const PredictionSet>{}, splits, m), Error);
}

TEST(Ranks, AverageRanksForTies) {
  const std::vector<double> scores{0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(average_ranks(scores), (std::vector<double>{1.5, 3.0, 1.5, 4.0}));
}

TEST(Ranks, KendallSmallCases) {
  const std::vector<double> a{1, 2, 3};
  const std::vector<double> b{1, 3, 2};
  const std::vector<double> c{3, 2, 1};
  EXPECT_DOUBLE_EQ(kendall_tau(a, a), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau(a, c), -1.0);
  EXPECT_NEAR(kendall_tau(a, b), 1.0 / 3.0, 1e-15);
  EXPECT_TRUE(std::isnan(kendall_tau(a, std::vector<double>{2, 2, 2})));
  EXPECT_THROW(kendall_tau(a, std::vector<double>{1, 2}), Error);
}

TEST(Ranks, KendallMatchesPairCountingOnAllPermutations) {
  std::vector<double> base{1, 2, 3, 4, 5, 6};
  std::vector<double> perm = base;
  int count = 0;
  do {
    EXPECT_EQ(kendall_tau(base, perm), brute_force_tau(base, perm));
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_EQ(count, 720);
}

TEST(Ranks, KendallWithTiesMatchesTauB) {
  Rng rng(17);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng() % 12;
    std::vector<double> x(n);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng() % 4);
      y[i] = static_cast<double>(rng() % 4);
    }
    const double want = brute_force_tau(x, y);
    const double got = kendall_tau(x, y);
    if (std::isnan(want)) {
      EXPECT_TRUE(std::isnan(got));
    } else {
      EXPECT_NEAR(got, want, 1e-12);
    }
  }
}

TEST(Ranks, RankModelsAndScaleInvariance) {
  std::vector<EvalResult> results;
  const double id[] = {0.95, 0.90, 0.85, 0.80};
  const double ood[] = {0.40, 0.70, 0.60, 0.65};
  for (int k = 0; k < 4; ++k) {
    EvalResult r;
    r.model_id = "m" + std::to_string(k);
    r.split = "s";
    r.id_acc = {static_cast<std::size_t>(id[k] * 100), 100};
    r.ood_acc = {static_cast<std::size_t>(ood[k] * 100), 100};
    results.push_back(r);
  }
  const auto rep = rank_models(results);
  ASSERT_EQ(rep.settings.size(), 1u);
  const auto& s = rep.settings[0];
  EXPECT_EQ(s.id_rank, (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(s.ood_rank, (std::vector<double>{4, 1, 3, 2}));
  EXPECT_NEAR(s.tau, brute_force_tau(s.id_rank, s.ood_rank), 1e-15);
  for (auto& r : results) {
    r.id_acc.total *= 2;
    r.ood_acc.total *= 2;
  }
  const auto scaled = rank_models(results);
  EXPECT_EQ(scaled.settings[0].id_rank, s.id_rank);
  EXPECT_EQ(scaled.settings[0].ood_rank, s.ood_rank);
  EXPECT_EQ(scaled.settings[0].tau, s.tau);
}

TEST(Ranks, MismatchedModelSetsRejected) {
  std::vector<EvalResult> results(4);
  results[0].model_id = "a";
  results[0].split = "s1";
  results[1].model_id = "b";
  results[1].split = "s1";
  results[2].model_id = "a";
  results[2].split = "s2";
  results[3].model_id = "c";
  results[3].split = "s2";
  for (auto& r : results) r.id_acc = r.ood_acc = {1, 2};
  EXPECT_THROW(rank_models(results), Error);
  EXPECT_THROW(rank_models(std::span(results.data(), 1)), Error);
}

TEST(Transfer, FirstPrintedRow) {
  const std::vector<std::string> values{"R", "Y", "G", "B"};
  TransferGrid grid{{{"R", "Y"}, 27.10}, {{"R", "G"}, 11.60}, {{"R", "B"}, 9.10}};
  for (const auto& a : values) {
    for (const auto& b : values) {
      if (a != "R" && a != b) grid[{a, b}] = 50.0;
    }
  }
  std::map<std::string, double> id{{"R", 98.90}, {"Y", 50.0}, {"G", 50.0}, {"B", 50.0}};
  const auto tm = transfer_matrix(values, grid, id);
  EXPECT_DOUBLE_EQ(round2(tm.rows[0].drop_pct), 62.92);
  EXPECT_NEAR(tm.rows[0].avg_ood, (27.10 + 11.60 + 9.10) / 3, 1e-12);
  EXPECT_EQ(tm.rows[0].cells, (std::vector<double>{98.90, 27.10, 11.60, 9.10}));
  EXPECT_DOUBLE_EQ(tm.rows[1].drop_pct, 0.0);
  // the off-diagonal convention does not reproduce the printed value
  const auto off = transfer_matrix(values, grid, id, TransferDropConvention::kOffDiagonalMean);
  EXPECT_GT(std::abs(round2(off.rows[0].drop_pct) - 62.92), 1.0);
}

TEST(Transfer, ReproducesTableTwo) {
  const auto rows = read_csv(fixture("table2.csv"));
  ASSERT_EQ(rows.size(), 16u);
  const std::vector<std::string> values{"R", "Y", "G", "B"};
  int matched = 0;
  for (const auto& r : rows) {
    const std::string train(1, r[1][0]);
    std::map<std::string, double> id;
    TransferGrid grid;
    for (const auto& v : values) {
      id[v] = 1.0;
      for (const auto& w : values) {
        if (v != w) grid[{v, w}] = 1.0;
      }
    }
    for (std::size_t c = 0; c < 4; ++c) {
      if (values[c] == train) {
        id[train] = std::stod(r[2 + c]);
      } else {
        grid[{train, values[c]}] = std::stod(r[2 + c]);
      }
    }
    const auto tm = transfer_matrix(values, grid, id);
    const auto row = std::find_if(tm.rows.begin(), tm.rows.end(), [&](const auto& x) { return x.train_value == train; });
    const double got = round2(row->drop_pct);
    if (std::abs(got - std::stod(r[6])) <= 0.01 + 1e-9) ++matched;
  }
  // one printed entry (CNN2 B-1K) repeats the row above it and computes to 12.45
  EXPECT_EQ(matched, 15);
}

TEST(Transfer, DegenerateGrids) {
  const std::vector<std::string> two{"x", "y"};
  const TransferGrid grid{{{"x", "y"}, 0.6}, {{"y", "x"}, 0.8}};
  const std::map<std::string, double> id{{"x", 0.9}, {"y", 0.8}};
  const auto off = transfer_matrix(two, grid, id, TransferDropConvention::kOffDiagonalMean);
  EXPECT_DOUBLE_EQ(off.rows[0].drop_pct, drop_percent(0.9, 0.6));
  EXPECT_DOUBLE_EQ(off.rows[1].drop_pct, 0.0);
  const TransferGrid flat{{{"x", "y"}, 0.7}, {{"y", "x"}, 0.7}};
  const auto same = transfer_matrix(two, flat, {{"x", 0.7}, {"y", 0.7}});
  for (const auto& r : same.rows) EXPECT_DOUBLE_EQ(r.drop_pct, 0.0);
  EXPECT_THROW(transfer_matrix(two, TransferGrid{{{"x", "y"}, 0.6}}, id), Error);
}

TEST(Transfer, FromHoldoutEvaluation) {
  const auto m = grid_manifest({"R", "Y", "G"}, {"a", "b"}, 30, "color");
  const auto holdouts = value_holdout_splits(m, "color", 1);
  const auto ps = predict_all(m, "x", [&](std::size_t i) {
    return m.samples()[i].attributes.at("color") != "G" || m.samples()[i].label == "a";
  });
  std::vector<EvalResult> results;
  for (const auto& [_, sp] : holdouts) results.push_back(evaluate_split(ps, sp, m));
  const auto tm = transfer_from_holdouts({"R", "Y", "G"}, results, "x");
  EXPECT_DOUBLE_EQ(tm.rows[0].cells[2], 0.5);
  EXPECT_DOUBLE_EQ(tm.rows[0].cells[1], 1.0);
  EXPECT_THROW(transfer_from_holdouts({"R", "Y", "G"}, results, "other"), Error);
}

TEST(Diagnosis, MarginalAverageAboveThreshold) {
  SplitEvidence marginal{"M", ShiftType::kMarginal, 0.0, 0.9732, 0.8734, 10.26, 0.01};
  SplitEvidence conditional{"C", ShiftType::kConditional, -1.0, 0.95, 0.90, drop_percent(0.95, 0.90), 0.5};
  const std::vector<SplitEvidence> ev{marginal, conditional};
  const auto d = diagnose_spurious("hair", ev, 2);
  EXPECT_EQ(d.verdict, Verdict::kMarginalSpurious);
  // the premise fails when training conditionals are not uniform
  auto skewed = ev;
  skewed[0].train_uniformity_gap = 0.2;
  EXPECT_EQ(diagnose_spurious("hair", skewed, 2).verdict, Verdict::kNone);
}

TEST(Diagnosis, BelowChanceReversal) {
  SplitEvidence marginal{"M", ShiftType::kMarginal, 0.0, 0.99, 0.98, drop_percent(0.99, 0.98), 0.0};
  SplitEvidence conditional{"C", ShiftType::kConditional, -1.0, 0.99, 0.0028, drop_percent(0.99, 0.0028), 1.0};
  const std::vector<SplitEvidence> ev{marginal, conditional};
  const auto d = diagnose_spurious("color", ev, 10);
  EXPECT_EQ(d.verdict, Verdict::kConditionalSpurious);
  EXPECT_DOUBLE_EQ(d.chance, 0.1);
  EXPECT_TRUE(d.conditional_flag);
  // below chance alone suffices, even with a small relative drop
  SplitEvidence mild{"C", ShiftType::kConditional, -1.0, 0.09, 0.085, drop_percent(0.09, 0.085), 1.0};
  const std::vector<SplitEvidence> ev2{marginal, mild};
  EXPECT_EQ(diagnose_spurious("color", ev2, 10).verdict, Verdict::kConditionalSpurious);
}

TEST(Diagnosis, NoShiftNoVerdictAndBoth) {
  SplitEvidence marginal{"M", ShiftType::kMarginal, 0.0, 0.9, 0.9, 0.0, 0.0};
  SplitEvidence conditional{"C", ShiftType::kConditional, 0.0, 0.9, 0.9, 0.0, 0.0};
  std::vector<SplitEvidence> ev{marginal, conditional};
  EXPECT_EQ(diagnose_spurious("a", ev, 2).verdict, Verdict::kNone);
  ev[0].ood_acc = 0.5;
  ev[0].drop_pct = drop_percent(0.9, 0.5);
  ev[1].correlation_test = -1.0;
  ev[1].ood_acc = 0.2;
  EXPECT_EQ(diagnose_spurious("a", ev, 2).verdict, Verdict::kBoth);
  EXPECT_THROW(diagnose_spurious("a", std::span(ev.data(), 1), 2), Error);
  DiagnosisThresholds loose;
  loose.require_both_types = false;
  EXPECT_EQ(diagnose_spurious("a", std::span(ev.data(), 1), 2, loose).verdict, Verdict::kMarginalSpurious);
}

TEST(Diagnosis, EvidenceFromSplitStats) {
  const auto m = balanced_manifest(50);
  const auto sp = conditional_split(m, "attr", 1.0, -1.0, 0.8, 1);
  const auto ps = predict_all(m, "x", [&](std::size_t i) {
    const auto& v = m.samples()[i].attributes.at("attr");
    // a model that reads the attribute: predicts the training pairing
    const bool says_a = v == "v1" || v == "v3";
    return says_a == (m.samples()[i].label == "a");
  });
  const auto r = evaluate_split(ps, sp, m);
  EXPECT_DOUBLE_EQ(r.id_acc.value(), 1.0);
  EXPECT_DOUBLE_EQ(r.ood_acc.value(), 0.0);
  const auto e = make_evidence(r, sp, m.label_set());
  EXPECT_DOUBLE_EQ(e.train_uniformity_gap, 0.5);
  DiagnosisThresholds loose;
  loose.require_both_types = false;
  EXPECT_EQ(diagnose_spurious("attr", std::span(&e, 1), 2, loose).verdict, Verdict::kConditionalSpurious);
}
