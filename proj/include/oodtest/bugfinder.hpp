#pragma once

// Bug scan: for every candidate attribute, shift type and ladder level build a
// split, ask a runner for predictions, evaluate, and diagnose.

#include <sys/types.h>
#include <sys/wait.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "oodtest/error.hpp"
#include "oodtest/eval.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/random.hpp"
#include "oodtest/split_io.hpp"
#include "oodtest/splitgen.hpp"
#include "oodtest/toylab.hpp"

namespace oodtest {

/// Provides predictions covering a split's validation and test ids.
class PredictionRunner {
 public:
  virtual ~PredictionRunner() = default;
  virtual PredictionSet run(const Manifest& manifest, const SplitPair& split) = 0;
};

/// Trains a toylab model on the split's training side.
class ToyRunner final : public PredictionRunner {
 public:
  explicit ToyRunner(ModelKind kind = ModelKind::kLinear, TrainParams params = {}, std::size_t train_budget = 0)
      : kind_(kind), params_(params), train_budget_(train_budget) {}

  PredictionSet run(const Manifest& manifest, const SplitPair& split) override {
    SplitPair fit = split;
    if (train_budget_ > 0 && fit.train_ids.size() > train_budget_) {
      Rng rng(mix64(params_.seed ^ split.spec.seed));
      shuffle_in_place(fit.train_ids, rng);
      fit.train_ids.resize(train_budget_);
    }
    auto trained = train_classifier(manifest, fit, kind_, params_);
    std::vector<std::string> ids = split.val_ids;
    ids.insert(ids.end(), split.test_ids.begin(), split.test_ids.end());
    return predict(trained.model, manifest, ids, to_string(kind_));
  }

 private:
  ModelKind kind_;
  TrainParams params_;
  std::size_t train_budget_;
};

namespace detail {

// Removes a directory tree on scope exit.
class TempDir {
 public:
  TempDir() {
    std::string pattern = (std::filesystem::temp_directory_path() / "oodtest-XXXXXX").string();
    if (::mkdtemp(pattern.data()) == nullptr) fail_io("cannot create a temporary directory");
    path_ = pattern;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace detail

/// External runner, invoked through the shell as `<command> <split-file> <prediction-file>`.
/// Exit status 0 means success and the prediction file must then exist; any other
/// status, a signal, or running past the timeout is a runner failure.
class CommandRunner final : public PredictionRunner {
 public:
  explicit CommandRunner(std::string command, std::chrono::milliseconds timeout = std::chrono::minutes(10))
      : command_(std::move(command)), timeout_(timeout) {
    if (command_.empty()) fail("runner command is empty");
  }

  PredictionSet run(const Manifest& manifest, const SplitPair& split) override {
    detail::TempDir dir;
    const auto split_path = (dir.path() / "split.json").string();
    const auto pred_path = (dir.path() / "predictions.jsonl").string();
    {
      std::ofstream out(split_path);
      if (!out) fail_io("cannot write '" + split_path + "'");
      write_split(out, split);
    }
    execute(split_path, pred_path);
    if (!std::filesystem::exists(pred_path)) throw Error(ErrorKind::kRunner, "runner wrote no prediction file");
    auto sets = load_predictions_file(pred_path);
    if (sets.size() != 1) {
      throw Error(ErrorKind::kRunner, "runner must emit exactly one model, got " + std::to_string(sets.size()));
    }
    validate_predictions(sets.front(), manifest);
    return std::move(sets.front());
  }

 private:
  void execute(const std::string& split_path, const std::string& pred_path) const {
    const std::string script = command_ + " \"$@\"";
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(ErrorKind::kRunner, "fork failed");
    ::setpgid(pid, pid);
    if (pid == 0) {
      ::setpgid(0, 0);
      ::execl("/bin/sh", "sh", "-c", script.c_str(), "sh", split_path.c_str(), pred_path.c_str(),
              static_cast<char*>(nullptr));
      ::_exit(127);
    }
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    int status = 0;
    for (;;) {
      const pid_t r = ::waitpid(pid, &status, WNOHANG);
      if (r == pid) break;
      if (r < 0) throw Error(ErrorKind::kRunner, "waitpid failed");
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(-pid, SIGKILL);  // whole process group
        ::waitpid(pid, &status, 0);
        throw Error(ErrorKind::kRunner, "runner timed out after " + std::to_string(timeout_.count()) + " ms");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (WIFSIGNALED(status)) {
      throw Error(ErrorKind::kRunner, "runner killed by signal " + std::to_string(WTERMSIG(status)));
    }
    if (WEXITSTATUS(status) != 0) {
      throw Error(ErrorKind::kRunner, "runner exited with status " + std::to_string(WEXITSTATUS(status)));
    }
  }

  std::string command_;
  std::chrono::milliseconds timeout_;
};

// ---------------------------------------------------------------------------
// Scan

struct BugScanConfig {
  std::vector<std::string> candidate_attrs;
  std::vector<ShiftType> shift_types{ShiftType::kMarginal, ShiftType::kConditional};
  // Ladder per type; a missing entry means the canonical ladder for the attribute.
  std::map<ShiftType, std::vector<LevelParams>> levels;
  double theta_drop = 10.0;
  double tau_c = 0.05;
  double train_fraction = 0.8;
  SplitOptions split_options;
  std::uint64_t seed = kDefaultSeed;
};

struct CellResult {
  ShiftType type = ShiftType::kMarginal;
  std::size_t level = 0;  // 1-based position in the ladder
  std::string split;      // e.g. C3
  EvalResult result;
  std::optional<ShiftProfile> achieved;
};

struct SkippedCell {
  std::string attr;
  ShiftType type = ShiftType::kMarginal;
  std::size_t level = 0;
  std::string reason;
};

struct BugEntry {
  std::string attr;
  std::vector<CellResult> cells;
  Diagnosis diagnosis;
  double severity = kNaN;  // max drop_pct over evaluated cells
  double aul = kNaN;       // largest per-type area under the drop-vs-level curve, levels mapped onto [0, 1]
  ShiftType severity_type = ShiftType::kMarginal;
  bool is_bug = false;
};

struct BugReport {
  double theta_drop = 10.0;
  std::vector<BugEntry> entries;
  std::vector<SkippedCell> skipped;
};

inline std::string cell_label(const std::string& attr, ShiftType type, std::size_t level) {
  return attr + "/" + to_string(type) + "/" + level_prefix(type) + std::to_string(level);
}

namespace detail {

inline double area_under_ladder(const std::vector<std::pair<std::size_t, double>>& points, std::size_t n_levels) {
  if (points.empty()) return kNaN;
  if (points.size() == 1 || n_levels < 2) return points.front().second;
  double area = 0.0;
  const double span = static_cast<double>(n_levels - 1);
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double dx = static_cast<double>(points[i].first - points[i - 1].first) / span;
    area += dx * (points[i].second + points[i - 1].second) / 2.0;
  }
  return area;
}

}  // namespace detail

/// Cell seeds are sub_seed(seed, ordinal) with the ordinal counting cells in
/// (attribute, type, level) order. Infeasible cells are recorded as skipped;
/// runner failures propagate with the cell named.
inline BugReport run_bug_scan(const Manifest& manifest, const BugScanConfig& cfg, PredictionRunner& runner) {
  for (const auto& a : cfg.candidate_attrs) {
    if (!manifest.attribute_schema().contains(a)) fail("unknown candidate attribute '" + a + "'");
  }
  for (auto t : cfg.shift_types) {
    if (t == ShiftType::kCluster) fail("bug scans take marginal, conditional or joint shift types");
  }
  const auto& labels = manifest.label_set();
  BugReport report;
  report.theta_drop = cfg.theta_drop;
  std::uint64_t ordinal = 0;

  for (const auto& attr : cfg.candidate_attrs) {
    BugEntry entry;
    entry.attr = attr;
    std::vector<SplitEvidence> evidence;
    for (auto type : cfg.shift_types) {
      auto custom = cfg.levels.find(type);
      const auto ladder = custom != cfg.levels.end() ? custom->second : canonical_ladder(manifest, attr, type);
      std::vector<std::pair<std::size_t, double>> curve;
      for (std::size_t i = 0; i < ladder.size(); ++i) {
        const std::size_t level = i + 1;
        const auto spec = level_spec(attr, type, ladder[i], cfg.train_fraction, sub_seed(cfg.seed, ordinal++));
        const std::string name{std::string(1, level_prefix(type)) + std::to_string(level)};
        std::optional<SplitPair> split;
        try {
          split = make_split(manifest, spec, name, cfg.split_options);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kInfeasible) throw;
          report.skipped.push_back({attr, type, level, e.what()});
          continue;
        }
        PredictionSet ps;
        try {
          ps = runner.run(manifest, *split);
        } catch (const std::exception& e) {
          throw Error(ErrorKind::kRunner, "runner failed on cell " + cell_label(attr, type, level) + ": " + e.what());
        }
        CellResult cell{type, level, name, evaluate_split(ps, *split, manifest), split->achieved};
        evidence.push_back(make_evidence(cell.result, *split, labels));
        if (std::isfinite(cell.result.drop_pct)) {
          curve.emplace_back(level, cell.result.drop_pct);
          if (!(entry.severity >= cell.result.drop_pct)) {
            entry.severity = cell.result.drop_pct;
            entry.severity_type = type;
          }
        }
        entry.cells.push_back(std::move(cell));
      }
      const double area = detail::area_under_ladder(curve, ladder.size());
      if (std::isfinite(area) && !(entry.aul >= area)) entry.aul = area;
    }
    DiagnosisThresholds dt;
    dt.theta_drop = cfg.theta_drop;
    dt.tau_c = cfg.tau_c;
    dt.require_both_types = false;
    entry.diagnosis = diagnose_spurious(attr, evidence, labels.size(), dt);
    entry.is_bug = entry.severity > cfg.theta_drop;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Summary

struct RankedAttribute {
  std::string attr;
  std::size_t candidate_position = 0;
  double severity = kNaN;
  double aul = kNaN;
  bool is_bug = false;
  Verdict verdict = Verdict::kNone;
  std::string dominant_type;  // "marginal", "conditional", "both" or "none"
  std::string hint;
};

struct BugSummary {
  std::vector<RankedAttribute> ranking;  // every entry, most severe first
  std::vector<RankedAttribute> bugs;     // the entries with is_bug
};

inline std::string debugging_hint(Verdict v, const std::string& attr) {
  switch (v) {
    case Verdict::kMarginalSpurious:
      return "collect or augment training data over the under-represented values of '" + attr + "'";
    case Verdict::kConditionalSpurious:
      return "break the label correlation of '" + attr +
             "' in training data (targeted augmentation) or regularize the model against it";
    case Verdict::kBoth:
      return "rebalance '" + attr + "' across values and labels in training data, then regularize against it";
    case Verdict::kNone:
      break;
  }
  return "no action";
}

/// Sorted by severity descending; NaN severities last; ties keep candidate order.
inline BugSummary summarize(const BugReport& report) {
  BugSummary out;
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    RankedAttribute r;
    r.attr = e.attr;
    r.candidate_position = i;
    r.severity = e.severity;
    r.aul = e.aul;
    r.is_bug = e.is_bug;
    r.verdict = e.diagnosis.verdict;
    switch (r.verdict) {
      case Verdict::kMarginalSpurious: r.dominant_type = "marginal"; break;
      case Verdict::kConditionalSpurious: r.dominant_type = "conditional"; break;
      case Verdict::kBoth:
        r.dominant_type = e.severity_type == ShiftType::kMarginal ? "marginal" : "conditional";
        break;
      case Verdict::kNone: r.dominant_type = "none"; break;
    }
    r.hint = debugging_hint(r.verdict, r.attr);
    out.ranking.push_back(std::move(r));
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [](const auto& a, const auto& b) {
    const bool fa = std::isfinite(a.severity);
    const bool fb = std::isfinite(b.severity);
    if (fa != fb) return fa;
    return fa && a.severity > b.severity;
  });
  for (const auto& r : out.ranking) {
    if (r.is_bug) out.bugs.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report output

inline nlohmann::ordered_json bug_report_to_json(const BugReport& report) {
  using ojson = nlohmann::ordered_json;
  auto num = [](double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); };
  ojson j;
  j["theta_drop"] = report.theta_drop;
  j["entries"] = ojson::array();
  for (const auto& e : report.entries) {
    ojson je;
    je["attr"] = e.attr;
    je["severity"] = num(e.severity);
    je["aul"] = num(e.aul);
    je["is_bug"] = e.is_bug;
    je["verdict"] = to_string(e.diagnosis.verdict);
    je["cells"] = ojson::array();
    for (const auto& c : e.cells) {
      ojson jc;
      jc["type"] = to_string(c.type);
      jc["level"] = c.level;
      jc["split"] = c.split;
      jc["id_acc"] = num(c.result.id_acc.value());
      jc["ood_acc"] = num(c.result.ood_acc.value());
      jc["drop_pct"] = num(c.result.drop_pct);
      if (c.achieved) jc["achieved"] = profile_to_json(*c.achieved);
      je["cells"].push_back(std::move(jc));
    }
    j["entries"].push_back(std::move(je));
  }
  j["skipped"] = ojson::array();
  for (const auto& s : report.skipped) {
    j["skipped"].push_back({{"attr", s.attr}, {"type", to_string(s.type)}, {"level", s.level}, {"reason", s.reason}});
  }
  const auto summary = summarize(report);
  j["bugs"] = ojson::array();
  for (const auto& b : summary.bugs) {
    j["bugs"].push_back({{"attr", b.attr}, {"severity", num(b.severity)}, {"type", b.dominant_type}, {"hint", b.hint}});
  }
  return j;
}

inline void write_bug_report(std::ostream& out, const BugReport& report) {
  out << bug_report_to_json(report).dump(2) << '\n';
}

}  // namespace oodtest
