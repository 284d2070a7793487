// oodtest command-line front end.
//
// Exit codes: 0 success, 1 usage, validation or I/O error, 2 infeasible split.

#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "oodtest/oodtest.hpp"

namespace fs = std::filesystem;
using namespace oodtest;

namespace {

constexpr const char* kSeedEnv = "OODTEST_SEED";

struct GlobalOptions {
  std::uint64_t seed = kDefaultSeed;
  std::string out = ".";
  bool force = false;
  std::string format = "table";

  [[nodiscard]] ReportFormat report_format() const { return report_format_from_string(format); }
  [[nodiscard]] const char* table_ext() const { return format == "delimited" ? ".tsv" : ".txt"; }
};

std::uint64_t seed_from_env() {
  const char* raw = std::getenv(kSeedEnv);
  if (raw == nullptr || *raw == '\0') return kDefaultSeed;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(raw, &used);
    if (used != std::string(raw).size() || raw[0] == '-') throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    fail(std::string(kSeedEnv) + " is not an unsigned integer: '" + raw + "'");
  }
}

// Collects output files and writes them all at once: every target is checked
// before anything is written, and each file goes through a temp file + rename.
class OutputSet {
 public:
  OutputSet(const GlobalOptions& g) : dir_(g.out), force_(g.force) {}

  void add(const std::string& name, std::string content) { files_.emplace_back(dir_ / name, std::move(content)); }

  std::vector<fs::path> commit() {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) fail_io("cannot create output directory '" + dir_.string() + "': " + ec.message());
    for (const auto& [path, _] : files_) {
      if (fs::exists(path) && !force_) fail_io("refusing to overwrite '" + path.string() + "' (pass --force)");
    }
    std::vector<fs::path> written;
    for (const auto& [path, content] : files_) {
      fs::path tmp = path;
      tmp += ".tmp." + std::to_string(::getpid());
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail_io("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) fail_io("write failed for '" + tmp.string() + "'");
      }
      fs::rename(tmp, path, ec);
      if (ec) {
        fs::remove(tmp, ec);
        fail_io("cannot move output into place at '" + path.string() + "'");
      }
      written.push_back(path);
    }
    return written;
  }

 private:
  fs::path dir_;
  bool force_;
  std::vector<std::pair<fs::path, std::string>> files_;
};

void announce(const std::vector<fs::path>& written) {
  for (const auto& p : written) std::cout << "wrote " << p.string() << '\n';
}

template <class F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_real(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(what + ": '" + s + "' is not a number");
  }
}

// "black=1,blond=0.5"
ValueWeights parse_weights(const std::string& s) {
  ValueWeights w;
  for (const auto& item : split_list(s, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) fail("weights: expected value=weight, got '" + item + "'");
    const std::string value = item.substr(0, eq);
    if (w.contains(value)) fail("weights: value '" + value + "' given twice");
    w[value] = parse_real(item.substr(eq + 1), "weights");
  }
  return w;
}

// Level syntax: a weight list ("a=0.7,b=0.3"), a correlation ("0.6" meaning
// rho_train = 0.6 and rho_test = -0.6, or "0.6:-0.2"), or both joined by '@'.
LevelParams parse_level(const std::string& s) {
  LevelParams p;
  for (const auto& part : split_list(s, '@')) {
    if (part.find('=') != std::string::npos) {
      p.weights = parse_weights(part);
      continue;
    }
    const auto colon = part.find(':');
    p.correlation_train = parse_real(part.substr(0, colon), "level correlation");
    p.correlation_test = colon == std::string::npos ? -p.correlation_train
                                                    : parse_real(part.substr(colon + 1), "level correlation");
  }
  return p;
}

std::vector<ShiftType> parse_types(const std::string& s) {
  std::vector<ShiftType> out;
  for (const auto& t : split_list(s, ',')) out.push_back(shift_type_from_string(t));
  return out;
}

// ---------------------------------------------------------------------------

struct SplitArgs {
  std::string manifest;
  std::string type;
  std::string attr;
  std::string weights;
  double rho_train = 0.0;
  double rho_test = 0.0;
  double train_fraction = 0.8;
  std::string name;
};

void cmd_split(const GlobalOptions& g, const SplitArgs& a) {
  const Manifest m = load_manifest_file(a.manifest);
  ShiftSpec spec{shift_type_from_string(a.type), a.attr, parse_weights(a.weights), a.rho_train, a.rho_test,
                 a.train_fraction, g.seed};
  if (spec.shift_type == ShiftType::kCluster) fail("use the cluster subcommand for cluster splits");
  const SplitPair sp = make_split(m, spec, a.name);
  OutputSet out(g);
  out.add(sp.name + ".json", render([&](std::ostream& os) { write_split(os, sp); }));
  announce(out.commit());
  const auto& p = *sp.achieved;
  std::cout << "train " << sp.train_ids.size() << ", val " << sp.val_ids.size() << ", test " << sp.test_ids.size()
            << "; tv_attr " << decimal2(p.tv_attr) << ", max_cond_gap " << decimal2(p.max_cond_gap) << ", tv_label "
            << decimal2(p.tv_label) << ", inferred " << to_string(p.inferred_type) << '\n';
}

struct LevelsArgs {
  std::string manifest;
  std::string type;
  std::string attr;
  std::vector<std::string> levels;
  double train_fraction = 0.8;
};

void cmd_levels(const GlobalOptions& g, const LevelsArgs& a) {
  const Manifest m = load_manifest_file(a.manifest);
  const ShiftType type = shift_type_from_string(a.type);
  if (type == ShiftType::kCluster) fail("cluster splits have no ladder");
  std::vector<LevelParams> ladder;
  if (a.levels.empty()) {
    ladder = canonical_ladder(m, a.attr, type);
  } else {
    for (const auto& l : a.levels) ladder.push_back(parse_level(l));
  }
  const auto series = level_series(m, a.attr, type, ladder, g.seed, a.train_fraction);
  OutputSet out(g);
  for (const auto& sp : series) {
    out.add(sp.name + ".json", render([&](std::ostream& os) { write_split(os, sp); }));
  }
  announce(out.commit());
}

struct ClusterArgs {
  std::string manifest;
  std::size_t k = 8;
  bool l2 = false;
};

void cmd_cluster(const GlobalOptions& g, const ClusterArgs& a) {
  const Manifest m = load_manifest_file(a.manifest);
  ClusterOptions opts;
  opts.l2_normalize = a.l2;
  const auto series = clustered_subdatasets(m, a.k, g.seed, opts);
  const auto splits = cluster_protocol(m, series, g.seed);
  OutputSet out(g);
  for (const auto& sp : splits) {
    out.add(sp.name + ".json", render([&](std::ostream& os) { write_split(os, sp); }));
  }
  const std::string summary = render([&](std::ostream& os) { write_cluster_summary(os, series, g.report_format()); });
  out.add(std::string("clusters") + g.table_ext(), summary);
  announce(out.commit());
  std::cout << summary;
}

struct EvalArgs {
  std::string manifest;
  std::vector<std::string> splits;
  std::vector<std::string> predictions;
};

void cmd_eval(const GlobalOptions& g, const EvalArgs& a) {
  const Manifest m = load_manifest_file(a.manifest);
  std::vector<SplitPair> splits;
  for (const auto& path : a.splits) splits.push_back(load_split_file(path));
  std::vector<PredictionSet> models;
  for (const auto& path : a.predictions) {
    for (auto& ps : load_predictions_file(path)) models.push_back(std::move(ps));
  }
  const SuiteReport suite = eval_suite(models, splits, m);
  OutputSet out(g);
  const std::string report = render([&](std::ostream& os) { write_eval_report(os, suite, g.report_format()); });
  out.add(std::string("eval") + g.table_ext(), report);
  std::string ranks;
  if (models.size() >= 2) {
    ranks = render([&](std::ostream& os) { write_rank_report(os, rank_models(suite.results), g.report_format()); });
    out.add(std::string("ranks") + g.table_ext(), ranks);
  }
  announce(out.commit());
  std::cout << report << ranks;
}

struct ToyArgs {
  ToyConfig config;
  std::string demo = "conditional";
  std::string attr = "irr0";
  double rho_train = 1.0;
  double rho_test = -1.0;
  std::string weights;
  std::string model = "linear";
  TrainParams train;
};

void cmd_toy(const GlobalOptions& g, ToyArgs a) {
  a.config.seed = g.seed;
  const Manifest m = generate_toy(a.config);
  OutputSet out(g);
  out.add("manifest.jsonl", render([&](std::ostream& os) { write_manifest(os, m); }));
  if (a.demo != "none") {
    ShiftSpec spec;
    spec.attr = a.attr;
    spec.seed = sub_seed(g.seed, 1);
    if (a.demo == "conditional") {
      spec.shift_type = ShiftType::kConditional;
      spec.correlation_train = a.rho_train;
      spec.correlation_test = a.rho_test;
    } else if (a.demo == "marginal") {
      spec.shift_type = ShiftType::kMarginal;
      spec.train_value_weights = a.weights.empty() ? canonical_ladder(m, a.attr, ShiftType::kMarginal).back().weights
                                                   : parse_weights(a.weights);
    } else {
      fail("unknown demo '" + a.demo + "' (expected conditional, marginal or none)");
    }
    const SplitPair sp = make_split(m, spec, a.demo + "-" + a.attr);
    a.train.seed = sub_seed(g.seed, 2);
    const auto trained = train_classifier(m, sp, model_kind_from_string(a.model), a.train);
    std::vector<std::string> ids = sp.val_ids;
    ids.insert(ids.end(), sp.test_ids.begin(), sp.test_ids.end());
    const auto ps = predict(trained.model, m, ids, a.model);
    out.add("split.json", render([&](std::ostream& os) { write_split(os, sp); }));
    out.add("train_log.csv", render([&](std::ostream& os) { write_train_log(os, trained.log); }));
    out.add("predictions.jsonl", render([&](std::ostream& os) { write_predictions(os, ps); }));
    if (!trained.log.records.empty()) {
      out.add("train_curve.svg", render_svg(train_curve_spec(trained.log, a.demo + " shift on " + a.attr)));
      const auto& last = trained.log.records.back();
      std::cout << "iteration " << last.iteration << ": loss " << format_real(last.loss) << ", ID val "
                << percent2(last.id_val_acc) << "%, OOD test " << percent2(last.ood_test_acc) << "%\n";
    }
  }
  announce(out.commit());
}

struct BugsArgs {
  std::string manifest;
  std::string candidates;
  std::string types = "marginal,conditional";
  double theta = 10.0;
  std::string runner;
  double timeout_s = 600.0;
  std::string model = "linear";
  std::size_t train_budget = 0;
  TrainParams train;
};

void cmd_bugs(const GlobalOptions& g, BugsArgs a) {
  const Manifest m = load_manifest_file(a.manifest);
  BugScanConfig cfg;
  cfg.candidate_attrs = split_list(a.candidates, ',');
  cfg.shift_types = parse_types(a.types);
  cfg.theta_drop = a.theta;
  cfg.seed = g.seed;
  std::unique_ptr<PredictionRunner> runner;
  if (!a.runner.empty()) {
    if (!(a.timeout_s > 0.0)) fail("--timeout must be positive");
    runner = std::make_unique<CommandRunner>(
        a.runner, std::chrono::milliseconds(static_cast<std::int64_t>(a.timeout_s * 1000.0)));
  } else {
    a.train.seed = sub_seed(g.seed, 1);
    runner = std::make_unique<ToyRunner>(model_kind_from_string(a.model), a.train, a.train_budget);
  }
  const BugReport report = run_bug_scan(m, cfg, *runner);
  OutputSet out(g);
  out.add("bugs.json", render([&](std::ostream& os) { write_bug_report(os, report); }));
  const std::string summary =
      render([&](std::ostream& os) { write_bug_summary(os, summarize(report), g.report_format()); });
  out.add(std::string("bug_summary") + g.table_ext(), summary);
  announce(out.commit());
  std::cout << summary;
  for (const auto& s : report.skipped) {
    std::cout << "skipped " << cell_label(s.attr, s.type, s.level) << ": " << s.reason << '\n';
  }
}

struct PlotArgs {
  std::string kind;
  std::string input;
  std::string title;
  std::string name;
};

void cmd_plot(const GlobalOptions& g, const PlotArgs& a) {
  const PlotKind kind = plot_kind_from_string(a.kind);
  std::ifstream in(a.input);
  if (!in) fail_io("cannot open '" + a.input + "'");
  const PlotSpec spec =
      kind == PlotKind::kTrainCurve ? train_curve_spec(read_train_log(in), a.title) : level_curve_spec(read_eval_report(in), a.title);
  OutputSet out(g);
  out.add(a.name.empty() ? std::string(to_string(kind)) + ".svg" : a.name, render_svg(spec));
  announce(out.commit());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distribution-shift test harness: typed OOD splits, toy experiments, evaluation and bug scans"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::string seed_text;
  app.add_option("--seed", seed_text, std::string("random seed (default: $") + kSeedEnv + " or 42)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_flag("--force", g.force, "overwrite existing output files");
  app.add_option("--format", g.format, "report format")
      ->check(CLI::IsMember({"table", "delimited"}))
      ->capture_default_str();

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "build one OOD split");
  c_split->add_option("--manifest", split.manifest, "manifest file")->required();
  c_split->add_option("--type", split.type, "marginal, conditional or joint")->required();
  c_split->add_option("--attr", split.attr, "attribute to shift")->required();
  c_split->add_option("--weights", split.weights, "training value weights, e.g. black=1,blond=1");
  c_split->add_option("--rho-train", split.rho_train, "training label correlation");
  c_split->add_option("--rho-test", split.rho_test, "test label correlation");
  c_split->add_option("--train-fraction", split.train_fraction)->capture_default_str();
  c_split->add_option("--name", split.name, "split name (default: <type>-<attr>)");

  LevelsArgs levels;
  auto* c_levels = app.add_subcommand("levels", "build a ladder of increasingly shifted splits");
  c_levels->add_option("--manifest", levels.manifest)->required();
  c_levels->add_option("--type", levels.type)->required();
  c_levels->add_option("--attr", levels.attr)->required();
  c_levels->add_option("--level", levels.levels,
                       "one level: weights 'a=0.7,b=0.3', correlation '0.6' or '0.6:-0.2', or both joined by '@'; "
                       "default is the canonical ladder");
  c_levels->add_option("--train-fraction", levels.train_fraction)->capture_default_str();

  ClusterArgs cluster;
  auto* c_cluster = app.add_subcommand("cluster", "cluster embeddings into sub-datasets D1..Dk");
  c_cluster->add_option("--manifest", cluster.manifest)->required();
  c_cluster->add_option("--k", cluster.k)->capture_default_str()->check(CLI::PositiveNumber);
  c_cluster->add_flag("--l2-normalize", cluster.l2, "L2-normalize embeddings first");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate prediction files on split files");
  c_eval->add_option("--manifest", eval.manifest)->required();
  c_eval->add_option("--split", eval.splits, "split file (repeatable)")->required();
  c_eval->add_option("--predictions", eval.predictions, "prediction file (repeatable)")->required();

  ToyArgs toy;
  auto* c_toy = app.add_subcommand("toy", "generate toy data and train a small model on a shifted split");
  c_toy->add_option("--n-samples", toy.config.n_samples)->capture_default_str();
  c_toy->add_option("--classes", toy.config.n_classes)->capture_default_str();
  c_toy->add_option("--relevant-dim", toy.config.relevant_dim)->capture_default_str();
  c_toy->add_option("--irrelevant-dim", toy.config.irrelevant_dim)->capture_default_str();
  c_toy->add_option("--margin", toy.config.margin)->capture_default_str();
  c_toy->add_option("--noise", toy.config.noise_sigma)->capture_default_str();
  c_toy->add_option("--irrelevant-scale", toy.config.irrelevant_scale)->capture_default_str();
  c_toy->add_option("--bins", toy.config.attr_values_per_dim, "attribute values per irrelevant dim")
      ->capture_default_str();
  c_toy->add_option("--annotations", toy.config.annotation_attrs, "label-independent annotation attributes")
      ->capture_default_str();
  c_toy->add_flag("--embedding", toy.config.emit_embedding, "also store features as embeddings");
  c_toy->add_option("--demo", toy.demo, "conditional, marginal or none")->capture_default_str();
  c_toy->add_option("--attr", toy.attr)->capture_default_str();
  c_toy->add_option("--rho-train", toy.rho_train)->capture_default_str();
  c_toy->add_option("--rho-test", toy.rho_test)->capture_default_str();
  c_toy->add_option("--weights", toy.weights, "marginal demo weights (default: last canonical level)");
  c_toy->add_option("--model", toy.model, "linear or mlp")->capture_default_str();
  c_toy->add_option("--lr", toy.train.lr)->capture_default_str();
  c_toy->add_option("--batch", toy.train.batch_size)->capture_default_str();
  c_toy->add_option("--iterations", toy.train.iterations)->capture_default_str();
  c_toy->add_option("--log-every", toy.train.log_every)->capture_default_str();
  c_toy->add_option("--hidden", toy.train.hidden)->capture_default_str();

  BugsArgs bugs;
  auto* c_bugs = app.add_subcommand("bugs", "scan candidate attributes for spurious-correlation bugs");
  c_bugs->add_option("--manifest", bugs.manifest)->required();
  c_bugs->add_option("--candidates", bugs.candidates, "comma-separated attribute names")->required();
  c_bugs->add_option("--types", bugs.types)->capture_default_str();
  c_bugs->add_option("--theta", bugs.theta, "drop threshold in percent")->capture_default_str();
  c_bugs->add_option("--runner", bugs.runner,
                     "prediction command, run as '<cmd> <split-file> <prediction-file>' (default: toy model)");
  c_bugs->add_option("--timeout", bugs.timeout_s, "runner timeout in seconds")->capture_default_str();
  c_bugs->add_option("--model", bugs.model, "toy model: linear or mlp")->capture_default_str();
  c_bugs->add_option("--train-budget", bugs.train_budget, "cap on toy training samples (0 = all)")
      ->capture_default_str();
  c_bugs->add_option("--iterations", bugs.train.iterations)->capture_default_str();
  c_bugs->add_option("--lr", bugs.train.lr)->capture_default_str();
  c_bugs->add_option("--batch", bugs.train.batch_size)->capture_default_str();

  PlotArgs plot;
  auto* c_plot = app.add_subcommand("plot", "render an SVG plot from a train log or a delimited eval report");
  c_plot->add_option("--kind", plot.kind, "level_curve or train_curve")->required();
  c_plot->add_option("--input", plot.input)->required();
  c_plot->add_option("--title", plot.title);
  c_plot->add_option("--name", plot.name, "output file name (default: <kind>.svg)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    g.seed = seed_text.empty() ? seed_from_env() : [&] {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(seed_text, &used);
        if (used != seed_text.size() || seed_text.front() == '-') throw std::invalid_argument(seed_text);
        return static_cast<std::uint64_t>(v);
      } catch (const std::exception&) {
        fail("--seed is not an unsigned integer: '" + seed_text + "'");
      }
    }();
    if (c_split->parsed()) cmd_split(g, split);
    if (c_levels->parsed()) cmd_levels(g, levels);
    if (c_cluster->parsed()) cmd_cluster(g, cluster);
    if (c_eval->parsed()) cmd_eval(g, eval);
    if (c_toy->parsed()) cmd_toy(g, toy);
    if (c_bugs->parsed()) cmd_bugs(g, bugs);
    if (c_plot->parsed()) cmd_plot(g, plot);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::kInfeasible ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
