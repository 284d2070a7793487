#pragma once

// Desk-scale reproduction lab: a synthetic generator with explicit relevant and
// irrelevant feature blocks, plus softmax classifiers (linear and one hidden
// layer) trained by mini-batch SGD on cross-entropy.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oodtest/error.hpp"
#include "oodtest/eval.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/random.hpp"
#include "oodtest/splitgen.hpp"

namespace oodtest {

struct ToyConfig {
  std::size_t n_samples = 8000;
  std::size_t n_classes = 2;
  std::size_t relevant_dim = 1;
  std::size_t irrelevant_dim = 1;
  double margin = 2.0;        // spacing of class centers along every relevant dim
  double noise_sigma = 1.0;   // Gaussian noise on the relevant block
  std::size_t attr_values_per_dim = 4;
  double irrelevant_scale = 1.0;  // irrelevant block ~ U[-scale, scale]
  // Extra categorical attributes independent of labels and features.
  std::size_t annotation_attrs = 0;
  std::size_t annotation_values = 2;
  bool emit_embedding = false;  // copy features into the embedding field
  std::uint64_t seed = kDefaultSeed;
};

namespace detail {

inline std::string padded(const char* prefix, std::size_t i, std::size_t count) {
  std::string digits = std::to_string(i);
  const std::size_t width = std::to_string(count > 0 ? count - 1 : 0).size();
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

}  // namespace detail

inline std::string toy_attribute_name(std::size_t dim) { return "irr" + std::to_string(dim); }
inline std::string toy_annotation_name(std::size_t i) { return "meta" + std::to_string(i); }

/// Labels cycle through the classes (exactly balanced). The relevant block is
/// the class center plus Gaussian noise; the irrelevant block is uniform and
/// independent of the label. Each irrelevant dim is also exported as a
/// categorical attribute by equal-width binning over its sampled range.
inline Manifest generate_toy(const ToyConfig& cfg) {
  if (cfg.n_samples == 0) fail("toy config: n_samples must be positive");
  if (cfg.n_classes < 2 || cfg.n_classes > 10) fail("toy config: n_classes must be in [2, 10]");
  if (cfg.relevant_dim == 0 || cfg.irrelevant_dim == 0) fail("toy config: block dimensions must be positive");
  if (cfg.attr_values_per_dim == 0) fail("toy config: attr_values_per_dim must be positive");
  if (!(cfg.margin > 0.0)) fail("toy config: margin must be positive");
  if (!(cfg.noise_sigma >= 0.0)) fail("toy config: noise_sigma must be non-negative");
  if (!(cfg.irrelevant_scale > 0.0)) fail("toy config: irrelevant_scale must be positive");
  if (cfg.annotation_attrs > 0 && cfg.annotation_values == 0) fail("toy config: annotation_values must be positive");

  Rng rng(cfg.seed);
  const std::size_t n = cfg.n_samples;
  const std::size_t dim = cfg.relevant_dim + cfg.irrelevant_dim;
  const double center0 = -cfg.margin * static_cast<double>(cfg.n_classes - 1) / 2.0;

  std::vector<std::vector<double>> features(n, std::vector<double>(dim));
  std::vector<std::size_t> classes(n);
  for (std::size_t i = 0; i < n; ++i) {
    classes[i] = i % cfg.n_classes;
    const double center = center0 + cfg.margin * static_cast<double>(classes[i]);
    for (std::size_t d = 0; d < cfg.relevant_dim; ++d) {
      features[i][d] = center + cfg.noise_sigma * standard_normal(rng);
    }
    for (std::size_t d = 0; d < cfg.irrelevant_dim; ++d) {
      features[i][cfg.relevant_dim + d] = uniform(rng, -cfg.irrelevant_scale, cfg.irrelevant_scale);
    }
  }

  std::vector<std::vector<std::size_t>> bins(cfg.irrelevant_dim, std::vector<std::size_t>(n));
  for (std::size_t d = 0; d < cfg.irrelevant_dim; ++d) {
    double lo = features[0][cfg.relevant_dim + d];
    double hi = lo;
    for (const auto& f : features) {
      lo = std::min(lo, f[cfg.relevant_dim + d]);
      hi = std::max(hi, f[cfg.relevant_dim + d]);
    }
    const double width = (hi - lo) / static_cast<double>(cfg.attr_values_per_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = features[i][cfg.relevant_dim + d];
      auto b = width > 0.0 ? static_cast<std::size_t>((x - lo) / width) : 0;
      bins[d][i] = std::min(b, cfg.attr_values_per_dim - 1);
    }
  }

  std::vector<Sample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = samples[i];
    s.id = detail::padded("toy-", i, n);
    s.label = "c" + std::to_string(classes[i]);
    for (std::size_t d = 0; d < cfg.irrelevant_dim; ++d) {
      s.attributes[toy_attribute_name(d)] = detail::padded("b", bins[d][i], cfg.attr_values_per_dim);
    }
    for (std::size_t a = 0; a < cfg.annotation_attrs; ++a) {
      const auto v = static_cast<std::size_t>(rng() % cfg.annotation_values);
      s.attributes[toy_annotation_name(a)] = detail::padded("m", v, cfg.annotation_values);
    }
    if (cfg.emit_embedding) s.embedding = features[i];
    s.features = std::move(features[i]);
  }
  return Manifest::from_samples(std::move(samples));
}

// ---------------------------------------------------------------------------
// Models

enum class ModelKind { kLinear, kMlp };

inline const char* to_string(ModelKind k) { return k == ModelKind::kLinear ? "linear" : "mlp"; }

inline ModelKind model_kind_from_string(std::string_view s) {
  if (s == "linear") return ModelKind::kLinear;
  if (s == "mlp") return ModelKind::kMlp;
  fail("unknown model kind '" + std::string(s) + "'");
}

/// Softmax classifier. Parameter layout, row-major:
///   linear: W[K x D], b[K]
///   mlp:    W1[H x D], b1[H], W2[K x H], b2[K], tanh hidden units
struct ToyModel {
  ModelKind kind = ModelKind::kLinear;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::vector<std::string> labels;
  std::vector<double> weights;

  [[nodiscard]] std::size_t n_classes() const { return labels.size(); }

  [[nodiscard]] static std::size_t param_count(ModelKind kind, std::size_t d, std::size_t k, std::size_t h) {
    return kind == ModelKind::kLinear ? k * d + k : h * d + h + k * h + k;
  }

  static ToyModel zeros(ModelKind kind, std::size_t input_dim, std::vector<std::string> labels,
                        std::size_t hidden = 32) {
    ToyModel m;
    m.kind = kind;
    m.input_dim = input_dim;
    m.hidden = kind == ModelKind::kMlp ? hidden : 0;
    m.labels = std::move(labels);
    m.weights.assign(param_count(kind, input_dim, m.labels.size(), m.hidden), 0.0);
    return m;
  }

  // Every parameter uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] of its layer.
  static ToyModel initialized(ModelKind kind, std::size_t input_dim, std::vector<std::string> labels,
                              std::size_t hidden, std::uint64_t seed) {
    ToyModel m = zeros(kind, input_dim, std::move(labels), hidden);
    Rng rng(seed);
    const std::size_t k = m.n_classes();
    auto fill = [&](std::size_t from, std::size_t count, std::size_t fan_in) {
      const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = from; i < from + count; ++i) m.weights[i] = uniform(rng, -r, r);
    };
    if (kind == ModelKind::kLinear) {
      fill(0, k * input_dim + k, input_dim);
    } else {
      const std::size_t h = m.hidden;
      fill(0, h * input_dim + h, input_dim);
      fill(h * input_dim + h, k * h + k, h);
    }
    return m;
  }

  // Class scores for one input; `hidden_out` receives tanh activations for mlp.
  void logits(std::span<const double> x, std::span<double> out, std::span<double> hidden_out = {}) const {
    const std::size_t d = input_dim;
    const std::size_t k = n_classes();
    const double* w = weights.data();
    if (kind == ModelKind::kLinear) {
      for (std::size_t c = 0; c < k; ++c) {
        double z = w[k * d + c];
        for (std::size_t j = 0; j < d; ++j) z += w[c * d + j] * x[j];
        out[c] = z;
      }
      return;
    }
    std::vector<double> local;
    if (hidden_out.empty()) {
      local.resize(hidden);
      hidden_out = local;
    }
    const double* b1 = w + hidden * d;
    const double* w2 = b1 + hidden;
    const double* b2 = w2 + k * hidden;
    for (std::size_t u = 0; u < hidden; ++u) {
      double a = b1[u];
      for (std::size_t j = 0; j < d; ++j) a += w[u * d + j] * x[j];
      hidden_out[u] = std::tanh(a);
    }
    for (std::size_t c = 0; c < k; ++c) {
      double z = b2[c];
      for (std::size_t u = 0; u < hidden; ++u) z += w2[c * hidden + u] * hidden_out[u];
      out[c] = z;
    }
  }

  [[nodiscard]] std::vector<double> probabilities(std::span<const double> x) const {
    std::vector<double> z(n_classes());
    logits(x, z);
    const double top = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) sum += (v = std::exp(v - top));
    for (double& v : z) v /= sum;
    return z;
  }

  // argmax of class scores, lowest index on ties
  [[nodiscard]] std::size_t predict_index(std::span<const double> x) const {
    std::vector<double> z(n_classes());
    logits(x, z);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
};

/// Feature rows and label indices for a set of ids.
struct Dataset {
  std::size_t dim = 0;
  std::vector<double> x;
  std::vector<std::size_t> y;

  [[nodiscard]] std::size_t size() const { return y.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
};

inline Dataset make_dataset(const Manifest& manifest, std::span<const std::string> ids) {
  if (!manifest.feature_dim()) fail("manifest has no feature vectors");
  Dataset ds;
  ds.dim = *manifest.feature_dim();
  ds.x.reserve(ids.size() * ds.dim);
  for (const auto& id : ids) {
    const Sample& s = manifest.at(id);
    if (!s.features) fail("sample '" + id + "' has no features");
    ds.x.insert(ds.x.end(), s.features->begin(), s.features->end());
    ds.y.push_back(manifest.label_index(s.label));
  }
  return ds;
}

/// Mean cross-entropy over `rows` of `data`; accumulates the gradient into
/// `grad` (resized to the parameter count) when given.
inline double cross_entropy(const ToyModel& model, const Dataset& data, std::span<const std::size_t> rows,
                            std::vector<double>* grad = nullptr) {
  const std::size_t d = model.input_dim;
  const std::size_t k = model.n_classes();
  const std::size_t h = model.hidden;
  if (grad) grad->assign(model.weights.size(), 0.0);
  if (rows.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(rows.size());
  std::vector<double> z(k);
  std::vector<double> act(h);
  std::vector<double> dact(h);
  double loss = 0.0;
  for (std::size_t r : rows) {
    const auto x = data.row(r);
    model.logits(x, z, act);
    const double top = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - top);
    const double log_norm = top + std::log(sum);
    loss += log_norm - z[data.y[r]];
    if (!grad) continue;

    double* g = grad->data();
    // dz = softmax - onehot, scaled by 1/n
    for (std::size_t c = 0; c < k; ++c) z[c] = (std::exp(z[c] - log_norm) - (c == data.y[r] ? 1.0 : 0.0)) * scale;
    if (model.kind == ModelKind::kLinear) {
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t j = 0; j < d; ++j) g[c * d + j] += z[c] * x[j];
        g[k * d + c] += z[c];
      }
      continue;
    }
    const double* w2 = model.weights.data() + h * d + h;
    double* g_b1 = g + h * d;
    double* g_w2 = g_b1 + h;
    double* g_b2 = g_w2 + k * h;
    std::fill(dact.begin(), dact.end(), 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t u = 0; u < h; ++u) {
        g_w2[c * h + u] += z[c] * act[u];
        dact[u] += w2[c * h + u] * z[c];
      }
      g_b2[c] += z[c];
    }
    for (std::size_t u = 0; u < h; ++u) {
      const double da = dact[u] * (1.0 - act[u] * act[u]);
      for (std::size_t j = 0; j < d; ++j) g[u * d + j] += da * x[j];
      g_b1[u] += da;
    }
  }
  return loss * scale;
}

inline double dataset_accuracy(const ToyModel& model, const Dataset& data) {
  if (data.size() == 0) return kNaN;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += model.predict_index(data.row(i)) == data.y[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainParams {
  double lr = 0.1;
  std::size_t batch_size = 16;
  std::size_t iterations = 1000;
  std::uint64_t seed = kDefaultSeed;
  std::size_t log_every = 10;
  std::size_t hidden = 32;
};

struct TrainRecord {
  std::size_t iteration = 0;
  double loss = 0.0;       // mean cross-entropy over the training slice
  double train_acc = 0.0;  // kept in memory, not exported
  double id_val_acc = 0.0;
  double ood_test_acc = 0.0;

  bool operator==(const TrainRecord&) const = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  bool operator==(const TrainLog&) const = default;
};

struct TrainResult {
  ToyModel model;
  TrainLog log;
};

inline TrainResult train_classifier(const Manifest& manifest, const SplitPair& split, ModelKind kind,
                                    const TrainParams& params = {}) {
  if (split.train_ids.empty()) fail("train_classifier: empty training side");
  if (params.batch_size == 0) fail("train_classifier: batch_size must be positive");
  if (params.log_every == 0) fail("train_classifier: log_every must be positive");
  if (kind == ModelKind::kMlp && params.hidden == 0) fail("train_classifier: hidden width must be positive");
  const Dataset train = make_dataset(manifest, split.train_ids);
  const Dataset val = make_dataset(manifest, split.val_ids);
  const Dataset test = make_dataset(manifest, split.test_ids);

  TrainResult out{ToyModel::initialized(kind, train.dim, manifest.label_set(), params.hidden, params.seed), {}};
  Rng rng(mix64(params.seed));
  std::vector<std::size_t> order(train.size());
  std::vector<std::size_t> all(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = all[i] = i;
  std::size_t cursor = order.size();
  std::vector<double> grad;
  std::vector<std::size_t> batch;

  for (std::size_t t = 1; t <= params.iterations; ++t) {
    batch.clear();
    while (batch.size() < std::min(params.batch_size, order.size())) {
      if (cursor == order.size()) {
        shuffle_in_place(order, rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const double loss = cross_entropy(out.model, train, batch, &grad);
    if (!std::isfinite(loss)) fail("train_classifier: non-finite loss at iteration " + std::to_string(t));
    for (std::size_t i = 0; i < grad.size(); ++i) out.model.weights[i] -= params.lr * grad[i];

    if (t % params.log_every == 0 || t == params.iterations) {
      TrainRecord rec;
      rec.iteration = t;
      rec.loss = cross_entropy(out.model, train, all);
      if (!std::isfinite(rec.loss)) fail("train_classifier: non-finite loss at iteration " + std::to_string(t));
      rec.train_acc = dataset_accuracy(out.model, train);
      rec.id_val_acc = dataset_accuracy(out.model, val);
      rec.ood_test_acc = dataset_accuracy(out.model, test);
      out.log.records.push_back(rec);
    }
  }
  return out;
}

inline PredictionSet predict(const ToyModel& model, const Manifest& manifest, std::span<const std::string> ids,
                             std::string model_id = "toy") {
  PredictionSet ps;
  ps.model_id = std::move(model_id);
  for (const auto& id : ids) {
    const Sample& s = manifest.at(id);
    if (!s.features) fail("sample '" + id + "' has no features");
    if (s.features->size() != model.input_dim) fail("sample '" + id + "' feature length does not match the model");
    const auto p = model.probabilities(*s.features);
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    ps.predictions[id] = model.labels[best];
    auto& row = ps.scores[id];
    for (std::size_t c = 0; c < p.size(); ++c) row[model.labels[c]] = p[c];
  }
  return ps;
}

// Shortest round-trip decimal form.
inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(x);
}

/// Delimited export: header "iteration,loss,id_val_acc,ood_test_acc" then one row per record.
inline void write_train_log(std::ostream& out, const TrainLog& log) {
  out << "iteration,loss,id_val_acc,ood_test_acc\n";
  for (const auto& r : log.records) {
    out << r.iteration << ',' << format_real(r.loss) << ',' << format_real(r.id_val_acc) << ','
        << format_real(r.ood_test_acc) << '\n';
  }
}

}  // namespace oodtest
