#pragma once

// Implicit OOD sub-datasets for manifests without attribute annotations:
// per-class k-means in embedding space, clusters combined by size rank.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oodtest/error.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/random.hpp"
#include "oodtest/splitgen.hpp"

namespace oodtest {

/// Row-major point set.
struct PointSet {
  std::size_t dim = 0;
  std::vector<double> data;

  PointSet() = default;
  explicit PointSet(std::span<const std::vector<double>> rows) {
    if (rows.empty()) return;
    dim = rows.front().size();
    data.reserve(rows.size() * dim);
    for (const auto& r : rows) {
      if (r.size() != dim) fail("points have non-uniform dimensionality");
      data.insert(data.end(), r.begin(), r.end());
    }
  }

  [[nodiscard]] std::size_t size() const { return dim == 0 ? 0 : data.size() / dim; }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
};

struct KMeansOptions {
  std::size_t max_iter = 300;
  double tol = 1e-4;  // on the largest centroid displacement
};

struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, row-major
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each assignment step
  std::size_t iterations = 0;

  [[nodiscard]] std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline std::size_t count_distinct(const PointSet& pts) {
  std::vector<std::span<const double>> rows;
  for (std::size_t i = 0; i < pts.size(); ++i) rows.push_back(pts.row(i));
  std::sort(rows.begin(), rows.end(), [](auto a, auto b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  });
  auto last = std::unique(rows.begin(), rows.end(),
                          [](auto a, auto b) { return std::equal(a.begin(), a.end(), b.begin(), b.end()); });
  return static_cast<std::size_t>(last - rows.begin());
}

// Assigns every point to its nearest centroid (lowest index on ties); returns inertia.
inline double assign(const PointSet& pts, const ClusterModel& m, std::vector<std::size_t>& out,
                     std::vector<double>& dist) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m.k; ++c) {
      const double d = sq_dist(pts.row(i), m.centroid(c));
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    out[i] = best;
    dist[i] = best_d;
    inertia += best_d;
  }
  return inertia;
}

}  // namespace detail

inline double compute_inertia(const PointSet& pts, const ClusterModel& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) s += detail::sq_dist(pts.row(i), m.centroid(m.assignments[i]));
  return s;
}

/// Lloyd's k-means with k-means++ seeding and Euclidean distance.
///
/// An emptied cluster is reseeded at the point farthest from its current
/// centroid. Clusters are re-indexed by first-member order at the end, so
/// point 0 is always in cluster 0.
inline ClusterModel kmeans(const PointSet& pts, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {}) {
  const std::size_t n = pts.size();
  if (pts.dim == 0) fail("kmeans: zero-dimensional input");
  if (k == 0) fail("kmeans: k must be positive");
  if (k > n) fail("kmeans: k = " + std::to_string(k) + " exceeds the number of points " + std::to_string(n));
  if (k > detail::count_distinct(pts)) fail("kmeans: k exceeds the number of distinct points");

  ClusterModel m;
  m.k = k;
  m.dim = pts.dim;
  m.centroids.resize(k * pts.dim);
  Rng rng(seed);

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng() % n);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double x : d2) total += x;
      double target = uniform01(rng) * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        target -= d2[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
      while (d2[pick] <= 0.0) pick = (pick + n - 1) % n;  // never an existing centroid
    }
    std::copy_n(pts.row(pick).begin(), pts.dim, m.centroids.begin() + static_cast<std::ptrdiff_t>(c * pts.dim));
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], detail::sq_dist(pts.row(i), m.centroid(c)));
  }

  m.assignments.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<double> sums(k * pts.dim);
  std::vector<std::size_t> counts(k);
  for (m.iterations = 0; m.iterations < opts.max_iter; ++m.iterations) {
    double inertia = detail::assign(pts, m, m.assignments, dist);

    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t a : m.assignments) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
      std::copy_n(pts.row(far).begin(), pts.dim, m.centroids.begin() + static_cast<std::ptrdiff_t>(c * pts.dim));
      inertia = detail::assign(pts, m, m.assignments, dist);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t a : m.assignments) ++counts[a];
    }
    m.inertia_history.push_back(inertia);

    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = pts.row(i);
      for (std::size_t d = 0; d < pts.dim; ++d) sums[m.assignments[i] * pts.dim + d] += r[d];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      double moved = 0.0;
      for (std::size_t d = 0; d < pts.dim; ++d) {
        const double next = sums[c * pts.dim + d] / static_cast<double>(counts[c]);
        const double delta = next - m.centroids[c * pts.dim + d];
        moved += delta * delta;
        m.centroids[c * pts.dim + d] = next;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift < opts.tol) {
      ++m.iterations;
      break;
    }
  }
  m.inertia = detail::assign(pts, m, m.assignments, dist);
  m.inertia_history.push_back(m.inertia);

  // canonical re-indexing by first member
  std::vector<std::size_t> remap(k, k);
  std::size_t next = 0;
  for (std::size_t a : m.assignments) {
    if (remap[a] == k) remap[a] = next++;
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (remap[c] == k) remap[c] = next++;
  }
  std::vector<double> reordered(m.centroids.size());
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(m.centroids.begin() + static_cast<std::ptrdiff_t>(c * pts.dim), pts.dim,
                reordered.begin() + static_cast<std::ptrdiff_t>(remap[c] * pts.dim));
  }
  m.centroids = std::move(reordered);
  for (auto& a : m.assignments) a = remap[a];
  return m;
}

// ---------------------------------------------------------------------------

struct SubDatasetSeries {
  std::vector<std::vector<std::string>> subdatasets;  // D1..Dk, ids in manifest order
  std::map<std::string, std::vector<std::size_t>> per_class_cluster_sizes;  // descending
};

struct ClusterOptions {
  KMeansOptions kmeans;
  bool l2_normalize = false;
};

/// Clusters each label class into k groups and forms D_i from every class's
/// i-th largest cluster (ties broken by lower cluster index).
inline SubDatasetSeries clustered_subdatasets(const Manifest& manifest, std::size_t k, std::uint64_t seed,
                                              const ClusterOptions& opts = {}) {
  if (!manifest.embedding_dim()) fail("clustered_subdatasets: manifest has no embeddings");
  if (k == 0) fail("clustered_subdatasets: k must be positive");
  const auto& labels = manifest.label_set();
  std::vector<std::vector<std::size_t>> members(labels.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    members[manifest.label_index(manifest.samples()[i].label)].push_back(i);
  }

  SubDatasetSeries out;
  std::vector<std::vector<std::size_t>> picked(k);
  for (std::size_t y = 0; y < labels.size(); ++y) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i : members[y]) {
      auto e = *manifest.samples()[i].embedding;
      if (opts.l2_normalize) {
        double norm = 0.0;
        for (double x : e) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.0) {
          for (double& x : e) x /= norm;
        }
      }
      rows.push_back(std::move(e));
    }
    const PointSet pts{std::span<const std::vector<double>>(rows)};
    if (detail::count_distinct(pts) < k) {
      fail("class '" + labels[y] + "' has fewer than k = " + std::to_string(k) + " distinct embeddings");
    }
    const ClusterModel model = kmeans(pts, k, sub_seed(seed, y), opts.kmeans);

    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t a : model.assignments) ++sizes[a];
    std::vector<std::size_t> rank(k);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });
    std::vector<std::size_t> position(k);
    auto& sorted_sizes = out.per_class_cluster_sizes[labels[y]];
    for (std::size_t r = 0; r < k; ++r) {
      position[rank[r]] = r;
      sorted_sizes.push_back(sizes[rank[r]]);
    }
    for (std::size_t j = 0; j < members[y].size(); ++j) {
      picked[position[model.assignments[j]]].push_back(members[y][j]);
    }
  }
  for (auto& idx : picked) out.subdatasets.push_back(detail::ids_in_manifest_order(manifest, idx));
  return out;
}

/// Split i trains on D_i (minus a validation slice) and tests on every other
/// D_j, one partition each.
inline std::vector<SplitPair> cluster_protocol(const Manifest& manifest, const SubDatasetSeries& series,
                                               std::uint64_t seed = kDefaultSeed, const SplitOptions& opts = {}) {
  const std::size_t k = series.subdatasets.size();
  if (k < 2) fail("cluster_protocol: need at least 2 sub-datasets");
  std::vector<std::vector<std::size_t>> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = resolve_ids(manifest, series.subdatasets[i]);

  std::vector<SplitPair> out;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> parts;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != i) parts.emplace_back("D" + std::to_string(j + 1), idx[j]);
    }
    ShiftSpec spec{ShiftType::kCluster, "", {}, 0.0, 0.0, 0.8, sub_seed(seed, i)};
    out.push_back(partitioned_split(manifest, "D" + std::to_string(i + 1), spec, idx[i], parts, opts));
  }
  return out;
}

}  // namespace oodtest
