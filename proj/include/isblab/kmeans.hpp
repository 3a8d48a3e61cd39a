#pragma once

// Spherical K-means: unit vectors, cosine similarity, centers are normalized
// member means.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "isblab/errors.hpp"
#include "isblab/nn.hpp"
#include "isblab/rng.hpp"

namespace isblab {

struct KMeansResult {
  Mat centers;                   // dim x k_effective, unit columns
  std::vector<int> assignments;  // per input vector
  // Sum over vectors of (1 - cos) to the assigned center, once per iteration.
  // Never increases.
  std::vector<double> objective_history;
  int iterations = 0;
  bool converged = false;

  int k() const { return static_cast<int>(centers.cols()); }
};

/// Columns scaled to unit norm; a zero column is a DegenerateInput error.
inline Mat normalize_columns(const Mat& v) {
  Mat out = v;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double n = out.col(c).norm();
    if (!(n > 0.0) || !std::isfinite(n))
      throw DegenerateInput("vector " + std::to_string(c) + " has zero (or non-finite) norm");
    out.col(c) /= n;
  }
  return out;
}

namespace detail {

inline double assign_all(const Mat& unit, const Mat& centers, std::vector<int>& assign) {
  const Mat sims = centers.transpose() * unit;  // k x n
  double objective = 0.0;
  for (Eigen::Index i = 0; i < unit.cols(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < sims.rows(); ++c)
      if (sims(c, i) > sims(best, i)) best = c;
    assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
    objective += 1.0 - sims(best, i);
  }
  return objective;
}

inline double objective_of(const Mat& unit, const Mat& centers, const std::vector<int>& assign) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < unit.cols(); ++i)
    obj += 1.0 - unit.col(i).dot(centers.col(assign[static_cast<std::size_t>(i)]));
  return obj;
}

}  // namespace detail

/// vectors: one column per vector. Effective k is min(k, number of vectors).
/// Seeding is greedy farthest-point from a random first center; an empty
/// cluster is re-seeded at the member farthest from its own center. Stops at an
/// assignment fixpoint or after max_iters; either way the returned assignments
/// are maximal-cosine for the returned centers.
inline KMeansResult kmeans_cosine(const Mat& vectors, int k, int max_iters, Rng& rng) {
  if (k < 1) throw std::invalid_argument("kmeans_cosine: k must be positive");
  if (vectors.cols() == 0) throw DegenerateInput("kmeans_cosine: no vectors");
  const Mat unit = normalize_columns(vectors);
  const auto n = static_cast<std::size_t>(unit.cols());
  const int k_eff = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), n));

  KMeansResult res;
  res.centers.resize(unit.rows(), k_eff);
  std::vector<double> best_sim(n, -std::numeric_limits<double>::infinity());
  std::size_t pick = uniform_index(rng, n);
  for (int c = 0; c < k_eff; ++c) {
    res.centers.col(c) = unit.col(static_cast<Eigen::Index>(pick));
    const Vec s = unit.transpose() * res.centers.col(c);
    for (std::size_t i = 0; i < n; ++i) best_sim[i] = std::max(best_sim[i], s(static_cast<Eigen::Index>(i)));
    // Farthest remaining point; later index wins ties.
    std::size_t far = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (best_sim[i] <= best_sim[far]) far = i;
    pick = far;
  }

  res.assignments.assign(n, -1);
  std::vector<int> prev;
  for (int it = 0; it < max_iters; ++it) {
    prev = res.assignments;
    detail::assign_all(unit, res.centers, res.assignments);
    res.iterations = it + 1;
    if (res.assignments == prev) {
      res.converged = true;
      break;
    }
    Mat sums = Mat::Zero(unit.rows(), k_eff);
    std::vector<int> counts(static_cast<std::size_t>(k_eff), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.col(res.assignments[i]) += unit.col(static_cast<Eigen::Index>(i));
      counts[static_cast<std::size_t>(res.assignments[i])] += 1;
    }
    std::vector<bool> used(n, false);
    for (int c = 0; c < k_eff; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        std::size_t far = n;
        double worst = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
          if (used[i]) continue;
          const double s = unit.col(static_cast<Eigen::Index>(i)).dot(res.centers.col(res.assignments[i]));
          if (s <= worst) {
            worst = s;
            far = i;
          }
        }
        if (far < n) {
          used[far] = true;
          res.centers.col(c) = unit.col(static_cast<Eigen::Index>(far));
        }
        continue;
      }
      const double norm = sums.col(c).norm();
      if (norm > 1e-12) res.centers.col(c) = sums.col(c) / norm;
    }
    res.objective_history.push_back(detail::objective_of(unit, res.centers, res.assignments));
  }
  if (!res.converged) {
    // Bring assignments in line with the final centers.
    detail::assign_all(unit, res.centers, res.assignments);
  }
  res.objective_history.push_back(detail::objective_of(unit, res.centers, res.assignments));
  return res;
}

inline KMeansResult kmeans_cosine(const std::vector<Vec>& vectors, int k, int max_iters, Rng& rng) {
  if (vectors.empty()) throw DegenerateInput("kmeans_cosine: no vectors");
  Mat m(vectors.front().size(), static_cast<Eigen::Index>(vectors.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != m.rows()) throw ShapeError("kmeans_cosine: vectors differ in length");
    m.col(static_cast<Eigen::Index>(i)) = vectors[i];
  }
  return kmeans_cosine(m, k, max_iters, rng);
}

struct ClusterSelection {
  std::vector<std::size_t> indices;  // selected columns, grouped by cluster
  std::vector<int> cluster_of;       // cluster of each selected column
  std::vector<std::size_t> cluster_sizes;
  KMeansResult kmeans;
};

/// Per cluster, the floor(n/k) members most similar to the center. Leftover
/// slots (the n mod k remainder and any shortfall of small clusters) go one at
/// a time to the largest clusters' next-nearest members, with no cluster
/// exceeding ceil(n/k) + (n mod k).
inline ClusterSelection cluster_select(const Mat& vectors, std::size_t n, int k, int max_iters, Rng& rng) {
  ClusterSelection out;
  out.kmeans = kmeans_cosine(vectors, k, max_iters, rng);
  const Mat unit = normalize_columns(vectors);
  const int k_eff = out.kmeans.k();
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(k_eff));
  for (std::size_t i = 0; i < out.kmeans.assignments.size(); ++i)
    members[static_cast<std::size_t>(out.kmeans.assignments[i])].push_back(i);
  for (int c = 0; c < k_eff; ++c) {
    auto& m = members[static_cast<std::size_t>(c)];
    const Vec center = out.kmeans.centers.col(c);
    std::vector<double> sim(m.size());
    for (std::size_t j = 0; j < m.size(); ++j) sim[j] = unit.col(static_cast<Eigen::Index>(m[j])).dot(center);
    std::vector<std::size_t> order(m.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return m[a] > m[b];  // newer first
    });
    std::vector<std::size_t> sorted;
    for (std::size_t j : order) sorted.push_back(m[j]);
    m = std::move(sorted);
    out.cluster_sizes.push_back(m.size());
  }

  const std::size_t ke = static_cast<std::size_t>(k_eff);
  const std::size_t q = n / ke, r = n % ke;
  const std::size_t cap = (n + ke - 1) / ke + r;
  std::vector<std::size_t> take(ke);
  std::size_t total = 0;
  for (std::size_t c = 0; c < ke; ++c) {
    take[c] = std::min(q, members[c].size());
    total += take[c];
  }
  std::vector<std::size_t> by_size(ke);
  std::iota(by_size.begin(), by_size.end(), std::size_t{0});
  std::stable_sort(by_size.begin(), by_size.end(),
                   [&](std::size_t a, std::size_t b) { return members[a].size() > members[b].size(); });
  bool progress = true;
  while (total < n && progress) {
    progress = false;
    for (std::size_t c : by_size) {
      if (total >= n) break;
      if (take[c] < members[c].size() && take[c] < cap) {
        ++take[c];
        ++total;
        progress = true;
      }
    }
  }
  for (std::size_t c = 0; c < ke; ++c) {
    for (std::size_t j = 0; j < take[c]; ++j) {
      out.indices.push_back(members[c][j]);
      out.cluster_of.push_back(static_cast<int>(c));
    }
  }
  return out;
}

}  // namespace isblab
