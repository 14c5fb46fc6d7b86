#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "sflab/ops.hpp"
#include "sflab/point_cloud.hpp"

namespace sflab {

namespace detail {

inline double sq_dist3(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

// Greedy farthest point sampling over n x 3 coordinates.  Deterministic given
// the start index: each step appends the point with the largest distance to
// the selected set, breaking ties toward the lowest index.
inline std::vector<int64_t> farthest_point_sample(std::span<const double> coords, int64_t n_out,
                                                  int64_t start = 0) {
  const int64_t n = static_cast<int64_t>(coords.size()) / 3;
  if (n_out < 1 || n_out > n) {
    throw std::invalid_argument("farthest_point_sample: n_out " + std::to_string(n_out) +
                                " out of range for " + std::to_string(n) + " points");
  }
  if (start < 0 || start >= n) {
    throw std::invalid_argument("farthest_point_sample: bad start index");
  }
  std::vector<int64_t> selected;
  selected.reserve(n_out);
  selected.push_back(start);
  std::vector<double> min_d2(n);
  for (int64_t i = 0; i < n; ++i) {
    min_d2[i] = detail::sq_dist3(&coords[i * 3], &coords[start * 3]);
  }
  while (static_cast<int64_t>(selected.size()) < n_out) {
    int64_t best = 0;
    double best_d2 = -1.0;
    for (int64_t i = 0; i < n; ++i) {
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    selected.push_back(best);
    const double* bp = &coords[best * 3];
    for (int64_t i = 0; i < n; ++i) {
      min_d2[i] = std::min(min_d2[i], detail::sq_dist3(&coords[i * 3], bp));
    }
  }
  return selected;
}

struct KnnResult {
  IndexMatrix indices;                // m x K, sorted by ascending distance
  std::vector<double> distances;      // m x K Euclidean distances
};

// Exact brute-force K nearest neighbours; distance ties break toward the
// lowest target index.
inline KnnResult knn(std::span<const double> queries, std::span<const double> targets,
                     int64_t K) {
  const int64_t m = static_cast<int64_t>(queries.size()) / 3;
  const int64_t n = static_cast<int64_t>(targets.size()) / 3;
  if (K < 1 || K > n) {
    throw std::invalid_argument("knn: K " + std::to_string(K) + " out of range for " +
                                std::to_string(n) + " targets");
  }
  KnnResult out;
  out.indices = IndexMatrix{m, K, std::vector<int64_t>(m * K)};
  out.distances.resize(m * K);
  std::vector<std::pair<double, int64_t>> cand(n);
  for (int64_t q = 0; q < m; ++q) {
    const double* qp = &queries[q * 3];
    for (int64_t t = 0; t < n; ++t) {
      cand[t] = {detail::sq_dist3(qp, &targets[t * 3]), t};
    }
    std::partial_sort(cand.begin(), cand.begin() + K, cand.end());
    for (int64_t k = 0; k < K; ++k) {
      out.indices.at(q, k) = cand[k].second;
      out.distances[q * K + k] = std::sqrt(cand[k].first);
    }
  }
  return out;
}

struct ThreeNnResult {
  IndexMatrix indices;          // m x 3
  std::vector<double> weights;  // m x 3, nonnegative, rows sum to 1
};

// Inverse-distance interpolation weights over the three nearest sources.
inline ThreeNnResult three_nn_weights(std::span<const double> queries,
                                      std::span<const double> sources, double eps = 1e-10) {
  const int64_t n = static_cast<int64_t>(sources.size()) / 3;
  if (n < 3) {
    throw std::invalid_argument("three_nn_weights: need at least 3 sources, got " +
                                std::to_string(n));
  }
  KnnResult nn = knn(queries, sources, 3);
  ThreeNnResult out;
  out.indices = std::move(nn.indices);
  out.weights.resize(nn.distances.size());
  const int64_t m = out.indices.rows;
  for (int64_t q = 0; q < m; ++q) {
    double inv[3], sum = 0.0;
    for (int k = 0; k < 3; ++k) {
      inv[k] = 1.0 / (nn.distances[q * 3 + k] + eps);
      sum += inv[k];
    }
    for (int k = 0; k < 3; ++k) out.weights[q * 3 + k] = inv[k] / sum;
  }
  return out;
}

// Per (center, neighbour) row: relative coordinate of the neighbour followed
// by its feature; m x K x (3 + c).  Differentiable through coords and feats.
inline DiffArray group_relative(const DiffArray& centers, const IndexMatrix& indices,
                                const DiffArray& coords, const DiffArray* feats = nullptr) {
  if (centers.rank() != 2 || centers.extent(1) != 3 || coords.rank() != 2 ||
      coords.extent(1) != 3) {
    throw std::invalid_argument("group_relative: coordinates must be n x 3");
  }
  if (indices.rows != centers.extent(0)) {
    throw std::invalid_argument("group_relative: index rows do not match centers");
  }
  DiffArray rel = sub(gather_pairs(coords, indices), expand_mid(centers, indices.cols));
  if (!feats) return rel;
  if (feats->rank() != 2 || feats->extent(0) != coords.extent(0)) {
    throw std::invalid_argument("group_relative: feats " + shape_str(feats->shape()) +
                                " do not match coords " + shape_str(coords.shape()));
  }
  return concat_last({rel, gather_pairs(*feats, indices)});
}

struct SubsampleResult {
  PointCloud cloud;
  std::vector<int64_t> indices;
};

// Uniform sampling without replacement, deterministic per seed.
inline SubsampleResult random_subsample(const PointCloud& cloud, int64_t n_out, uint64_t seed) {
  const int64_t n = cloud.size();
  if (n_out < 1 || n_out > n) {
    throw std::invalid_argument("random_subsample: n_out " + std::to_string(n_out) +
                                " out of range for " + std::to_string(n) + " points");
  }
  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (int64_t i = 0; i < n_out; ++i) {
    std::uniform_int_distribution<int64_t> pick(i, n - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  std::vector<int64_t> idx(perm.begin(), perm.begin() + n_out);

  SubsampleResult out;
  out.cloud.coords = gather_rows(cloud.coords, idx);
  if (cloud.feats) out.cloud.feats = gather_rows(*cloud.feats, idx);
  if (cloud.mask) {
    std::vector<uint8_t> m(n_out);
    for (int64_t i = 0; i < n_out; ++i) m[i] = (*cloud.mask)[idx[i]];
    out.cloud.mask = std::move(m);
  }
  out.indices = std::move(idx);
  return out;
}

// Convenience forms over DiffArray coordinate handles.
inline std::vector<int64_t> farthest_point_sample(const DiffArray& coords, int64_t n_out,
                                                  int64_t start = 0) {
  return farthest_point_sample(coords.values(), n_out, start);
}

inline KnnResult knn(const DiffArray& queries, const DiffArray& targets, int64_t K) {
  return knn(queries.values(), targets.values(), K);
}

}  // namespace sflab
