#pragma once

#include <functional>
#include <vector>

#include "sflab/diff_array.hpp"

namespace sflab {

// Max over checked coordinates of |analytic - central difference| /
// max(|analytic|, |cd|, 1e-8).  `fn` must rebuild its graph on every call and
// return a scalar; `leaves` are the leaf arrays to perturb.  When
// `max_coords_per_leaf` > 0, at most that many coordinates per leaf are
// checked (deterministically sampled); 0 checks everything.
inline double grad_check(const std::function<DiffArray()>& fn, std::vector<DiffArray> leaves,
                         double eps = 1e-5, int64_t max_coords_per_leaf = 0,
                         uint64_t sample_seed = 0) {
  for (DiffArray& leaf : leaves) leaf.clear_grad();
  DiffArray loss = fn();
  backprop(loss);
  std::vector<std::vector<double>> analytic;
  for (DiffArray& leaf : leaves) {
    if (!leaf.requires_grad() || !leaf.has_grad()) {
      throw std::invalid_argument("grad_check: leaf missing a gradient");
    }
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }

  double worst = 0.0;
  Rng rng(sample_seed);
  for (size_t li = 0; li < leaves.size(); ++li) {
    DiffArray& leaf = leaves[li];
    auto vals = leaf.mutable_values();
    std::vector<int64_t> coords;
    if (max_coords_per_leaf <= 0 || leaf.size() <= max_coords_per_leaf) {
      coords.resize(leaf.size());
      for (int64_t i = 0; i < leaf.size(); ++i) coords[i] = i;
    } else {
      std::vector<int64_t> all(leaf.size());
      for (int64_t i = 0; i < leaf.size(); ++i) all[i] = i;
      for (int64_t i = 0; i < max_coords_per_leaf; ++i) {
        std::uniform_int_distribution<int64_t> pick(i, leaf.size() - 1);
        std::swap(all[i], all[pick(rng)]);
        coords.push_back(all[i]);
      }
    }
    for (int64_t c : coords) {
      const double saved = vals[c];
      vals[c] = saved + eps;
      const double up = fn().item();
      vals[c] = saved - eps;
      const double down = fn().item();
      vals[c] = saved;
      const double cd = (up - down) / (2.0 * eps);
      const double a = analytic[li][c];
      const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(a - cd) / denom);
    }
  }
  return worst;
}

// Single-input form used by the layer-level checks.
inline double grad_check(const std::function<DiffArray(const DiffArray&)>& fn, DiffArray x,
                         double eps = 1e-5) {
  return grad_check([&fn, &x]() { return fn(x); }, {x}, eps);
}

// Displaces every value of the given leaves by a small uniform offset.
// Freshly initialized networks sit exactly on activation kinks (zero biases
// against zero self-neighbour rows), where one-sided derivatives differ and a
// finite-difference comparison is meaningless; checks run from a generic
// point instead.
inline void nudge_values(std::vector<DiffArray> leaves, uint64_t seed, double amplitude) {
  Rng rng(seed);
  for (DiffArray& leaf : leaves) {
    for (double& v : leaf.mutable_values()) v += uniform(rng, -amplitude, amplitude);
  }
}

}  // namespace sflab
