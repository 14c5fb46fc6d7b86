#pragma once

#include <optional>
#include <vector>

#include "sflab/diff_array.hpp"

namespace sflab {

// Per-frame point set: n x 3 coordinates in meters, optional n x c features,
// optional validity mask (true = a correspondence exists in the other frame).
struct PointCloud {
  DiffArray coords;
  std::optional<DiffArray> feats;
  std::optional<std::vector<uint8_t>> mask;

  int64_t size() const { return coords.extent(0); }
  int64_t feat_width() const { return feats ? feats->extent(1) : 0; }
};

inline PointCloud make_point_cloud(DiffArray coords, std::optional<DiffArray> feats = {},
                                   std::optional<std::vector<uint8_t>> mask = {}) {
  if (coords.rank() != 2 || coords.extent(1) != 3) {
    throw std::invalid_argument("PointCloud: coords must be n x 3, got " +
                                shape_str(coords.shape()));
  }
  for (double v : coords.values()) {
    if (!std::isfinite(v)) throw std::invalid_argument("PointCloud: non-finite coordinate");
  }
  const int64_t n = coords.extent(0);
  if (feats && (feats->rank() != 2 || feats->extent(0) != n)) {
    throw std::invalid_argument("PointCloud: feats " + shape_str(feats->shape()) +
                                " do not match " + std::to_string(n) + " points");
  }
  if (mask && static_cast<int64_t>(mask->size()) != n) {
    throw std::invalid_argument("PointCloud: mask length " + std::to_string(mask->size()) +
                                " does not match " + std::to_string(n) + " points");
  }
  return PointCloud{std::move(coords), std::move(feats), std::move(mask)};
}

inline PointCloud cloud_from_coords(const std::vector<double>& flat_xyz) {
  const int64_t n = static_cast<int64_t>(flat_xyz.size()) / 3;
  return make_point_cloud(DiffArray::leaf({n, 3}, flat_xyz));
}

}  // namespace sflab
