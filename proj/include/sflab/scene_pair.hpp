#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sflab/common.hpp"

namespace sflab {

// One dataset sample: two frames, the ground-truth flow for every first-frame
// point, and the validity mask (true = the point has a correspondence in the
// second frame).  Coordinates and flow are flattened n x 3 row-major.
struct ScenePair {
  std::vector<double> pc1;
  std::vector<double> pc2;
  std::vector<double> gt_flow;
  std::vector<uint8_t> mask;

  int64_t n1() const { return static_cast<int64_t>(pc1.size()) / 3; }
  int64_t n2() const { return static_cast<int64_t>(pc2.size()) / 3; }

  void validate() const {
    if (pc1.empty() || pc1.size() % 3 != 0 || pc2.empty() || pc2.size() % 3 != 0) {
      throw std::invalid_argument("ScenePair: coordinates must be non-empty n x 3");
    }
    if (gt_flow.size() != pc1.size()) {
      throw std::invalid_argument("ScenePair: gt_flow rows must match pc1 rows");
    }
    if (mask.size() != static_cast<size_t>(n1())) {
      throw std::invalid_argument("ScenePair: mask length must match pc1 rows");
    }
    for (double v : pc1) {
      if (!std::isfinite(v)) throw std::invalid_argument("ScenePair: non-finite pc1");
    }
    for (double v : pc2) {
      if (!std::isfinite(v)) throw std::invalid_argument("ScenePair: non-finite pc2");
    }
    for (double v : gt_flow) {
      if (!std::isfinite(v)) throw std::invalid_argument("ScenePair: non-finite gt_flow");
    }
  }
};

}  // namespace sflab
