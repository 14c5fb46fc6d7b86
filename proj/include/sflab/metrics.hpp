#pragma once

#include <optional>
#include <span>

#include "sflab/common.hpp"

namespace sflab {

struct PinholeCamera {
  double fx = 1050.0;
  double fy = 1050.0;
  double cx = 479.5;
  double cy = 269.5;
};

struct MetricReport {
  double epe3d = 0;          // meters
  double acc3d_strict = 0;   // fraction with error < 0.05 m or < 5% relative
  double acc3d_relax = 0;    // fraction with error < 0.1 m or < 10% relative
  double outliers3d = 0;     // fraction with error > 0.3 m or > 10% relative
  std::optional<double> epe2d;  // pixels
  std::optional<double> acc2d;
  int64_t n_evaluated = 0;
};

namespace detail {

inline void project(const PinholeCamera& cam, const double* p, double* uv) {
  uv[0] = cam.fx * p[0] / p[2] + cam.cx;
  uv[1] = cam.fy * p[1] / p[2] + cam.cy;
}

}  // namespace detail

// Flow error metrics over the valid points.  2D variants are produced only
// when a camera is supplied, which requires the first-frame coordinates to
// project the warped endpoints.
inline MetricReport evaluate(std::span<const double> pred, std::span<const double> gt,
                             const uint8_t* mask = nullptr,
                             const std::optional<PinholeCamera>& camera = {},
                             std::span<const double> coords = {}) {
  if (pred.size() != gt.size() || pred.size() % 3 != 0) {
    throw std::invalid_argument("evaluate: pred and gt must both be n x 3");
  }
  if (camera && coords.size() != pred.size()) {
    throw std::invalid_argument("evaluate: 2D metrics need first-frame coordinates");
  }
  const int64_t n = static_cast<int64_t>(pred.size()) / 3;

  MetricReport r;
  double epe_sum = 0, epe2d_sum = 0;
  int64_t strict = 0, relax = 0, outlier = 0, acc2d = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (mask && !mask[i]) continue;
    double e2 = 0, g2 = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = pred[i * 3 + c] - gt[i * 3 + c];
      e2 += d * d;
      g2 += gt[i * 3 + c] * gt[i * 3 + c];
    }
    const double e = std::sqrt(e2);
    const double rel = e / std::max(std::sqrt(g2), 1e-12);
    epe_sum += e;
    if (e < 0.05 || rel < 0.05) ++strict;
    if (e < 0.1 || rel < 0.1) ++relax;
    if (e > 0.3 || rel > 0.1) ++outlier;

    if (camera) {
      double base[2], pred_uv[2], gt_uv[2];
      double warped[3], warped_gt[3];
      for (int c = 0; c < 3; ++c) {
        warped[c] = coords[i * 3 + c] + pred[i * 3 + c];
        warped_gt[c] = coords[i * 3 + c] + gt[i * 3 + c];
      }
      detail::project(*camera, &coords[i * 3], base);
      detail::project(*camera, warped, pred_uv);
      detail::project(*camera, warped_gt, gt_uv);
      const double fu = pred_uv[0] - base[0], fv = pred_uv[1] - base[1];
      const double gu = gt_uv[0] - base[0], gv = gt_uv[1] - base[1];
      const double e2d = std::hypot(fu - gu, fv - gv);
      const double rel2d = e2d / std::max(std::hypot(gu, gv), 1e-12);
      epe2d_sum += e2d;
      if (e2d < 3.0 || rel2d < 0.05) ++acc2d;
    }
    ++r.n_evaluated;
  }
  if (r.n_evaluated == 0) {
    throw std::invalid_argument("evaluate: no valid points");
  }
  const double inv = 1.0 / static_cast<double>(r.n_evaluated);
  r.epe3d = epe_sum * inv;
  r.acc3d_strict = strict * inv;
  r.acc3d_relax = relax * inv;
  r.outliers3d = outlier * inv;
  if (camera) {
    r.epe2d = epe2d_sum * inv;
    r.acc2d = acc2d * inv;
  }
  return r;
}

}  // namespace sflab
