#pragma once

#include <array>

#include "sflab/scene_pair.hpp"

namespace sflab {

// Synthetic rigid-motion scenes: a few box/sphere clusters, each moved by its
// own rigid transform between the frames.  Optional occlusion deletes the
// corresponding second-frame points (replaced by background clutter) and
// clears the mask for the first-frame originals.
struct SceneGenConfig {
  int64_t n_points = 2048;
  int n_objects = 2;
  double translation_range = 0.35;  // meters, per axis
  double rotation_range = 0.2;      // radians
  double noise_sigma = 0.0;         // meters, second frame only
  double occlusion_fraction = 0.0;  // in [0, 1)
  uint64_t seed = 1;

  void validate() const {
    if (n_points < 1) throw std::invalid_argument("SceneGenConfig: n_points must be positive");
    if (n_objects < 1) throw std::invalid_argument("SceneGenConfig: n_objects must be positive");
    if (translation_range < 0 || rotation_range < 0 || noise_sigma < 0) {
      throw std::invalid_argument("SceneGenConfig: ranges must be nonnegative");
    }
    if (occlusion_fraction < 0 || occlusion_fraction >= 1) {
      throw std::invalid_argument("SceneGenConfig: occlusion fraction must be in [0,1)");
    }
  }
};

namespace detail {

// Rotation by `angle` about a unit `axis` (Rodrigues).
inline std::array<double, 9> axis_angle_matrix(const std::array<double, 3>& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
          t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
          t * x * z - s * y, t * y * z + s * x, t * z * z + c};
}

inline std::array<double, 3> random_unit_vector(Rng& rng) {
  while (true) {
    std::array<double, 3> v{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const double n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    if (n2 > 1e-6 && n2 <= 1.0) {
      const double inv = 1.0 / std::sqrt(n2);
      return {v[0] * inv, v[1] * inv, v[2] * inv};
    }
  }
}

}  // namespace detail

inline ScenePair generate(const SceneGenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int64_t n = cfg.n_points;

  ScenePair pair;
  pair.pc1.resize(n * 3);
  pair.pc2.resize(n * 3);
  pair.gt_flow.resize(n * 3);
  pair.mask.assign(n, 1);

  // Per-object shape: center inside a 4 m cube, half-extent, box or sphere.
  struct Object {
    std::array<double, 3> center;
    double half_extent;
    bool is_box;
    std::array<double, 9> rot;
    std::array<double, 3> translation;
  };
  std::vector<Object> objects(cfg.n_objects);
  for (int o = 0; o < cfg.n_objects; ++o) {
    Object& obj = objects[o];
    for (int c = 0; c < 3; ++c) obj.center[c] = uniform(rng, -1.5, 1.5);
    obj.half_extent = uniform(rng, 0.15, 0.45);
    obj.is_box = o % 2 == 0;
    const auto axis = detail::random_unit_vector(rng);
    obj.rot = detail::axis_angle_matrix(axis, uniform(rng, -cfg.rotation_range,
                                                      cfg.rotation_range));
    for (int c = 0; c < 3; ++c) {
      obj.translation[c] = uniform(rng, -cfg.translation_range, cfg.translation_range);
    }
  }

  for (int64_t i = 0; i < n; ++i) {
    const Object& obj = objects[i % cfg.n_objects];
    std::array<double, 3> local;
    if (obj.is_box) {
      for (int c = 0; c < 3; ++c) local[c] = uniform(rng, -obj.half_extent, obj.half_extent);
    } else {
      while (true) {
        for (int c = 0; c < 3; ++c) local[c] = uniform(rng, -obj.half_extent, obj.half_extent);
        const double r2 = local[0] * local[0] + local[1] * local[1] + local[2] * local[2];
        if (r2 <= obj.half_extent * obj.half_extent) break;
      }
    }
    std::array<double, 3> p;
    for (int c = 0; c < 3; ++c) p[c] = obj.center[c] + local[c];

    // Rigid motion about the object's center keeps flow magnitudes bounded by
    // the translation range plus a rotation sweep of at most the extent.
    std::array<double, 3> moved;
    for (int r = 0; r < 3; ++r) {
      moved[r] = obj.rot[r * 3] * local[0] + obj.rot[r * 3 + 1] * local[1] +
                 obj.rot[r * 3 + 2] * local[2] + obj.center[r] + obj.translation[r];
    }
    for (int c = 0; c < 3; ++c) {
      pair.pc1[i * 3 + c] = p[c];
      pair.pc2[i * 3 + c] = moved[c];
      pair.gt_flow[i * 3 + c] = moved[c] - p[c];
    }
  }

  // Occlusion: delete the correspondent of a chosen first-frame subset and
  // drop a background point in its place.
  const int64_t n_occluded = static_cast<int64_t>(cfg.occlusion_fraction * n);
  if (n_occluded > 0) {
    std::vector<int64_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = 0; i < n_occluded; ++i) {
      std::uniform_int_distribution<int64_t> pick(i, n - 1);
      std::swap(perm[i], perm[pick(rng)]);
    }
    for (int64_t i = 0; i < n_occluded; ++i) {
      const int64_t j = perm[i];
      pair.mask[j] = 0;
      for (int c = 0; c < 3; ++c) pair.pc2[j * 3 + c] = uniform(rng, -2.0, 2.0);
    }
  }

  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (double& v : pair.pc2) v += noise(rng);
  }
  return pair;
}

}  // namespace sflab
