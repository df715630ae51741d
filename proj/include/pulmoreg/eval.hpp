// Landmark error, fissure distance and Jacobian statistics.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/transform.hpp"

namespace pulmoreg {

struct TreReport {
  /// One entry per evaluated pair, in input order (excluded pairs skipped).
  std::vector<double> distances;
  /// Indices of pairs whose fixed point lies outside the field domain.
  std::vector<std::size_t> excluded;
  double mean = 0.0;
  double std = 0.0;
  /// Fraction of distances <= 0.5 k mm, k = 0, 1, ... until all are covered.
  std::vector<double> cumulative;
};

namespace detail {

inline void mean_std(std::span<const double> v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

inline bool in_domain(const Grid& g, const Vec3& p) {
  const Vec3 ci = g.continuous_index(p);
  for (int a = 0; a < 3; ++a)
    if (!(ci[a] >= -1e-9 && ci[a] <= g.dims[a] - 1 + 1e-9)) return false;
  return true;
}

inline Vec3 clamp_to_domain(const Grid& g, const Vec3& p) {
  Vec3 q = p;
  for (int a = 0; a < 3; ++a) q[a] = std::clamp(p[a], g.origin[a], g.origin[a] + (g.dims[a] - 1) * g.spacing[a]);
  return q;
}

}  // namespace detail

/// Nearest voxel centre of `g` to p.
inline Vec3 snap_to_voxel(const Grid& g, const Vec3& p) {
  const Vec3 ci = g.continuous_index(p);
  Vec3 out;
  for (int a = 0; a < 3; ++a) out[a] = g.origin[a] + std::round(ci[a]) * g.spacing[a];
  return out;
}

/// Distance between y(p) = p + u(p) (trilinear in the displacement field) and q for each pair.
/// With `snap_grid`, y(p) is first moved to the nearest voxel centre of that (moving) grid.
inline TreReport eval_tre(std::span<const Vec3> fixed_points, std::span<const Vec3> moving_points,
                          const VectorField& displacement, const Grid* snap_grid = nullptr) {
  if (fixed_points.size() != moving_points.size()) throw ValidationError("landmark lists differ in length");
  TreReport r;
  for (std::size_t i = 0; i < fixed_points.size(); ++i) {
    const Vec3& p = fixed_points[i];
    if (!detail::in_domain(displacement.grid(), p)) {
      r.excluded.push_back(i);
      continue;
    }
    Vec3 y = p + trilinear_sample(displacement, p);
    if (snap_grid) y = snap_to_voxel(*snap_grid, y);
    r.distances.push_back(norm(y - moving_points[i]));
  }
  detail::mean_std(r.distances, r.mean, r.std);
  if (!r.distances.empty()) {
    const double mx = *std::max_element(r.distances.begin(), r.distances.end());
    for (int k = 0;; ++k) {
      const double t = 0.5 * k;
      const auto c = std::count_if(r.distances.begin(), r.distances.end(), [t](double d) { return d <= t; });
      r.cumulative.push_back(static_cast<double>(c) / static_cast<double>(r.distances.size()));
      if (t >= mx) break;
    }
  }
  return r;
}

/// Displacement field at the voxel centres of `grid`.
inline VectorField zero_field(const Grid& grid) { return VectorField(grid, Vec3{}); }

struct FissureReport {
  double mean = 0.0;
  double std = 0.0;
  std::size_t voxels = 0;
};

/// Mean distance from warped fixed-fissure voxels to the moving fissure: the moving mask's
/// Euclidean distance map is sampled trilinearly at y(x) for every fixed fissure voxel x.
inline FissureReport eval_fissure(const Image3D& fixed_fissure, const Image3D& moving_fissure,
                                  const VectorField& displacement) {
  if (count_foreground(fixed_fissure) == 0 || count_foreground(moving_fissure) == 0)
    throw ValidationError("fissure masks must be non-empty");
  const Image3D dist = euclidean_distance_transform(moving_fissure);
  const auto& g = fixed_fissure.grid();
  std::vector<double> d;
  for (std::size_t i = 0; i < fixed_fissure.size(); ++i) {
    if (fixed_fissure[i] < 0.5) continue;
    const Vec3 x = g.world(g.coords(i));
    const Vec3 u = trilinear_sample(displacement, detail::clamp_to_domain(displacement.grid(), x));
    d.push_back(trilinear_sample(dist, detail::clamp_to_domain(dist.grid(), x + u)));
  }
  FissureReport r;
  r.voxels = d.size();
  detail::mean_std(d, r.mean, r.std);
  return r;
}

struct JacobianReport {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double q01 = 0.0;
  double q99 = 0.0;
  double max = 0.0;
  std::size_t voxels = 0;
  /// Voxels with det <= 0.
  std::size_t folds = 0;
};

/// Nearest-rank quantile of sorted data: element ceil(p N) (1-based).
inline double nearest_rank(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline JacobianReport jacobian_statistics(std::vector<double> values) {
  if (values.empty()) throw ValidationError("Jacobian statistics need a non-empty mask");
  JacobianReport r;
  r.voxels = values.size();
  r.folds = static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double v) { return v <= 0.0; }));
  detail::mean_std(values, r.mean, r.std);
  std::sort(values.begin(), values.end());
  r.min = values.front();
  r.max = values.back();
  r.q01 = nearest_rank(values, 0.01);
  r.q99 = nearest_rank(values, 0.99);
  return r;
}

/// det(I + grad u) of a displacement field, central differences (one-sided at borders).
inline Image3D det_jacobian_field(const VectorField& displacement) {
  const auto& g = displacement.grid();
  std::array<Image3D, 3> comp;
  for (int c = 0; c < 3; ++c) {
    comp[static_cast<std::size_t>(c)] = Image3D(g);
    for (std::size_t i = 0; i < g.size(); ++i) comp[static_cast<std::size_t>(c)][i] = displacement[i][c];
  }
  std::array<GradientField, 3> grads{gradient(comp[0]), gradient(comp[1]), gradient(comp[2])};
  Image3D out(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    Mat3 m = identity3();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] += grads[static_cast<std::size_t>(r)][i][c];
    out[i] = det3(m);
  }
  return out;
}

inline JacobianReport eval_jacobian(const Image3D& det, const Image3D& mask) {
  if (!det.grid().same_geometry(mask.grid())) throw ValidationError("Jacobian map and mask geometries differ");
  std::vector<double> v;
  for (std::size_t i = 0; i < det.size(); ++i)
    if (mask[i] >= 0.5) v.push_back(det[i]);
  return jacobian_statistics(std::move(v));
}

inline JacobianReport eval_jacobian(const VectorField& displacement, const Image3D& mask) {
  return eval_jacobian(det_jacobian_field(displacement), mask);
}

/// Analytic determinant of the transform at the mask's voxel centres.
inline JacobianReport eval_jacobian(const BSplineTransform& t, const Image3D& mask) {
  return eval_jacobian(det_jacobian_field(t, mask.grid()), mask);
}

}  // namespace pulmoreg
