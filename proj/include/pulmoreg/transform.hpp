// First-order B-spline transformation on a regular control grid.
//
// The transformation is y(x) = x + r(x) + u(x), where r is the reference
// displacement (the pre-registration) and u the optimised deviation; both are
// trilinear interpolants of per-control-point coefficients. Within one grid cell
// the Jacobian determinant is a convex combination of 64 determinants built from
// the cell's edge-difference vectors, so their minimum bounds det(grad y) from below.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/parallel.hpp"

namespace pulmoreg {

/// Indices and trilinear weights of the 8 control points that influence a point.
struct ControlStencil {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  /// d weight / d x_a (per mm) for each corner; zero along clamped axes.
  std::array<Vec3, 8> dweight{};
};

/// The 64 local volume ratios of one control-grid cell, ordered l = m0 + 4 (m1 + 4 m2)
/// where m_a selects the edge of direction a (m = e1 + 2 e2 over the two other axes).
struct CellJacobianTerms {
  Index3 cell{};
  std::array<double, 64> d{};

  double min() const { return *std::min_element(d.begin(), d.end()); }
  double max() const { return *std::max_element(d.begin(), d.end()); }
};

class BSplineTransform {
 public:
  BSplineTransform() = default;

  /// Control grid with the given geometry; all coefficients zero, no reference.
  explicit BSplineTransform(const Grid& control_grid) : grid_(control_grid) {
    grid_.validate();
    coeffs_.assign(3 * grid_.size(), 0.0);
  }

  /// Control grid with `cells` cells per axis spanning the voxel-centre hull of `image_grid`.
  static BSplineTransform covering(const Grid& image_grid, const Index3& cells) {
    Grid g;
    g.origin = image_grid.origin;
    for (int a = 0; a < 3; ++a) {
      if (cells[a] < 1) throw ValidationError("control grid needs at least one cell per axis");
      g.dims[a] = cells[a] + 1;
      g.spacing[a] = (image_grid.dims[a] - 1) * image_grid.spacing[a] / cells[a];
    }
    return BSplineTransform(g);
  }

  const Grid& grid() const { return grid_; }
  std::size_t control_points() const { return grid_.size(); }
  /// Cell volume C in mm^3.
  double cell_volume() const { return grid_.voxel_volume(); }

  std::span<double> coeffs() { return coeffs_; }
  std::span<const double> coeffs() const { return coeffs_; }
  void set_coeffs(std::span<const double> c) {
    if (c.size() != coeffs_.size()) throw ValidationError("coefficient count mismatch");
    std::copy(c.begin(), c.end(), coeffs_.begin());
  }

  bool has_reference() const { return !reference_.empty(); }
  std::span<const double> reference() const { return reference_; }
  void set_reference(std::vector<double> r) {
    if (!r.empty() && r.size() != coeffs_.size()) throw ValidationError("reference coefficient count mismatch");
    reference_ = std::move(r);
  }

  Vec3 coeff(std::size_t i) const { return Vec3{coeffs_[3 * i], coeffs_[3 * i + 1], coeffs_[3 * i + 2]}; }
  void set_coeff(std::size_t i, const Vec3& v) {
    for (int a = 0; a < 3; ++a) coeffs_[3 * i + static_cast<std::size_t>(a)] = v[a];
  }

  /// Reference plus deviation coefficient at control point i.
  Vec3 total_coeff(std::size_t i) const {
    Vec3 v = coeff(i);
    if (has_reference()) v += Vec3{reference_[3 * i], reference_[3 * i + 1], reference_[3 * i + 2]};
    return v;
  }

  ControlStencil stencil(const Vec3& p) const {
    ControlStencil s;
    Vec3 ci = grid_.continuous_index(p);
    bool clamped[3];
    for (int a = 0; a < 3; ++a) {
      const double hi = grid_.dims[a] - 1;
      clamped[a] = ci[a] < 0.0 || ci[a] > hi;
      ci[a] = std::clamp(ci[a], 0.0, hi);
    }
    const auto c = detail::cell_of(ci, grid_.dims);
    const double w[3][2] = {{1 - c.frac[0], c.frac[0]}, {1 - c.frac[1], c.frac[1]}, {1 - c.frac[2], c.frac[2]}};
    const double dw[3][2] = {{-1 / grid_.spacing[0], 1 / grid_.spacing[0]},
                             {-1 / grid_.spacing[1], 1 / grid_.spacing[1]},
                             {-1 / grid_.spacing[2], 1 / grid_.spacing[2]}};
    int n = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx, ++n) {
          s.index[n] = grid_.index(c.base[0] + dx, c.base[1] + dy, c.base[2] + dz);
          s.weight[n] = w[0][dx] * w[1][dy] * w[2][dz];
          s.dweight[n] = Vec3{clamped[0] ? 0.0 : dw[0][dx] * w[1][dy] * w[2][dz],
                              clamped[1] ? 0.0 : w[0][dx] * dw[1][dy] * w[2][dz],
                              clamped[2] ? 0.0 : w[0][dx] * w[1][dy] * dw[2][dz]};
        }
    return s;
  }

  /// Total displacement r(p) + u(p); constant extrapolation outside the control domain.
  Vec3 displacement(const Vec3& p) const {
    const auto s = stencil(p);
    Vec3 d{};
    for (int n = 0; n < 8; ++n) d += s.weight[n] * total_coeff(s.index[n]);
    return d;
  }

  /// Deviation part u(p) only.
  Vec3 deviation(const Vec3& p) const {
    const auto s = stencil(p);
    Vec3 d{};
    for (int n = 0; n < 8; ++n) d += s.weight[n] * coeff(s.index[n]);
    return d;
  }

  /// y(p).
  Vec3 operator()(const Vec3& p) const { return p + displacement(p); }

  /// Analytic spatial Jacobian of y at p (rows: output component).
  Mat3 jacobian(const Vec3& p) const {
    const auto s = stencil(p);
    Mat3 j = identity3();
    for (int n = 0; n < 8; ++n) {
      const Vec3 c = total_coeff(s.index[n]);
      for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) j[r][col] += c[r] * s.dweight[n][col];
    }
    return j;
  }

  std::size_t cell_count() const {
    return static_cast<std::size_t>(grid_.dims[0] - 1) * (grid_.dims[1] - 1) * (grid_.dims[2] - 1);
  }

  Index3 cell_coords(std::size_t cell) const {
    const auto nx = static_cast<std::size_t>(grid_.dims[0] - 1);
    const auto ny = static_cast<std::size_t>(grid_.dims[1] - 1);
    return {static_cast<int>(cell % nx), static_cast<int>((cell / nx) % ny), static_cast<int>(cell / (nx * ny))};
  }

 private:
  Grid grid_;
  std::vector<double> coeffs_;
  std::vector<double> reference_;
};

/// y(p) for every point.
inline std::vector<Vec3> evaluate(const BSplineTransform& t, std::span<const Vec3> points) {
  std::vector<Vec3> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = t(points[i]);
  return out;
}

/// Maps a point through a pre-registration transform (definitionally evaluate()).
inline Vec3 compose_displacement(const BSplineTransform& outer, const Vec3& inner_point) { return outer(inner_point); }

namespace detail {

// Edge-difference vectors of the total transform across a cell, per direction.
struct CellEdges {
  std::array<std::array<Vec3, 4>, 3> edge{};
  // Corner control-point indices, corner n = dx + 2 dy + 4 dz.
  std::array<std::size_t, 8> corner{};
};

inline CellEdges cell_edges(const BSplineTransform& t, const Index3& cell) {
  const auto& g = t.grid();
  CellEdges ce;
  std::array<Vec3, 8> pos;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int n = dx + 2 * dy + 4 * dz;
        const int i = cell[0] + dx, j = cell[1] + dy, k = cell[2] + dz;
        ce.corner[static_cast<std::size_t>(n)] = g.index(i, j, k);
        pos[static_cast<std::size_t>(n)] = g.world(i, j, k) + t.total_coeff(ce.corner[static_cast<std::size_t>(n)]);
      }
  // Direction a: the 4 edges are indexed by m = e1 + 2 e2 over the remaining axes (in increasing order).
  for (int a = 0; a < 3; ++a) {
    const int b = a == 0 ? 1 : 0;
    const int c = a == 2 ? 1 : 2;
    for (int m = 0; m < 4; ++m) {
      int lo[3] = {0, 0, 0};
      lo[b] = m & 1;
      lo[c] = (m >> 1) & 1;
      int hi[3] = {lo[0], lo[1], lo[2]};
      hi[a] = 1;
      const auto n0 = static_cast<std::size_t>(lo[0] + 2 * lo[1] + 4 * lo[2]);
      const auto n1 = static_cast<std::size_t>(hi[0] + 2 * hi[1] + 4 * hi[2]);
      ce.edge[static_cast<std::size_t>(a)][static_cast<std::size_t>(m)] = (pos[n1] - pos[n0]) * (1.0 / g.spacing[a]);
    }
  }
  return ce;
}

// Corner pair (low, high) spanned by edge m of direction a.
inline std::pair<int, int> edge_corners(int a, int m) {
  const int b = a == 0 ? 1 : 0;
  const int c = a == 2 ? 1 : 2;
  int lo[3] = {0, 0, 0};
  lo[b] = m & 1;
  lo[c] = (m >> 1) & 1;
  int hi[3] = {lo[0], lo[1], lo[2]};
  hi[a] = 1;
  return {lo[0] + 2 * lo[1] + 4 * lo[2], hi[0] + 2 * hi[1] + 4 * hi[2]};
}

}  // namespace detail

inline CellJacobianTerms cell_jacobian_terms(const BSplineTransform& t, const Index3& cell) {
  const auto& dims = t.grid().dims;
  for (int a = 0; a < 3; ++a)
    if (cell[a] < 0 || cell[a] >= dims[a] - 1) throw ValidationError("cell index outside control grid");
  const auto ce = detail::cell_edges(t, cell);
  CellJacobianTerms out;
  out.cell = cell;
  for (int m2 = 0; m2 < 4; ++m2)
    for (int m1 = 0; m1 < 4; ++m1)
      for (int m0 = 0; m0 < 4; ++m0)
        out.d[static_cast<std::size_t>(m0 + 4 * (m1 + 4 * m2))] =
            det_columns(ce.edge[0][static_cast<std::size_t>(m0)], ce.edge[1][static_cast<std::size_t>(m1)],
                        ce.edge[2][static_cast<std::size_t>(m2)]);
  return out;
}

/// Smallest d over all cells (the fold-freeness certificate is min > 0).
inline double min_cell_jacobian(const BSplineTransform& t) {
  const std::size_t n = t.cell_count();
  const int blocks = parallel::block_count(n);
  std::vector<double> mins(static_cast<std::size_t>(blocks), kInf);
  parallel::for_blocks(n, [&](const parallel::Block& b) {
    double m = kInf;
    for (std::size_t c = b.begin; c < b.end; ++c) m = std::min(m, cell_jacobian_terms(t, t.cell_coords(c)).min());
    mins[static_cast<std::size_t>(b.index)] = m;
  });
  return *std::min_element(mins.begin(), mins.end());
}

/// det(grad y) at each voxel centre of `at`, by analytic differentiation of the trilinear transform.
inline Image3D det_jacobian_field(const BSplineTransform& t, const Grid& at) {
  Image3D out(at);
  parallel::for_each_index(at.size(), [&](std::size_t idx) { out[idx] = det3(t.jacobian(at.world(at.coords(idx)))); });
  return out;
}

/// Total displacement y(x) - x sampled at the voxel centres of `at`.
inline VectorField displacement_field(const BSplineTransform& t, const Grid& at) {
  VectorField out(at);
  parallel::for_each_index(at.size(), [&](std::size_t idx) { out[idx] = t.displacement(at.world(at.coords(idx))); });
  return out;
}

/// Re-expresses t on a control grid with finer_dims points spanning the same domain.
/// Exact when the fine grid nests the coarse one (cells subdivided by an integer factor).
inline BSplineTransform prolong(const BSplineTransform& t, const Index3& finer_dims) {
  const auto& g = t.grid();
  Grid fine;
  fine.origin = g.origin;
  for (int a = 0; a < 3; ++a) {
    if (finer_dims[a] < g.dims[a]) throw ValidationError("prolong target must not be coarser");
    fine.dims[a] = finer_dims[a];
    fine.spacing[a] = (g.dims[a] - 1) * g.spacing[a] / (finer_dims[a] - 1);
  }
  BSplineTransform out(fine);
  std::vector<double> ref;
  if (t.has_reference()) ref.assign(3 * fine.size(), 0.0);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const auto s = t.stencil(fine.world(fine.coords(i)));
    Vec3 u{}, r{};
    for (int n = 0; n < 8; ++n) {
      u += s.weight[n] * t.coeff(s.index[n]);
      if (t.has_reference()) {
        const auto k = s.index[n];
        r += s.weight[n] * Vec3{t.reference()[3 * k], t.reference()[3 * k + 1], t.reference()[3 * k + 2]};
      }
    }
    out.set_coeff(i, u);
    if (!ref.empty())
      for (int a = 0; a < 3; ++a) ref[3 * i + static_cast<std::size_t>(a)] = r[a];
  }
  out.set_reference(std::move(ref));
  return out;
}

/// Reference coefficients reproducing the total displacement of `source` at the control points of `grid`.
inline std::vector<double> sample_reference(const BSplineTransform& source, const Grid& grid) {
  std::vector<double> ref(3 * grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3 d = source.displacement(grid.world(grid.coords(i)));
    for (int a = 0; a < 3; ++a) ref[3 * i + static_cast<std::size_t>(a)] = d[a];
  }
  return ref;
}

}  // namespace pulmoreg
