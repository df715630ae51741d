// Shared builders and oracles for the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pulmoreg/pulmoreg.hpp"

namespace testutil {

using namespace pulmoreg;

inline Grid make_grid(Index3 dims, Vec3 spacing = {1, 1, 1}, Vec3 origin = {0, 0, 0}) {
  Grid g;
  g.dims = dims;
  g.spacing = spacing;
  g.origin = origin;
  return g;
}

inline Image3D random_image(const Grid& g, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image3D img(g);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  return img;
}

/// Smoothed noise rescaled to roughly unit contrast times `scale`.
inline Image3D smooth_random_image(const Grid& g, std::mt19937_64& rng, double sigma_mm, double scale) {
  auto img = smooth_gaussian(random_image(g, rng, -1.0, 1.0), sigma_mm);
  double mx = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) mx = std::max(mx, std::abs(img[i]));
  for (std::size_t i = 0; i < img.size(); ++i) img[i] *= scale / std::max(mx, 1e-12);
  return img;
}

/// Binary ellipsoid centred at c with semi-axes r (world units).
inline Image3D ellipsoid_mask(const Grid& g, const Vec3& c, const Vec3& r) {
  Image3D m(g);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Vec3 d = g.world(g.coords(i)) - c;
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += d[a] * d[a] / (r[a] * r[a]);
    m[i] = s <= 1.0 ? 1.0 : 0.0;
  }
  return m;
}

inline Vec3 grid_center(const Grid& g) {
  Vec3 c;
  for (int a = 0; a < 3; ++a) c[a] = g.origin[a] + 0.5 * (g.dims[a] - 1) * g.spacing[a];
  return c;
}

inline Vec3 random_point_in(const Grid& g, std::mt19937_64& rng, double margin = 0.0) {
  Vec3 p;
  for (int a = 0; a < 3; ++a) {
    const double lo = g.origin[a] + margin, hi = g.origin[a] + (g.dims[a] - 1) * g.spacing[a] - margin;
    p[a] = std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  return p;
}

inline void randomize_coeffs(BSplineTransform& t, std::mt19937_64& rng, double amplitude) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (double& c : t.coeffs()) c = u(rng);
}

/// Naive trilinear interpolation of the total control displacement, written independently
/// of the transform's stencil code.
inline Vec3 naive_displacement(const BSplineTransform& t, const Vec3& p) {
  const auto& g = t.grid();
  double ci[3];
  int base[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    ci[a] = std::clamp((p[a] - g.origin[a]) / g.spacing[a], 0.0, static_cast<double>(g.dims[a] - 1));
    base[a] = std::min(static_cast<int>(std::floor(ci[a])), g.dims[a] - 2);
    f[a] = ci[a] - base[a];
  }
  Vec3 out{};
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
        out += t.total_coeff(g.index(base[0] + dx, base[1] + dy, base[2] + dz)) * w;
      }
  return out;
}

/// Central finite-difference Jacobian determinant of y.
inline double fd_det(const BSplineTransform& t, const Vec3& p, double h = 1e-5) {
  Mat3 m{};
  for (int c = 0; c < 3; ++c) {
    Vec3 e{};
    e[c] = h;
    const Vec3 d = (t(p + e) - t(p - e)) * (1.0 / (2 * h));
    for (int r = 0; r < 3; ++r) m[r][c] = d[r];
  }
  return det3(m);
}

/// Dense 7-point Laplacian over a grid, one row per node, physical units. The axis-a
/// second difference appears only in rows interior along a.
inline std::vector<std::vector<double>> dense_laplacian(const Grid& g) {
  const std::size_t n = g.size();
  std::vector<std::vector<double>> L(n, std::vector<double>(n, 0.0));
  for (std::size_t row = 0; row < n; ++row) {
    const Index3 v = g.coords(row);
    for (int a = 0; a < 3; ++a) {
      if (v[a] == 0 || v[a] == g.dims[a] - 1) continue;
      const double w = 1.0 / (g.spacing[a] * g.spacing[a]);
      Index3 lo = v, hi = v;
      lo[a] = v[a] - 1;
      hi[a] = v[a] + 1;
      L[row][g.index(lo[0], lo[1], lo[2])] += w;
      L[row][g.index(hi[0], hi[1], hi[2])] += w;
      L[row][row] -= 2 * w;
    }
  }
  return L;
}

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t worst = 0;
};

/// Compares an analytic gradient with central differences of f on every coefficient.
/// Relative error: |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|a| (guards exactly-zero entries).
template <class F>
GradientCheck check_gradient(F&& f, std::vector<double> x, const std::vector<double>& analytic, double h = 1e-5) {
  GradientCheck r;
  double gmax = 0.0;
  for (double v : analytic) gmax = std::max(gmax, std::abs(v));
  const double floor = std::max(1e-3 * gmax, 1e-12);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    const double num = (fp - fm) / (2 * h);
    const double rel = std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), floor});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = i;
    }
  }
  return r;
}

/// A random small objective instance for gradient checks.
struct GradientInstance {
  ObjectiveInputs inputs;
  BSplineTransform transform;
  int redraws = 0;
};

/// True if some warped voxel centre lies within `margin` (index units) of a moving-grid
/// plane, where trilinear interpolation has a derivative kink.
inline bool near_kink(const BSplineTransform& t, const Grid& fixed, const Grid& moving, double margin) {
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const Vec3 ci = moving.continuous_index(t(fixed.world(fixed.coords(i))));
    for (int a = 0; a < 3; ++a)
      if (std::abs(ci[a] - std::round(ci[a])) < margin) return true;
  }
  return false;
}

/// 12^3 images, 4^3 control grid, random masks, 5 keypoints. Instances that would put a
/// sample within 5 finite-difference steps of a kink, or that fold, are redrawn.
inline GradientInstance make_gradient_instance(std::mt19937_64& rng, double fd_step = 1e-5) {
  GradientInstance inst;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (;;) {
    Vec3 sp;
    for (int a = 0; a < 3; ++a) sp[a] = 0.8 + 0.6 * u01(rng);
    const Grid g = make_grid({12, 12, 12}, sp, {u01(rng), u01(rng), u01(rng)});
    auto& in = inst.inputs;
    in.fixed = smooth_random_image(g, rng, 1.5, 100.0);
    in.moving = smooth_random_image(g, rng, 1.5, 100.0);
    const Vec3 c = grid_center(g);
    Vec3 r1, r2, c2;
    for (int a = 0; a < 3; ++a) {
      r1[a] = (0.3 + 0.15 * u01(rng)) * 11 * sp[a];
      r2[a] = (0.3 + 0.15 * u01(rng)) * 11 * sp[a];
      c2[a] = c[a] + (u01(rng) - 0.5) * 2 * sp[a];
    }
    in.fixed_mask = ellipsoid_mask(g, c, r1);
    in.moving_mask = ellipsoid_mask(g, c2, r2);
    in.fixed = apply_mask(in.fixed, in.fixed_mask);
    in.moving = apply_mask(in.moving, in.moving_mask);
    in.correspondences.clear();
    for (int k = 0; k < 5; ++k) {
      Correspondence cr;
      cr.source = random_point_in(g, rng, 1.0);
      cr.target = cr.source + Vec3{3 * (u01(rng) - 0.5), 3 * (u01(rng) - 0.5), 3 * (u01(rng) - 0.5)};
      in.correspondences.push_back(cr);
    }
    auto t = BSplineTransform::covering(g, {3, 3, 3});
    randomize_coeffs(t, rng, 0.6);
    std::vector<double> ref(t.coeffs().size());
    for (double& v : ref) v = 1.2 * (u01(rng) - 0.5);
    t.set_reference(ref);
    if (min_cell_jacobian(t) > 0.3 && !near_kink(t, g, g, 5 * fd_step / std::min({sp[0], sp[1], sp[2]}))) {
      inst.transform = std::move(t);
      return inst;
    }
    ++inst.redraws;
  }
}

/// Random rooted tree on n nodes with positive edge weights and a random root.
inline SpanningTree random_tree(int n, std::mt19937_64& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  SpanningTree t;
  t.parent.assign(static_cast<std::size_t>(n), -1);
  t.children.assign(static_cast<std::size_t>(n), {});
  t.edge_weight.assign(static_cast<std::size_t>(n), 0.0);
  t.root = perm[0];
  std::uniform_real_distribution<double> w(0.5, 6.0);
  for (int i = 1; i < n; ++i) {
    const int node = perm[static_cast<std::size_t>(i)];
    const int par = perm[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, i - 1)(rng))];
    t.parent[static_cast<std::size_t>(node)] = par;
    t.edge_weight[static_cast<std::size_t>(node)] = w(rng);
  }
  for (int i = 1; i < n; ++i) {
    const int node = perm[static_cast<std::size_t>(i)];
    t.children[static_cast<std::size_t>(t.parent[static_cast<std::size_t>(node)])].push_back(node);
  }
  std::vector<int> frontier{t.root};
  while (!frontier.empty()) {
    std::vector<int> next;
    for (int u : frontier) {
      t.order.push_back(u);
      for (int c : t.children[static_cast<std::size_t>(u)]) next.push_back(c);
    }
    frontier = std::move(next);
  }
  return t;
}

/// Min-marginals by enumerating every joint labelling (odometer order).
inline std::vector<std::vector<double>> brute_force_marginals(const std::vector<std::vector<double>>& unary,
                                                              const SpanningTree& tree,
                                                              const DisplacementLattice& lattice, double alpha_kp) {
  const std::size_t n = unary.size(), nl = lattice.size();
  std::vector<std::vector<double>> best(n, std::vector<double>(nl, kInf));
  std::vector<Vec3> disp(nl);
  for (std::size_t l = 0; l < nl; ++l) disp[l] = lattice.displacement(l);
  std::vector<std::size_t> lab(n, 0);
  for (;;) {
    double e = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      e += unary[k][lab[k]];
      const int p = tree.parent[k];
      if (p < 0) continue;
      const Vec3 d = disp[lab[k]] - disp[lab[static_cast<std::size_t>(p)]];
      e += alpha_kp / tree.edge_weight[k] * dot(d, d);
    }
    for (std::size_t k = 0; k < n; ++k) best[k][lab[k]] = std::min(best[k][lab[k]], e);
    std::size_t k = 0;
    while (k < n && ++lab[k] == nl) lab[k++] = 0;
    if (k == n) break;
  }
  return best;
}

/// O(|L|^2) min-convolution g(d) = min_d' f(d') + w |d - d'|^2 over the lattice (mm).
inline std::vector<double> brute_force_distance_transform(const std::vector<double>& f,
                                                          const DisplacementLattice& lattice, double w) {
  const std::size_t nl = lattice.size();
  std::vector<double> out(nl, kInf);
  for (std::size_t p = 0; p < nl; ++p)
    for (std::size_t q = 0; q < nl; ++q) {
      const Vec3 d = lattice.displacement(p) - lattice.displacement(q);
      out[p] = std::min(out[p], f[q] + w * dot(d, d));
    }
  return out;
}

}  // namespace testutil
