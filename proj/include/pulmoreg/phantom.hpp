// Procedural lung-like phantom pairs with an analytic ground-truth warp.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/parallel.hpp"

namespace pulmoreg {

struct PhantomConfig {
  std::uint64_t seed = 1;
  int size = 64;
  double spacing = 2.0;
  /// Largest displacement magnitude over the image (mm).
  double amplitude = 10.0;
  /// Added to the moving parenchyma (HU).
  double density_shift = 150.0;
  /// Share of the amplitude carried by the interior twist (not visible in the mask).
  double twist_fraction = 0.0;
  int landmarks = 200;
};

/// Ground-truth warp y = S o T. T twists the lung interior about the cranio-caudal
/// (z) axis by an angle that vanishes on the lung surface (volume preserving and
/// invisible in the mask); S is a smooth sinusoidal displacement with random phases,
/// dominated by its z component. y maps fixed to moving coordinates.
class PhantomWarp {
 public:
  PhantomWarp() = default;
  /// `lung_semi_axes` must have equal x and y entries. `amplitude` is the largest |y(x) - x|
  /// over the cube of half-width `half_extent`; `twist_fraction` is the twist's share of it.
  PhantomWarp(const Vec3& center, double half_extent, const Vec3& lung_semi_axes, double amplitude,
              double twist_fraction, std::mt19937_64& rng)
      : center_(center), semi_(lung_semi_axes) {
    if (twist_fraction < 0.0 || twist_fraction > 1.0) throw ValidationError("twist fraction must lie in [0, 1]");
    std::uniform_real_distribution<double> phase(-0.5, 0.5);
    for (double& p : phi_) p = phase(rng);
    k_ = std::numbers::pi / (3.0 * half_extent);
    if (amplitude == 0.0) return;

    const int n = 24;
    auto max_displacement = [&] {
      double mx = 0.0;
      for (int i = 0; i <= n; ++i)
        for (int j = 0; j <= n; ++j)
          for (int l = 0; l <= n; ++l) {
            const Vec3 x = center + Vec3{(2.0 * i / n - 1.0) * half_extent, (2.0 * j / n - 1.0) * half_extent,
                                         (2.0 * l / n - 1.0) * half_extent};
            mx = std::max(mx, norm(displacement(x)));
          }
      return mx;
    };
    // Unit shapes: sinusoid with max |S - x| = 1, twist with max r * profile = 1 (small-angle displacement).
    scale_ = 1.0;
    twist_ = 0.0;
    const double s_unit = 1.0 / max_displacement();
    double t_unit = 0.0;
    for (int i = 0; i <= 200; ++i) {
      const double r = semi_[0] * i / 200.0;
      t_unit = std::max(t_unit, r * twist_profile(r * r / (semi_[0] * semi_[0])));
    }
    t_unit = 1.0 / t_unit;
    auto set = [&](double lambda) {
      scale_ = lambda * (1.0 - twist_fraction) * s_unit;
      twist_ = lambda * twist_fraction * t_unit;
    };
    // Bisection on a common factor so that the composite peak equals the amplitude.
    double lo = 0.0, hi = 2.0 * amplitude;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      set(mid);
      (max_displacement() < amplitude ? lo : hi) = mid;
    }
    set(0.5 * (lo + hi));
  }

  Vec3 displacement(const Vec3& x) const { return (*this)(x) - x; }

  Vec3 operator()(const Vec3& x) const {
    const Vec3 w = twist(x);
    return w + sinusoid(w);
  }

  /// Analytic Jacobian of y, m[r][c] = d y_r / d x_c.
  Mat3 jacobian(const Vec3& x) const {
    const Mat3 js = sinusoid_jacobian(twist(x));
    const Mat3 jt = twist_jacobian(x);
    Mat3 m{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 3; ++k) m[r][c] += js[r][k] * jt[k][c];
    return m;
  }

  /// Solves y(x) = z: Newton iteration for the sinusoid, closed form for the twist.
  Vec3 inverse(const Vec3& z) const {
    Vec3 w = z;
    for (int it = 0; it < 50; ++it) {
      const Vec3 r = w + sinusoid(w) - z;
      if (norm(r) < 1e-12) break;
      const Mat3 j = sinusoid_jacobian(w);
      const double d = det3(j);
      Vec3 step;
      for (int c = 0; c < 3; ++c) {
        Mat3 jc = j;
        for (int row = 0; row < 3; ++row) jc[row][c] = r[row];
        step[c] = det3(jc) / d;
      }
      w -= step;
    }
    // The twist keeps the axial radius and height, hence its own angle.
    return rotate(w, -angle(w));
  }

 private:
  static double twist_profile(double rho2) { return rho2 < 1.0 ? (1.0 - rho2) * (1.0 - rho2) : 0.0; }

  double rho2(const Vec3& p) const {
    return (p[0] * p[0] + p[1] * p[1]) / (semi_[0] * semi_[0]) + p[2] * p[2] / (semi_[2] * semi_[2]);
  }
  double angle(const Vec3& x) const { return twist_ * twist_profile(rho2(x - center_)); }

  Vec3 rotate(const Vec3& x, double phi) const {
    const Vec3 p = x - center_;
    const double c = std::cos(phi), s = std::sin(phi);
    return center_ + Vec3{c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
  }

  Vec3 twist(const Vec3& x) const { return twist_ == 0.0 ? x : rotate(x, angle(x)); }

  Mat3 twist_jacobian(const Vec3& x) const {
    const Vec3 p = x - center_;
    const double phi = angle(x);
    const double c = std::cos(phi), s = std::sin(phi);
    Mat3 m{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    const double q = rho2(p);
    if (twist_ == 0.0 || q >= 1.0) return m;
    // grad phi = twist * (-2 (1 - q)) * grad q
    const double f = -2.0 * twist_ * (1.0 - q);
    const Vec3 gphi{f * 2.0 * p[0] / (semi_[0] * semi_[0]), f * 2.0 * p[1] / (semi_[0] * semi_[0]),
                    f * 2.0 * p[2] / (semi_[2] * semi_[2])};
    const Vec3 dr{-s * p[0] - c * p[1], c * p[0] - s * p[1], 0.0};
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) m[r][col] += dr[r] * gphi[col];
    return m;
  }

  Vec3 sinusoid(const Vec3& x) const {
    const Vec3 r = x - center_;
    const double a = k_ * r[0], b = k_ * r[1], c = k_ * r[2];
    return Vec3{0.3 * std::sin(a + phi_[0]) * std::cos(b + phi_[1]),
                0.3 * std::cos(a + phi_[2]) * std::sin(c + phi_[3]),
                std::cos(c + phi_[4]) * (0.7 + 0.3 * std::cos(a + phi_[5]) * std::cos(b + phi_[6]))} *
           scale_;
  }

  Mat3 sinusoid_jacobian(const Vec3& x) const {
    const Vec3 r = x - center_;
    const double a = k_ * r[0], b = k_ * r[1], c = k_ * r[2];
    const double s = scale_ * k_;
    Mat3 m = identity3();
    m[0][0] += s * 0.3 * std::cos(a + phi_[0]) * std::cos(b + phi_[1]);
    m[0][1] += -s * 0.3 * std::sin(a + phi_[0]) * std::sin(b + phi_[1]);
    m[1][0] += -s * 0.3 * std::sin(a + phi_[2]) * std::sin(c + phi_[3]);
    m[1][2] += s * 0.3 * std::cos(a + phi_[2]) * std::cos(c + phi_[3]);
    const double g = 0.7 + 0.3 * std::cos(a + phi_[5]) * std::cos(b + phi_[6]);
    m[2][0] += -s * std::cos(c + phi_[4]) * 0.3 * std::sin(a + phi_[5]) * std::cos(b + phi_[6]);
    m[2][1] += -s * std::cos(c + phi_[4]) * 0.3 * std::cos(a + phi_[5]) * std::sin(b + phi_[6]);
    m[2][2] += -s * std::sin(c + phi_[4]) * g;
    return m;
  }

  Vec3 center_{};
  Vec3 semi_{1.0, 1.0, 1.0};
  double k_ = 1.0;
  double scale_ = 0.0;
  double twist_ = 0.0;
  std::array<double, 7> phi_{};
};

struct Phantom {
  Image3D fixed, moving, fixed_mask, moving_mask;
  /// Ground-truth displacement u on the fixed grid: moving point = x + u(x).
  VectorField displacement;
  std::vector<Vec3> fixed_landmarks, moving_landmarks;
  PhantomWarp warp;
};

namespace detail {

struct VesselSegment {
  Vec3 a, b;
  double radius;
};

inline double segment_distance(const VesselSegment& s, const Vec3& p) {
  const Vec3 ab = s.b - s.a;
  const double t = std::clamp(dot(p - s.a, ab) / dot(ab, ab), 0.0, 1.0);
  return norm(p - (s.a + ab * t));
}

// Procedural anatomy in fixed coordinates.
class PhantomAnatomy {
 public:
  PhantomAnatomy(const Vec3& center, double half_extent, std::mt19937_64& rng)
      : center_(center), semi_{0.68 * half_extent, 0.68 * half_extent, 0.78 * half_extent} {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    // Vessel tree: trunk from the top, binary branching with shrinking radius.
    grow(center + Vec3{0.0, 0.0, 0.75 * semi_[2]}, Vec3{0.0, 0.0, -1.0}, 0.32 * semi_[2], 3.2, 0, rng);
    // Parenchyma texture: smoothed white noise on a 2 mm lattice, unit variance.
    Grid ng;
    const double margin = 8.0;
    const int n = static_cast<int>(std::ceil((2.0 * (half_extent + margin)) / 2.0)) + 1;
    ng.dims = {n, n, n};
    ng.spacing = Vec3{2.0, 2.0, 2.0};
    ng.origin = center - Vec3{half_extent + margin, half_extent + margin, half_extent + margin};
    std::normal_distribution<double> gauss(0.0, 1.0);
    Image3D noise(ng);
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = gauss(rng);
    noise_ = smooth_gaussian(noise, 2.0);
    double var = 0.0;
    for (double v : noise_.values()) var += v * v;
    const double inv_sd = 1.0 / std::sqrt(var / static_cast<double>(noise_.size()));
    for (std::size_t i = 0; i < noise_.size(); ++i) noise_[i] *= inv_sd;
  }

  double ellipsoid(const Vec3& x) const {
    const Vec3 r = x - center_;
    return (r[0] / semi_[0]) * (r[0] / semi_[0]) + (r[1] / semi_[1]) * (r[1] / semi_[1]) +
           (r[2] / semi_[2]) * (r[2] / semi_[2]);
  }
  bool inside(const Vec3& x) const { return ellipsoid(x) <= 1.0; }

  /// Vessel weight in [0, 1].
  double vessel(const Vec3& x) const {
    double v = 0.0;
    for (const auto& s : segments_) {
      const double d = segment_distance(s, x);
      if (d > 3.0 * s.radius) continue;
      v = std::max(v, std::exp(-(d * d) / (s.radius * s.radius)));
    }
    return v;
  }

  double texture(const Vec3& x) const { return trilinear_sample(noise_, x); }

  /// Intensity (HU) inside the lung; 0 outside.
  double intensity(const Vec3& x, double parenchyma_shift) const {
    if (!inside(x)) return 0.0;
    const double parenchyma = -850.0 + parenchyma_shift + 40.0 * texture(x);
    return parenchyma + (40.0 - parenchyma) * vessel(x);
  }

  const Vec3& semi_axes() const { return semi_; }

 private:
  void grow(const Vec3& start, const Vec3& dir, double length, double radius, int depth, std::mt19937_64& rng) {
    const Vec3 end = start + dir * length;
    segments_.push_back({start, end, radius});
    if (depth >= 4) return;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int child = 0; child < 2; ++child) {
      Vec3 d = dir + Vec3{u(rng), u(rng), 0.5 * u(rng)} * 0.8;
      d *= 1.0 / std::max(norm(d), 1e-6);
      Vec3 next_end = end + d * (length * 0.8);
      if (ellipsoid(next_end) > 0.8) d = (center_ - end) * (1.0 / std::max(norm(center_ - end), 1e-6)) * 0.5 + d * 0.5;
      d *= 1.0 / std::max(norm(d), 1e-6);
      grow(end, d, length * 0.8, std::max(radius * 0.75, 1.2), depth + 1, rng);
    }
  }

  Vec3 center_;
  Vec3 semi_;
  std::vector<VesselSegment> segments_;
  Image3D noise_;
};

}  // namespace detail

/// Fixed/moving pair with masks, ground truth and landmark pairs. The warp's Jacobian
/// determinant must stay in [0.4, 2.5] on the image domain; larger amplitudes are rejected.
inline Phantom make_phantom(const PhantomConfig& cfg) {
  if (cfg.size < 8 || !(cfg.spacing > 0.0) || cfg.amplitude < 0.0 || cfg.landmarks < 0)
    throw ValidationError("invalid phantom configuration");
  std::mt19937_64 rng(cfg.seed);
  Grid g;
  g.dims = {cfg.size, cfg.size, cfg.size};
  g.spacing = Vec3{cfg.spacing, cfg.spacing, cfg.spacing};
  const double half = 0.5 * (cfg.size - 1) * cfg.spacing;
  const Vec3 center{half, half, half};

  const detail::PhantomAnatomy anatomy(center, half, rng);
  Phantom ph;
  ph.warp = PhantomWarp(center, half, anatomy.semi_axes(), cfg.amplitude, cfg.twist_fraction, rng);

  for (int i = 0; i <= 10; ++i)
    for (int j = 0; j <= 10; ++j)
      for (int l = 0; l <= 10; ++l) {
        const Vec3 x{i * 0.2 * half, j * 0.2 * half, l * 0.2 * half};
        const double d = det3(ph.warp.jacobian(x));
        if (d < 0.4 || d > 2.5)
          throw ValidationError("phantom warp amplitude too large: Jacobian " + std::to_string(d) + " outside [0.4, 2.5]");
      }

  ph.fixed = Image3D(g);
  ph.moving = Image3D(g);
  ph.fixed_mask = Image3D(g);
  ph.moving_mask = Image3D(g);
  ph.displacement = VectorField(g);
  parallel::for_each_index(g.size(), [&](std::size_t idx) {
    const Vec3 x = g.world(g.coords(idx));
    ph.fixed[idx] = anatomy.intensity(x, 0.0);
    ph.fixed_mask[idx] = anatomy.inside(x) ? 1.0 : 0.0;
    ph.displacement[idx] = ph.warp.displacement(x);
    const Vec3 src = ph.warp.inverse(x);
    ph.moving[idx] = anatomy.intensity(src, cfg.density_shift);
    ph.moving_mask[idx] = anatomy.inside(src) ? 1.0 : 0.0;
  });

  // Landmarks well inside the lung.
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3& semi = anatomy.semi_axes();
  while (static_cast<int>(ph.fixed_landmarks.size()) < cfg.landmarks) {
    const Vec3 p = center + Vec3{u(rng) * semi[0], u(rng) * semi[1], u(rng) * semi[2]};
    if (anatomy.ellipsoid(p) > 0.7) continue;
    ph.fixed_landmarks.push_back(p);
    ph.moving_landmarks.push_back(ph.warp(p));
  }
  return ph;
}

}  // namespace pulmoreg
