// Voxel grids in world coordinates and the scalar image operations shared by
// the registration stages: trilinear sampling, finite-difference gradients,
// Gaussian smoothing, resampling and the exact Euclidean distance transform.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/lower_envelope.hpp"
#include "pulmoreg/parallel.hpp"

namespace pulmoreg {

/// Geometry of a regular voxel grid. Voxel (i, j, k) sits at origin + (i, j, k) * spacing.
struct Grid {
  Index3 dims{2, 2, 2};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t size() const { return voxel_count(dims); }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }

  Index3 coords(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
  }

  Vec3 world(int i, int j, int k) const {
    return Vec3{origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2]};
  }
  Vec3 world(const Index3& v) const { return world(v[0], v[1], v[2]); }

  /// Continuous voxel index of a world point.
  Vec3 continuous_index(const Vec3& p) const {
    return Vec3{(p[0] - origin[0]) / spacing[0], (p[1] - origin[1]) / spacing[1],
                (p[2] - origin[2]) / spacing[2]};
  }

  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }

  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  bool same_geometry(const Grid& o, double tol = 1e-9) const {
    if (dims != o.dims) return false;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(spacing[a] - o.spacing[a]) > tol || std::abs(origin[a] - o.origin[a]) > tol) return false;
    }
    return true;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 2) throw ValidationError("grid dimension " + std::to_string(a) + " must be >= 2");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw ValidationError("grid spacing must be positive and finite");
      if (!std::isfinite(origin[a])) throw ValidationError("grid origin must be finite");
    }
  }
};

/// A grid carrying one value of type T per voxel, x-fastest.
template <class T>
class Volume {
 public:
  Volume() = default;
  explicit Volume(const Grid& g, T fill = T{}) : grid_(g) {
    grid_.validate();
    values_.assign(grid_.size(), fill);
  }
  Volume(const Grid& g, std::vector<T> values) : grid_(g), values_(std::move(values)) {
    grid_.validate();
    if (values_.size() != grid_.size()) throw ValidationError("value count does not match grid dimensions");
  }

  const Grid& grid() const { return grid_; }
  const Index3& dims() const { return grid_.dims; }
  const Vec3& spacing() const { return grid_.spacing; }
  const Vec3& origin() const { return grid_.origin; }
  std::size_t size() const { return values_.size(); }

  T& operator()(int i, int j, int k) { return values_[grid_.index(i, j, k)]; }
  const T& operator()(int i, int j, int k) const { return values_[grid_.index(i, j, k)]; }
  T& operator[](std::size_t idx) { return values_[idx]; }
  const T& operator[](std::size_t idx) const { return values_[idx]; }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::vector<T>& data() { return values_; }
  const std::vector<T>& data() const { return values_; }

 private:
  Grid grid_;
  std::vector<T> values_;
};

/// Scalar image: CT intensities (HU), binary masks ({0,1}) or distance maps (mm).
using Image3D = Volume<double>;
/// Three-component field: image gradients (units per mm) or displacements (mm).
using VectorField = Volume<Vec3>;
using GradientField = VectorField;

namespace detail {

struct CellWeights {
  Index3 base;
  Vec3 frac;
};

// Cell and fractional offsets for a continuous index known to be in [0, n-1].
inline CellWeights cell_of(const Vec3& ci, const Index3& dims) {
  CellWeights c{};
  for (int a = 0; a < 3; ++a) {
    int i0 = static_cast<int>(std::floor(ci[a]));
    i0 = std::clamp(i0, 0, dims[a] - 2);
    c.base[a] = i0;
    c.frac[a] = ci[a] - i0;
  }
  return c;
}

inline bool inside_hull(const Vec3& ci, const Index3& dims) {
  for (int a = 0; a < 3; ++a)
    if (!(ci[a] >= 0.0 && ci[a] <= dims[a] - 1)) return false;
  return true;
}

template <class T>
T interpolate(const Volume<T>& img, const CellWeights& c) {
  const auto& g = img.grid();
  const double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  const std::size_t i000 = g.index(c.base[0], c.base[1], c.base[2]);
  const std::size_t sx = 1, sy = static_cast<std::size_t>(g.dims[0]), sz = sy * static_cast<std::size_t>(g.dims[1]);
  const T c00 = img[i000] * (1 - fx) + img[i000 + sx] * fx;
  const T c10 = img[i000 + sy] * (1 - fx) + img[i000 + sy + sx] * fx;
  const T c01 = img[i000 + sz] * (1 - fx) + img[i000 + sz + sx] * fx;
  const T c11 = img[i000 + sz + sy] * (1 - fx) + img[i000 + sz + sy + sx] * fx;
  const T c0 = c00 * (1 - fy) + c10 * fy;
  const T c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

}  // namespace detail

/// Trilinear interpolation at world point p; 0 outside the hull of voxel centres.
template <class T>
T trilinear_sample(const Volume<T>& img, const Vec3& p) {
  const Vec3 ci = img.grid().continuous_index(p);
  if (!detail::inside_hull(ci, img.dims())) return T{};
  return detail::interpolate(img, detail::cell_of(ci, img.dims()));
}

/// Trilinear sample with its derivative with respect to the world position.
/// The derivative is that of the cell selected by floor(); zero outside.
struct SampleWithGradient {
  double value = 0.0;
  Vec3 gradient{};
};

inline SampleWithGradient trilinear_sample_with_gradient(const Image3D& img, const Vec3& p) {
  SampleWithGradient out;
  const auto& g = img.grid();
  const Vec3 ci = g.continuous_index(p);
  if (!detail::inside_hull(ci, g.dims)) return out;
  const auto c = detail::cell_of(ci, g.dims);
  double v[2][2][2];
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) v[dz][dy][dx] = img(c.base[0] + dx, c.base[1] + dy, c.base[2] + dz);
  const double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  const double wx[2] = {1 - fx, fx}, wy[2] = {1 - fy, fy}, wz[2] = {1 - fz, fz};
  const double sgn[2] = {-1.0, 1.0};
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double val = v[dz][dy][dx];
        out.value += wx[dx] * wy[dy] * wz[dz] * val;
        out.gradient[0] += sgn[dx] * wy[dy] * wz[dz] * val;
        out.gradient[1] += wx[dx] * sgn[dy] * wz[dz] * val;
        out.gradient[2] += wx[dx] * wy[dy] * sgn[dz] * val;
      }
  for (int a = 0; a < 3; ++a) out.gradient[a] /= g.spacing[a];
  return out;
}

/// Vector-field sample with its spatial Jacobian jac[r][c] = d value_r / d p_c.
struct VectorSampleWithJacobian {
  Vec3 value{};
  Mat3 jacobian{};
};

inline VectorSampleWithJacobian trilinear_sample_with_jacobian(const VectorField& field, const Vec3& p) {
  VectorSampleWithJacobian out{};
  const auto& g = field.grid();
  const Vec3 ci = g.continuous_index(p);
  if (!detail::inside_hull(ci, g.dims)) return out;
  const auto c = detail::cell_of(ci, g.dims);
  const double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  const double wx[2] = {1 - fx, fx}, wy[2] = {1 - fy, fy}, wz[2] = {1 - fz, fz};
  const double sgn[2] = {-1.0, 1.0};
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const Vec3& val = field(c.base[0] + dx, c.base[1] + dy, c.base[2] + dz);
        const double w = wx[dx] * wy[dy] * wz[dz];
        const double dw[3] = {sgn[dx] * wy[dy] * wz[dz] / g.spacing[0], wx[dx] * sgn[dy] * wz[dz] / g.spacing[1],
                              wx[dx] * wy[dy] * sgn[dz] / g.spacing[2]};
        for (int r = 0; r < 3; ++r) {
          out.value[r] += w * val[r];
          for (int col = 0; col < 3; ++col) out.jacobian[r][col] += dw[col] * val[r];
        }
      }
  return out;
}

/// Nearest-voxel sample; 0 when the rounded index falls outside the grid.
template <class T>
T nearest_sample(const Volume<T>& img, const Vec3& p) {
  const Vec3 ci = img.grid().continuous_index(p);
  const int i = static_cast<int>(std::lround(ci[0]));
  const int j = static_cast<int>(std::lround(ci[1]));
  const int k = static_cast<int>(std::lround(ci[2]));
  if (!img.grid().contains(i, j, k)) return T{};
  return img(i, j, k);
}

/// Central differences divided by spacing; one-sided on the first and last slice.
inline GradientField gradient(const Image3D& img) {
  const auto& g = img.grid();
  GradientField out(g);
  const Index3 n = g.dims;
  parallel::for_each_index(static_cast<std::size_t>(n[2]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const int idx[3] = {i, j, k};
        Vec3 grad;
        for (int a = 0; a < 3; ++a) {
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          double span = 2.0;
          if (idx[a] == 0) {
            hi[a] = 1;
            span = 1.0;
          } else if (idx[a] == n[a] - 1) {
            lo[a] = n[a] - 2;
            span = 1.0;
          } else {
            lo[a] = idx[a] - 1;
            hi[a] = idx[a] + 1;
          }
          grad[a] = (img(hi[0], hi[1], hi[2]) - img(lo[0], lo[1], lo[2])) / (span * g.spacing[a]);
        }
        out(i, j, k) = grad;
      }
  });
  return out;
}

/// Normalised Gaussian kernel (radius ceil(3 sigma) voxels); empty for sigma ~ 0.
inline std::vector<double> gaussian_kernel(double sigma_vox) {
  if (!(sigma_vox > 1e-6)) return {};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_vox));
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox));
    w[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

namespace detail {

// Convolves along one axis with border clamping.
inline void convolve_axis(const Image3D& in, Image3D& out, int axis, const std::vector<double>& kernel) {
  const auto& g = in.grid();
  const Index3 n = g.dims;
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(n[0]) : static_cast<std::size_t>(n[0]) * n[1]);
  const int len = n[axis];
  // Enumerate all lines along `axis` by their first voxel.
  const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
  const std::size_t lines = static_cast<std::size_t>(n[o1]) * n[o2];
  parallel::for_each_index(lines, [&](std::size_t line) {
    int c[3] = {0, 0, 0};
    c[o1] = static_cast<int>(line % static_cast<std::size_t>(n[o1]));
    c[o2] = static_cast<int>(line / static_cast<std::size_t>(n[o1]));
    const std::size_t start = g.index(c[0], c[1], c[2]);
    for (int p = 0; p < len; ++p) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const int q = std::clamp(p + t, 0, len - 1);
        acc += kernel[static_cast<std::size_t>(t + radius)] * in[start + static_cast<std::size_t>(q) * stride];
      }
      out[start + static_cast<std::size_t>(p) * stride] = acc;
    }
  });
}

}  // namespace detail

/// Separable Gaussian smoothing with per-axis sigma (mm) converted via spacing.
inline Image3D smooth_gaussian(const Image3D& img, const Vec3& sigma_mm) {
  Image3D cur = img;
  Image3D tmp(img.grid());
  for (int a = 0; a < 3; ++a) {
    if (sigma_mm[a] < 0.0) throw ValidationError("smoothing sigma must be non-negative");
    const auto kernel = gaussian_kernel(sigma_mm[a] / img.spacing()[a]);
    if (kernel.empty()) continue;
    detail::convolve_axis(cur, tmp, a, kernel);
    std::swap(cur, tmp);
  }
  return cur;
}

inline Image3D smooth_gaussian(const Image3D& img, double sigma_mm) {
  return smooth_gaussian(img, Vec3{sigma_mm, sigma_mm, sigma_mm});
}

enum class Interpolation { kTrilinear, kNearest };

/// Grid with the same origin covering the physical extent dims * spacing.
inline Grid resampled_grid(const Grid& g, const Vec3& new_spacing) {
  Grid out;
  out.origin = g.origin;
  out.spacing = new_spacing;
  for (int a = 0; a < 3; ++a) {
    if (!(new_spacing[a] > 0.0)) throw ValidationError("resample spacing must be positive");
    const double extent = g.dims[a] * g.spacing[a];
    // Guard against ceil(4.0000000001) when the ratio is integral up to rounding.
    out.dims[a] = std::max(2, static_cast<int>(std::ceil(extent / new_spacing[a] - 1e-9)));
  }
  return out;
}

/// Samples img at the voxel centres of `target`, clamping to the border voxels.
inline Image3D resample_to(const Image3D& img, const Grid& target, Interpolation interp) {
  Image3D out(target);
  const auto& g = img.grid();
  parallel::for_each_index(static_cast<std::size_t>(target.dims[2]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i) {
        Vec3 ci = g.continuous_index(target.world(i, j, k));
        for (int a = 0; a < 3; ++a) ci[a] = std::clamp(ci[a], 0.0, static_cast<double>(g.dims[a] - 1));
        double v;
        if (interp == Interpolation::kNearest) {
          v = img(static_cast<int>(std::lround(ci[0])), static_cast<int>(std::lround(ci[1])),
                  static_cast<int>(std::lround(ci[2])));
        } else {
          v = detail::interpolate(img, detail::cell_of(ci, g.dims));
        }
        out(i, j, k) = v;
      }
  });
  return out;
}

/// Resamples onto new_spacing sharing the world frame (same origin).
inline Image3D resample(const Image3D& img, const Vec3& new_spacing, Interpolation interp) {
  return resample_to(img, resampled_grid(img.grid(), new_spacing), interp);
}

/// Exact Euclidean distance (mm) to the nearest voxel with value >= 0.5.
/// Every voxel is +infinity when the mask is empty.
inline Image3D euclidean_distance_transform(const Image3D& mask) {
  const auto& g = mask.grid();
  Image3D sq(g);
  for (std::size_t i = 0; i < mask.size(); ++i) sq[i] = mask[i] >= 0.5 ? 0.0 : kInf;
  const Index3 n = g.dims;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t stride =
        axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(n[0]) : static_cast<std::size_t>(n[0]) * n[1]);
    const int len = n[axis];
    const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
    const std::size_t lines = static_cast<std::size_t>(n[o1]) * n[o2];
    parallel::for_blocks(lines, [&](const parallel::Block& blk) {
      std::vector<double> f(static_cast<std::size_t>(len)), out(static_cast<std::size_t>(len));
      EnvelopeWorkspace ws;
      for (std::size_t line = blk.begin; line < blk.end; ++line) {
        int c[3] = {0, 0, 0};
        c[o1] = static_cast<int>(line % static_cast<std::size_t>(n[o1]));
        c[o2] = static_cast<int>(line / static_cast<std::size_t>(n[o1]));
        const std::size_t start = g.index(c[0], c[1], c[2]);
        for (int p = 0; p < len; ++p) f[static_cast<std::size_t>(p)] = sq[start + static_cast<std::size_t>(p) * stride];
        min_convolve_quadratic(f, g.spacing[axis], 1.0, out, {}, ws);
        for (int p = 0; p < len; ++p) sq[start + static_cast<std::size_t>(p) * stride] = out[static_cast<std::size_t>(p)];
      }
    });
  }
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = std::sqrt(sq[i]);
  return sq;
}

/// Voxel-wise product with a binary mask (background set to 0).
inline Image3D apply_mask(const Image3D& img, const Image3D& mask) {
  if (!img.grid().same_geometry(mask.grid())) throw ValidationError("image and mask geometries differ");
  Image3D out = img;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i] < 0.5) out[i] = 0.0;
  return out;
}

inline std::size_t count_foreground(const Image3D& mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.data().begin(), mask.data().end(), [](double v) { return v >= 0.5; }));
}

/// Centre of gravity (mm) of the voxels with value >= 0.5.
inline Vec3 mask_centroid(const Image3D& mask) {
  Vec3 sum{};
  std::size_t count = 0;
  const auto& g = mask.grid();
  for (std::size_t idx = 0; idx < mask.size(); ++idx) {
    if (mask[idx] < 0.5) continue;
    sum += g.world(g.coords(idx));
    ++count;
  }
  if (count == 0) throw ValidationError("mask is empty");
  return sum * (1.0 / static_cast<double>(count));
}

}  // namespace pulmoreg
