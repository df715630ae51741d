// Energy terms of the dense registration model and their analytic gradients with
// respect to the B-spline deviation coefficients:
//
//   J = D + alpha R + beta B + gamma V + delta K
//
// D: normalised-gradient-field distance over fixed lung voxels
// R: curvature of the deviation from the reference transform
// B: squared difference of the lung masks
// V: Jensen upper bound on the volume-change penalty (infinite on folds)
// K: least-squares pull towards sparse keypoint targets
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/correspondence.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/parallel.hpp"
#include "pulmoreg/transform.hpp"

namespace pulmoreg {

struct ObjectiveConfig {
  double alpha = 2.0;
  double beta = 0.0;
  double gamma = 0.001;
  double delta = 0.0;
  /// NGF edge parameter in intensity units per mm.
  double eta = 12.0;
  /// Include D; the mask-driven pre-registration turns it off.
  bool use_ngf = true;

  void validate() const {
    if (!(alpha > 0.0) || !(gamma >= 0.0) || !(eta > 0.0) || !(beta >= 0.0) || !(delta >= 0.0))
      throw ValidationError("objective weights out of range (alpha, eta > 0; beta, gamma, delta >= 0)");
  }
};

struct TermValue {
  double value = 0.0;
  std::vector<double> gradient;
};

/// psi(t) = (t - 1)^2 / t for t > 0, +infinity otherwise.
inline double psi(double t) {
  if (!(t > 0.0)) return kInf;
  const double d = t - 1.0;
  return d * d / t;
}

inline double psi_prime(double t) {
  if (!(t > 0.0)) return kInf;
  return 1.0 - 1.0 / (t * t);
}

/// Pointwise NGF residual 1 - <a,b>_eta^2 / (|a|_eta^2 |b|_eta^2), in [0, 1].
inline double ngf_residual(const Vec3& a, const Vec3& b, double eta) {
  const double e2 = eta * eta;
  const double c = e2 + dot(a, b);
  return 1.0 - c * c / ((e2 + dot(a, a)) * (e2 + dot(b, b)));
}

namespace detail {

// Per-block gradient buffers merged in block order.
class GradientAccumulator {
 public:
  GradientAccumulator(std::size_t n, int blocks) : buffers_(static_cast<std::size_t>(blocks), std::vector<double>(n, 0.0)) {}
  std::vector<double>& block(int b) { return buffers_[static_cast<std::size_t>(b)]; }
  std::vector<double> merge() {
    std::vector<double> out = std::move(buffers_.front());
    for (std::size_t b = 1; b < buffers_.size(); ++b)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += buffers_[b][i];
    return out;
  }

 private:
  std::vector<std::vector<double>> buffers_;
};

inline void scatter(std::vector<double>& grad, const ControlStencil& s, const Vec3& g) {
  for (int n = 0; n < 8; ++n) {
    const double w = s.weight[n];
    if (w == 0.0) continue;
    const std::size_t base = 3 * s.index[n];
    grad[base] += w * g[0];
    grad[base + 1] += w * g[1];
    grad[base + 2] += w * g[2];
  }
}

}  // namespace detail

/// NGF distance with cached image gradients and the fixed-mask voxel list.
class NgfDistance {
 public:
  NgfDistance(const Image3D& fixed, const Image3D& moving, const Image3D& fixed_mask, double eta)
      : fixed_grid_(fixed.grid()), fixed_gradient_(gradient(fixed)), moving_gradient_(gradient(moving)), eta_(eta) {
    if (!(eta > 0.0)) throw ValidationError("NGF edge parameter must be positive");
    if (!fixed.grid().same_geometry(fixed_mask.grid())) throw ValidationError("fixed image and mask geometries differ");
    for (std::size_t i = 0; i < fixed_mask.size(); ++i)
      if (fixed_mask[i] >= 0.5) voxels_.push_back(i);
  }

  const GradientField& fixed_gradient() const { return fixed_gradient_; }
  const GradientField& moving_gradient() const { return moving_gradient_; }
  std::size_t voxel_count() const { return voxels_.size(); }

  TermValue evaluate(const BSplineTransform& t, bool with_gradient = true) const {
    const double w = fixed_grid_.voxel_volume();
    const double e2 = eta_ * eta_;
    const std::size_t n = voxels_.size();
    const int blocks = parallel::block_count(n);
    std::vector<double> partial(static_cast<std::size_t>(blocks), 0.0);
    detail::GradientAccumulator acc(with_gradient ? 3 * t.control_points() : 0, blocks);
    parallel::for_blocks(n, [&](const parallel::Block& blk) {
      double sum = 0.0;
      auto& grad = acc.block(blk.index);
      for (std::size_t v = blk.begin; v < blk.end; ++v) {
        const std::size_t idx = voxels_[v];
        const Vec3 x = fixed_grid_.world(fixed_grid_.coords(idx));
        const auto s = t.stencil(x);
        Vec3 disp{};
        for (int c = 0; c < 8; ++c) disp += s.weight[c] * t.total_coeff(s.index[c]);
        const Vec3 y = x + disp;
        const Vec3& b = fixed_gradient_[idx];
        if (!with_gradient) {
          sum += ngf_residual(trilinear_sample(moving_gradient_, y), b, eta_);
          continue;
        }
        const auto sm = trilinear_sample_with_jacobian(moving_gradient_, y);
        const Vec3& a = sm.value;
        const double c = e2 + dot(a, b);
        const double na = e2 + dot(a, a);
        const double nb = e2 + dot(b, b);
        sum += 1.0 - c * c / (na * nb);
        // d r / d a = -2 c / (na nb) (b - (c / na) a)
        const double f = -2.0 * c / (na * nb);
        const Vec3 dr_da = (b - a * (c / na)) * f;
        Vec3 dr_dy{};
        for (int col = 0; col < 3; ++col)
          for (int r = 0; r < 3; ++r) dr_dy[col] += sm.jacobian[r][col] * dr_da[r];
        detail::scatter(grad, s, dr_dy * w);
      }
      partial[static_cast<std::size_t>(blk.index)] = sum * w;
    });
    TermValue out;
    for (double p : partial) out.value += p;
    if (with_gradient) out.gradient = acc.merge();
    return out;
  }

 private:
  Grid fixed_grid_;
  GradientField fixed_gradient_;
  GradientField moving_gradient_;
  double eta_;
  std::vector<std::size_t> voxels_;
};

inline TermValue ngf_distance(const Image3D& fixed, const Image3D& moving, const BSplineTransform& t,
                              const Image3D& mask, double eta) {
  return NgfDistance(fixed, moving, mask, eta).evaluate(t);
}

namespace detail {

// 7-point Laplacian (physical units) of one coefficient component. The second difference
// along an axis is taken only at nodes interior along that axis, so affine fields map to 0.
inline void laplacian(const Grid& g, std::span<const double> in, std::span<double> out, int comp_in, int stride_in,
                      int comp_out, int stride_out) {
  const Index3 n = g.dims;
  const double inv_h2[3] = {1.0 / (g.spacing[0] * g.spacing[0]), 1.0 / (g.spacing[1] * g.spacing[1]),
                            1.0 / (g.spacing[2] * g.spacing[2])};
  auto at = [&](int i, int j, int k) {
    return in[static_cast<std::size_t>(stride_in) * g.index(i, j, k) + static_cast<std::size_t>(comp_in)];
  };
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const double c = at(i, j, k);
        double lap = 0.0;
        if (i > 0 && i < n[0] - 1) lap += (at(i - 1, j, k) + at(i + 1, j, k) - 2 * c) * inv_h2[0];
        if (j > 0 && j < n[1] - 1) lap += (at(i, j - 1, k) + at(i, j + 1, k) - 2 * c) * inv_h2[1];
        if (k > 0 && k < n[2] - 1) lap += (at(i, j, k - 1) + at(i, j, k + 1) - 2 * c) * inv_h2[2];
        out[static_cast<std::size_t>(stride_out) * g.index(i, j, k) + static_cast<std::size_t>(comp_out)] = lap;
      }
}

// Transpose of laplacian(): scatters each row's stencil back onto its nodes.
inline void laplacian_transpose(const Grid& g, std::span<const double> in, std::span<double> out, int comp_in,
                                int stride_in, int comp_out, int stride_out) {
  const Index3 n = g.dims;
  const double inv_h2[3] = {1.0 / (g.spacing[0] * g.spacing[0]), 1.0 / (g.spacing[1] * g.spacing[1]),
                            1.0 / (g.spacing[2] * g.spacing[2])};
  auto row = [&](int i, int j, int k) {
    return in[static_cast<std::size_t>(stride_in) * g.index(i, j, k) + static_cast<std::size_t>(comp_in)];
  };
  auto interior = [&](int v, int a) { return v > 0 && v < n[a] - 1; };
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        double acc = 0.0;
        if (interior(i, 0)) acc -= 2 * row(i, j, k) * inv_h2[0];
        if (i > 0 && interior(i - 1, 0)) acc += row(i - 1, j, k) * inv_h2[0];
        if (i < n[0] - 1 && interior(i + 1, 0)) acc += row(i + 1, j, k) * inv_h2[0];
        if (interior(j, 1)) acc -= 2 * row(i, j, k) * inv_h2[1];
        if (j > 0 && interior(j - 1, 1)) acc += row(i, j - 1, k) * inv_h2[1];
        if (j < n[1] - 1 && interior(j + 1, 1)) acc += row(i, j + 1, k) * inv_h2[1];
        if (interior(k, 2)) acc -= 2 * row(i, j, k) * inv_h2[2];
        if (k > 0 && interior(k - 1, 2)) acc += row(i, j, k - 1) * inv_h2[2];
        if (k < n[2] - 1 && interior(k + 1, 2)) acc += row(i, j, k + 1) * inv_h2[2];
        out[static_cast<std::size_t>(stride_out) * g.index(i, j, k) + static_cast<std::size_t>(comp_out)] = acc;
      }
}

}  // namespace detail

/// Applies the curvature Hessian C * L^T L to interleaved 3-component coefficients.
inline void apply_curvature_hessian(const Grid& g, std::span<const double> u, std::span<double> out) {
  std::vector<double> lap(g.size());
  const double cell = g.voxel_volume();
  for (int comp = 0; comp < 3; ++comp) {
    detail::laplacian(g, u, lap, comp, 3, 0, 1);
    detail::laplacian_transpose(g, lap, out, 0, 1, comp, 3);
  }
  for (double& v : out) v *= cell;
}

/// R = 1/2 C sum_j |L u_j|^2 over the control grid, u the deviation coefficients.
inline TermValue curvature(const BSplineTransform& t) {
  const auto& g = t.grid();
  const auto u = t.coeffs();
  TermValue out;
  out.gradient.assign(u.size(), 0.0);
  std::vector<double> lap(g.size());
  for (int comp = 0; comp < 3; ++comp) {
    detail::laplacian(g, u, lap, comp, 3, 0, 1);
    for (double v : lap) out.value += v * v;
    detail::laplacian_transpose(g, lap, out.gradient, 0, 1, comp, 3);
  }
  const double cell = t.cell_volume();
  out.value *= 0.5 * cell;
  for (double& v : out.gradient) v *= cell;
  return out;
}

/// B = 1/2 sum_x (b_M(y(x)) - b_F(x))^2 * voxel volume over the fixed grid,
/// with b_M Gaussian-smoothed (sigma = 1 voxel) before trilinear sampling.
class BoundaryTerm {
 public:
  BoundaryTerm(const Image3D& fixed_mask, const Image3D& moving_mask)
      : fixed_mask_(fixed_mask), moving_smooth_(smooth_gaussian(moving_mask, moving_mask.spacing())) {}

  const Image3D& smoothed_moving_mask() const { return moving_smooth_; }

  TermValue evaluate(const BSplineTransform& t, bool with_gradient = true) const {
    const auto& g = fixed_mask_.grid();
    const double w = g.voxel_volume();
    const std::size_t n = g.size();
    const int blocks = parallel::block_count(n);
    std::vector<double> partial(static_cast<std::size_t>(blocks), 0.0);
    detail::GradientAccumulator acc(with_gradient ? 3 * t.control_points() : 0, blocks);
    parallel::for_blocks(n, [&](const parallel::Block& blk) {
      double sum = 0.0;
      auto& grad = acc.block(blk.index);
      for (std::size_t idx = blk.begin; idx < blk.end; ++idx) {
        const Vec3 x = g.world(g.coords(idx));
        const auto s = t.stencil(x);
        Vec3 disp{};
        for (int c = 0; c < 8; ++c) disp += s.weight[c] * t.total_coeff(s.index[c]);
        const auto sm = trilinear_sample_with_gradient(moving_smooth_, x + disp);
        const double diff = sm.value - fixed_mask_[idx];
        sum += 0.5 * diff * diff;
        if (with_gradient && diff != 0.0) detail::scatter(grad, s, sm.gradient * (w * diff));
      }
      partial[static_cast<std::size_t>(blk.index)] = sum * w;
    });
    TermValue out;
    for (double p : partial) out.value += p;
    if (with_gradient) out.gradient = acc.merge();
    return out;
  }

 private:
  Image3D fixed_mask_;
  Image3D moving_smooth_;
};

inline TermValue boundary_term(const Image3D& fixed_mask, const Image3D& moving_mask, const BSplineTransform& t) {
  return BoundaryTerm(fixed_mask, moving_mask).evaluate(t);
}

struct VccValue {
  TermValue term;
  /// Smallest d over all cells (the fold certificate).
  double min_d = kInf;
};

/// V = C sum_cells sum_l psi(d_il); infinite (with empty gradient) as soon as any d <= 0.
inline VccValue vcc_detailed(const BSplineTransform& t, bool with_gradient = true) {
  const auto& g = t.grid();
  const std::size_t cells = t.cell_count();
  const int blocks = parallel::block_count(cells);
  std::vector<double> partial(static_cast<std::size_t>(blocks), 0.0);
  std::vector<double> mins(static_cast<std::size_t>(blocks), kInf);
  detail::GradientAccumulator acc(with_gradient ? 3 * t.control_points() : 0, blocks);
  const double inv_h[3] = {1.0 / g.spacing[0], 1.0 / g.spacing[1], 1.0 / g.spacing[2]};
  parallel::for_blocks(cells, [&](const parallel::Block& blk) {
    double sum = 0.0, mn = kInf;
    auto& grad = acc.block(blk.index);
    for (std::size_t c = blk.begin; c < blk.end; ++c) {
      const auto ce = detail::cell_edges(t, t.cell_coords(c));
      std::array<std::array<Vec3, 4>, 3> dedge{};  // d V / d edge vector
      for (int m2 = 0; m2 < 4; ++m2)
        for (int m1 = 0; m1 < 4; ++m1) {
          const Vec3& e1 = ce.edge[1][static_cast<std::size_t>(m1)];
          const Vec3& e2 = ce.edge[2][static_cast<std::size_t>(m2)];
          const Vec3 c12 = cross(e1, e2);
          for (int m0 = 0; m0 < 4; ++m0) {
            const Vec3& e0 = ce.edge[0][static_cast<std::size_t>(m0)];
            const double d = dot(e0, c12);
            mn = std::min(mn, d);
            if (!(d > 0.0)) {
              sum = kInf;
              continue;
            }
            sum += psi(d);
            if (!with_gradient || !std::isfinite(sum)) continue;
            const double dp = psi_prime(d);
            dedge[0][static_cast<std::size_t>(m0)] += c12 * dp;
            dedge[1][static_cast<std::size_t>(m1)] += cross(e2, e0) * dp;
            dedge[2][static_cast<std::size_t>(m2)] += cross(e0, e1) * dp;
          }
        }
      if (!with_gradient || !std::isfinite(sum)) continue;
      for (int a = 0; a < 3; ++a)
        for (int m = 0; m < 4; ++m) {
          const auto [lo, hi] = detail::edge_corners(a, m);
          const Vec3 gvec = dedge[static_cast<std::size_t>(a)][static_cast<std::size_t>(m)] * inv_h[a];
          const std::size_t ih = 3 * ce.corner[static_cast<std::size_t>(hi)];
          const std::size_t il = 3 * ce.corner[static_cast<std::size_t>(lo)];
          for (int k = 0; k < 3; ++k) {
            grad[ih + static_cast<std::size_t>(k)] += gvec[k];
            grad[il + static_cast<std::size_t>(k)] -= gvec[k];
          }
        }
    }
    partial[static_cast<std::size_t>(blk.index)] = sum;
    mins[static_cast<std::size_t>(blk.index)] = mn;
  });
  VccValue out;
  for (double p : partial) out.term.value += p;
  out.min_d = *std::min_element(mins.begin(), mins.end());
  if (!std::isfinite(out.term.value)) {
    out.term.value = kInf;
    return out;
  }
  const double cv = t.cell_volume();
  out.term.value *= cv;
  if (with_gradient) {
    out.term.gradient = acc.merge();
    for (double& v : out.term.gradient) v *= cv;
  }
  return out;
}

inline TermValue vcc(const BSplineTransform& t) { return vcc_detailed(t).term; }

/// K = sum_i |y(x_i) - target_i|^2 (mm^2).
inline TermValue keypoint_penalty(const BSplineTransform& t, const CorrespondenceSet& corr) {
  TermValue out;
  out.gradient.assign(3 * t.control_points(), 0.0);
  for (const auto& c : corr) {
    const auto s = t.stencil(c.source);
    Vec3 disp{};
    for (int n = 0; n < 8; ++n) disp += s.weight[n] * t.total_coeff(s.index[n]);
    const Vec3 r = c.source + disp - c.target;
    out.value += dot(r, r);
    detail::scatter(out.gradient, s, r * 2.0);
  }
  return out;
}

struct AdaptiveWeights {
  double beta = 0.0;
  double delta = 0.0;
};

/// delta balances D and K at the start; beta puts B two orders of magnitude below D.
/// Degenerate (near-zero) terms get weight 0.
inline AdaptiveWeights adapt_weights(double d0, double b0, double k0) {
  AdaptiveWeights w;
  w.delta = k0 < 1e-12 ? 0.0 : d0 / k0;
  w.beta = b0 < 1e-12 ? 0.0 : d0 / (100.0 * b0);
  return w;
}

/// Everything the objective needs at one pyramid level.
struct ObjectiveInputs {
  Image3D fixed;        // masked fixed image
  Image3D moving;       // masked moving image
  Image3D fixed_mask;   // b_F
  Image3D moving_mask;  // b_M
  CorrespondenceSet correspondences;
};

struct ObjectiveBreakdown {
  double total = 0.0;
  double distance = 0.0;
  double curvature = 0.0;
  double boundary = 0.0;
  double volume = 0.0;
  double keypoints = 0.0;
};

/// Weighted sum of all terms for a fixed level; owns the cached per-term data.
class Objective {
 public:
  Objective(const ObjectiveInputs& in, const ObjectiveConfig& cfg) : cfg_(cfg), corr_(in.correspondences) {
    cfg_.validate();
    if (cfg_.use_ngf) ngf_.emplace(in.fixed, in.moving, in.fixed_mask, cfg_.eta);
    boundary_.emplace(in.fixed_mask, in.moving_mask);
  }

  const ObjectiveConfig& config() const { return cfg_; }
  ObjectiveConfig& config() { return cfg_; }

  /// Unweighted term values (all terms, regardless of weight).
  ObjectiveBreakdown terms(const BSplineTransform& t) const {
    ObjectiveBreakdown b;
    if (ngf_) b.distance = ngf_->evaluate(t, false).value;
    b.curvature = curvature(t).value;
    b.boundary = boundary_->evaluate(t, false).value;
    b.volume = vcc_detailed(t, false).term.value;
    b.keypoints = corr_.empty() ? 0.0 : keypoint_penalty(t, corr_).value;
    b.total = b.distance + cfg_.alpha * b.curvature + cfg_.beta * b.boundary + cfg_.delta * b.keypoints;
    if (cfg_.gamma > 0.0) b.total += cfg_.gamma * b.volume;
    return b;
  }

  /// J and its gradient; J = +infinity (gradient untouched) on folds when gamma > 0.
  TermValue evaluate(const BSplineTransform& t, bool with_gradient = true) const {
    TermValue out;
    out.gradient.assign(with_gradient ? 3 * t.control_points() : 0, 0.0);
    auto add = [&](const TermValue& term, double weight) {
      out.value += weight * term.value;
      if (with_gradient)
        for (std::size_t i = 0; i < out.gradient.size(); ++i) out.gradient[i] += weight * term.gradient[i];
    };
    if (cfg_.gamma > 0.0) {
      auto v = vcc_detailed(t, with_gradient);
      if (!std::isfinite(v.term.value)) {
        out.value = kInf;
        return out;
      }
      add(v.term, cfg_.gamma);
    }
    if (ngf_) add(ngf_->evaluate(t, with_gradient), 1.0);
    add(curvature(t), cfg_.alpha);
    if (cfg_.beta > 0.0) add(boundary_->evaluate(t, with_gradient), cfg_.beta);
    if (cfg_.delta > 0.0 && !corr_.empty()) add(keypoint_penalty(t, corr_), cfg_.delta);
    return out;
  }

 private:
  ObjectiveConfig cfg_;
  CorrespondenceSet corr_;
  std::optional<NgfDistance> ngf_;
  std::optional<BoundaryTerm> boundary_;
};

inline TermValue full_objective(const BSplineTransform& t, const ObjectiveConfig& cfg, const ObjectiveInputs& in) {
  return Objective(in, cfg).evaluate(t);
}

}  // namespace pulmoreg
