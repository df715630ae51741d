// L-BFGS with a curvature metric, the multilevel driver and mask pre-registration.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/correspondence.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/objective.hpp"
#include "pulmoreg/transform.hpp"

namespace pulmoreg {

struct CgResult {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = true;
};

/// Solves (w H + tau I) p = g with H the curvature Hessian on `grid` by conjugate gradients.
inline CgResult apply_inverse_metric(const Grid& grid, std::span<const double> g, double tau, std::span<double> p,
                                     double curvature_weight = 1.0, double tol = 1e-8, int max_iterations = 200) {
  if (!(tau > 0.0)) throw ValidationError("metric shift tau must be positive");
  const std::size_t n = g.size();
  if (n != 3 * grid.size() || p.size() != n) throw ValidationError("metric vector size mismatch");
  auto apply = [&](std::span<const double> x, std::span<double> out) {
    if (curvature_weight != 0.0) {
      apply_curvature_hessian(grid, x, out);
      for (std::size_t i = 0; i < n; ++i) out[i] = curvature_weight * out[i] + tau * x[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = tau * x[i];
    }
  };
  CgResult res;
  const double gnorm = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
  if (gnorm == 0.0) {
    std::fill(p.begin(), p.end(), 0.0);
    return res;
  }
  // Start from g / tau: exact on the kernel of H (affine fields).
  std::vector<double> r(n), d(n), q(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = g[i] / tau;
  apply(p, q);
  for (std::size_t i = 0; i < n; ++i) r[i] = g[i] - q[i];
  double rr = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
  std::vector<double> best(p.begin(), p.end());
  double best_rr = rr;
  d = r;
  while (std::sqrt(rr) > tol * gnorm && res.iterations < max_iterations) {
    apply(d, q);
    const double dq = std::inner_product(d.begin(), d.end(), q.begin(), 0.0);
    if (!(dq > 0.0)) break;
    const double a = rr / dq;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] += a * d[i];
      r[i] -= a * q[i];
    }
    const double rr_new = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
    ++res.iterations;
    if (rr_new < best_rr) {
      best_rr = rr_new;
      std::copy(p.begin(), p.end(), best.begin());
    }
    const double b = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) d[i] = r[i] + b * d[i];
  }
  res.relative_residual = std::sqrt(best_rr) / gnorm;
  if (res.relative_residual > tol) {
    res.converged = false;
    std::copy(best.begin(), best.end(), p.begin());
    log::warning("metric CG stopped at relative residual " + std::to_string(res.relative_residual));
  }
  return res;
}

inline std::vector<double> apply_inverse_metric(const Grid& grid, std::span<const double> g, double tau,
                                                double curvature_weight = 1.0) {
  std::vector<double> p(g.size());
  apply_inverse_metric(grid, g, tau, p, curvature_weight);
  return p;
}

struct LbfgsOptions {
  int memory = 5;
  double tau = 10.0;
  /// Stop when |g| <= gradient_tolerance * |g0|.
  double gradient_tolerance = 1e-3;
  /// Stop when the largest coefficient change of an accepted step is below this (mm).
  double step_tolerance = 1e-5;
  int max_iterations = 100;
  double armijo_c1 = 1e-4;
  int max_backtracks = 30;
  /// Rescale the metric seed by s'y / y'H0y of the newest pair.
  bool scale_metric = true;
};

enum class LbfgsStop { kNone, kGradient, kStep, kIterations, kLineSearch, kStationary };

inline const char* to_string(LbfgsStop s) {
  switch (s) {
    case LbfgsStop::kGradient: return "gradient";
    case LbfgsStop::kStep: return "step";
    case LbfgsStop::kIterations: return "iterations";
    case LbfgsStop::kLineSearch: return "line-search";
    case LbfgsStop::kStationary: return "stationary";
    default: return "none";
  }
}

struct LbfgsState {
  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  LbfgsOptions options;
  std::deque<Pair> pairs;
  int iterations = 0;
  int evaluations = 0;
  int rejected_pairs = 0;
  /// Current factor applied to the metric seed.
  double metric_scale = 1.0;
  double initial_value = 0.0;
  double final_value = 0.0;
  double initial_gradient_norm = 0.0;
  double final_gradient_norm = 0.0;
  LbfgsStop stop = LbfgsStop::kNone;

  LbfgsState() = default;
  explicit LbfgsState(const LbfgsOptions& o) : options(o) {}
};

/// Value (+infinity allowed) and, when `grad` is non-null, its gradient.
using ObjectiveFunction = std::function<double(std::span<const double> x, std::vector<double>* grad)>;
/// out = H0 * g, the initial inverse Hessian.
using InverseMetric = std::function<void(std::span<const double> g, std::span<double> out)>;
using IterationCallback = std::function<void(int iteration, double value, std::span<const double> x)>;

/// Limited-memory BFGS with Armijo backtracking; non-finite trial values are rejected.
/// Without a metric the initial inverse Hessian is the usual s'y / y'y scaling; with one,
/// the metric is optionally rescaled the same way (s'y / y'H0y).
inline std::vector<double> lbfgs_minimize(const ObjectiveFunction& fn, std::vector<double> x, LbfgsState& state,
                                          const InverseMetric& metric = {}, const IterationCallback& callback = {}) {
  const auto& opt = state.options;
  const std::size_t n = x.size();
  std::vector<double> g(n), gn(n), d(n), xn(n), q(n);
  double f = fn(x, &g);
  ++state.evaluations;
  if (!std::isfinite(f)) throw NumericalError("objective is not finite at the starting point");
  auto dotp = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  state.initial_value = f;
  state.initial_gradient_norm = std::sqrt(dotp(g, g));
  state.stop = LbfgsStop::kNone;
  double gnorm = state.initial_gradient_norm;
  if (gnorm == 0.0) state.stop = LbfgsStop::kStationary;

  auto initial = [&](std::vector<double>& v) {
    if (metric) {
      std::vector<double> tmp(v);
      metric(tmp, v);
      if (state.metric_scale != 1.0)
        for (double& e : v) e *= state.metric_scale;
    } else if (!state.pairs.empty()) {
      const auto& p = state.pairs.back();
      const double scale = 1.0 / (p.rho * std::inner_product(p.y.begin(), p.y.end(), p.y.begin(), 0.0));
      for (double& e : v) e *= scale;
    }
  };

  while (state.stop == LbfgsStop::kNone) {
    if (gnorm <= opt.gradient_tolerance * state.initial_gradient_norm) {
      state.stop = LbfgsStop::kGradient;
      break;
    }
    if (state.iterations >= opt.max_iterations) {
      state.stop = LbfgsStop::kIterations;
      break;
    }
    // Two-loop recursion.
    q = g;
    std::vector<double> alpha(state.pairs.size());
    for (std::size_t i = state.pairs.size(); i-- > 0;) {
      const auto& p = state.pairs[i];
      alpha[i] = p.rho * std::inner_product(p.s.begin(), p.s.end(), q.begin(), 0.0);
      for (std::size_t j = 0; j < n; ++j) q[j] -= alpha[i] * p.y[j];
    }
    initial(q);
    for (std::size_t i = 0; i < state.pairs.size(); ++i) {
      const auto& p = state.pairs[i];
      const double beta = p.rho * std::inner_product(p.y.begin(), p.y.end(), q.begin(), 0.0);
      for (std::size_t j = 0; j < n; ++j) q[j] += (alpha[i] - beta) * p.s[j];
    }
    for (std::size_t j = 0; j < n; ++j) d[j] = -q[j];
    double gd = dotp(g, d);
    if (!(gd < 0.0)) {
      state.pairs.clear();
      d = g;
      initial(d);
      for (double& e : d) e = -e;
      gd = dotp(g, d);
      if (!(gd < 0.0)) {
        state.stop = LbfgsStop::kStationary;
        break;
      }
    }

    double step = 1.0, fn_val = kInf;
    bool accepted = false;
    for (int bt = 0; bt <= opt.max_backtracks; ++bt) {
      for (std::size_t j = 0; j < n; ++j) xn[j] = x[j] + step * d[j];
      fn_val = fn(xn, &gn);
      ++state.evaluations;
      if (std::isfinite(fn_val) && fn_val <= f + opt.armijo_c1 * step * gd) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      state.stop = LbfgsStop::kLineSearch;
      break;
    }
    LbfgsState::Pair pair{std::vector<double>(n), std::vector<double>(n), 0.0};
    double max_step = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      pair.s[j] = xn[j] - x[j];
      pair.y[j] = gn[j] - g[j];
      max_step = std::max(max_step, std::abs(pair.s[j]));
    }
    const double sy = dotp(pair.s, pair.y);
    if (sy > 0.0) {
      pair.rho = 1.0 / sy;
      if (metric && opt.scale_metric) {
        metric(pair.y, q);
        const double yhy = dotp(pair.y, q);
        if (yhy > 0.0) state.metric_scale = sy / yhy;
      }
      state.pairs.push_back(std::move(pair));
      while (state.pairs.size() > static_cast<std::size_t>(std::max(opt.memory, 0))) state.pairs.pop_front();
    } else {
      ++state.rejected_pairs;
    }
    std::swap(x, xn);
    std::swap(g, gn);
    f = fn_val;
    gnorm = std::sqrt(dotp(g, g));
    ++state.iterations;
    if (callback) callback(state.iterations, f, x);
    if (max_step < opt.step_tolerance) state.stop = LbfgsStop::kStep;
  }
  state.final_value = f;
  state.final_gradient_norm = gnorm;
  return x;
}

// ---------------------------------------------------------------------------
// Multilevel driver

struct MultilevelConfig {
  int levels = 4;
  /// Control grid cells per axis at the finest level; halved per coarser level.
  int finest_cells = 128;
  ObjectiveConfig objective;
  LbfgsOptions lbfgs;
  /// Set beta and delta from the initial coarsest-level term values.
  bool adapt_weights = true;
  /// Scales beta after adaptation.
  double boundary_weight_multiplier = 1.0;
  /// Seed L-BFGS with (alpha R + tau I)^-1 instead of a scaled identity.
  bool curvature_metric = true;

  void validate() const {
    if (levels < 1) throw ValidationError("at least one pyramid level required");
    if (finest_cells < 1) throw ValidationError("control grid needs at least one cell");
    if (!(boundary_weight_multiplier >= 0.0)) throw ValidationError("boundary weight multiplier must be non-negative");
    objective.validate();
  }
};

struct ProgressEvent {
  int level = 0;
  int iteration = 0;
  double value = 0.0;
  ObjectiveBreakdown terms;
  /// The accepted iterate (valid during the callback only).
  const BSplineTransform* transform = nullptr;
  /// "prereg" for the deformable mask alignment, "multilevel" otherwise.
  const char* stage = "multilevel";
};

using ProgressCallback = std::function<void(const ProgressEvent&)>;

struct LevelReport {
  int level = 0;
  Vec3 spacing{};
  Index3 control_dims{};
  int iterations = 0;
  int evaluations = 0;
  std::string stop;
  ObjectiveBreakdown initial;
  ObjectiveBreakdown final;
  double min_cell_det = 0.0;
  double seconds = 0.0;
};

struct MultilevelResult {
  BSplineTransform transform;
  AdaptiveWeights weights;
  std::vector<LevelReport> levels;
};

/// Per-axis spacing of pyramid level `level` (0 = finest): as isotropic as the data allows.
inline Vec3 level_spacing(const Vec3& original, int level) {
  const double base = std::min({original[0], original[1], original[2]}) * std::ldexp(1.0, level);
  return Vec3{std::max(original[0], base), std::max(original[1], base), std::max(original[2], base)};
}

inline Index3 level_cells(int finest_cells, int level) {
  const int c = std::max(1, finest_cells >> level);
  return {c, c, c};
}

/// Gaussian pre-smoothing (sigma = half the new spacing on downsampled axes) and resampling.
inline Image3D pyramid_image(const Image3D& img, const Vec3& spacing) {
  Vec3 sigma{};
  bool smooth = false;
  for (int a = 0; a < 3; ++a)
    if (spacing[a] > img.spacing()[a] * (1.0 + 1e-9)) {
      sigma[a] = 0.5 * spacing[a];
      smooth = true;
    }
  if (!smooth) return img;
  return resample(smooth_gaussian(img, sigma), spacing, Interpolation::kTrilinear);
}

inline Image3D pyramid_mask(const Image3D& mask, const Vec3& spacing) {
  bool same = true;
  for (int a = 0; a < 3; ++a) same = same && std::abs(spacing[a] - mask.spacing()[a]) <= 1e-9 * spacing[a];
  if (same) return mask;
  return resample(mask, spacing, Interpolation::kNearest);
}

namespace detail {

inline ObjectiveFunction coefficient_objective(const Objective& obj, BSplineTransform& t) {
  return [&obj, &t](std::span<const double> x, std::vector<double>* grad) {
    t.set_coeffs(x);
    auto v = obj.evaluate(t, grad != nullptr);
    if (grad && std::isfinite(v.value)) *grad = std::move(v.gradient);
    return v.value;
  };
}

}  // namespace detail

/// Coarse-to-fine minimisation of the full objective. Images are used as given (mask
/// them beforehand); `prereg`, when present, is the reference transform and initial guess.
inline MultilevelResult run_multilevel(const Image3D& fixed, const Image3D& moving, const Image3D& fixed_mask,
                                       const Image3D& moving_mask, const CorrespondenceSet& correspondences,
                                       const BSplineTransform* prereg, const MultilevelConfig& cfg,
                                       const ProgressCallback& progress = {}) {
  cfg.validate();
  if (!fixed.grid().same_geometry(fixed_mask.grid())) throw ValidationError("fixed image and mask geometries differ");
  if (!moving.grid().same_geometry(moving_mask.grid()))
    throw ValidationError("moving image and mask geometries differ");
  MultilevelResult result;
  ObjectiveConfig ocfg = cfg.objective;
  std::optional<BSplineTransform> current;

  for (int level = cfg.levels - 1; level >= 0; --level) {
    const auto t0 = std::chrono::steady_clock::now();
    const Vec3 fs = level_spacing(fixed.spacing(), level);
    const Vec3 ms = level_spacing(moving.spacing(), level);
    ObjectiveInputs in{pyramid_image(fixed, fs), pyramid_image(moving, ms), pyramid_mask(fixed_mask, fs),
                       pyramid_mask(moving_mask, ms), correspondences};

    const Index3 cells = level_cells(cfg.finest_cells, level);
    BSplineTransform t;
    if (!current) {
      t = BSplineTransform::covering(fixed.grid(), cells);
      if (prereg) t.set_reference(sample_reference(*prereg, t.grid()));
    } else {
      t = prolong(*current, {cells[0] + 1, cells[1] + 1, cells[2] + 1});
      if (prereg) {
        // Re-sample the reference at the finer control points; keep the prolonged
        // reference if that would introduce a fold.
        BSplineTransform trial = t;
        trial.set_reference(sample_reference(*prereg, t.grid()));
        if (ocfg.gamma <= 0.0 || min_cell_jacobian(trial) > 0.0) t = std::move(trial);
      }
    }

    if (!current) {
      Objective probe(in, ocfg);
      const auto b = probe.terms(t);
      if (cfg.adapt_weights) {
        const auto w = adapt_weights(b.distance, b.boundary, correspondences.empty() ? 0.0 : b.keypoints);
        ocfg.beta = w.beta;
        ocfg.delta = w.delta;
      }
      ocfg.beta *= cfg.boundary_weight_multiplier;
      result.weights = {ocfg.beta, ocfg.delta};
    }

    const Objective obj(in, ocfg);
    LevelReport rep;
    rep.level = level;
    rep.spacing = fs;
    rep.control_dims = t.grid().dims;
    rep.initial = obj.terms(t);
    if (!std::isfinite(obj.evaluate(t, false).value))
      throw NumericalError("objective is infinite at the start of level " + std::to_string(level) +
                           " (folded initial transform)");

    LbfgsState state(cfg.lbfgs);
    InverseMetric metric;
    if (cfg.curvature_metric) {
      const Grid cg = t.grid();
      const double tau = cfg.lbfgs.tau, alpha = ocfg.alpha;
      metric = [cg, tau, alpha](std::span<const double> g, std::span<double> out) {
        apply_inverse_metric(cg, g, tau, out, alpha);
      };
    }
    IterationCallback cb;
    if (progress) {
      cb = [&](int it, double value, std::span<const double> x) {
        BSplineTransform probe = t;
        probe.set_coeffs(x);
        progress(ProgressEvent{level, it, value, obj.terms(probe), &probe});
      };
    }
    std::vector<double> x0(t.coeffs().begin(), t.coeffs().end());
    const auto fn = detail::coefficient_objective(obj, t);
    const auto x = lbfgs_minimize(fn, std::move(x0), state, metric, cb);
    t.set_coeffs(x);

    rep.iterations = state.iterations;
    rep.evaluations = state.evaluations;
    rep.stop = to_string(state.stop);
    rep.final = obj.terms(t);
    rep.min_cell_det = min_cell_jacobian(t);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log::debug("level " + std::to_string(level) + ": J " + std::to_string(rep.initial.total) + " -> " +
               std::to_string(rep.final.total) + " in " + std::to_string(rep.iterations) + " iterations (" + rep.stop +
               ")");
    result.levels.push_back(rep);
    current = std::move(t);
  }
  result.transform = std::move(*current);
  return result;
}

// ---------------------------------------------------------------------------
// Pre-registration

struct AffineTransform {
  /// y(x) = center + matrix (x - center) + translation
  Vec3 center{};
  Mat3 matrix = identity3();
  Vec3 translation{};

  Vec3 operator()(const Vec3& x) const {
    const Vec3 r = x - center;
    Vec3 out = center + translation;
    for (int i = 0; i < 3; ++i) out[i] += matrix[i][0] * r[0] + matrix[i][1] * r[1] + matrix[i][2] * r[2];
    return out;
  }
};

/// Control-point representation of an affine map (exact inside the control domain).
inline BSplineTransform affine_bspline(const AffineTransform& a, const Grid& control_grid) {
  BSplineTransform t(control_grid);
  for (std::size_t i = 0; i < control_grid.size(); ++i) {
    const Vec3 x = control_grid.world(control_grid.coords(i));
    t.set_coeff(i, a(x) - x);
  }
  return t;
}

struct AffineStage {
  /// Mask smoothing and sampling spacing (mm), coarse to fine.
  std::vector<double> scales{8.0, 4.0};
  LbfgsOptions lbfgs{5, 10.0, 1e-5, 1e-6, 200, 1e-4, 30};
};

struct PreregConfig {
  AffineStage affine;
  bool deformable = true;
  MultilevelConfig deformable_config = [] {
    MultilevelConfig c;
    c.levels = 3;
    c.finest_cells = 16;
    c.adapt_weights = false;
    c.objective.use_ngf = false;
    c.objective.beta = 1.0;
    c.objective.delta = 0.0;
    c.objective.alpha = 2.0;
    c.lbfgs.max_iterations = 60;
    return c;
  }();
};

struct Preregistration {
  Vec3 centroid_shift{};
  AffineTransform affine;
  /// Final pre-registration (affine plus deformable mask alignment) as total displacement.
  BSplineTransform transform;
  double affine_cost = 0.0;
};

/// Translation mapping the fixed-mask centroid onto the moving-mask centroid.
inline Vec3 centroid_alignment(const Image3D& fixed_mask, const Image3D& moving_mask) {
  return mask_centroid(moving_mask) - mask_centroid(fixed_mask);
}

namespace detail {

// Mask SSD 1/2 sum (M(y(x)) - F(x))^2 dv over a sampling grid, parameters
// [t (3), P (9 row-major)] with matrix = I + P / radius.
class AffineMaskCost {
 public:
  AffineMaskCost(const Image3D& fixed, const Image3D& moving, const Vec3& center, double radius)
      : fixed_(fixed), moving_(moving), center_(center), radius_(radius) {}

  AffineTransform transform(std::span<const double> p) const {
    AffineTransform a;
    a.center = center_;
    a.translation = Vec3{p[0], p[1], p[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a.matrix[i][j] = (i == j ? 1.0 : 0.0) + p[static_cast<std::size_t>(3 + 3 * i + j)] / radius_;
    return a;
  }

  double operator()(std::span<const double> p, std::vector<double>* grad) const {
    const auto a = transform(p);
    const auto& g = fixed_.grid();
    const double w = g.voxel_volume();
    const int blocks = parallel::block_count(g.size());
    std::vector<double> partial(static_cast<std::size_t>(blocks), 0.0);
    std::vector<std::array<double, 12>> pg(static_cast<std::size_t>(blocks), std::array<double, 12>{});
    parallel::for_blocks(g.size(), [&](const parallel::Block& blk) {
      double sum = 0.0;
      auto& gg = pg[static_cast<std::size_t>(blk.index)];
      for (std::size_t idx = blk.begin; idx < blk.end; ++idx) {
        const Vec3 x = g.world(g.coords(idx));
        const auto s = trilinear_sample_with_gradient(moving_, a(x));
        const double r = s.value - fixed_[idx];
        sum += 0.5 * r * r;
        if (!grad || r == 0.0) continue;
        const Vec3 rel = x - center_;
        for (int i = 0; i < 3; ++i) {
          const double gi = r * s.gradient[i];
          gg[static_cast<std::size_t>(i)] += gi;
          for (int j = 0; j < 3; ++j) gg[static_cast<std::size_t>(3 + 3 * i + j)] += gi * rel[j] / radius_;
        }
      }
      partial[static_cast<std::size_t>(blk.index)] = sum;
    });
    double value = 0.0;
    for (double v : partial) value += v;
    if (grad) {
      grad->assign(12, 0.0);
      for (const auto& b : pg)
        for (std::size_t i = 0; i < 12; ++i) (*grad)[i] += b[i] * w;
    }
    return value * w;
  }

 private:
  const Image3D& fixed_;
  const Image3D& moving_;
  Vec3 center_;
  double radius_;
};

inline double mask_radius(const Image3D& mask, const Vec3& center) {
  double sum = 0.0;
  std::size_t n = 0;
  const auto& g = mask.grid();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] >= 0.5) {
      const Vec3 d = g.world(g.coords(i)) - center;
      sum += dot(d, d);
      ++n;
    }
  return n ? std::max(std::sqrt(sum / static_cast<double>(n)), 1.0) : 1.0;
}

}  // namespace detail

/// Affine mask alignment starting from the centroid shift; SSD of smoothed masks.
inline AffineTransform affine_mask_registration(const Image3D& fixed_mask, const Image3D& moving_mask,
                                                const Vec3& initial_shift, const AffineStage& cfg,
                                                double* final_cost = nullptr) {
  const Vec3 center = mask_centroid(fixed_mask);
  const double radius = detail::mask_radius(fixed_mask, center);
  std::vector<double> p(12, 0.0);
  for (int a = 0; a < 3; ++a) p[static_cast<std::size_t>(a)] = initial_shift[a];
  double cost = 0.0;
  for (double scale : cfg.scales) {
    auto prep = [scale](const Image3D& m) {
      Vec3 sp;
      for (int a = 0; a < 3; ++a) sp[a] = std::max(m.spacing()[a], scale);
      return pyramid_image(smooth_gaussian(m, scale), sp);
    };
    const Image3D f = prep(fixed_mask);
    const Image3D m = prep(moving_mask);
    const detail::AffineMaskCost fn(f, m, center, radius);
    LbfgsState state(cfg.lbfgs);
    p = lbfgs_minimize([&fn](std::span<const double> x, std::vector<double>* g) { return fn(x, g); }, p, state);
    cost = state.final_value;
  }
  if (final_cost) *final_cost = cost;
  return detail::AffineMaskCost(fixed_mask, moving_mask, center, radius).transform(p);
}

/// Centroid, affine and deformable mask alignment. The returned transform lives on a
/// control grid covering the fixed image.
inline Preregistration preregister(const Image3D& fixed_mask, const Image3D& moving_mask, const PreregConfig& cfg = {},
                                   const ProgressCallback& progress = {}) {
  if (count_foreground(fixed_mask) == 0 || count_foreground(moving_mask) == 0)
    throw ValidationError("pre-registration requires non-empty masks");
  Preregistration out;
  out.centroid_shift = centroid_alignment(fixed_mask, moving_mask);
  out.affine = affine_mask_registration(fixed_mask, moving_mask, out.centroid_shift, cfg.affine, &out.affine_cost);
  const auto& dc = cfg.deformable_config;
  const auto affine_t =
      affine_bspline(out.affine, BSplineTransform::covering(fixed_mask.grid(), level_cells(dc.finest_cells, 0)).grid());
  if (!cfg.deformable) {
    out.transform = affine_t;
    return out;
  }
  ProgressCallback tagged;
  if (progress)
    tagged = [&progress](const ProgressEvent& e) {
      ProgressEvent copy = e;
      copy.stage = "prereg";
      progress(copy);
    };
  auto res = run_multilevel(fixed_mask, moving_mask, fixed_mask, moving_mask, {}, &affine_t, dc, tagged);
  // Fold the deviation into a plain total-displacement transform.
  BSplineTransform total(res.transform.grid());
  for (std::size_t i = 0; i < total.control_points(); ++i) total.set_coeff(i, res.transform.total_coeff(i));
  out.transform = std::move(total);
  return out;
}

}  // namespace pulmoreg
