// End-to-end registration: mask preprocessing, pre-registration, keypoint matching
// and multilevel optimisation, plus JSON configuration and run reports.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pulmoreg/core.hpp"
#include "pulmoreg/eval.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/keypoints.hpp"
#include "pulmoreg/optimizer.hpp"
#include "pulmoreg/parallel.hpp"
#include "pulmoreg/transform.hpp"

namespace pulmoreg {

struct RegistrationConfig {
  KeypointEngineConfig keypoints;
  bool use_keypoints = true;
  /// Isotropic spacing (mm) of the keypoint stage.
  double keypoint_spacing = 1.0;
  PreregConfig prereg;
  MultilevelConfig multilevel;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(keypoint_spacing > 0.0)) throw ValidationError("keypoint spacing must be positive");
    if (!(keypoints.alpha_kp >= 0.0)) throw ValidationError("alpha_kp must be non-negative");
    if (!(keypoints.eta > 0.0)) throw ValidationError("eta must be positive");
    if (use_keypoints) {
      const double r = keypoints.lattice_step / keypoint_spacing;
      if (std::abs(r - std::round(r)) > 1e-9 || std::round(r) < 1.0)
        throw ValidationError("lattice step must be an integer multiple of the keypoint spacing");
    }
    multilevel.validate();
    prereg.deformable_config.validate();
  }

  /// Settings for a desk-scale phantom: coarser control grid, capped keypoint count.
  static RegistrationConfig desk_scale() {
    RegistrationConfig c;
    c.multilevel.finest_cells = 32;
    c.keypoints.detection.max_keypoints = 1500;
    return c;
  }
};

// JSON mapping. Every key is optional on input; missing keys keep their defaults.
namespace detail {

template <class T>
void get_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const LbfgsOptions& o) {
  j = {{"memory", o.memory},
       {"tau", o.tau},
       {"gradient_tolerance", o.gradient_tolerance},
       {"step_tolerance", o.step_tolerance},
       {"max_iterations", o.max_iterations},
       {"armijo_c1", o.armijo_c1},
       {"max_backtracks", o.max_backtracks}};
}
inline void from_json(const nlohmann::json& j, LbfgsOptions& o) {
  detail::get_opt(j, "memory", o.memory);
  detail::get_opt(j, "tau", o.tau);
  detail::get_opt(j, "gradient_tolerance", o.gradient_tolerance);
  detail::get_opt(j, "step_tolerance", o.step_tolerance);
  detail::get_opt(j, "max_iterations", o.max_iterations);
  detail::get_opt(j, "armijo_c1", o.armijo_c1);
  detail::get_opt(j, "max_backtracks", o.max_backtracks);
}

inline void to_json(nlohmann::json& j, const ObjectiveConfig& o) {
  j = {{"alpha", o.alpha}, {"beta", o.beta}, {"gamma", o.gamma},
       {"delta", o.delta}, {"eta", o.eta},   {"use_ngf", o.use_ngf}};
}
inline void from_json(const nlohmann::json& j, ObjectiveConfig& o) {
  detail::get_opt(j, "alpha", o.alpha);
  detail::get_opt(j, "beta", o.beta);
  detail::get_opt(j, "gamma", o.gamma);
  detail::get_opt(j, "delta", o.delta);
  detail::get_opt(j, "eta", o.eta);
  detail::get_opt(j, "use_ngf", o.use_ngf);
}

inline void to_json(nlohmann::json& j, const MultilevelConfig& o) {
  j = {{"levels", o.levels},
       {"finest_cells", o.finest_cells},
       {"objective", o.objective},
       {"lbfgs", o.lbfgs},
       {"adapt_weights", o.adapt_weights},
       {"boundary_weight_multiplier", o.boundary_weight_multiplier},
       {"curvature_metric", o.curvature_metric}};
}
inline void from_json(const nlohmann::json& j, MultilevelConfig& o) {
  detail::get_opt(j, "levels", o.levels);
  detail::get_opt(j, "finest_cells", o.finest_cells);
  detail::get_opt(j, "objective", o.objective);
  detail::get_opt(j, "lbfgs", o.lbfgs);
  detail::get_opt(j, "adapt_weights", o.adapt_weights);
  detail::get_opt(j, "boundary_weight_multiplier", o.boundary_weight_multiplier);
  detail::get_opt(j, "curvature_metric", o.curvature_metric);
}

inline void to_json(nlohmann::json& j, const KeypointEngineConfig& o) {
  j = {{"sigma", o.detection.sigma},
       {"suppression_radius", o.detection.suppression_radius},
       {"min_score", o.detection.min_score},
       {"max_keypoints", o.detection.max_keypoints},
       {"sigma_intensity", o.tree.sigma_intensity},
       {"neighbours", o.tree.neighbours},
       {"lattice_step", o.lattice_step},
       {"lattice_radius", o.lattice_radius},
       {"alpha_kp", o.alpha_kp},
       {"eta", o.eta},
       {"symmetric", o.symmetric}};
}
inline void from_json(const nlohmann::json& j, KeypointEngineConfig& o) {
  detail::get_opt(j, "sigma", o.detection.sigma);
  detail::get_opt(j, "suppression_radius", o.detection.suppression_radius);
  detail::get_opt(j, "min_score", o.detection.min_score);
  detail::get_opt(j, "max_keypoints", o.detection.max_keypoints);
  detail::get_opt(j, "sigma_intensity", o.tree.sigma_intensity);
  detail::get_opt(j, "neighbours", o.tree.neighbours);
  detail::get_opt(j, "lattice_step", o.lattice_step);
  detail::get_opt(j, "lattice_radius", o.lattice_radius);
  detail::get_opt(j, "alpha_kp", o.alpha_kp);
  detail::get_opt(j, "eta", o.eta);
  detail::get_opt(j, "symmetric", o.symmetric);
}

inline void to_json(nlohmann::json& j, const PreregConfig& o) {
  j = {{"affine_scales", o.affine.scales},
       {"affine_lbfgs", o.affine.lbfgs},
       {"deformable", o.deformable},
       {"deformable_config", o.deformable_config}};
}
inline void from_json(const nlohmann::json& j, PreregConfig& o) {
  detail::get_opt(j, "affine_scales", o.affine.scales);
  detail::get_opt(j, "affine_lbfgs", o.affine.lbfgs);
  detail::get_opt(j, "deformable", o.deformable);
  detail::get_opt(j, "deformable_config", o.deformable_config);
}

inline void to_json(nlohmann::json& j, const RegistrationConfig& o) {
  j = {{"keypoints", o.keypoints},   {"use_keypoints", o.use_keypoints}, {"keypoint_spacing", o.keypoint_spacing},
       {"prereg", o.prereg},         {"multilevel", o.multilevel},       {"seed", o.seed}};
}
inline void from_json(const nlohmann::json& j, RegistrationConfig& o) {
  detail::get_opt(j, "keypoints", o.keypoints);
  detail::get_opt(j, "use_keypoints", o.use_keypoints);
  detail::get_opt(j, "keypoint_spacing", o.keypoint_spacing);
  detail::get_opt(j, "prereg", o.prereg);
  detail::get_opt(j, "multilevel", o.multilevel);
  detail::get_opt(j, "seed", o.seed);
}

inline void to_json(nlohmann::json& j, const ObjectiveBreakdown& b) {
  j = {{"total", b.total},       {"distance", b.distance}, {"curvature", b.curvature},
       {"boundary", b.boundary}, {"volume", b.volume},     {"keypoints", b.keypoints}};
}

inline void to_json(nlohmann::json& j, const JacobianReport& r) {
  j = {{"mean", r.mean}, {"std", r.std}, {"min", r.min},       {"q01", r.q01},
       {"q99", r.q99},   {"max", r.max}, {"voxels", r.voxels}, {"folds", r.folds}};
}

inline void to_json(nlohmann::json& j, const TreReport& r) {
  j = {{"mean", r.mean},
       {"std", r.std},
       {"count", r.distances.size()},
       {"excluded", r.excluded},
       {"distances", r.distances},
       {"cumulative_step_mm", 0.5},
       {"cumulative", r.cumulative}};
}

struct RegistrationResult {
  BSplineTransform transform;
  Preregistration prereg;
  CorrespondenceSet correspondences;
  std::size_t keypoint_count = 0;
  MultilevelResult multilevel;
  /// Total displacement on the fixed grid (mm).
  VectorField displacement;
  /// Moving image resampled into the fixed frame.
  Image3D warped_moving;
  JacobianReport jacobian;
  double min_cell_det = 0.0;
  double seconds_prereg = 0.0;
  double seconds_keypoints = 0.0;
  double seconds_multilevel = 0.0;
  nlohmann::json report;
};

inline Image3D binarize(const Image3D& mask) {
  Image3D out(mask.grid());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

/// Image and mask resampled to isotropic `spacing`, masked with background 0.
struct PreprocessedImage {
  Image3D image;
  Image3D mask;
};

inline PreprocessedImage preprocess(const Image3D& image, const Image3D& mask, double spacing) {
  if (!image.grid().same_geometry(mask.grid())) throw ValidationError("image and mask geometries differ");
  const Image3D b = binarize(mask);
  const Image3D masked = apply_mask(image, b);
  const Vec3 sp{spacing, spacing, spacing};
  bool same = true;
  for (int a = 0; a < 3; ++a) same = same && std::abs(image.spacing()[a] - spacing) <= 1e-9 * spacing;
  if (same) return {masked, b};
  // Smooth only along axes that get coarser.
  Vec3 sigma{};
  for (int a = 0; a < 3; ++a)
    if (image.spacing()[a] < spacing) sigma[a] = 0.5 * spacing;
  return {resample(smooth_gaussian(masked, sigma), sp, Interpolation::kTrilinear),
          resample(b, sp, Interpolation::kNearest)};
}

/// Keypoint stage: fixed image and moving image warped by the pre-registration, both on
/// an isotropic grid over the fixed domain.
inline CorrespondenceSet keypoint_stage(const Image3D& fixed_masked, const Image3D& fixed_mask,
                                        const Image3D& moving_masked, const BSplineTransform& prereg,
                                        const RegistrationConfig& cfg, std::size_t* keypoint_count = nullptr) {
  const auto f = preprocess(fixed_masked, fixed_mask, cfg.keypoint_spacing);
  Image3D warped(f.image.grid());
  const auto& g = warped.grid();
  parallel::for_each_index(g.size(), [&](std::size_t i) {
    warped[i] = trilinear_sample(moving_masked, prereg(g.world(g.coords(i))));
  });
  KeypointSet keys;
  auto corr = compute_correspondences(f.image, warped, f.mask, &prereg, cfg.keypoints, &keys);
  if (keypoint_count) *keypoint_count = keys.size();
  return corr;
}

inline RegistrationResult register_images(const Image3D& fixed, const Image3D& moving, const Image3D& fixed_mask,
                                          const Image3D& moving_mask, const RegistrationConfig& cfg,
                                          const ProgressCallback& progress = {}) {
  cfg.validate();
  fixed.grid().validate();
  moving.grid().validate();
  if (!fixed.grid().same_geometry(fixed_mask.grid())) throw ValidationError("fixed image and mask geometries differ");
  if (!moving.grid().same_geometry(moving_mask.grid()))
    throw ValidationError("moving image and mask geometries differ");
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };

  RegistrationResult r;
  const Image3D bf = binarize(fixed_mask), bm = binarize(moving_mask);
  if (count_foreground(bf) == 0 || count_foreground(bm) == 0) throw ValidationError("lung masks must be non-empty");
  const Image3D fm = apply_mask(fixed, bf), mm = apply_mask(moving, bm);

  auto t = clock::now();
  r.prereg = preregister(bf, bm, cfg.prereg, progress);
  const double prereg_min_det = min_cell_jacobian(r.prereg.transform);
  if (!(prereg_min_det > 0.0)) throw NumericalError("pre-registration produced a folded transform");
  r.seconds_prereg = seconds(t);

  t = clock::now();
  if (cfg.use_keypoints) r.correspondences = keypoint_stage(fm, bf, mm, r.prereg.transform, cfg, &r.keypoint_count);
  r.seconds_keypoints = seconds(t);

  t = clock::now();
  r.multilevel = run_multilevel(fm, mm, bf, bm, r.correspondences, &r.prereg.transform, cfg.multilevel, progress);
  r.seconds_multilevel = seconds(t);
  r.transform = r.multilevel.transform;

  const auto& g = fixed.grid();
  r.displacement = displacement_field(r.transform, g);
  r.warped_moving = Image3D(g);
  parallel::for_each_index(g.size(), [&](std::size_t i) {
    r.warped_moving[i] = trilinear_sample(moving, g.world(g.coords(i)) + r.displacement[i]);
  });
  r.jacobian = eval_jacobian(r.transform, bf);
  r.min_cell_det = min_cell_jacobian(r.transform);
  if (cfg.multilevel.objective.gamma > 0.0 && !(r.min_cell_det > 0.0))
    throw NumericalError("registration result is folded");

  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.multilevel.levels)
    levels.push_back({{"level", l.level},
                      {"spacing", {l.spacing[0], l.spacing[1], l.spacing[2]}},
                      {"control_dims", l.control_dims},
                      {"iterations", l.iterations},
                      {"evaluations", l.evaluations},
                      {"stop", l.stop},
                      {"initial", l.initial},
                      {"final", l.final},
                      {"min_cell_det", l.min_cell_det},
                      {"seconds", l.seconds}});
  const auto& af = r.prereg.affine;
  r.report = {{"config", cfg},
              {"prereg",
               {{"centroid_shift", {r.prereg.centroid_shift[0], r.prereg.centroid_shift[1], r.prereg.centroid_shift[2]}},
                {"affine_matrix", af.matrix},
                {"affine_translation", {af.translation[0], af.translation[1], af.translation[2]}},
                {"affine_center", {af.center[0], af.center[1], af.center[2]}},
                {"affine_cost", r.prereg.affine_cost},
                {"min_cell_det", prereg_min_det}}},
              {"keypoints", {{"detected", r.keypoint_count}, {"correspondences", r.correspondences.size()}}},
              {"weights",
               {{"alpha", cfg.multilevel.objective.alpha},
                {"beta", r.multilevel.weights.beta},
                {"gamma", cfg.multilevel.objective.gamma},
                {"delta", r.multilevel.weights.delta},
                {"alpha_kp", cfg.keypoints.alpha_kp},
                {"eta", cfg.multilevel.objective.eta}}},
              {"levels", levels},
              {"jacobian", r.jacobian},
              {"min_cell_det", r.min_cell_det},
              {"timings",
               {{"prereg", r.seconds_prereg},
                {"keypoints", r.seconds_keypoints},
                {"multilevel", r.seconds_multilevel},
                {"threads", parallel::thread_count()}}}};
  return r;
}

// ---------------------------------------------------------------------------
// Parameter sweep

enum class SweepParameter { kAlpha, kAlphaKp, kGamma, kEta };

inline SweepParameter parse_sweep_parameter(const std::string& s) {
  if (s == "alpha") return SweepParameter::kAlpha;
  if (s == "alpha_kp") return SweepParameter::kAlphaKp;
  if (s == "gamma") return SweepParameter::kGamma;
  if (s == "eta") return SweepParameter::kEta;
  throw ValidationError("unknown sweep parameter '" + s + "' (alpha, alpha_kp, gamma, eta)");
}

inline const char* to_string(SweepParameter p) {
  switch (p) {
    case SweepParameter::kAlpha: return "alpha";
    case SweepParameter::kAlphaKp: return "alpha_kp";
    case SweepParameter::kGamma: return "gamma";
    default: return "eta";
  }
}

/// Copy of `base` with one parameter multiplied by `factor`; eta scales both NGF uses.
inline RegistrationConfig scaled_config(const RegistrationConfig& base, SweepParameter p, double factor) {
  RegistrationConfig c = base;
  switch (p) {
    case SweepParameter::kAlpha: c.multilevel.objective.alpha *= factor; break;
    case SweepParameter::kAlphaKp: c.keypoints.alpha_kp *= factor; break;
    case SweepParameter::kGamma: c.multilevel.objective.gamma *= factor; break;
    case SweepParameter::kEta:
      c.multilevel.objective.eta *= factor;
      c.keypoints.eta *= factor;
      break;
  }
  return c;
}

/// 10^k for k = -5..5.
inline std::vector<double> default_sweep_factors() {
  std::vector<double> f;
  for (int k = -5; k <= 5; ++k) f.push_back(std::pow(10.0, k));
  return f;
}

struct SweepRow {
  double factor = 1.0;
  bool ok = false;
  std::string error;
  double mean_tre = 0.0;
  double std_tre = 0.0;
  double min_det = 0.0;
};

struct SweepInputs {
  Image3D fixed, moving, fixed_mask, moving_mask;
  std::vector<Vec3> fixed_landmarks, moving_landmarks;
};

/// Re-runs the registration per factor; failing cells are marked, not fatal.
/// `on_row` sees each finished cell together with its result (null on failure).
inline std::vector<SweepRow> sweep(const SweepInputs& in, const RegistrationConfig& base, SweepParameter p,
                                   const std::vector<double>& factors,
                                   const std::function<void(const SweepRow&, const RegistrationResult*)>& on_row = {}) {
  std::vector<SweepRow> rows;
  for (double f : factors) {
    SweepRow row;
    row.factor = f;
    try {
      const auto res = register_images(in.fixed, in.moving, in.fixed_mask, in.moving_mask, scaled_config(base, p, f));
      const auto tre = eval_tre(in.fixed_landmarks, in.moving_landmarks, res.displacement);
      row.ok = true;
      row.mean_tre = tre.mean;
      row.std_tre = tre.std;
      row.min_det = res.jacobian.min;
      if (on_row) on_row(row, &res);
    } catch (const Error& e) {
      row.error = e.what();
      if (on_row) on_row(row, nullptr);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace pulmoreg
