#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace pulmoreg;
using namespace testutil;

namespace {

template <class Term>
GradientCheck check_term(BSplineTransform t, Term&& term) {
  const auto analytic = term(t).gradient;
  std::vector<double> x(t.coeffs().begin(), t.coeffs().end());
  return check_gradient(
      [&](const std::vector<double>& c) {
        t.set_coeffs(c);
        return term(t).value;
      },
      x, analytic);
}

}  // namespace

TEST(NgfResidual, FlatRegionsContributeZero) { EXPECT_EQ(ngf_residual({0, 0, 0}, {0, 0, 0}, 12.0), 0.0); }

TEST(NgfResidual, EqualVectorsGiveZero) {
  for (double eta : {0.1, 1.0, 12.0}) EXPECT_NEAR(ngf_residual({10, 0, 0}, {10, 0, 0}, eta), 0.0, 1e-15);
}

TEST(NgfResidual, OrthogonalVectors) {
  EXPECT_NEAR(ngf_residual({10, 0, 0}, {0, 10, 0}, 1.0), 1.0 - 1.0 / (101.0 * 101.0), 1e-15);
}

TEST(NgfDistance, InvariantToIntensityRescalingWithEta) {
  std::mt19937_64 rng(1);
  auto inst = make_gradient_instance(rng);
  auto& in = inst.inputs;
  const double d1 = NgfDistance(in.fixed, in.moving, in.fixed_mask, 12.0).evaluate(inst.transform, false).value;
  Image3D f2 = in.fixed, m2 = in.moving;
  for (std::size_t i = 0; i < f2.size(); ++i) {
    f2[i] *= 3.5;
    m2[i] *= 3.5;
  }
  const double d2 = NgfDistance(f2, m2, in.fixed_mask, 12.0 * 3.5).evaluate(inst.transform, false).value;
  EXPECT_NEAR(d1, d2, 1e-10 * std::max(1.0, std::abs(d1)));
}

TEST(NgfDistance, SelfSimilarityIsZero) {
  std::mt19937_64 rng(2);
  auto inst = make_gradient_instance(rng);
  BSplineTransform id(inst.transform.grid());
  const auto& in = inst.inputs;
  EXPECT_NEAR(NgfDistance(in.fixed, in.fixed, in.fixed_mask, 12.0).evaluate(id, false).value, 0.0, 1e-12);
}

TEST(Curvature, ZeroCoefficients) {
  BSplineTransform t(make_grid({4, 4, 4}, {2, 2, 2}));
  std::vector<double> ref(t.coeffs().size(), 0.7);
  t.set_reference(ref);
  EXPECT_EQ(curvature(t).value, 0.0);
}

TEST(Curvature, AffineDeviationIsFree) {
  BSplineTransform t(make_grid({5, 4, 6}, {2, 3, 1.5}));
  const auto& g = t.grid();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec3 x = g.world(g.coords(i));
    t.set_coeff(i, Vec3{0.1 * x[0] - 0.2 * x[2] + 1, 0.3 * x[1] + 0.05 * x[0], -0.1 * x[2] + 2});
  }
  const auto r = curvature(t);
  EXPECT_NEAR(r.value, 0.0, 1e-20);
  for (double v : r.gradient) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Curvature, MatchesDenseLaplacianOracle) {
  std::mt19937_64 rng(3);
  BSplineTransform t(make_grid({4, 4, 4}, {2.0, 1.5, 3.0}));
  randomize_coeffs(t, rng, 1.0);
  const auto& g = t.grid();
  const auto L = dense_laplacian(g);
  double expected = 0.0;
  for (int comp = 0; comp < 3; ++comp)
    for (std::size_t r = 0; r < g.size(); ++r) {
      double row = 0.0;
      for (std::size_t c = 0; c < g.size(); ++c) row += L[r][c] * t.coeffs()[3 * c + static_cast<std::size_t>(comp)];
      expected += row * row;
    }
  expected *= 0.5 * t.cell_volume();
  EXPECT_NEAR(curvature(t).value, expected, 1e-10 * expected);
}

TEST(Curvature, HessianIsLinearOperatorOfGradient) {
  std::mt19937_64 rng(4);
  BSplineTransform t(make_grid({4, 5, 4}, {2, 2, 2}));
  randomize_coeffs(t, rng, 1.0);
  std::vector<double> h(t.coeffs().size());
  apply_curvature_hessian(t.grid(), t.coeffs(), h);
  const auto r = curvature(t);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], r.gradient[i], 1e-12);
}

/// 1/2 sum (G * b_M - b_F)^2 at the voxel centres, G a brute-force 7^3 truncated Gaussian
/// (sigma 1 voxel); masks must stay 3 voxels clear of the border.
static double smoothed_ssd_oracle(const Image3D& fm, const Image3D& mm) {
  const auto& g = fm.grid();
  double ksum = 0.0;
  for (int dz = -3; dz <= 3; ++dz)
    for (int dy = -3; dy <= 3; ++dy)
      for (int dx = -3; dx <= 3; ++dx) ksum += std::exp(-0.5 * (dx * dx + dy * dy + dz * dz));
  double out = 0.0;
  for (int k = 3; k < g.dims[2] - 3; ++k)
    for (int j = 3; j < g.dims[1] - 3; ++j)
      for (int i = 3; i < g.dims[0] - 3; ++i) {
        double s = 0.0;
        for (int dz = -3; dz <= 3; ++dz)
          for (int dy = -3; dy <= 3; ++dy)
            for (int dx = -3; dx <= 3; ++dx)
              s += std::exp(-0.5 * (dx * dx + dy * dy + dz * dz)) * mm(i + dx, j + dy, k + dz);
        const double d = s / ksum - fm(i, j, k);
        out += 0.5 * d * d;
      }
  return out * g.voxel_volume();
}

TEST(Boundary, IdenticalMasksIdentity) {
  const Grid g = make_grid({20, 20, 20});
  const auto m = ellipsoid_mask(g, grid_center(g), {3, 3, 3});
  BSplineTransform t = BSplineTransform::covering(g, {3, 3, 3});
  EXPECT_NEAR(boundary_term(Image3D(g, 1.0), Image3D(g, 1.0), t).value, 0.0, 1e-20);
  // Smoothing leaves a residual along the surface only.
  const double b = boundary_term(m, m, t).value;
  EXPECT_NEAR(b, smoothed_ssd_oracle(m, m), 1e-9 * b);
  const auto shifted = ellipsoid_mask(g, grid_center(g) + Vec3{1, 0, 0}, {3, 3, 3});
  EXPECT_LT(b, boundary_term(m, shifted, t).value);
}

TEST(Boundary, DisjointRegionVolume) {
  const Grid g = make_grid({8, 8, 8}, {1, 1, 2});
  Image3D fm(g, 1.0), mm(g, 0.0);
  BSplineTransform t = BSplineTransform::covering(g, {2, 2, 2});
  EXPECT_NEAR(boundary_term(fm, mm, t).value, 0.5 * static_cast<double>(g.size()) * g.voxel_volume(), 1e-9);
}

TEST(Boundary, ShiftedSphereMatchesSmoothedSsd) {
  const Grid g = make_grid({28, 28, 28});
  const Vec3 c = grid_center(g);
  const auto fm = ellipsoid_mask(g, c, {6, 6, 6});
  const auto mm = ellipsoid_mask(g, c + Vec3{2, 0, 0}, {6, 6, 6});
  const double b = boundary_term(fm, mm, BSplineTransform::covering(g, {3, 3, 3})).value;
  EXPECT_NEAR(b, smoothed_ssd_oracle(fm, mm), 1e-9 * b);
  // The unsmoothed voxel SSD is larger: a two-voxel step against a sigma = 1 voxel edge
  // recovers roughly 0.7 of it (1D: sum of (Phi(i - 1.5) - [i >= 0])^2 ~= 1.45 of 2).
  double ssd = 0.0;
  for (std::size_t i = 0; i < fm.size(); ++i) ssd += 0.5 * (fm[i] - mm[i]) * (fm[i] - mm[i]);
  EXPECT_GT(b, 0.6 * ssd);
  EXPECT_LT(b, 0.8 * ssd);
}

TEST(Psi, HandValues) {
  EXPECT_DOUBLE_EQ(psi(2.0), 0.5);
  EXPECT_DOUBLE_EQ(psi(0.5), 0.5);
  EXPECT_EQ(psi(1.0), 0.0);
  EXPECT_TRUE(std::isinf(psi(-0.1)));
  EXPECT_TRUE(std::isinf(psi(0.0)));
}

TEST(Psi, ReciprocalSymmetryAndBarrier) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> lg(std::log(1e-3), std::log(1e3));
  for (int n = 0; n < 1000; ++n) {
    const double t = std::exp(lg(rng));
    EXPECT_NEAR(psi(t), psi(1.0 / t), 1e-12 * std::max(1.0, psi(t)));
  }
  EXPECT_GT(psi(1e-7), 1e6);
}

TEST(Vcc, IdentityIsZero) {
  BSplineTransform t(make_grid({3, 3, 3}, {2, 2, 2}));
  EXPECT_EQ(vcc(t).value, 0.0);
}

TEST(Vcc, FoldIsInfinite) {
  BSplineTransform t(make_grid({3, 3, 3}, {2, 2, 2}));
  t.set_coeff(t.grid().index(1, 1, 1), {5, 0, 0});
  EXPECT_LT(min_cell_jacobian(t), 0.0);
  EXPECT_TRUE(std::isinf(vcc(t).value));
}

TEST(Vcc, UniformScalingClosedForm) {
  BSplineTransform t(make_grid({4, 3, 3}, {2, 2, 2}));
  const auto& g = t.grid();
  for (std::size_t i = 0; i < g.size(); ++i) t.set_coeff(i, g.world(g.coords(i)) * (std::cbrt(2.0) - 1.0));
  const double expected = t.cell_volume() * static_cast<double>(t.cell_count()) * 64 * psi(2.0);
  EXPECT_NEAR(vcc(t).value, expected, 1e-9 * expected);
  EXPECT_NEAR(expected, 32.0 * t.cell_volume() * static_cast<double>(t.cell_count()), 1e-9);
}

TEST(Keypoints, ZeroWhenTargetsHit) {
  std::mt19937_64 rng(6);
  BSplineTransform t(make_grid({3, 3, 3}, {4, 4, 4}));
  randomize_coeffs(t, rng, 1.0);
  CorrespondenceSet corr;
  for (int k = 0; k < 4; ++k) {
    Correspondence c;
    c.source = random_point_in(t.grid(), rng);
    c.target = t(c.source);
    corr.push_back(c);
  }
  EXPECT_NEAR(keypoint_penalty(t, corr).value, 0.0, 1e-20);
}

TEST(Keypoints, SingleResidual) {
  BSplineTransform t(make_grid({3, 3, 3}, {4, 4, 4}));
  Correspondence c;
  c.source = {2, 2, 2};
  c.target = {-1, -2, 2};
  EXPECT_DOUBLE_EQ(keypoint_penalty(t, {c}).value, 25.0);
}

TEST(Keypoints, MatchesPerPointSum) {
  std::mt19937_64 rng(7);
  BSplineTransform t(make_grid({3, 3, 3}, {4, 4, 4}));
  randomize_coeffs(t, rng, 1.0);
  CorrespondenceSet corr;
  double expected = 0.0;
  for (int k = 0; k < 10; ++k) {
    Correspondence c;
    c.source = random_point_in(t.grid(), rng);
    c.target = random_point_in(t.grid(), rng);
    const Vec3 r = c.source + naive_displacement(t, c.source) - c.target;
    expected += dot(r, r);
    corr.push_back(c);
  }
  EXPECT_NEAR(keypoint_penalty(t, corr).value, expected, 1e-12 * expected);
}

TEST(AdaptWeights, Ratios) {
  auto w = adapt_weights(50, 0.01, 25);
  EXPECT_DOUBLE_EQ(w.delta, 2.0);
  EXPECT_DOUBLE_EQ(w.beta, 50.0);
  w = adapt_weights(50, 0.01, 0.0);
  EXPECT_EQ(w.delta, 0.0);
}

TEST(ObjectiveConfig, Validation) {
  ObjectiveConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.beta = -1;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  EXPECT_DOUBLE_EQ(c.alpha, 2.0);
  EXPECT_DOUBLE_EQ(c.gamma, 0.001);
  EXPECT_DOUBLE_EQ(c.eta, 12.0);
}

TEST(Objective, IdentityInputsReduceToDistance) {
  std::mt19937_64 rng(8);
  auto inst = make_gradient_instance(rng);
  auto in = inst.inputs;
  in.moving = in.fixed;
  in.moving_mask = Image3D(in.fixed.grid(), 1.0);
  in.fixed_mask = in.moving_mask;
  BSplineTransform t(inst.transform.grid());
  for (auto& c : in.correspondences) c.target = c.source;
  ObjectiveConfig cfg;
  cfg.beta = 1.0;
  cfg.delta = 1.0;
  const Objective obj(in, cfg);
  const auto b = obj.terms(t);
  EXPECT_NEAR(b.total, b.distance, 1e-12);
  EXPECT_EQ(b.curvature, 0.0);
  EXPECT_NEAR(b.volume, 0.0, 1e-20);
  EXPECT_EQ(b.keypoints, 0.0);
  EXPECT_NEAR(b.boundary, 0.0, 1e-12);
}

TEST(Objective, ClassicModelWhenOtherWeightsVanish) {
  std::mt19937_64 rng(9);
  auto inst = make_gradient_instance(rng);
  ObjectiveConfig cfg;
  cfg.gamma = 0.0;
  const Objective obj(inst.inputs, cfg);
  const auto j = obj.evaluate(inst.transform);
  const auto d = NgfDistance(inst.inputs.fixed, inst.inputs.moving, inst.inputs.fixed_mask, cfg.eta).evaluate(inst.transform);
  const auto r = curvature(inst.transform);
  EXPECT_NEAR(j.value, d.value + 2.0 * r.value, 1e-9 * std::abs(j.value));
  for (std::size_t i = 0; i < j.gradient.size(); ++i)
    EXPECT_NEAR(j.gradient[i], d.gradient[i] + 2.0 * r.gradient[i], 1e-9);
}

TEST(Objective, ZeroCurvatureAndKeypointGradientAtReference) {
  std::mt19937_64 rng(10);
  auto inst = make_gradient_instance(rng);
  auto t = inst.transform;
  for (double& c : t.coeffs()) c = 0.0;
  for (auto& c : inst.inputs.correspondences) c.target = t(c.source);
  for (double v : curvature(t).gradient) EXPECT_EQ(v, 0.0);
  for (double v : keypoint_penalty(t, inst.inputs.correspondences).gradient) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Objective, FoldGivesInfiniteValue) {
  std::mt19937_64 rng(11);
  auto inst = make_gradient_instance(rng);
  auto t = inst.transform;
  t.set_coeff(t.grid().index(1, 1, 1), {40, 0, 0});
  const Objective obj(inst.inputs, ObjectiveConfig{});
  EXPECT_TRUE(std::isinf(obj.evaluate(t).value));
}

class GradientCheckTest : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheckTest, AllTermsMatchFiniteDifferences) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(100 + GetParam()));
  const auto inst = make_gradient_instance(rng);
  const auto& in = inst.inputs;
  const NgfDistance ngf(in.fixed, in.moving, in.fixed_mask, 12.0);
  const BoundaryTerm bnd(in.fixed_mask, in.moving_mask);
  EXPECT_LT(check_term(inst.transform, [&](const BSplineTransform& t) { return ngf.evaluate(t); }).max_rel_error, 1e-5);
  EXPECT_LT(check_term(inst.transform, [](const BSplineTransform& t) { return curvature(t); }).max_rel_error, 1e-5);
  EXPECT_LT(check_term(inst.transform, [&](const BSplineTransform& t) { return bnd.evaluate(t); }).max_rel_error, 1e-5);
  EXPECT_LT(check_term(inst.transform, [](const BSplineTransform& t) { return vcc(t); }).max_rel_error, 1e-5);
  EXPECT_LT(check_term(inst.transform,
                       [&](const BSplineTransform& t) { return keypoint_penalty(t, in.correspondences); })
                .max_rel_error,
            1e-5);
  ObjectiveConfig cfg;
  cfg.beta = 0.7;
  cfg.gamma = 0.05;
  cfg.delta = 0.3;
  const Objective obj(in, cfg);
  EXPECT_LT(check_term(inst.transform, [&](const BSplineTransform& t) { return obj.evaluate(t); }).max_rel_error, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(RandomInstances, GradientCheckTest, ::testing::Range(0, 3));

TEST(JensenBound, EstimateDominatesSampledIntegral) {
  std::mt19937_64 rng(12);
  BSplineTransform t(make_grid({3, 3, 3}, {3, 3, 3}));
  randomize_coeffs(t, rng, 0.7);
  ASSERT_GT(min_cell_jacobian(t), 0.0);
  const double vhat = vcc(t).value;
  const auto& g = t.grid();
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) sum += psi(fd_det(t, random_point_in(g, rng)));
  const double volume = t.cell_volume() * static_cast<double>(t.cell_count());
  EXPECT_GE(vhat, volume * sum / n);
}
