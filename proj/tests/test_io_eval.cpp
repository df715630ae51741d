#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace pulmoreg;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pulmoreg_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

VectorField constant_field(const Grid& g, const Vec3& v) { return VectorField(g, v); }

}  // namespace

TEST(MetaImage, Int16RoundTripIsBitIdentical) {
  std::mt19937_64 rng(1);
  const Grid g = make_grid({7, 5, 4}, {0.7, 0.625, 2.5}, {-120.5, 33.25, 7.0});
  Image3D img(g);
  std::uniform_int_distribution<int> u(-1024, 3071);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  const auto path = scratch("roundtrip.mhd");
  write_metaimage(img, path, ElementType::kInt16);
  const auto back = read_metaimage(path);
  ASSERT_TRUE(back.grid().same_geometry(g, 0.0));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back[i], img[i]);
}

TEST(MetaImage, AllElementTypesRoundTrip) {
  const Grid g = make_grid({3, 2, 2});
  Image3D img(g);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i * 3);
  for (auto t : {ElementType::kUInt8, ElementType::kInt16, ElementType::kUInt16, ElementType::kFloat32,
                 ElementType::kFloat64}) {
    const auto path = scratch(std::string("types_") + met_name(t) + ".mhd");
    write_metaimage(img, path, t);
    const auto back = read_metaimage(path);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back[i], img[i]);
  }
}

TEST(MetaImage, SizeMismatchIsDetected) {
  const auto path = scratch("short.mhd");
  write_text(path,
             "NDims = 3\nDimSize = 4 4 4\nElementType = MET_SHORT\nElementSpacing = 1 1 1\n"
             "ElementDataFile = short.raw\n");
  std::ofstream(scratch("short.raw"), std::ios::binary).write("\0\0\0\0", 4);
  EXPECT_THROW(read_metaimage(path), SizeMismatchError);
}

TEST(MetaImage, HeaderErrors) {
  const auto path = scratch("bad.mhd");
  write_text(path, "NDims = 3\nDimSize = 2 2\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n");
  EXPECT_THROW(read_metaimage(path), MalformedHeaderError);
  write_text(path, "NDims = 3\nDimSize = 2 2 2\nElementType = MET_LONG\nElementDataFile = LOCAL\n");
  EXPECT_THROW(read_metaimage(path), UnsupportedTypeError);
  write_text(path, "NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nCompressedData = True\nElementDataFile = x.zraw\n");
  EXPECT_THROW(read_metaimage(path), UnsupportedTypeError);
  write_text(path,
             "NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nTransformMatrix = 0 1 0 1 0 0 0 0 1\n"
             "ElementDataFile = x.raw\n");
  EXPECT_THROW(read_metaimage(path), UnsupportedTypeError);
  write_text(path, "NDims = 3\nthis is not a header\n");
  EXPECT_THROW(read_metaimage(path), MalformedHeaderError);
  EXPECT_THROW(read_metaimage(scratch("missing.mhd")), IoError);
}

TEST(MetaImage, LocalDataAndBigEndian) {
  const auto path = scratch("local.mhd");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NDims = 3\nDimSize = 2 1 1\nElementType = MET_SHORT\nBinaryDataByteOrderMSB = True\n"
           "ElementDataFile = LOCAL\n";
    const unsigned char bytes[4] = {0x01, 0x02, 0xFF, 0xFE};  // 258, -2
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  const auto m = read_metaimage_raw(path);
  ASSERT_EQ(m.values.size(), 2u);
  EXPECT_EQ(m.values[0], 258.0);
  EXPECT_EQ(m.values[1], -2.0);
}

TEST(VectorFieldIo, ThreeChannelRoundTrip) {
  std::mt19937_64 rng(2);
  const Grid g = make_grid({4, 3, 5}, {1.5, 1.5, 2.0}, {1, 2, 3});
  VectorField f(g);
  std::uniform_real_distribution<double> u(-20, 20);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = Vec3{u(rng), u(rng), u(rng)};
  const auto path = scratch("field.mhd");
  write_vector_field(f, path, ElementType::kFloat64);
  const auto back = read_vector_field(path);
  ASSERT_TRUE(back.grid().same_geometry(g, 0.0));
  for (std::size_t i = 0; i < f.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_EQ(back[i][a], f[i][a]);
  EXPECT_THROW(read_metaimage(path), ValidationError);
}

TEST(Csv, PointsAndCorrespondencesRoundTrip) {
  const std::vector<Vec3> pts{{1.5, -2, 3}, {0, 0, 0.125}};
  const auto path = scratch("points.csv");
  write_points(pts, path);
  const auto back = read_points(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(norm(back[0] - pts[0]), 0.0);
  CorrespondenceSet corr(1);
  corr[0].source = {1, 2, 3};
  corr[0].displacement = {2, 0, -2};
  corr[0].target = {3.5, 2, 1};
  corr[0].energy = 0.25;
  const auto cpath = scratch("corr.csv");
  write_correspondences(corr, cpath);
  const auto cback = read_correspondences(cpath);
  ASSERT_EQ(cback.size(), 1u);
  EXPECT_EQ(norm(cback[0].target - corr[0].target), 0.0);
  EXPECT_EQ(cback[0].energy, 0.25);
}

TEST(Csv, CommentsHeadersAndErrors) {
  const auto path = scratch("landmarks.csv");
  write_text(path, "x,y,z\n# comment\n1,2,3\n\n4, 5, 6\n");
  const auto pts = read_points(path);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[1][2], 6.0);
  write_text(path, "1,2\n");
  EXPECT_THROW(read_points(path), ValidationError);
}

TEST(Tre, IdentityCoincidentPairs) {
  const Grid g = make_grid({5, 5, 5});
  const std::vector<Vec3> p{{1, 1, 1}, {2.5, 3, 1}};
  const auto r = eval_tre(p, p, zero_field(g));
  EXPECT_EQ(r.mean, 0.0);
  EXPECT_EQ(r.std, 0.0);
  EXPECT_EQ(r.cumulative.front(), 1.0);
}

TEST(Tre, OffsetPairs) {
  const Grid g = make_grid({5, 5, 5});
  const std::vector<Vec3> p{{1, 1, 1}, {2, 3, 1}};
  std::vector<Vec3> q;
  for (const auto& x : p) q.push_back(x + Vec3{3, 4, 0});
  const auto r = eval_tre(p, q, zero_field(g));
  EXPECT_DOUBLE_EQ(r.mean, 5.0);
  EXPECT_EQ(r.distances.size(), 2u);
  EXPECT_EQ(r.cumulative.size(), 11u);
  EXPECT_EQ(r.cumulative[9], 0.0);
  EXPECT_EQ(r.cumulative[10], 1.0);
  const auto moved = eval_tre(p, q, constant_field(g, {3, 4, 0}));
  EXPECT_NEAR(moved.mean, 0.0, 1e-12);
}

TEST(Tre, OutOfDomainPairsAreExcluded) {
  const Grid g = make_grid({5, 5, 5});
  const std::vector<Vec3> p{{1, 1, 1}, {9, 1, 1}};
  const auto r = eval_tre(p, p, zero_field(g));
  ASSERT_EQ(r.excluded.size(), 1u);
  EXPECT_EQ(r.excluded[0], 1u);
  EXPECT_EQ(r.distances.size(), 1u);
  EXPECT_THROW(eval_tre(p, std::vector<Vec3>(1), zero_field(g)), ValidationError);
}

TEST(Tre, SnappingToMovingGrid) {
  const Grid g = make_grid({5, 5, 5});
  const Grid moving = make_grid({5, 5, 5}, {2, 2, 2});
  const std::vector<Vec3> p{{1, 1, 1}};
  const std::vector<Vec3> q{{2, 2, 2}};
  const auto r = eval_tre(p, q, constant_field(g, {0.6, 0.6, 0.6}), &moving);
  EXPECT_NEAR(r.mean, 0.0, 1e-12);
}

TEST(Fissure, IdenticalAndShiftedPlanes) {
  const Grid g = make_grid({20, 20, 20}, {1, 1, 0.5});
  Image3D a(g), b(g);
  for (int j = 0; j < 20; ++j)
    for (int i = 0; i < 20; ++i) {
      a(i, j, 8) = 1.0;
      b(i, j, 13) = 1.0;
    }
  EXPECT_EQ(eval_fissure(a, a, zero_field(g)).mean, 0.0);
  const auto r = eval_fissure(a, b, zero_field(g));
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(eval_fissure(a, b, constant_field(g, {0, 0, 2.5})).mean, 0.0, 1e-12);
  EXPECT_THROW(eval_fissure(Image3D(g), b, zero_field(g)), ValidationError);
}

TEST(JacobianStats, IdentityAndUniformScaling) {
  const Grid g = make_grid({8, 8, 8}, {2, 2, 2});
  const Image3D mask(g, 1.0);
  auto r = eval_jacobian(zero_field(g), mask);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(r.std, 0.0);
  EXPECT_EQ(r.min, 1.0);
  EXPECT_EQ(r.max, 1.0);
  VectorField f(g);
  const double s = std::cbrt(0.8);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = g.world(g.coords(i)) * (s - 1.0);
  r = eval_jacobian(f, mask);
  for (double v : {r.mean, r.min, r.q01, r.q99, r.max}) EXPECT_NEAR(v, 0.8, 1e-12);
  EXPECT_NEAR(r.std, 0.0, 1e-12);
  EXPECT_EQ(r.folds, 0u);
}

TEST(JacobianStats, OrderStatisticsAreOrdered) {
  std::mt19937_64 rng(3);
  std::vector<double> v(1000);
  for (double& x : v) x = std::lognormal_distribution<double>(0, 0.3)(rng);
  const auto r = jacobian_statistics(v);
  EXPECT_LE(r.min, r.q01);
  EXPECT_LE(r.q01, r.q99);
  EXPECT_LE(r.q99, r.max);
  std::sort(v.begin(), v.end());
  EXPECT_EQ(r.q01, v[9]);
  EXPECT_EQ(r.q99, v[989]);
  EXPECT_THROW(jacobian_statistics({}), ValidationError);
}

TEST(JacobianStats, TransformOverload) {
  BSplineTransform t(make_grid({3, 3, 3}, {8, 8, 8}));
  const auto& cg = t.grid();
  for (std::size_t i = 0; i < cg.size(); ++i) t.set_coeff(i, cg.world(cg.coords(i)) * 0.1);
  const Grid g = make_grid({9, 9, 9}, {2, 2, 2});
  const auto r = eval_jacobian(t, Image3D(g, 1.0));
  EXPECT_NEAR(r.mean, 1.1 * 1.1 * 1.1, 1e-12);
}
