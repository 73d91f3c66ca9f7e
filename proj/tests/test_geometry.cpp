#include <gtest/gtest.h>

#include <random>

#include "reachplan/geometry.hpp"

using namespace reachplan;

namespace {

Box unit_box(int n) { return Box(Vec::Zero(n), Vec::Ones(n)); }

}  // namespace

TEST(Geometry, UnitSquareCombinatorics) {
  const auto p = box_to_polytope(unit_box(2));
  EXPECT_EQ(p.num_vertices(), 4);
  EXPECT_EQ(p.num_facets(), 4);
  for (const auto& v : p.facet_vertices) EXPECT_EQ(v.size(), 2u);
}

TEST(Geometry, UnitCubeIncidence) {
  const auto p = box_to_polytope(unit_box(3));
  EXPECT_EQ(p.num_vertices(), 8);
  EXPECT_EQ(p.num_facets(), 6);
  for (const auto& w : p.vertex_facets) EXPECT_EQ(w.size(), 3u);
  for (int i = 0; i < p.num_facets(); ++i)
    for (int j : p.facet_vertices[i]) EXPECT_TRUE(p.vertex_on_facet(j, i));
}

TEST(Geometry, WorkspaceOffsets) {
  const auto p = box_to_polytope(Box(Vec::Constant(2, -8.0), Vec::Constant(2, 8.0)));
  for (const auto& f : p.facets) {
    EXPECT_DOUBLE_EQ(f.offset, 8.0);
    EXPECT_DOUBLE_EQ(f.normal.norm(), 1.0);
    EXPECT_DOUBLE_EQ(f.normal.cwiseAbs().maxCoeff(), 1.0);
  }
  // Centroid strictly interior.
  double total = 0.0;
  for (const auto& f : p.facets) total += f.offset - f.normal.dot(p.centroid());
  EXPECT_GT(total, 0.0);
}

TEST(Geometry, DegenerateBoxRejected) {
  EXPECT_THROW(box_to_polytope(Box(Vec::Zero(2), Vec::Zero(2))), InvalidArgument);
}

TEST(Geometry, TriangulationCountsAndVolume) {
  EXPECT_EQ(triangulate(box_to_polytope(unit_box(2))).size(), 2u);
  EXPECT_EQ(triangulate(box_to_polytope(unit_box(3))).size(), 6u);

  Vec lo(3), hi(3);
  lo << -1.5, 0.25, -3.0;
  hi << 2.0, 1.0, 0.5;
  const Box b(lo, hi);
  double sum = 0.0;
  for (const auto& s : triangulate(box_to_polytope(b))) {
    EXPECT_GT(s.volume(), 0.0);
    sum += s.volume();
  }
  EXPECT_NEAR(sum, b.volume(), 1e-12 * b.volume());
}

TEST(Geometry, SquareSplitsAlongMainDiagonal) {
  const auto tri = triangulate(box_to_polytope(unit_box(2)));
  for (const auto& s : tri) {
    EXPECT_EQ(s.vertex_ids.front(), 0);
    EXPECT_EQ(s.vertex_ids.back(), 3);
  }
}

TEST(Geometry, LocateVertexGivesBasisVector) {
  const auto p = box_to_polytope(unit_box(3));
  const auto tri = triangulate(p);
  for (const auto& v : p.vertices) {
    const auto loc = locate_simplex(tri, v);
    EXPECT_NEAR(loc.lambda.maxCoeff(), 1.0, 1e-12);
    EXPECT_NEAR(loc.lambda.sum(), 1.0, 1e-12);
  }
}

TEST(Geometry, LocateReconstructsRandomPoints) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Vec lo(3), hi(3);
  lo << -2, 1, 0;
  hi << 3, 2, 0.5;
  const Box b(lo, hi);
  const auto tri = triangulate(box_to_polytope(b));
  for (int k = 0; k < 500; ++k) {
    Vec x(3);
    for (int i = 0; i < 3; ++i) x(i) = lo(i) + U(rng) * (hi(i) - lo(i));
    const auto loc = locate_simplex(tri, x);
    EXPECT_GE(loc.lambda.minCoeff(), -1e-9);
    EXPECT_NEAR(loc.lambda.sum(), 1.0, 1e-12);
    EXPECT_LT((tri[loc.index].vertices * loc.lambda - x).norm(), 1e-10);
    // Exactly one simplex holds x in its interior unless it lies on a shared face.
    int interior = 0, touching = 0;
    for (const auto& s : tri) {
      const Vec l = s.barycentric(x);
      if (l.minCoeff() > 1e-12) ++interior;
      if (l.minCoeff() >= -1e-12) ++touching;
    }
    EXPECT_TRUE(interior == 1 || (interior == 0 && touching >= 2));
  }
}

TEST(Geometry, LocateOutsideThrows) {
  const auto tri = triangulate(box_to_polytope(unit_box(2)));
  Vec x(2);
  x << 1.5, 0.5;
  EXPECT_THROW(locate_simplex(tri, x), InvalidArgument);
}

TEST(Geometry, TruncatedPyramid) {
  Vec lo(3), hi(3);
  lo << 0, 0, 0;
  hi << 1, 1, 1;
  const Box b(lo, hi);
  const auto p = truncated_pyramid(b, box_facet(2, true), 0.5);
  EXPECT_EQ(p.num_vertices(), 8);
  EXPECT_EQ(p.num_facets(), 6);
  // Bottom face shrunk about its center, top face untouched.
  EXPECT_NEAR(p.vertices[0](0), 0.25, 1e-15);
  EXPECT_NEAR(p.vertices[7](0), 1.0, 1e-15);
  for (const auto& v : p.vertices) EXPECT_TRUE(p.contains(v));
  for (const auto& w : p.vertex_facets) EXPECT_EQ(w.size(), 3u);
  EXPECT_TRUE(b.contains(p.centroid()));
  // Side facets tilt: the +x normal has a negative z component.
  EXPECT_LT(p.facets[box_facet(0, true)].normal(2), 0.0);
  double vol = 0.0;
  for (const auto& s : triangulate(p)) vol += s.volume();
  // Frustum volume h/3 (A1 + A2 + sqrt(A1 A2)).
  EXPECT_NEAR(vol, (1.0 + 0.25 + 0.5) / 3.0, 1e-12);

  const auto same = truncated_pyramid(b, box_facet(2, true), 1.0);
  for (int j = 0; j < 8; ++j) EXPECT_EQ(same.vertices[j], box_to_polytope(b).vertices[j]);
}
