#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "densecine/phantom.hpp"
#include "densecine/recon3d.hpp"

using namespace densecine;

namespace {

MyocardiumMask annulus(double inner, double outer, int grid = 64) {
  PhantomSpec spec;
  spec.grid_size = grid;
  spec.inner_radius = inner;
  spec.outer_radius = outer;
  return make_annulus_mask(spec);
}

TOSCurve constant_curve(int n, double ms) {
  TOSCurve c;
  c.ms.assign(static_cast<size_t>(n), ms);
  return c;
}

SlicedStudy two_slice_study(int n_sectors, double tos_a, double tos_b) {
  SlicedStudy st;
  st.n_sectors = n_sectors;
  st.slices.push_back({0.0, annulus(11.0, 23.0), constant_curve(n_sectors, tos_a)});
  st.slices.push_back({10.0, annulus(11.0, 23.0), constant_curve(n_sectors, tos_b)});
  return st;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

TEST(Recon3d, StudyValidation) {
  SlicedStudy st = two_slice_study(32, 17.0, 17.0);
  st.slices.pop_back();
  EXPECT_THROW(st.validate(), std::invalid_argument);

  st = two_slice_study(32, 17.0, 17.0);
  st.slices[1].z_mm = 0.0;  // not strictly increasing
  EXPECT_THROW(st.validate(), std::invalid_argument);

  st = two_slice_study(32, 17.0, 17.0);
  st.slices[0].tos.ms.pop_back();
  EXPECT_THROW(st.validate(), std::invalid_argument);

  st = two_slice_study(32, 17.0, 17.0);
  EXPECT_THROW(reconstruct_surface(st, 16, 5), std::invalid_argument);  // A < n_sectors
  EXPECT_THROW(reconstruct_surface(st, 64, 1), std::invalid_argument);  // Z < slices
}

TEST(Recon3d, TwoIdenticalSlicesExtendConstantly) {
  SlicedStudy st = two_slice_study(32, 0.0, 0.0);
  Rng rng(5);
  for (int n = 0; n < 32; ++n) {
    const double v = 17.0 + 100.0 * rng.uniform();
    st.slices[0].tos.ms[static_cast<size_t>(n)] = v;
    st.slices[1].tos.ms[static_cast<size_t>(n)] = v;
  }
  const int A = 64, Z = 5;
  ActivationSurface surf = reconstruct_surface(st, A, Z);
  ASSERT_EQ(static_cast<int>(surf.points.size()), A * Z);
  ASSERT_EQ(static_cast<int>(surf.faces.size()), 2 * A * (Z - 1));
  for (int iz = 1; iz < Z; ++iz)
    for (int ia = 0; ia < A; ++ia) {
      const size_t i0 = static_cast<size_t>(ia), ik = static_cast<size_t>(iz * A + ia);
      EXPECT_NEAR(surf.points[ik][0], surf.points[i0][0], 1e-12);
      EXPECT_NEAR(surf.points[ik][1], surf.points[i0][1], 1e-12);
      EXPECT_NEAR(surf.tos_ms[ik], surf.tos_ms[i0], 1e-12);
    }
}

TEST(Recon3d, MidwayRingInterpolatesLinearly) {
  // 17 ms on the lower slice, 51 ms on the upper: the midway ring reads 34.
  SlicedStudy st = two_slice_study(32, 17.0, 51.0);
  ActivationSurface surf = reconstruct_surface(st, 64, 3);
  for (int ia = 0; ia < 64; ++ia) {
    EXPECT_NEAR(surf.tos_ms[static_cast<size_t>(64 + ia)], 34.0, 1e-12);
    EXPECT_NEAR(surf.points[static_cast<size_t>(64 + ia)][2], 5.0, 1e-12);
  }
}

TEST(Recon3d, UniformSeventeenIsUniformlyBlue) {
  SlicedStudy st = two_slice_study(32, 17.0, 17.0);
  ActivationSurface surf = reconstruct_surface(st, 64, 4);
  const std::array<uint8_t, 3> c0 = tos_color(surf.tos_ms[0]);
  for (double v : surf.tos_ms) {
    EXPECT_NEAR(v, 17.0, 1e-12);
    const std::array<uint8_t, 3> c = tos_color(v);
    EXPECT_EQ(c, c0);
  }
  EXPECT_GT(c0[2], c0[0]);  // blue side
}

TEST(Recon3d, ColormapSidesAndTransition) {
  const std::array<uint8_t, 3> blue = tos_color(17.0);
  const std::array<uint8_t, 3> red = tos_color(100.0);
  EXPECT_GT(blue[2], blue[0]);
  EXPECT_GT(red[0], red[2]);
  // saturates rather than wrapping far beyond the anchor
  EXPECT_EQ(tos_color(1000.0), tos_color(100.0));
  EXPECT_EQ(tos_color(0.0)[2], 255);
}

TEST(Recon3d, ConvexHullAndMonotoneZOnRandomStudies) {
  Rng rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    const int n_sectors = 16 + 8 * rng.uniform_int(0, 2);
    SlicedStudy st;
    st.n_sectors = n_sectors;
    double z = -20.0;
    for (int k = 0; k < 4; ++k) {
      z += 2.0 + 10.0 * rng.uniform();
      const double inner = 8.0 + 4.0 * rng.uniform();
      const double outer = inner + 6.0 + 6.0 * rng.uniform();
      TOSCurve tos;
      for (int n = 0; n < n_sectors; ++n) tos.ms.push_back(17.0 + 140.0 * rng.uniform());
      st.slices.push_back({z, annulus(inner, outer), tos});
    }
    double lo = 1e300, hi = -1e300;
    for (const StudySlice& s : st.slices)
      for (double v : s.tos.ms) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    ActivationSurface surf = reconstruct_surface(st, 2 * n_sectors, 9);
    for (double v : surf.tos_ms) {
      EXPECT_GE(v, lo - 1e-9);
      EXPECT_LE(v, hi + 1e-9);
    }
    for (size_t i = 1; i < surf.points.size(); ++i)
      EXPECT_GE(surf.points[i][2], surf.points[i - 1][2] - 1e-12);
  }
}

TEST(Recon3d, RotationEquivariance) {
  // Rotating every mask (with centroid and insertion points) a quarter turn
  // about the slice axis rotates the surface and leaves TOS untouched.
  SlicedStudy st = two_slice_study(32, 0.0, 0.0);
  Rng rng(9);
  for (int n = 0; n < 32; ++n) {
    st.slices[0].tos.ms[static_cast<size_t>(n)] = 17.0 + 120.0 * rng.uniform();
    st.slices[1].tos.ms[static_cast<size_t>(n)] = 17.0 + 120.0 * rng.uniform();
  }
  SlicedStudy rot = st;
  for (StudySlice& s : rot.slices) {
    const int h = s.myo.h(), w = s.myo.w();
    Tensor m({w, h});
    // quarter turn: (r, c) -> (c, h-1-r) in the rotated frame
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) m.at(c, h - 1 - r) = s.myo.mask.at(r, c);
    const double cr = s.myo.centroid[0], cc = s.myo.centroid[1];
    s.myo.mask = m;
    s.myo.centroid = {cc, h - 1 - cr};
    for (auto& p : s.myo.insertion_points) p = {p[1], h - 1 - p[0]};
  }
  const int A = 64, Z = 5;
  ActivationSurface a = reconstruct_surface(st, A, Z);
  ActivationSurface b = reconstruct_surface(rot, A, Z);
  // the same quarter turn applied to the surface points (x = col, y = row):
  // row' = col, col' = h-1-row
  const int h = st.slices[0].myo.h();
  for (size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_NEAR(b.tos_ms[i], a.tos_ms[i], 1e-9);
    EXPECT_NEAR(b.points[i][1], a.points[i][0], 1e-9);
    EXPECT_NEAR(b.points[i][0], h - 1 - a.points[i][1], 1e-9);
    EXPECT_NEAR(b.points[i][2], a.points[i][2], 1e-12);
  }
}

TEST(Recon3d, PlyRoundTripAndByteStability) {
  SlicedStudy st = two_slice_study(32, 17.0, 51.0);
  Rng rng(3);
  for (int n = 0; n < 32; ++n)
    st.slices[1].tos.ms[static_cast<size_t>(n)] = 17.0 + 90.0 * rng.uniform();
  ActivationSurface surf = reconstruct_surface(st, 96, 7);

  const auto p1 = temp_path("recon_rt1.ply"), p2 = temp_path("recon_rt2.ply");
  export_surface(surf, p1);
  export_surface(surf, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
  EXPECT_NE(s1.find("property double tos_ms"), std::string::npos);

  ActivationSurface back = load_surface(p1);
  ASSERT_EQ(back.points.size(), surf.points.size());
  ASSERT_EQ(back.faces.size(), surf.faces.size());
  for (size_t i = 0; i < surf.points.size(); ++i) {
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(back.points[i][d], surf.points[i][d], 1e-5);
    EXPECT_NEAR(back.tos_ms[i], surf.tos_ms[i], 1e-5);
  }
  for (size_t i = 0; i < surf.faces.size(); ++i) EXPECT_EQ(back.faces[i], surf.faces[i]);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(Recon3d, PointCloudWithoutFaces) {
  ActivationSurface surf;
  surf.points = {{0.0, 0.0, 0.0}, {1.0, 2.0, 3.0}};
  surf.tos_ms = {17.0, 40.0};
  const auto p = temp_path("recon_cloud.ply");
  export_surface(surf, p);
  ActivationSurface back = load_surface(p);
  EXPECT_EQ(back.points.size(), 2u);
  EXPECT_TRUE(back.faces.empty());
  std::filesystem::remove(p);
}

}  // namespace
