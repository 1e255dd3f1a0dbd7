// Strain pipeline unit tests.  Expected values here are frozen from
// closed-form calculations: linear displacement fields have exact finite
// difference Jacobians, so scaling/rotation produce analytically known
// Green-Lagrange tensors at every pixel.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "densecine/rng.hpp"
#include "densecine/strain.hpp"

using namespace densecine;

namespace {

MyocardiumMask annulus_mask(int grid, double r_in, double r_out) {
  MyocardiumMask m;
  m.mask = Tensor({grid, grid});
  const double cy = (grid - 1) / 2.0, cx = (grid - 1) / 2.0;
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const double d = std::hypot(r - cy, c - cx);
      if (d >= r_in && d <= r_out) m.mask.at(r, c) = 1.0;
    }
  m.centroid = {cy, cx};
  const double a1 = 150.0 * M_PI / 180.0, a2 = 210.0 * M_PI / 180.0;
  m.insertion_points = {{{cy + r_out * std::sin(a1), cx + r_out * std::cos(a1)},
                         {cy + r_out * std::sin(a2), cx + r_out * std::cos(a2)}}};
  return m;
}

// u(x) = -a * (x - centroid): uniform contraction toward the centroid.
Tensor radial_scaling_field(int grid, double a, double cy, double cx) {
  Tensor u({2, grid, grid});
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      u.at(0, r, c) = -a * (r - cy);
      u.at(1, r, c) = -a * (c - cx);
    }
  return u;
}

// u(x) = R(x - centroid) - (x - centroid): rigid rotation about the centroid.
Tensor rotation_field(int grid, double angle, double cy, double cx) {
  Tensor u({2, grid, grid});
  const double cs = std::cos(angle), sn = std::sin(angle);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const double dr = r - cy, dc = c - cx;
      u.at(0, r, c) = (cs * dr + sn * dc) - dr;
      u.at(1, r, c) = (-sn * dr + cs * dc) - dc;
    }
  return u;
}

}  // namespace

TEST(Warp, IdentityDisplacementIsNoop) {
  Rng rng(7);
  Tensor img({12, 12});
  for (double& x : img.v) x = rng.uniform();
  Tensor u({2, 12, 12});
  const Tensor out = warp(img, u);
  for (int64_t i = 0; i < img.size(); ++i) EXPECT_DOUBLE_EQ(out[i], img[i]);
}

TEST(Warp, IntegerShiftSamplesShiftedPixels) {
  Tensor img({8, 8});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) img.at(r, c) = 10.0 * r + c;
  Tensor u({2, 8, 8});
  u.fill(0.0);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) u.at(0, r, c) = 2.0;  // sample two rows down
  const Tensor out = warp(img, u);
  EXPECT_DOUBLE_EQ(out.at(0, 3), img.at(2, 3));
  EXPECT_DOUBLE_EQ(out.at(5, 7), img.at(7, 7));
  // past the border: clamped to the last row
  EXPECT_DOUBLE_EQ(out.at(7, 4), img.at(7, 4));
}

TEST(Warp, SubpixelShiftInterpolatesLinearly) {
  Tensor img({4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) img.at(r, c) = c;  // linear ramp along columns
  Tensor u({2, 4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) u.at(1, r, c) = 0.25;
  const Tensor out = warp(img, u);
  EXPECT_NEAR(out.at(1, 1), 1.25, 1e-12);
  EXPECT_NEAR(out.at(2, 2), 2.25, 1e-12);
}

TEST(GreenLagrange, UniformScalingGivesClosedFormEcc) {
  const int grid = 64;
  MyocardiumMask m = annulus_mask(grid, 11, 23);
  const double eps = 0.1;
  Tensor u = radial_scaling_field(grid, eps, m.centroid[0], m.centroid[1]);
  const Tensor ecc = circumferential_strain(green_lagrange(u), m);
  // E = 0.5*((1-eps)^2 - 1) * I  ->  E_cc = -0.095 for eps = 0.1
  const double want = 0.5 * ((1 - eps) * (1 - eps) - 1.0);
  EXPECT_NEAR(want, -0.095, 1e-15);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c)
      if (m.mask.at(r, c) == 1.0) ASSERT_NEAR(ecc.at(r, c), want, 1e-9);
}

TEST(GreenLagrange, RigidRotationHasZeroStrain) {
  const int grid = 64;
  MyocardiumMask m = annulus_mask(grid, 11, 23);
  Tensor u = rotation_field(grid, 0.1, m.centroid[0], m.centroid[1]);
  const Tensor ecc = circumferential_strain(green_lagrange(u), m);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c)
      if (m.mask.at(r, c) == 1.0) ASSERT_LT(std::abs(ecc.at(r, c)), 1e-9);
}

TEST(GreenLagrange, SimpleShearMatchesHandComputation) {
  // u_row = k * col  ->  F = [[1, k], [0, 1]], E = [[0, k/2], [k/2, k^2/2]]
  const int grid = 16;
  const double k = 0.05;
  Tensor u({2, grid, grid});
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) u.at(0, r, c) = k * c;
  const Tensor e = green_lagrange(u);
  EXPECT_NEAR(e.at(0, 0, 5, 5), 0.0, 1e-12);
  EXPECT_NEAR(e.at(0, 1, 5, 5), k / 2, 1e-12);
  EXPECT_NEAR(e.at(1, 1, 5, 5), k * k / 2, 1e-12);
}

TEST(Partition, SectorZeroCenteredBetweenInsertionPoints) {
  const int grid = 64;
  MyocardiumMask m = annulus_mask(grid, 11, 23);
  // insertion points at 150 and 210 degrees -> sector 0 centered at 180
  EXPECT_NEAR(sector_zero_angle(m), M_PI, 1e-9);
  SectorPartition part = build_partition(m, 128);
  // every myocardium pixel strictly inside sector 0's wedge must map to 0
  const double cy = m.centroid[0], cx = m.centroid[1];
  const double half_width = M_PI / 128;
  int hits = 0;
  for (int rr = 0; rr < grid; ++rr)
    for (int cc = 0; cc < grid; ++cc) {
      if (part.at(rr, cc) < 0) continue;
      const double th = std::atan2(rr - cy, cc - cx);
      if (std::abs(wrap_pm_pi(th - M_PI)) < 0.98 * half_width) {
        EXPECT_EQ(part.at(rr, cc), 0);
        ++hits;
      }
    }
  EXPECT_GT(hits, 0);
}

TEST(Partition, EveryMaskPixelAssignedAndSectorsNonEmpty) {
  MyocardiumMask m = annulus_mask(64, 11, 23);
  SectorPartition part = build_partition(m, 128);
  int64_t masked = 0, assigned = 0;
  std::vector<int> counts(128, 0);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      if (m.mask.at(r, c) == 1.0) ++masked;
      if (part.at(r, c) >= 0) {
        ++assigned;
        counts[part.at(r, c)]++;
      } else {
        EXPECT_EQ(m.mask.at(r, c), 0.0);
      }
    }
  EXPECT_EQ(masked, assigned);
  for (int n = 0; n < 128; ++n) EXPECT_GT(counts[n], 0);
}

TEST(Partition, TooFewSectorsRejected) {
  MyocardiumMask m = annulus_mask(64, 11, 23);
  EXPECT_THROW(build_partition(m, 3), std::invalid_argument);
}

TEST(StrainMatrix, UniformContractionSequence) {
  const int grid = 64, T = 6, N = 32;
  MyocardiumMask m = annulus_mask(grid, 11, 23);
  SectorPartition part = build_partition(m, N);
  DisplacementFieldSequence seq;
  seq.dt_ms = 17.0;
  seq.u = Tensor({T, 2, grid, grid});
  for (int t = 1; t < T; ++t) {
    const double a = 0.02 * t;
    Tensor u = radial_scaling_field(grid, a, m.centroid[0], m.centroid[1]);
    std::copy(u.v.begin(), u.v.end(),
              seq.u.v.begin() + static_cast<size_t>(t) * 2 * grid * grid);
  }
  StrainMatrix sm = build_strain_matrix(seq, m, part);
  validate_strain_matrix(sm);
  for (int n = 0; n < N; ++n) {
    EXPECT_DOUBLE_EQ(sm.values.at(n, 0), 0.0);
    for (int t = 1; t < T; ++t) {
      const double a = 0.02 * t;
      EXPECT_NEAR(sm.values.at(n, t), 0.5 * ((1 - a) * (1 - a) - 1.0), 1e-9);
    }
  }
}

TEST(StrainMatrix, NonzeroReferenceFrameRejected) {
  MyocardiumMask m = annulus_mask(32, 5, 11);
  SectorPartition part = build_partition(m, 8);
  DisplacementFieldSequence seq;
  seq.dt_ms = 17.0;
  seq.u = Tensor({3, 2, 32, 32});
  seq.u.at(0, 0, 4, 4) = 1e-8;
  EXPECT_THROW(build_strain_matrix(seq, m, part), std::invalid_argument);
}

TEST(ExtractTos, NeverCrossingGetsSequenceEnd) {
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({2, 5});  // all zeros: never at or below -0.02
  TOSCurve tos = extract_tos(sm);
  EXPECT_DOUBLE_EQ(tos.ms[0], 17.0 * 5);
  EXPECT_DOUBLE_EQ(tos.ms[1], 17.0 * 5);
}

TEST(ExtractTos, ImmediateOnsetReportsOneFrameInterval) {
  // Contraction already past threshold at frame 2: onset during interval 1.
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({1, 6});
  const double row[6] = {0.0, -0.04, -0.08, -0.1, -0.1, -0.1};
  for (int t = 0; t < 6; ++t) sm.values.at(0, t) = row[t];
  TOSCurve tos = extract_tos(sm);
  EXPECT_DOUBLE_EQ(tos.ms[0], 17.0);
}

TEST(ExtractTos, DelayedOnsetUsesLastQuietFrame) {
  // Quiet through frame 5 (columns 0..4), contracting from frame 6 on: the
  // crossing frame is 6, so onset is attributed to 5 frame intervals.
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({1, 10});
  for (int t = 5; t < 10; ++t) sm.values.at(0, t) = -0.1;
  TOSCurve tos = extract_tos(sm);
  EXPECT_DOUBLE_EQ(tos.ms[0], 17.0 * 5);
}

TEST(ExtractTos, SingleFrameDipDoesNotCount) {
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({1, 8});
  sm.values.at(0, 2) = -0.05;  // isolated dip
  sm.values.at(0, 5) = -0.05;
  sm.values.at(0, 6) = -0.05;  // sustained from frame 6 (columns 5,6)
  TOSCurve tos = extract_tos(sm);
  EXPECT_DOUBLE_EQ(tos.ms[0], 17.0 * 5);
}

TEST(ExtractTos, CrossingOnlyAtLastFrameFallsBack) {
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({1, 4});
  sm.values.at(0, 3) = -0.5;  // no following frame to persist into
  TOSCurve tos = extract_tos(sm);
  EXPECT_DOUBLE_EQ(tos.ms[0], 17.0 * 4);
}

TEST(ClassifyLma, ThresholdIsStrict) {
  TOSCurve tos;
  tos.ms = {17.0, 18.0, 18.0001, 34.0};
  const auto flags = classify_lma(tos, 18.0);
  EXPECT_EQ(flags[0], 0);
  EXPECT_EQ(flags[1], 0);  // exactly at the threshold is not late
  EXPECT_EQ(flags[2], 1);
  EXPECT_EQ(flags[3], 1);
}

TEST(LowRank, ProjectionMatchesEckartYoungTailNorm) {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    StrainMatrix sm;
    sm.dt_ms = 17.0;
    sm.values = Tensor({24, 12});
    for (double& x : sm.values.v) x = 0.1 * rng.gaussian();
    const int k = 1 + rep % 6;
    StrainMatrix pk = low_rank_project(sm, k);
    // residual Frobenius norm^2 must equal the sum of discarded singular values^2
    Eigen::MatrixXd m(24, 12);
    for (int i = 0; i < 24; ++i)
      for (int j = 0; j < 12; ++j) m(i, j) = sm.values.at(i, j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    double tail = 0.0;
    for (int i = k; i < svd.singularValues().size(); ++i)
      tail += svd.singularValues()[i] * svd.singularValues()[i];
    double resid = 0.0;
    for (int64_t i = 0; i < sm.values.size(); ++i) {
      const double d = sm.values[i] - pk.values[i];
      resid += d * d;
    }
    EXPECT_NEAR(resid, tail, 1e-8);
    // idempotence
    StrainMatrix pkk = low_rank_project(pk, k);
    for (int64_t i = 0; i < pk.values.size(); ++i)
      ASSERT_NEAR(pkk.values[i], pk.values[i], 1e-9);
  }
}

TEST(LowRank, FullRankIsIdentity) {
  Rng rng(3);
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({8, 4});
  for (double& x : sm.values.v) x = rng.gaussian();
  StrainMatrix p = low_rank_project(sm, 4);
  for (int64_t i = 0; i < sm.values.size(); ++i) EXPECT_DOUBLE_EQ(p.values[i], sm.values[i]);
}

TEST(Serialization, StrainMatrixRoundTrip) {
  Rng rng(5);
  StrainMatrix sm;
  sm.dt_ms = 17.0;
  sm.values = Tensor({16, 10});
  for (double& x : sm.values.v) x = 0.2 * rng.uniform() - 0.15;
  const auto dir = std::filesystem::temp_directory_path() / "densecine_sm_test";
  save_strain_matrix(dir, sm);
  StrainMatrix back = load_strain_matrix(dir);
  EXPECT_DOUBLE_EQ(back.dt_ms, sm.dt_ms);
  ASSERT_TRUE(back.values.same_shape(sm.values));
  for (int64_t i = 0; i < sm.values.size(); ++i)
    EXPECT_NEAR(back.values[i], sm.values[i], 1e-6);  // float32 payload
  std::filesystem::remove_all(dir);
}

TEST(Serialization, TosCsvHasExpectedRows) {
  TOSCurve tos;
  tos.ms = {17.0, 51.0};
  const auto path = std::filesystem::temp_directory_path() / "densecine_tos_test.csv";
  save_tos_csv(path, tos);
  const std::string text = io::read_text(path);
  EXPECT_NE(text.find("sector_index,tos_ms,lma"), std::string::npos);
  EXPECT_NE(text.find("0,17,0"), std::string::npos);
  EXPECT_NE(text.find("1,51,1"), std::string::npos);
  std::filesystem::remove(path);
}
