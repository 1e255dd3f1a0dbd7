#pragma once

// 3D activation-map reconstruction: stacks per-slice TOS curves into a
// triangulated mid-myocardial tube with bilinear (angle, z) interpolation and
// exports it as ASCII PLY with an LMA-thresholded diverging colormap.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "densecine/io.hpp"
#include "densecine/strain.hpp"

namespace densecine {

struct StudySlice {
  double z_mm = 0.0;
  MyocardiumMask myo;
  TOSCurve tos;
};

struct SlicedStudy {
  std::vector<StudySlice> slices;  // ordered by strictly increasing z
  int n_sectors = 0;

  void validate() const {
    if (slices.size() < 2) throw std::invalid_argument("SlicedStudy: need at least 2 slices");
    if (n_sectors < 4) throw std::invalid_argument("SlicedStudy: need at least 4 sectors");
    for (size_t i = 0; i < slices.size(); ++i) {
      slices[i].myo.validate();
      if (static_cast<int>(slices[i].tos.ms.size()) != n_sectors)
        throw std::invalid_argument("SlicedStudy: TOS length mismatch on slice " +
                                    std::to_string(i));
      if (i > 0 && slices[i].z_mm <= slices[i - 1].z_mm)
        throw std::invalid_argument("SlicedStudy: z positions must strictly increase");
    }
  }
};

struct ActivationSurface {
  std::vector<std::array<double, 3>> points;  // (x, y, z) mm; x = column, y = row
  std::vector<double> tos_ms;                 // one value per point
  std::vector<std::array<int, 3>> faces;      // triangles over the (angle, z) grid

  void validate() const {
    if (tos_ms.size() != points.size())
      throw std::invalid_argument("ActivationSurface: tos/point count mismatch");
    for (const std::array<int, 3>& f : faces)
      for (int v : f)
        if (v < 0 || v >= static_cast<int>(points.size()))
          throw std::invalid_argument("ActivationSurface: face index out of range");
  }
};

namespace detail {

// Per-sector mid-wall radius: mean of the innermost and outermost pixel
// radius inside each angular wedge.
inline std::vector<double> mid_wall_radius(const MyocardiumMask& myo, int n_sectors) {
  const SectorPartition part = build_partition(myo, n_sectors);
  std::vector<double> rmin(static_cast<size_t>(n_sectors), 1e300);
  std::vector<double> rmax(static_cast<size_t>(n_sectors), -1.0);
  for (int r = 0; r < myo.h(); ++r)
    for (int c = 0; c < myo.w(); ++c) {
      const int n = part.at(r, c);
      if (n < 0) continue;
      const double dr = r - myo.centroid[0], dc = c - myo.centroid[1];
      const double rad = std::sqrt(dr * dr + dc * dc);
      rmin[static_cast<size_t>(n)] = std::min(rmin[static_cast<size_t>(n)], rad);
      rmax[static_cast<size_t>(n)] = std::max(rmax[static_cast<size_t>(n)], rad);
    }
  std::vector<double> mid(static_cast<size_t>(n_sectors));
  for (int n = 0; n < n_sectors; ++n) {
    if (rmax[static_cast<size_t>(n)] < 0.0)
      throw std::invalid_argument("reconstruct_surface: degenerate mask, empty sector " +
                                  std::to_string(n));
    mid[static_cast<size_t>(n)] = 0.5 * (rmin[static_cast<size_t>(n)] + rmax[static_cast<size_t>(n)]);
  }
  return mid;
}

// Periodic linear interpolation of per-sector values at a relative angle
// (radians from sector 0's center).
inline double ring_lerp(const std::vector<double>& vals, double rel_angle) {
  const int n = static_cast<int>(vals.size());
  const double width = 6.283185307179586 / n;
  double u = wrap_two_pi(rel_angle) / width;
  int n0 = static_cast<int>(std::floor(u));
  if (n0 >= n) n0 = 0;  // fp guard at the wrap point
  const double f = u - n0;
  const int n1 = (n0 + 1) % n;
  return (1.0 - f) * vals[static_cast<size_t>(n0)] + f * vals[static_cast<size_t>(n1)];
}

}  // namespace detail

// Builds the structured tube: per slice, per-sector mid-wall radii and TOS
// are interpolated periodically-linearly in angle (sector centers are the
// knots) and linearly in z between adjacent slices.  Columns of the grid
// track the slices' own sector frames, so the surface rotates with the masks
// while TOS values stay attached to their material positions.
inline ActivationSurface reconstruct_surface(const SlicedStudy& study, int angular_samples,
                                             int z_samples) {
  study.validate();
  const int n_slices = static_cast<int>(study.slices.size());
  if (angular_samples < study.n_sectors)
    throw std::invalid_argument("reconstruct_surface: angular_samples < n_sectors");
  if (z_samples < n_slices)
    throw std::invalid_argument("reconstruct_surface: z_samples < slice count");

  struct SliceData {
    double z, zero_angle;
    std::array<double, 2> centroid;
    std::vector<double> radius, tos;
  };
  std::vector<SliceData> sd;
  sd.reserve(static_cast<size_t>(n_slices));
  for (const StudySlice& s : study.slices)
    sd.push_back({s.z_mm, sector_zero_angle(s.myo), s.myo.centroid,
                  detail::mid_wall_radius(s.myo, study.n_sectors), s.tos.ms});

  ActivationSurface surf;
  const double z0 = sd.front().z, z1 = sd.back().z;
  const double dphi = 6.283185307179586 / angular_samples;
  for (int iz = 0; iz < z_samples; ++iz) {
    const double z = z0 + (z1 - z0) * iz / (z_samples - 1);
    int j = 0;
    while (j + 2 < n_slices && z > sd[static_cast<size_t>(j) + 1].z) ++j;
    const SliceData& a = sd[static_cast<size_t>(j)];
    const SliceData& b = sd[static_cast<size_t>(j) + 1];
    const double s = (z - a.z) / (b.z - a.z);
    const double zero = a.zero_angle + s * wrap_pm_pi(b.zero_angle - a.zero_angle);
    const double crow = (1.0 - s) * a.centroid[0] + s * b.centroid[0];
    const double ccol = (1.0 - s) * a.centroid[1] + s * b.centroid[1];
    for (int ia = 0; ia < angular_samples; ++ia) {
      const double rel = ia * dphi;
      const double rad =
          (1.0 - s) * detail::ring_lerp(a.radius, rel) + s * detail::ring_lerp(b.radius, rel);
      const double tos =
          (1.0 - s) * detail::ring_lerp(a.tos, rel) + s * detail::ring_lerp(b.tos, rel);
      const double theta = zero + rel;  // atan2(row offset, col offset) convention
      surf.points.push_back({ccol + rad * std::cos(theta), crow + rad * std::sin(theta), z});
      surf.tos_ms.push_back(tos);
    }
  }
  for (int iz = 0; iz + 1 < z_samples; ++iz)
    for (int ia = 0; ia < angular_samples; ++ia) {
      const int v00 = iz * angular_samples + ia;
      const int v01 = iz * angular_samples + (ia + 1) % angular_samples;
      const int v10 = v00 + angular_samples;
      const int v11 = v01 + angular_samples;
      surf.faces.push_back({v00, v01, v11});
      surf.faces.push_back({v00, v11, v10});
    }
  surf.validate();
  return surf;
}

// Diverging colormap: blue side at or below the LMA threshold, red side
// above it, whitening toward the 18 ms transition.  The blue ramp saturates
// at 0 ms and the red ramp at 100 ms, so both ends of the physical range are
// fully saturated while the threshold stays the visual pivot.
inline std::array<uint8_t, 3> tos_color(double tos_ms) {
  auto mix = [](double w, int from, int to) {
    return static_cast<uint8_t>(std::lround(from + w * (to - from)));
  };
  if (tos_ms <= kLmaThresholdMs) {
    const double w = std::clamp((kLmaThresholdMs - tos_ms) / kLmaThresholdMs, 0.0, 1.0);
    return {mix(w, 245, 30), mix(w, 245, 60), mix(w, 245, 255)};
  }
  const double w = std::clamp((tos_ms - kLmaThresholdMs) / (100.0 - kLmaThresholdMs), 0.0, 1.0);
  return {mix(w, 245, 255), mix(w, 245, 40), mix(w, 245, 30)};
}

// ASCII PLY with per-vertex tos_ms scalar and RGB; byte-stable for a fixed
// surface (fixed-precision formatting, newline-only separators).
inline void export_surface(const ActivationSurface& surf, const io::fs::path& path) {
  surf.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_surface: cannot open " + path.string());
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << surf.points.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\nproperty double tos_ms\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << surf.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  char line[256];
  for (size_t i = 0; i < surf.points.size(); ++i) {
    const std::array<uint8_t, 3> rgb = tos_color(surf.tos_ms[i]);
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %.6f %d %d %d\n", surf.points[i][0],
                  surf.points[i][1], surf.points[i][2], surf.tos_ms[i], rgb[0], rgb[1], rgb[2]);
    out << line;
  }
  for (const std::array<int, 3>& f : surf.faces)
    out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
  if (!out) throw std::runtime_error("export_surface: write failed for " + path.string());
}

// Parses the dialect export_surface writes (used for round-trip checks and
// by downstream tooling that re-reads emitted maps).
inline ActivationSurface load_surface(const io::fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_surface: cannot open " + path.string());
  std::string tok;
  size_t n_vert = 0, n_face = 0;
  while (in >> tok) {
    if (tok == "element") {
      std::string what;
      size_t count;
      in >> what >> count;
      if (what == "vertex") n_vert = count;
      if (what == "face") n_face = count;
    } else if (tok == "end_header") {
      break;
    }
  }
  ActivationSurface surf;
  for (size_t i = 0; i < n_vert; ++i) {
    double x, y, z, tos;
    int r, g, b;
    if (!(in >> x >> y >> z >> tos >> r >> g >> b))
      throw std::runtime_error("load_surface: truncated vertex list");
    surf.points.push_back({x, y, z});
    surf.tos_ms.push_back(tos);
  }
  for (size_t i = 0; i < n_face; ++i) {
    int cnt, a, b, c;
    if (!(in >> cnt >> a >> b >> c) || cnt != 3)
      throw std::runtime_error("load_surface: bad face record");
    surf.faces.push_back({a, b, c});
  }
  surf.validate();
  return surf;
}

}  // namespace densecine
