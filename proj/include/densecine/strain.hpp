#pragma once

// Strain pipeline: Lagrangian displacement fields -> Green-Lagrange strain ->
// circumferential component -> sector-averaged strain matrix -> activation
// times (TOS) -> late-activation flags.  Everything here is deterministic
// and differentiation-free; this is the measurement chain that both the
// learned model and the classical baseline are evaluated through.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "densecine/io.hpp"
#include "densecine/tensor.hpp"

namespace densecine {

// ---- types ---------------------------------------------------------------

enum class Modality { kCine, kDense };

struct ImageSequence {
  Tensor frames;  // [T, H, W], intensities in [0, 1]
  double dt_ms = 0.0;
  Modality modality = Modality::kCine;

  int t() const { return frames.dim(0); }
  int h() const { return frames.dim(1); }
  int w() const { return frames.dim(2); }

  void validate() const {
    check_rank(frames, 3, "ImageSequence.frames");
    if (dt_ms <= 0.0) throw std::invalid_argument("ImageSequence: dt_ms must be positive");
    for (double x : frames.v)
      if (!(x >= 0.0 && x <= 1.0))
        throw std::invalid_argument("ImageSequence: intensities must lie in [0,1]");
  }
};

// Displacement u maps reference-frame pixel x to its position x + u(x) at
// frame t.  Channel 0 is the row offset, channel 1 the column offset.
struct DisplacementFieldSequence {
  Tensor u;  // [T, 2, H, W]
  double dt_ms = 0.0;

  int t() const { return u.dim(0); }
  int h() const { return u.dim(2); }
  int w() const { return u.dim(3); }

  void validate() const {
    check_rank(u, 4, "DisplacementFieldSequence.u");
    if (u.dim(1) != 2)
      throw std::invalid_argument("DisplacementFieldSequence: channel dim must be 2");
    if (dt_ms <= 0.0)
      throw std::invalid_argument("DisplacementFieldSequence: dt_ms must be positive");
    if (!all_finite(u)) throw std::invalid_argument("DisplacementFieldSequence: non-finite values");
  }
};

struct MyocardiumMask {
  Tensor mask;  // [H, W], entries 0 or 1
  std::array<double, 2> centroid = {0.0, 0.0};  // (row, col)
  std::array<std::array<double, 2>, 2> insertion_points = {{{0.0, 0.0}, {0.0, 0.0}}};

  int h() const { return mask.dim(0); }
  int w() const { return mask.dim(1); }

  void validate() const {
    check_rank(mask, 2, "MyocardiumMask.mask");
    int64_t n = 0;
    for (double x : mask.v) {
      if (x != 0.0 && x != 1.0)
        throw std::invalid_argument("MyocardiumMask: entries must be 0 or 1");
      n += (x == 1.0);
    }
    if (n == 0) throw std::invalid_argument("MyocardiumMask: empty mask");
  }
};

struct SectorPartition {
  std::vector<int> sector_of_pixel;  // H*W entries, -1 for background
  int n_sectors = 0;
  int h = 0, w = 0;

  int at(int r, int c) const { return sector_of_pixel[static_cast<size_t>(r) * w + c]; }
};

struct StrainMatrix {
  Tensor values;  // [N, T] sector-mean circumferential strain
  double dt_ms = 0.0;

  int n() const { return values.dim(0); }
  int t() const { return values.dim(1); }
};

struct TOSCurve {
  std::vector<double> ms;  // one activation time per sector, in milliseconds
};

// ---- basic field operations ----------------------------------------------

// Bilinear sample with border clamp.
inline double sample_bilinear(const Tensor& img, double r, double c) {
  const int hh = img.dim(0), ww = img.dim(1);
  r = std::clamp(r, 0.0, static_cast<double>(hh - 1));
  c = std::clamp(c, 0.0, static_cast<double>(ww - 1));
  int r0 = static_cast<int>(r);
  int c0 = static_cast<int>(c);
  if (r0 == hh - 1) r0 = hh - 2 >= 0 ? hh - 2 : 0;
  if (c0 == ww - 1) c0 = ww - 2 >= 0 ? ww - 2 : 0;
  const int r1 = std::min(r0 + 1, hh - 1);
  const int c1 = std::min(c0 + 1, ww - 1);
  const double fr = r - r0, fc = c - c0;
  return (1 - fr) * (1 - fc) * img.at(r0, c0) + (1 - fr) * fc * img.at(r0, c1) +
         fr * (1 - fc) * img.at(r1, c0) + fr * fc * img.at(r1, c1);
}

// warp(img, u)(x) = img(x + u(x)).  With img = reference frame and u the
// Lagrangian displacement this produces the deformed frame.
inline Tensor warp(const Tensor& img, const Tensor& u) {
  check_rank(img, 2, "warp.img");
  check_rank(u, 3, "warp.u");
  const int hh = img.dim(0), ww = img.dim(1);
  if (u.dim(0) != 2 || u.dim(1) != hh || u.dim(2) != ww)
    throw std::invalid_argument("warp: displacement shape mismatch " + u.shape_str());
  Tensor out({hh, ww});
  for (int r = 0; r < hh; ++r)
    for (int c = 0; c < ww; ++c)
      out.at(r, c) = sample_bilinear(img, r + u.at(0, r, c), c + u.at(1, r, c));
  return out;
}

// Spatial Jacobian of a displacement field: J[i][j] = d u_i / d x_j,
// central differences inside, one-sided at the borders.
inline Tensor displacement_jacobian(const Tensor& u) {
  check_rank(u, 3, "displacement_jacobian.u");
  const int hh = u.dim(1), ww = u.dim(2);
  Tensor jac({2, 2, hh, ww});
  for (int i = 0; i < 2; ++i) {
    for (int r = 0; r < hh; ++r) {
      for (int c = 0; c < ww; ++c) {
        double dr, dc;
        if (r == 0)
          dr = u.at(i, 1, c) - u.at(i, 0, c);
        else if (r == hh - 1)
          dr = u.at(i, hh - 1, c) - u.at(i, hh - 2, c);
        else
          dr = 0.5 * (u.at(i, r + 1, c) - u.at(i, r - 1, c));
        if (c == 0)
          dc = u.at(i, r, 1) - u.at(i, r, 0);
        else if (c == ww - 1)
          dc = u.at(i, r, ww - 1) - u.at(i, r, ww - 2);
        else
          dc = 0.5 * (u.at(i, r, c + 1) - u.at(i, r, c - 1));
        jac.at(i, 0, r, c) = dr;
        jac.at(i, 1, r, c) = dc;
      }
    }
  }
  return jac;
}

// Green-Lagrange strain tensor field E = 0.5 (F^T F - I), F = I + grad u.
// Output shape [2, 2, H, W].
inline Tensor green_lagrange(const Tensor& u) {
  Tensor jac = displacement_jacobian(u);
  const int hh = u.dim(1), ww = u.dim(2);
  Tensor e({2, 2, hh, ww});
  for (int r = 0; r < hh; ++r) {
    for (int c = 0; c < ww; ++c) {
      const double f00 = 1.0 + jac.at(0, 0, r, c);
      const double f01 = jac.at(0, 1, r, c);
      const double f10 = jac.at(1, 0, r, c);
      const double f11 = 1.0 + jac.at(1, 1, r, c);
      e.at(0, 0, r, c) = 0.5 * (f00 * f00 + f10 * f10 - 1.0);
      e.at(0, 1, r, c) = 0.5 * (f00 * f01 + f10 * f11);
      e.at(1, 0, r, c) = e.at(0, 1, r, c);
      e.at(1, 1, r, c) = 0.5 * (f01 * f01 + f11 * f11 - 1.0);
    }
  }
  return e;
}

// Circumferential strain E_cc = c_hat^T E c_hat where c_hat is the unit
// tangent of the circle about the mask centroid through each pixel.
inline Tensor circumferential_strain(const Tensor& e, const MyocardiumMask& myo) {
  if (e.rank() != 4 || e.dim(0) != 2 || e.dim(1) != 2)
    throw std::invalid_argument("circumferential_strain: expected [2,2,H,W] strain field");
  const int hh = e.dim(2), ww = e.dim(3);
  Tensor ecc({hh, ww});
  for (int r = 0; r < hh; ++r) {
    for (int c = 0; c < ww; ++c) {
      const double dr = r - myo.centroid[0];
      const double dc = c - myo.centroid[1];
      const double len = std::sqrt(dr * dr + dc * dc);
      if (len < 1e-9) {
        ecc.at(r, c) = 0.0;  // tangent undefined at the centroid itself
        continue;
      }
      const double tr = -dc / len, tc = dr / len;  // perpendicular to the radial ray
      ecc.at(r, c) = tr * tr * e.at(0, 0, r, c) + 2.0 * tr * tc * e.at(0, 1, r, c) +
                     tc * tc * e.at(1, 1, r, c);
    }
  }
  return ecc;
}

// ---- sector partition ------------------------------------------------------

inline double wrap_two_pi(double a) {
  const double two_pi = 6.283185307179586;
  a = std::fmod(a, two_pi);
  if (a < 0) a += two_pi;
  return a;
}

inline double wrap_pm_pi(double a) {
  const double two_pi = 6.283185307179586;
  a = std::fmod(a, two_pi);
  if (a > 3.141592653589793) a -= two_pi;
  if (a <= -3.141592653589793) a += two_pi;
  return a;
}

// Angle of sector 0's center: the bisector of the short arc between the two
// insertion points.
inline double sector_zero_angle(const MyocardiumMask& myo) {
  const double a1 = std::atan2(myo.insertion_points[0][0] - myo.centroid[0],
                               myo.insertion_points[0][1] - myo.centroid[1]);
  const double a2 = std::atan2(myo.insertion_points[1][0] - myo.centroid[0],
                               myo.insertion_points[1][1] - myo.centroid[1]);
  return wrap_two_pi(a1 + 0.5 * wrap_pm_pi(a2 - a1));
}

// Partition myocardium pixels into n_sectors equal angular wedges around the
// centroid; sector index grows with atan2(row offset, col offset).  A pixel
// exactly on a wedge boundary goes to the lower-index side.
inline SectorPartition build_partition(const MyocardiumMask& myo, int n_sectors) {
  myo.validate();
  if (n_sectors < 4) throw std::invalid_argument("build_partition: need at least 4 sectors");
  const int hh = myo.h(), ww = myo.w();
  SectorPartition part;
  part.n_sectors = n_sectors;
  part.h = hh;
  part.w = ww;
  part.sector_of_pixel.assign(static_cast<size_t>(hh) * ww, -1);
  const double width = 6.283185307179586 / n_sectors;
  const double base = sector_zero_angle(myo) - 0.5 * width;  // start edge of sector 0
  std::vector<int> counts(static_cast<size_t>(n_sectors), 0);
  for (int r = 0; r < hh; ++r) {
    for (int c = 0; c < ww; ++c) {
      if (myo.mask.at(r, c) != 1.0) continue;
      const double th = std::atan2(r - myo.centroid[0], c - myo.centroid[1]);
      const double s = wrap_two_pi(th - base) / width;
      int n = static_cast<int>(std::floor(s));
      if (s == std::floor(s)) n = (n + n_sectors - 1) % n_sectors;  // boundary tie: lower index
      if (n >= n_sectors) n = n_sectors - 1;  // guard against fp rounding at 2*pi
      part.sector_of_pixel[static_cast<size_t>(r) * ww + c] = n;
      counts[static_cast<size_t>(n)]++;
    }
  }
  for (int n = 0; n < n_sectors; ++n)
    if (counts[static_cast<size_t>(n)] == 0)
      throw std::invalid_argument("build_partition: sector " + std::to_string(n) +
                                  " contains no myocardium pixels");
  return part;
}

// ---- strain matrix ---------------------------------------------------------

// Sector-mean circumferential strain for every frame of a Lagrangian
// displacement sequence.  Frame 1 is the reference; its displacement must be
// identically zero, which pins column 1 of the result to zero.
inline StrainMatrix build_strain_matrix(const DisplacementFieldSequence& useq,
                                        const MyocardiumMask& myo,
                                        const SectorPartition& part) {
  useq.validate();
  if (useq.h() != myo.h() || useq.w() != myo.w())
    throw std::invalid_argument("build_strain_matrix: displacement/mask grid mismatch");
  if (part.h != myo.h() || part.w != myo.w())
    throw std::invalid_argument("build_strain_matrix: partition/mask grid mismatch");
  const int tt = useq.t();
  const int hh = useq.h(), ww = useq.w();
  for (int r = 0; r < hh; ++r)
    for (int c = 0; c < ww; ++c)
      if (useq.u.at(0, 0, r, c) != 0.0 || useq.u.at(0, 1, r, c) != 0.0)
        throw std::invalid_argument(
            "build_strain_matrix: reference-frame displacement must be identically zero");

  StrainMatrix sm;
  sm.dt_ms = useq.dt_ms;
  sm.values = Tensor({part.n_sectors, tt});
  Tensor ut({2, hh, ww});
  std::vector<double> acc(static_cast<size_t>(part.n_sectors));
  std::vector<int> cnt(static_cast<size_t>(part.n_sectors));
  for (int t = 0; t < tt; ++t) {
    std::copy(useq.u.v.begin() + static_cast<size_t>(t) * 2 * hh * ww,
              useq.u.v.begin() + static_cast<size_t>(t + 1) * 2 * hh * ww, ut.v.begin());
    const Tensor ecc = circumferential_strain(green_lagrange(ut), myo);
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0);
    for (int r = 0; r < hh; ++r) {
      for (int c = 0; c < ww; ++c) {
        const int n = part.at(r, c);
        if (n < 0) continue;
        acc[static_cast<size_t>(n)] += ecc.at(r, c);
        cnt[static_cast<size_t>(n)]++;
      }
    }
    for (int n = 0; n < part.n_sectors; ++n)
      sm.values.at(n, t) = acc[static_cast<size_t>(n)] / cnt[static_cast<size_t>(n)];
  }
  return sm;
}

inline void validate_strain_matrix(const StrainMatrix& sm) {
  check_rank(sm.values, 2, "StrainMatrix.values");
  if (sm.dt_ms <= 0.0) throw std::invalid_argument("StrainMatrix: dt_ms must be positive");
  for (double x : sm.values.v)
    if (!(std::isfinite(x) && x > -1.0 && x < 1.0))
      throw std::invalid_argument("StrainMatrix: entries must be finite and inside (-1, 1)");
  for (int n = 0; n < sm.n(); ++n)
    if (sm.values.at(n, 0) != 0.0)
      throw std::invalid_argument("StrainMatrix: reference-frame column must be zero");
}

// ---- activation timing -----------------------------------------------------

constexpr double kOnsetThreshold = -0.02;  // strain level that counts as contracting
constexpr double kLmaThresholdMs = 18.0;   // activation later than this is "late"

// Time of onset of circumferential shortening, per sector.  A sector counts
// as contracting at the earliest frame where strain stays at or below the
// threshold for two consecutive frames.  Because frame 1 is the zero-strain
// reference, onset physically happened between frame c-1 and frame c for a
// first crossing at frame c; we report dt * (c - 1), floored at one frame
// interval (a sector already moving during frame interval 1 cannot activate
// earlier than dt).  Sectors that never cross get the sequence end, dt * T.
inline TOSCurve extract_tos(const StrainMatrix& sm, double threshold = kOnsetThreshold) {
  const int nn = sm.n(), tt = sm.t();
  if (sm.dt_ms <= 0.0) throw std::invalid_argument("extract_tos: dt_ms must be positive");
  TOSCurve tos;
  tos.ms.resize(static_cast<size_t>(nn));
  for (int n = 0; n < nn; ++n) {
    int hit = -1;
    for (int t = 0; t + 1 < tt; ++t) {
      if (sm.values.at(n, t) <= threshold && sm.values.at(n, t + 1) <= threshold) {
        hit = t;  // 0-based column == frame number minus one
        break;
      }
    }
    tos.ms[static_cast<size_t>(n)] =
        (hit < 0) ? sm.dt_ms * tt : sm.dt_ms * std::max(hit, 1);
  }
  return tos;
}

inline std::vector<uint8_t> classify_lma(const TOSCurve& tos, double threshold_ms = kLmaThresholdMs) {
  std::vector<uint8_t> flags(tos.ms.size());
  for (size_t i = 0; i < tos.ms.size(); ++i) flags[i] = tos.ms[i] > threshold_ms ? 1 : 0;
  return flags;
}

// ---- low-rank smoothing ------------------------------------------------------

// Best rank-k approximation (truncated SVD).  k at or above min(N,T) returns
// the input unchanged.
inline StrainMatrix low_rank_project(const StrainMatrix& sm, int k) {
  if (k < 1) throw std::invalid_argument("low_rank_project: rank must be at least 1");
  const int nn = sm.n(), tt = sm.t();
  StrainMatrix out;
  out.dt_ms = sm.dt_ms;
  out.values = Tensor({nn, tt});
  if (k >= std::min(nn, tt)) {
    out.values = sm.values;
    return out;
  }
  Eigen::MatrixXd m(nn, tt);
  for (int i = 0; i < nn; ++i)
    for (int j = 0; j < tt; ++j) m(i, j) = sm.values.at(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd rec = svd.matrixU().leftCols(k) *
                        svd.singularValues().head(k).asDiagonal() *
                        svd.matrixV().leftCols(k).transpose();
  for (int i = 0; i < nn; ++i)
    for (int j = 0; j < tt; ++j) out.values.at(i, j) = rec(i, j);
  return out;
}

// ---- serialization -----------------------------------------------------------

inline void save_strain_matrix(const io::fs::path& dir, const StrainMatrix& sm) {
  io::ensure_dir(dir);
  io::json meta;
  meta["kind"] = "strain_matrix";
  meta["dt_ms"] = sm.dt_ms;
  io::save_tensor_entry(meta, dir, "strain", sm.values);
  io::save_json(dir / "meta.json", meta);
}

inline StrainMatrix load_strain_matrix(const io::fs::path& dir) {
  const io::json meta = io::load_json(dir / "meta.json");
  StrainMatrix sm;
  sm.dt_ms = meta.at("dt_ms").get<double>();
  sm.values = io::load_tensor_entry(meta, dir, "strain");
  return sm;
}

inline void save_tos_csv(const io::fs::path& path, const TOSCurve& tos,
                         double lma_threshold_ms = kLmaThresholdMs) {
  const std::vector<uint8_t> flags = classify_lma(tos, lma_threshold_ms);
  io::CsvWriter csv(path, {"sector_index", "tos_ms", "lma"});
  for (size_t i = 0; i < tos.ms.size(); ++i)
    csv.row({static_cast<double>(i), tos.ms[i], static_cast<double>(flags[i])});
}

}  // namespace densecine
