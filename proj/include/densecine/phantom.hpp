#pragma once

// Synthetic short-axis phantom.  A textured annulus contracts radially with a
// per-sector activation delay; cine and DENSE-rate sequences are two temporal
// samplings of the same continuous motion, and the analytic displacement field
// doubles as dense ground truth for strain supervision.  All randomness is
// seeded, so a (spec, seed) pair defines one case bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "densecine/io.hpp"
#include "densecine/rng.hpp"
#include "densecine/strain.hpp"
#include "densecine/tensor.hpp"

namespace densecine {

struct PhantomSpec {
  int grid_size = 64;
  int n_sectors = 128;
  int t_cine = 40;
  int t_dense = 20;
  double cine_dt_ms = 40.0;
  double dense_dt_ms = 17.0;
  double inner_radius = 11.0;
  double outer_radius = 23.0;
  double peak_contraction = 0.2;
  std::vector<int> tos_pattern;  // onset frame per sector (DENSE frame numbering); empty = all 1
  uint64_t texture_seed = 0;
  double noise_sigma = 0.02;

  void validate() const {
    if (grid_size < 16) throw std::invalid_argument("PhantomSpec: grid_size must be >= 16");
    if (n_sectors < 4) throw std::invalid_argument("PhantomSpec: n_sectors must be >= 4");
    if (t_cine < 2 || t_dense < 4)
      throw std::invalid_argument("PhantomSpec: need t_cine >= 2 and t_dense >= 4");
    if (cine_dt_ms <= 0.0 || dense_dt_ms <= 0.0)
      throw std::invalid_argument("PhantomSpec: frame intervals must be positive");
    if (!(inner_radius > 0.0 && inner_radius < outer_radius &&
          outer_radius < grid_size / 2.0))
      throw std::invalid_argument(
          "PhantomSpec: need 0 < inner_radius < outer_radius < grid_size/2");
    if (!(peak_contraction > 0.0 && peak_contraction < 0.5))
      throw std::invalid_argument("PhantomSpec: peak_contraction must lie in (0, 0.5)");
    if (noise_sigma < 0.0) throw std::invalid_argument("PhantomSpec: noise_sigma must be >= 0");
    if (!tos_pattern.empty()) {
      if (static_cast<int>(tos_pattern.size()) != n_sectors)
        throw std::invalid_argument("PhantomSpec: tos_pattern must have one entry per sector");
      for (int f : tos_pattern)
        if (f < 1 || f > t_dense - 2)
          throw std::invalid_argument(
              "PhantomSpec: onset frames must lie in [1, t_dense-2] so onset is observable");
    }
  }

  std::vector<int> pattern_or_default() const {
    if (!tos_pattern.empty()) return tos_pattern;
    return std::vector<int>(static_cast<size_t>(n_sectors), 1);
  }
};

struct PhantomCase {
  PhantomSpec spec;
  uint64_t seed = 0;
  ImageSequence cine;
  ImageSequence dense;
  DisplacementFieldSequence gt_displacements;  // DENSE-rate Lagrangian fields
  StrainMatrix gt_strain;
  TOSCurve gt_tos;
  MyocardiumMask myocardium;
};

// ---- geometry --------------------------------------------------------------

inline MyocardiumMask make_annulus_mask(const PhantomSpec& spec) {
  const int g = spec.grid_size;
  const double cy = (g - 1) / 2.0, cx = (g - 1) / 2.0;
  MyocardiumMask m;
  m.mask = Tensor({g, g});
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      const double d = std::hypot(r - cy, c - cx);
      if (d >= spec.inner_radius && d <= spec.outer_radius) m.mask.at(r, c) = 1.0;
    }
  m.centroid = {cy, cx};
  // anterior/inferior septal insertion points on the epicardial circle
  const double a1 = 150.0 * M_PI / 180.0, a2 = 210.0 * M_PI / 180.0;
  m.insertion_points = {{{cy + spec.outer_radius * std::sin(a1),
                          cx + spec.outer_radius * std::cos(a1)},
                         {cy + spec.outer_radius * std::sin(a2),
                          cx + spec.outer_radius * std::cos(a2)}}};
  m.validate();
  return m;
}

// ---- motion model ----------------------------------------------------------

// Angular blending: per-sector ramp amplitudes are smoothed with a periodic
// Gaussian whose full width at half maximum is kBlendFwhmSectors sector
// widths.  This keeps the displacement field C1 in the angle while confining
// cross-sector bleed enough that onset detection stays unambiguous.
constexpr double kBlendFwhmSectors = 3.0;
constexpr double kRampFrames = 5.0;    // frames from onset to plateau
constexpr double kTaperMargin = 2.0;   // plateau extends this far past the annulus
constexpr double kTaperBand = 6.0;     // cosine roll-off width outside the plateau

class MotionModel {
 public:
  MotionModel(const PhantomSpec& spec, const MyocardiumMask& myo) : spec_(spec) {
    spec_.validate();
    const int g = spec.grid_size;
    cy_ = myo.centroid[0];
    cx_ = myo.centroid[1];
    const int nn = spec.n_sectors;
    const double width = 2.0 * M_PI / nn;
    const double sigma = kBlendFwhmSectors / 2.3548200450309493 * width;
    const double theta0 = sector_zero_angle(myo);

    int reach = static_cast<int>(std::ceil(4.5 * sigma / width));
    if (2 * reach + 1 > nn) reach = (nn - 1) / 2;
    k_ = 2 * reach + 1;

    taper_.resize(static_cast<size_t>(g) * g);
    widx_.resize(static_cast<size_t>(g) * g * k_);
    wval_.resize(static_cast<size_t>(g) * g * k_);
    const double plateau_in = spec.inner_radius - kTaperMargin;
    const double plateau_out = spec.outer_radius + kTaperMargin;
    const double band_in = std::min(kTaperBand, std::max(0.5, plateau_in - 0.5));
    const double band_out =
        std::min(kTaperBand, std::max(0.5, (g - 1) / 2.0 - plateau_out));

    for (int r = 0; r < g; ++r) {
      for (int c = 0; c < g; ++c) {
        const size_t p = static_cast<size_t>(r) * g + c;
        const double dr = r - cy_, dc = c - cx_;
        const double rad = std::hypot(dr, dc);
        taper_[p] = radial_taper(rad, plateau_in, plateau_out, band_in, band_out);
        const double th = std::atan2(dr, dc);
        // nearest sector center, then a symmetric window around it
        const double s = wrap_two_pi(th - theta0) / width;
        const int nearest = static_cast<int>(std::lround(s)) % nn;
        double wsum = 0.0;
        for (int j = 0; j < k_; ++j) {
          const int n = ((nearest - reach + j) % nn + nn) % nn;
          const double dth = wrap_pm_pi(th - (theta0 + n * width));
          const double wgt = std::exp(-0.5 * dth * dth / (sigma * sigma));
          widx_[p * k_ + j] = n;
          wval_[p * k_ + j] = wgt;
          wsum += wgt;
        }
        for (int j = 0; j < k_; ++j) wval_[p * k_ + j] /= wsum;
      }
    }
  }

  // Per-sector ramp amplitude at continuous time tau (ms since frame 1).
  std::vector<double> sector_amplitudes(double tau) const {
    const auto pattern = spec_.pattern_or_default();
    std::vector<double> a(pattern.size());
    const double ramp_ms = kRampFrames * spec_.dense_dt_ms;
    for (size_t n = 0; n < pattern.size(); ++n) {
      const double onset_ms = (pattern[n] - 1) * spec_.dense_dt_ms;
      a[n] = spec_.peak_contraction *
             std::clamp((tau - onset_ms) / ramp_ms, 0.0, 1.0);
    }
    return a;
  }

  // Lagrangian displacement field at time tau: u(x) = -A(theta,tau) w(r) (x-c).
  Tensor displacement(double tau) const {
    const int g = spec_.grid_size;
    const std::vector<double> amp = sector_amplitudes(tau);
    Tensor u({2, g, g});
    for (int r = 0; r < g; ++r) {
      for (int c = 0; c < g; ++c) {
        const size_t p = static_cast<size_t>(r) * g + c;
        if (taper_[p] == 0.0) continue;
        double a = 0.0;
        for (int j = 0; j < k_; ++j) a += wval_[p * k_ + j] * amp[static_cast<size_t>(widx_[p * k_ + j])];
        const double scale = -a * taper_[p];
        u.at(0, r, c) = scale * (r - cy_);
        u.at(1, r, c) = scale * (c - cx_);
      }
    }
    return u;
  }

 private:
  static double radial_taper(double rad, double plateau_in, double plateau_out,
                             double band_in, double band_out) {
    if (rad >= plateau_in && rad <= plateau_out) return 1.0;
    if (rad < plateau_in) {
      const double x = (plateau_in - rad) / band_in;
      if (x >= 1.0) return 0.0;
      return 0.5 + 0.5 * std::cos(M_PI * x);
    }
    const double x = (rad - plateau_out) / band_out;
    if (x >= 1.0) return 0.0;
    return 0.5 + 0.5 * std::cos(M_PI * x);
  }

  PhantomSpec spec_;
  double cy_ = 0.0, cx_ = 0.0;
  int k_ = 0;
  std::vector<double> taper_;
  std::vector<int> widx_;
  std::vector<double> wval_;
};

// Displacement at a given DENSE frame (1-based), as a pure function of the
// spec.  Frame k sits at tau = (k-1) * dense_dt_ms.
inline Tensor motion_at(const PhantomSpec& spec, int dense_frame) {
  if (dense_frame < 1 || dense_frame > spec.t_dense)
    throw std::invalid_argument("motion_at: frame out of range");
  const MyocardiumMask myo = make_annulus_mask(spec);
  return MotionModel(spec, myo).displacement((dense_frame - 1) * spec.dense_dt_ms);
}

// ---- texture ---------------------------------------------------------------

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
  const int g = img.dim(0);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> ker(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    ker[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += ker[static_cast<size_t>(i + radius)];
  }
  for (double& k : ker) k /= sum;
  Tensor tmp({g, g}), out({g, g});
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += ker[static_cast<size_t>(i + radius)] * img.at(r, std::clamp(c + i, 0, g - 1));
      tmp.at(r, c) = acc;
    }
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += ker[static_cast<size_t>(i + radius)] * tmp.at(std::clamp(r + i, 0, g - 1), c);
      out.at(r, c) = acc;
    }
  return out;
}

inline Tensor make_texture(const PhantomSpec& spec, const MyocardiumMask& myo) {
  const int g = spec.grid_size;
  Rng rng(derive_seed(spec.texture_seed, 0x7e9));
  Tensor noise({g, g});
  for (double& x : noise.v) x = rng.gaussian();
  Tensor field = gaussian_blur(noise, 2.5);
  double mean = 0.0, var = 0.0;
  for (double x : field.v) mean += x;
  mean /= static_cast<double>(field.size());
  for (double x : field.v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(field.size());
  const double sd = std::sqrt(std::max(var, 1e-12));
  Tensor tex({g, g});
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      const double base = myo.mask.at(r, c) == 1.0 ? 0.65 : 0.35;
      tex.at(r, c) = std::clamp(base + 0.15 * (field.at(r, c) - mean) / sd, 0.0, 1.0);
    }
  return tex;
}

// ---- case generation ---------------------------------------------------------

inline PhantomCase generate_phantom(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  PhantomCase cs;
  cs.spec = spec;
  cs.seed = seed;
  cs.myocardium = make_annulus_mask(spec);
  const MotionModel motion(spec, cs.myocardium);
  const Tensor texture = make_texture(spec, cs.myocardium);
  const int g = spec.grid_size;

  // ground-truth displacement sequence at the DENSE frame times
  cs.gt_displacements.dt_ms = spec.dense_dt_ms;
  cs.gt_displacements.u = Tensor({spec.t_dense, 2, g, g});
  for (int k = 0; k < spec.t_dense; ++k) {
    const Tensor u = motion.displacement(k * spec.dense_dt_ms);
    std::copy(u.v.begin(), u.v.end(),
              cs.gt_displacements.u.v.begin() + static_cast<size_t>(k) * 2 * g * g);
  }

  const SectorPartition part = build_partition(cs.myocardium, spec.n_sectors);
  cs.gt_strain = build_strain_matrix(cs.gt_displacements, cs.myocardium, part);

  // Ground-truth activation time is the onset an ideal measurement of the
  // analytic motion reports.  On plateau interiors this equals
  // dense_dt_ms * tos_pattern[n]; immediately next to a pattern step the
  // angular blending physically delays the measurable onset of the earlier
  // sector by up to one frame (the smooth transition's shear term opposes
  // the contraction signal there), and the label honestly reflects that.
  cs.gt_tos = extract_tos(cs.gt_strain);

  auto render = [&](int frames, double dt, uint64_t stream) {
    ImageSequence seq;
    seq.dt_ms = dt;
    seq.frames = Tensor({frames, g, g});
    Rng noise_rng(derive_seed(seed, stream));
    for (int k = 0; k < frames; ++k) {
      const Tensor u = motion.displacement(k * dt);
      const Tensor img = warp(texture, u);
      for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c)
          seq.frames.at(k, r, c) =
              std::clamp(img.at(r, c) + spec.noise_sigma * noise_rng.gaussian(), 0.0, 1.0);
    }
    return seq;
  };
  cs.cine = render(spec.t_cine, spec.cine_dt_ms, 0x01);
  cs.cine.modality = Modality::kCine;
  cs.dense = render(spec.t_dense, spec.dense_dt_ms, 0x02);
  cs.dense.modality = Modality::kDense;
  return cs;
}

// Smooth delay bump ("wavefront") pattern: a raised-cosine region of late
// activation on a background of onset frame 1.  The half width scales with
// the peak delay so the onset staircase never outruns what the angular
// blending can keep separable.
inline std::vector<int> make_wavefront_pattern(int n_sectors, int t_dense, Rng& rng) {
  if (n_sectors < 64) throw std::invalid_argument("make_wavefront_pattern: need >= 64 sectors");
  if (t_dense < 12) throw std::invalid_argument("make_wavefront_pattern: need >= 12 frames");
  const int max_delay = std::min(8, t_dense - 8);
  const int delay = rng.uniform_int(4, max_delay);
  int half_width = static_cast<int>(std::ceil(5.24 * delay)) + rng.uniform_int(0, 6);
  half_width = std::min(half_width, n_sectors / 2 - 1);
  const int center = rng.uniform_int(0, n_sectors - 1);
  std::vector<int> pattern(static_cast<size_t>(n_sectors), 1);
  for (int n = 0; n < n_sectors; ++n) {
    int x = std::abs(((n - center) % n_sectors + n_sectors) % n_sectors);
    x = std::min(x, n_sectors - x);
    if (x > half_width) continue;
    const double bump = 0.5 * delay * (1.0 + std::cos(M_PI * x / half_width));
    pattern[static_cast<size_t>(n)] = 1 + static_cast<int>(std::lround(bump));
  }
  return pattern;
}

// The standard dataset recipe: one case per seed, with the activation
// wavefront, texture, and sensor noise all derived from that seed.  Every
// consumer (dataset generation, calibration, evaluation) goes through this so
// a seed names the same case everywhere.
inline PhantomCase make_randomized_case(PhantomSpec spec, uint64_t seed) {
  Rng rng(derive_seed(seed, 0));
  spec.tos_pattern = make_wavefront_pattern(spec.n_sectors, spec.t_dense, rng);
  spec.texture_seed = seed;
  return generate_phantom(spec, seed);
}

// ---- serialization -----------------------------------------------------------

inline io::json spec_to_json(const PhantomSpec& s) {
  io::json j;
  j["grid_size"] = s.grid_size;
  j["n_sectors"] = s.n_sectors;
  j["t_cine"] = s.t_cine;
  j["t_dense"] = s.t_dense;
  j["cine_dt_ms"] = s.cine_dt_ms;
  j["dense_dt_ms"] = s.dense_dt_ms;
  j["inner_radius"] = s.inner_radius;
  j["outer_radius"] = s.outer_radius;
  j["peak_contraction"] = s.peak_contraction;
  j["tos_pattern"] = s.tos_pattern;
  j["texture_seed"] = s.texture_seed;
  j["noise_sigma"] = s.noise_sigma;
  return j;
}

inline PhantomSpec spec_from_json(const io::json& j) {
  PhantomSpec s;
  s.grid_size = j.at("grid_size").get<int>();
  s.n_sectors = j.at("n_sectors").get<int>();
  s.t_cine = j.at("t_cine").get<int>();
  s.t_dense = j.at("t_dense").get<int>();
  s.cine_dt_ms = j.at("cine_dt_ms").get<double>();
  s.dense_dt_ms = j.at("dense_dt_ms").get<double>();
  s.inner_radius = j.at("inner_radius").get<double>();
  s.outer_radius = j.at("outer_radius").get<double>();
  s.peak_contraction = j.at("peak_contraction").get<double>();
  s.tos_pattern = j.at("tos_pattern").get<std::vector<int>>();
  s.texture_seed = j.at("texture_seed").get<uint64_t>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  return s;
}

inline void serialize_case(const io::fs::path& dir, const PhantomCase& cs) {
  io::ensure_dir(dir);
  io::json meta;
  meta["kind"] = "phantom_case";
  meta["seed"] = cs.seed;
  meta["spec"] = spec_to_json(cs.spec);
  meta["cine_dt_ms"] = cs.cine.dt_ms;
  meta["dense_dt_ms"] = cs.dense.dt_ms;
  meta["centroid"] = {cs.myocardium.centroid[0], cs.myocardium.centroid[1]};
  meta["insertion_points"] = {
      {cs.myocardium.insertion_points[0][0], cs.myocardium.insertion_points[0][1]},
      {cs.myocardium.insertion_points[1][0], cs.myocardium.insertion_points[1][1]}};
  io::save_tensor_entry(meta, dir, "cine", cs.cine.frames);
  io::save_tensor_entry(meta, dir, "dense", cs.dense.frames);
  io::save_tensor_entry(meta, dir, "disp", cs.gt_displacements.u);
  io::save_tensor_entry(meta, dir, "strain", cs.gt_strain.values);
  Tensor tos({static_cast<int>(cs.gt_tos.ms.size())});
  std::copy(cs.gt_tos.ms.begin(), cs.gt_tos.ms.end(), tos.v.begin());
  io::save_tensor_entry(meta, dir, "tos", tos);
  io::save_tensor_entry(meta, dir, "mask", cs.myocardium.mask);
  io::save_json(dir / "meta.json", meta);
}

inline PhantomCase load_case(const io::fs::path& dir) {
  const io::json meta = io::load_json(dir / "meta.json");
  if (!meta.contains("kind") || meta["kind"] != "phantom_case")
    throw std::runtime_error("load_case: " + dir.string() + " is not a phantom case directory");
  PhantomCase cs;
  cs.spec = spec_from_json(meta.at("spec"));
  cs.seed = meta.at("seed").get<uint64_t>();
  cs.cine.frames = io::load_tensor_entry(meta, dir, "cine");
  cs.cine.dt_ms = meta.at("cine_dt_ms").get<double>();
  cs.cine.modality = Modality::kCine;
  cs.dense.frames = io::load_tensor_entry(meta, dir, "dense");
  cs.dense.dt_ms = meta.at("dense_dt_ms").get<double>();
  cs.dense.modality = Modality::kDense;
  cs.gt_displacements.u = io::load_tensor_entry(meta, dir, "disp");
  cs.gt_displacements.dt_ms = cs.dense.dt_ms;
  cs.gt_strain.values = io::load_tensor_entry(meta, dir, "strain");
  cs.gt_strain.dt_ms = cs.dense.dt_ms;
  Tensor tos = io::load_tensor_entry(meta, dir, "tos");
  cs.gt_tos.ms.assign(tos.v.begin(), tos.v.end());
  cs.myocardium.mask = io::load_tensor_entry(meta, dir, "mask");
  const auto& cen = meta.at("centroid");
  cs.myocardium.centroid = {cen[0].get<double>(), cen[1].get<double>()};
  const auto& ins = meta.at("insertion_points");
  cs.myocardium.insertion_points = {{{ins[0][0].get<double>(), ins[0][1].get<double>()},
                                     {ins[1][0].get<double>(), ins[1][1].get<double>()}}};
  cs.cine.validate();
  cs.dense.validate();
  cs.myocardium.validate();
  return cs;
}

}  // namespace densecine
