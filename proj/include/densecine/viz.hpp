#pragma once

// Strain-matrix figures: an N-sector x T-frame heat map with activation-time
// curves stepped over it.  Output is binary PPM (P6) — no image library,
// byte-stable, opens in anything.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "densecine/strain.hpp"

namespace densecine {

using Rgb = std::array<uint8_t, 3>;

struct RgbImage {
  int height = 0, width = 0;
  std::vector<uint8_t> px;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int h, int w, Rgb fill = {255, 255, 255}) : height(h), width(w) {
    if (h < 1 || w < 1) throw std::invalid_argument("RgbImage: dimensions must be positive");
    px.resize(static_cast<size_t>(h) * w * 3);
    for (size_t i = 0; i < px.size(); i += 3) {
      px[i] = fill[0];
      px[i + 1] = fill[1];
      px[i + 2] = fill[2];
    }
  }

  Rgb get(int y, int x) const {
    const size_t i = (static_cast<size_t>(y) * width + x) * 3;
    return {px[i], px[i + 1], px[i + 2]};
  }

  // Out-of-frame stamps are dropped so curve overlays can run off the edges.
  void set(int y, int x, Rgb c) {
    if (y < 0 || y >= height || x < 0 || x >= width) return;
    const size_t i = (static_cast<size_t>(y) * width + x) * 3;
    px[i] = c[0];
    px[i + 1] = c[1];
    px[i + 2] = c[2];
  }
};

// Diverging strain map pinned at 0: contraction (negative) saturates blue at
// -0.3, stretch saturates red at +0.3, zero reads as paper-white.
inline Rgb strain_color(double e) {
  const double t = std::clamp(e / 0.3, -1.0, 1.0);
  const double w = std::abs(t);
  auto mix = [w](double base, double hue) {
    return static_cast<uint8_t>(std::lround(base + (hue - base) * w));
  };
  if (t < 0.0) return {mix(250, 25), mix(250, 60), mix(250, 230)};
  return {mix(250, 230), mix(250, 45), mix(250, 35)};
}

// Heat map of the strain matrix: sector n on rows (0 at the top), frame t on
// columns, nearest-neighbor blocks.  Pixel dimensions are exactly as asked.
inline RgbImage render_strain_map(const StrainMatrix& s, int width, int height) {
  if (s.values.rank() != 2 || s.n() < 1 || s.t() < 1)
    throw std::invalid_argument("render_strain_map: empty matrix");
  RgbImage img(height, width);
  for (int y = 0; y < height; ++y) {
    const int n = static_cast<int>(static_cast<int64_t>(y) * s.n() / height);
    for (int x = 0; x < width; ++x) {
      const int t = static_cast<int>(static_cast<int64_t>(x) * s.t() / width);
      img.set(y, x, strain_color(s.values.at(n, t)));
    }
  }
  return img;
}

namespace detail {

inline void stamp(RgbImage& img, int y, int x, Rgb c) {
  img.set(y, x, c);
  img.set(y + 1, x, c);
  img.set(y, x + 1, c);
  img.set(y + 1, x + 1, c);
}

inline void draw_segment(RgbImage& img, int y0, int x0, int y1, int x1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    stamp(img, y0, x0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

// Polyline of per-sector activation times over a strain heat map whose time
// axis spans t_frames frames of dt_ms each.  An activation at dt*c lands on
// the left edge of frame column c.
inline void overlay_tos_curve(RgbImage& img, const TOSCurve& tos, double dt_ms, int t_frames,
                              Rgb color) {
  const int n = static_cast<int>(tos.ms.size());
  if (n == 0) throw std::invalid_argument("overlay_tos_curve: empty curve");
  if (dt_ms <= 0 || t_frames < 1) throw std::invalid_argument("overlay_tos_curve: bad time axis");
  auto col = [&](double t_ms) {
    const double fx = t_ms / (dt_ms * t_frames) * (img.width - 1);
    return static_cast<int>(std::lround(std::clamp(fx, 0.0, img.width - 1.0)));
  };
  auto row = [&](int sector) {
    return static_cast<int>(std::lround((sector + 0.5) * img.height / static_cast<double>(n)));
  };
  int py = row(0), pxl = col(tos.ms[0]);
  detail::stamp(img, py, pxl, color);
  for (int s = 1; s < n; ++s) {
    const int y = row(s), x = col(tos.ms[s]);
    detail::draw_segment(img, py, pxl, y, x, color);
    py = y;
    pxl = x;
  }
}

// The standard figure: method strain map, method activation curve in black,
// reference curve (if given) in green.
inline RgbImage render_strain_plot(const StrainMatrix& s, const TOSCurve& tos,
                                   const TOSCurve* reference, int width, int height) {
  RgbImage img = render_strain_map(s, width, height);
  if (reference) overlay_tos_curve(img, *reference, s.dt_ms, s.t(), {40, 160, 60});
  overlay_tos_curve(img, tos, s.dt_ms, s.t(), {15, 15, 15});
  return img;
}

// ---- PPM (P6) --------------------------------------------------------------

inline void write_ppm(const std::string& path, const RgbImage& img) {
  if (img.height < 1 || img.width < 1) throw std::invalid_argument("write_ppm: empty image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error("not an 8-bit P6 PPM: " + path);
  f.get();  // single whitespace byte after the header
  RgbImage img(h, w);
  f.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.px.size()))
    throw std::runtime_error("truncated PPM payload: " + path);
  return img;
}

}  // namespace densecine
