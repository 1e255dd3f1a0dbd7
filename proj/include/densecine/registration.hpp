#pragma once

// Registration network: a small U-Net that maps a stacked frame pair
// (reference frame, moving frame) to a dense Lagrangian displacement field
// u(x), so that warping the reference by u reproduces the moving frame.
// The bottleneck feature map doubles as the latent motion code consumed by
// the downstream strain head.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "densecine/autodiff.hpp"
#include "densecine/rng.hpp"
#include "densecine/strain.hpp"
#include "densecine/tensor.hpp"

namespace densecine {

// Smoothness operator weights for the displacement regularizer
// || (-a * laplacian + b) u ||^2, averaged over pixels.
struct RegOperatorConfig {
  double a = 1.0;
  double b = 0.1;
};

struct UNetConfig {
  int c_in = 2;   // stacked (reference, moving) pair
  int c_out = 2;  // displacement components (du_row, du_col)
  // widths[0..L-2] are encoder/decoder widths per resolution level,
  // widths[L-1] is the bottleneck width.  Requires at least two entries.
  std::vector<int> widths{16, 32, 64};

  int levels() const { return static_cast<int>(widths.size()) - 1; }

  void validate() const {
    if (c_in < 1 || c_out < 1) throw std::invalid_argument("unet: channel counts must be positive");
    if (widths.size() < 2) throw std::invalid_argument("unet: need at least one level plus bottleneck");
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("unet: widths must be positive");
  }

  // Smallest input size the pooling chain supports.
  int min_extent() const { return 1 << levels(); }
};

struct ConvParam {
  Tensor w;  // [c_out, c_in, k, k]
  Tensor b;  // [c_out]
};

// All learnable tensors of the registration net.  Layout (and for_each
// order) is: encoder stages shallow-to-deep, bottleneck, decoder stages
// deep-to-shallow, head.
struct RegistrationParams {
  UNetConfig cfg;
  std::vector<std::array<ConvParam, 2>> enc;  // [level][block]
  std::array<ConvParam, 2> bot;
  std::vector<std::array<ConvParam, 2>> dec;  // [level][block], indexed like enc
  ConvParam head;

  template <class Self, class Fn>
  static void for_each_impl(Self& self, Fn&& fn) {
    auto conv = [&](const std::string& name, auto& cp) {
      fn(name + ".w", cp.w);
      fn(name + ".b", cp.b);
    };
    for (size_t l = 0; l < self.enc.size(); ++l) {
      conv("enc" + std::to_string(l) + "a", self.enc[l][0]);
      conv("enc" + std::to_string(l) + "b", self.enc[l][1]);
    }
    conv("bota", self.bot[0]);
    conv("botb", self.bot[1]);
    for (size_t l = self.dec.size(); l-- > 0;) {
      conv("dec" + std::to_string(l) + "a", self.dec[l][0]);
      conv("dec" + std::to_string(l) + "b", self.dec[l][1]);
    }
    conv("head", self.head);
  }
  template <class Fn> void for_each(Fn&& fn) { for_each_impl(*this, fn); }
  template <class Fn> void for_each(Fn&& fn) const { for_each_impl(*this, fn); }

  int64_t count() const {
    int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

namespace detail {

inline ConvParam make_conv(int c_out, int c_in, int k, Rng& rng, double scale_override = -1.0) {
  ConvParam p;
  p.w = Tensor({c_out, c_in, k, k});
  p.b = Tensor({c_out});
  const double s = scale_override >= 0.0 ? scale_override : std::sqrt(1.0 / (c_in * k * k));
  for (int64_t i = 0; i < p.w.size(); ++i) p.w[i] = rng.uniform(-s, s);
  return p;
}

}  // namespace detail

// Fan-in-scaled uniform init.  The displacement head starts at exactly zero
// so an untrained net predicts the identity transform; training departs from
// it once the data term pushes gradient into the head.  Tests that need the
// head off its (kinked) zero point pass a small positive head_scale.
inline RegistrationParams init_registration(const UNetConfig& cfg, uint64_t seed,
                                            double head_scale = 0.0) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x5e6));
  RegistrationParams p;
  p.cfg = cfg;
  const int L = cfg.levels();
  int c_prev = cfg.c_in;
  for (int l = 0; l < L; ++l) {
    const int c = cfg.widths[static_cast<size_t>(l)];
    p.enc.push_back({detail::make_conv(c, c_prev, 3, rng), detail::make_conv(c, c, 3, rng)});
    c_prev = c;
  }
  const int cb = cfg.widths[static_cast<size_t>(L)];
  p.bot = {detail::make_conv(cb, c_prev, 3, rng), detail::make_conv(cb, cb, 3, rng)};
  p.dec.resize(static_cast<size_t>(L));
  int c_up = cb;  // channels arriving from below at each decoder stage
  for (int l = L - 1; l >= 0; --l) {
    const int c = cfg.widths[static_cast<size_t>(l)];
    p.dec[static_cast<size_t>(l)] = {detail::make_conv(c, c_up + c, 3, rng),
                                     detail::make_conv(c, c, 3, rng)};
    c_up = c;
  }
  p.head = detail::make_conv(cfg.c_out, c_up, 3, rng, head_scale);
  return p;
}

// Tape node ids of one parameter set, mirroring RegistrationParams.
struct UNetRefs {
  struct ConvRef { int w = -1, b = -1; };
  std::vector<std::array<ConvRef, 2>> enc;
  std::array<ConvRef, 2> bot;
  std::vector<std::array<ConvRef, 2>> dec;
  ConvRef head;
};

// Registers every parameter tensor as a tape leaf, once per tape; forward
// passes for all frame pairs of a case then share these leaves so gradients
// accumulate in one place.
inline UNetRefs make_unet_leaves(ad::Tape& tp, const RegistrationParams& p) {
  UNetRefs r;
  auto conv = [&](const ConvParam& cp) {
    UNetRefs::ConvRef cr;
    cr.w = tp.leaf(cp.w);
    cr.b = tp.leaf(cp.b);
    return cr;
  };
  for (const auto& e : p.enc) r.enc.push_back({conv(e[0]), conv(e[1])});
  r.bot = {conv(p.bot[0]), conv(p.bot[1])};
  for (const auto& d : p.dec) r.dec.push_back({conv(d[0]), conv(d[1])});
  r.head = conv(p.head);
  return r;
}

struct UNetOut {
  int u = -1;  // displacement field node, [2, H, W]
  int z = -1;  // bottleneck feature node, [widths.back(), H/2^L, W/2^L]
};

// Forward pass on the tape.  `pair_input` is the stacked [2, H, W] frame
// pair; H and W must be divisible by 2^levels.
inline UNetOut unet_forward(ad::Tape& tp, const UNetRefs& r, const Tensor& pair_input) {
  check_rank(pair_input, 3, "unet input");
  const int L = static_cast<int>(r.enc.size());
  const int h = pair_input.shape[1], w = pair_input.shape[2];
  const int m = 1 << L;
  if (h % m != 0 || w % m != 0)
    throw std::invalid_argument("unet: input extent must be divisible by 2^levels");

  auto block = [&](int x, const UNetRefs::ConvRef& c) {
    return tp.tanh_op(tp.conv2d(x, c.w, c.b));
  };

  int x = tp.leaf(pair_input);
  std::vector<int> skips;
  for (int l = 0; l < L; ++l) {
    x = block(x, r.enc[static_cast<size_t>(l)][0]);
    x = block(x, r.enc[static_cast<size_t>(l)][1]);
    skips.push_back(x);
    x = tp.avgpool2(x);
  }
  x = block(x, r.bot[0]);
  x = block(x, r.bot[1]);

  UNetOut out;
  out.z = x;
  for (int l = L - 1; l >= 0; --l) {
    x = tp.upsample2(x);
    x = tp.concat_c(x, skips[static_cast<size_t>(l)]);
    x = block(x, r.dec[static_cast<size_t>(l)][0]);
    x = block(x, r.dec[static_cast<size_t>(l)][1]);
  }
  out.u = tp.conv2d(x, r.head.w, r.head.b);  // linear head: displacements are signed
  return out;
}

inline Tensor stack_pair(const Tensor& ref_frame, const Tensor& mov_frame) {
  check_rank(ref_frame, 2, "stack_pair ref");
  check_shape(mov_frame, ref_frame.shape, "stack_pair mov");
  const int h = ref_frame.shape[0], w = ref_frame.shape[1];
  Tensor out({2, h, w});
  std::copy(ref_frame.v.begin(), ref_frame.v.end(), out.v.begin());
  std::copy(mov_frame.v.begin(), mov_frame.v.end(), out.v.begin() + static_cast<int64_t>(h) * w);
  return out;
}

struct RegOutput {
  Tensor u;  // [2, H, W]
  Tensor z;  // bottleneck features
};

// Plain inference: run one pair through a throwaway tape and copy out the
// predicted field and latent features.
inline RegOutput predict_displacement(const RegistrationParams& p, const Tensor& ref_frame,
                                      const Tensor& mov_frame) {
  ad::Tape tp;
  UNetRefs r = make_unet_leaves(tp, p);
  UNetOut o = unet_forward(tp, r, stack_pair(ref_frame, mov_frame));
  return {tp.val(o.u), tp.val(o.z)};
}

// ---- plain (tape-free) loss terms -----------------------------------------
// Reference evaluators for tests and reporting; the tape ops sq_diff_mean /
// reg_penalty must agree with these to machine precision.

// Mean over pixels of the squared intensity residual || ref∘(id+u) - mov ||^2.
inline double warp_mse(const Tensor& ref_frame, const Tensor& mov_frame, const Tensor& u) {
  Tensor warped = warp(ref_frame, u);
  double acc = 0.0;
  for (int64_t i = 0; i < warped.size(); ++i) {
    const double d = warped[i] - mov_frame[i];
    acc += d * d;
  }
  return acc / static_cast<double>(warped.size());
}

// Image-matching term for one pair under the current parameters:
// (1 / 2 sigma^2) * mean squared residual of warp(i1, u) against it.
inline double data_term(const RegistrationParams& p, const Tensor& i1, const Tensor& it,
                        double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("data_term: sigma must be positive");
  RegOutput o = predict_displacement(p, i1, it);
  return warp_mse(i1, it, o.u) / (2.0 * sigma * sigma);
}

// Mean over pixels of sum over channels of ((-a lap + b) u)^2.
inline double reg_term(const Tensor& u, const RegOperatorConfig& op) {
  check_rank(u, 3, "reg_term");
  Tensor lu(u.shape);
  ad::apply_smoothness_operator(u, lu, op.a, op.b);
  double acc = 0.0;
  for (int64_t i = 0; i < lu.size(); ++i) acc += lu[i] * lu[i];
  const double n_px = static_cast<double>(u.shape[1]) * u.shape[2];
  return acc / n_px;
}

}  // namespace densecine
