#pragma once

// Joint model: the strain head mapping latent motion features to an N x T
// strain matrix (with low-rank smoothing), the LMA head regressing per-sector
// activation times from that matrix, the combined training objective, and
// the Adam training loop with validation-best checkpointing.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "densecine/autodiff.hpp"
#include "densecine/io.hpp"
#include "densecine/phantom.hpp"
#include "densecine/registration.hpp"
#include "densecine/rng.hpp"
#include "densecine/strain.hpp"
#include "densecine/tensor.hpp"

namespace densecine {

// Output scaling so freshly initialized heads emit values in the target
// range: strains live in roughly [-0.3, 0] and activation times in tens to
// hundreds of ms, while tanh features are O(1).
inline constexpr double kStrainOutScale = 0.1;
inline constexpr double kTosOutScaleMs = 100.0;

struct LossWeights {
  double sigma = 0.03;     // intensity noise scale in the image-matching term
  double alpha = 1000.0;   // strain supervision
  double lambda_r = 1e-4;  // L2 on registration weights
  double mu = 1e-4;        // L2 on strain-head weights
  double beta = 0.005;     // activation-time supervision
  double gamma = 1e-4;     // L2 on LMA-head weights
  int svd_rank = 6;        // rank of the strain-matrix smoothing projection

  void validate() const {
    if (sigma <= 0 || alpha <= 0 || lambda_r <= 0 || mu <= 0 || beta <= 0 || gamma <= 0)
      throw std::invalid_argument("LossWeights: all weights must be strictly positive");
    if (svd_rank < 1) throw std::invalid_argument("LossWeights: svd_rank must be >= 1");
  }
};

// ---- strain head -----------------------------------------------------------
// One shared tower per frame: 1x1 stem, two residual 3x3 blocks with pooling
// between, then one shared linear map producing that frame's strain column.
// Columns stack into the N x T matrix, which is smoothed by rank-k SVD
// projection.

struct StrainHeadParams {
  int c_z = 0, zh = 0, zw = 0;      // latent input block, per frame
  int n_sectors = 0, t_frames = 0;  // output matrix dims
  int c_feat = 16;
  ConvParam stem;                 // 1x1, c_z -> c_feat
  ConvParam b1a, b1b, b2a, b2b;   // 3x3, c_feat -> c_feat
  Tensor lin_w;                   // [n_sectors, c_feat * (zh/2) * (zw/2)]
  Tensor lin_b;                   // [n_sectors]

  template <class Self, class Fn>
  static void for_each_impl(Self& self, Fn&& fn) {
    auto conv = [&](const char* nm, auto& cp) {
      fn(std::string(nm) + ".w", cp.w);
      fn(std::string(nm) + ".b", cp.b);
    };
    conv("stem", self.stem);
    conv("b1a", self.b1a);
    conv("b1b", self.b1b);
    conv("b2a", self.b2a);
    conv("b2b", self.b2b);
    fn(std::string("lin.w"), self.lin_w);
    fn(std::string("lin.b"), self.lin_b);
  }
  template <class Fn> void for_each(Fn&& fn) { for_each_impl(*this, fn); }
  template <class Fn> void for_each(Fn&& fn) const { for_each_impl(*this, fn); }
};

inline StrainHeadParams init_strain_head(int c_z, int zh, int zw, int n_sectors, int t_frames,
                                         uint64_t seed, int c_feat = 16) {
  if (zh % 2 != 0 || zw % 2 != 0)
    throw std::invalid_argument("strain head: latent spatial dims must be even");
  if (c_z < 1 || n_sectors < 1 || t_frames < 1 || c_feat < 1)
    throw std::invalid_argument("strain head: dims must be positive");
  Rng rng(derive_seed(seed, 0x5ea));
  StrainHeadParams p;
  p.c_z = c_z;
  p.zh = zh;
  p.zw = zw;
  p.n_sectors = n_sectors;
  p.t_frames = t_frames;
  p.c_feat = c_feat;
  p.stem = detail::make_conv(c_feat, c_z, 1, rng);
  p.b1a = detail::make_conv(c_feat, c_feat, 3, rng);
  p.b1b = detail::make_conv(c_feat, c_feat, 3, rng);
  p.b2a = detail::make_conv(c_feat, c_feat, 3, rng);
  p.b2b = detail::make_conv(c_feat, c_feat, 3, rng);
  const int feat = c_feat * (zh / 2) * (zw / 2);
  p.lin_w = Tensor({n_sectors, feat});
  p.lin_b = Tensor({n_sectors});
  const double s = std::sqrt(1.0 / feat);
  for (int64_t i = 0; i < p.lin_w.size(); ++i) p.lin_w[i] = rng.uniform(-s, s);
  return p;
}

struct StrainHeadRefs {
  UNetRefs::ConvRef stem, b1a, b1b, b2a, b2b;
  int lin_w = -1, lin_b = -1;

  template <class Fn>
  void for_each(Fn&& fn) const {
    auto conv = [&](const char* nm, const UNetRefs::ConvRef& c) {
      fn(std::string(nm) + ".w", c.w);
      fn(std::string(nm) + ".b", c.b);
    };
    conv("stem", stem);
    conv("b1a", b1a);
    conv("b1b", b1b);
    conv("b2a", b2a);
    conv("b2b", b2b);
    fn(std::string("lin.w"), lin_w);
    fn(std::string("lin.b"), lin_b);
  }
};

inline StrainHeadRefs make_strain_leaves(ad::Tape& tp, const StrainHeadParams& p) {
  auto conv = [&](const ConvParam& cp) {
    return UNetRefs::ConvRef{tp.leaf(cp.w), tp.leaf(cp.b)};
  };
  StrainHeadRefs r;
  r.stem = conv(p.stem);
  r.b1a = conv(p.b1a);
  r.b1b = conv(p.b1b);
  r.b2a = conv(p.b2a);
  r.b2b = conv(p.b2b);
  r.lin_w = tp.leaf(p.lin_w);
  r.lin_b = tp.leaf(p.lin_b);
  return r;
}

// z_frames: one [c_z, zh, zw] node per frame, in frame order.  Returns the
// smoothed [N, T] strain-matrix node.
inline int strain_forward_on_tape(ad::Tape& tp, const StrainHeadRefs& r,
                                  const std::vector<int>& z_frames, int svd_rank) {
  if (z_frames.empty()) throw std::invalid_argument("strain head: no frames");
  auto res_block = [&](int x, const UNetRefs::ConvRef& ca, const UNetRefs::ConvRef& cb) {
    int h = tp.tanh_op(tp.conv2d(x, ca.w, ca.b));
    return tp.add(x, tp.conv2d(h, cb.w, cb.b));
  };
  std::vector<int> cols;
  cols.reserve(z_frames.size());
  for (int z : z_frames) {
    int h = tp.tanh_op(tp.conv2d(z, r.stem.w, r.stem.b));
    // one pooling stage only: the sector axis needs the angular resolution
    // of the latent plane, and a second pool folds opposite wall segments
    // into the same cell
    h = tp.avgpool2(res_block(h, r.b1a, r.b1b));
    h = res_block(h, r.b2a, r.b2b);
    cols.push_back(tp.scale(tp.linear(tp.flatten(h), r.lin_w, r.lin_b), kStrainOutScale));
  }
  return tp.svd_project(tp.stack_cols(cols), svd_rank);
}

// Plain inference over a stacked latent tensor [T, c_z, zh, zw].
inline StrainMatrix strain_forward(const StrainHeadParams& p, const Tensor& z_stack,
                                   int svd_rank, double dt_ms) {
  check_rank(z_stack, 4, "strain_forward z");
  if (z_stack.dim(0) != p.t_frames || z_stack.dim(1) != p.c_z || z_stack.dim(2) != p.zh ||
      z_stack.dim(3) != p.zw)
    throw std::invalid_argument("strain_forward: latent stack shape mismatch");
  if (svd_rank > std::min(p.n_sectors, p.t_frames))
    throw std::invalid_argument("strain_forward: svd_rank exceeds min(N, T)");
  ad::Tape tp;
  StrainHeadRefs r = make_strain_leaves(tp, p);
  std::vector<int> zs;
  const int64_t per = static_cast<int64_t>(p.c_z) * p.zh * p.zw;
  for (int t = 0; t < p.t_frames; ++t) {
    Tensor zt({p.c_z, p.zh, p.zw});
    std::copy(z_stack.v.begin() + t * per, z_stack.v.begin() + (t + 1) * per, zt.v.begin());
    zs.push_back(tp.leaf(zt));
  }
  StrainMatrix out;
  out.values = tp.val(strain_forward_on_tape(tp, r, zs, svd_rank));
  out.dt_ms = dt_ms;
  return out;
}

// ---- LMA head --------------------------------------------------------------
// Two 3x3 convolutions over the strain matrix treated as a one-channel image
// (circular padding along the sector axis, zero along time), then one shared
// per-sector linear map to an activation time in ms.

struct LmaHeadParams {
  int n_sectors = 0, t_frames = 0;
  int c_feat = 8;
  ConvParam conv1;  // 1 -> c_feat
  ConvParam conv2;  // c_feat -> c_feat
  Tensor lin_w;     // [c_feat * t_frames]
  Tensor lin_b;     // [1]

  template <class Self, class Fn>
  static void for_each_impl(Self& self, Fn&& fn) {
    fn(std::string("conv1.w"), self.conv1.w);
    fn(std::string("conv1.b"), self.conv1.b);
    fn(std::string("conv2.w"), self.conv2.w);
    fn(std::string("conv2.b"), self.conv2.b);
    fn(std::string("lin.w"), self.lin_w);
    fn(std::string("lin.b"), self.lin_b);
  }
  template <class Fn> void for_each(Fn&& fn) { for_each_impl(*this, fn); }
  template <class Fn> void for_each(Fn&& fn) const { for_each_impl(*this, fn); }
};

inline LmaHeadParams init_lma_head(int n_sectors, int t_frames, uint64_t seed, int c_feat = 8) {
  if (n_sectors < 1 || t_frames < 1 || c_feat < 1)
    throw std::invalid_argument("lma head: dims must be positive");
  Rng rng(derive_seed(seed, 0x17a));
  LmaHeadParams p;
  p.n_sectors = n_sectors;
  p.t_frames = t_frames;
  p.c_feat = c_feat;
  p.conv1 = detail::make_conv(c_feat, 1, 3, rng);
  p.conv2 = detail::make_conv(c_feat, c_feat, 3, rng);
  p.lin_w = Tensor({c_feat * t_frames});
  p.lin_b = Tensor({1});
  const double s = std::sqrt(1.0 / (c_feat * t_frames));
  for (int64_t i = 0; i < p.lin_w.size(); ++i) p.lin_w[i] = rng.uniform(-s, s);
  return p;
}

struct LmaHeadRefs {
  UNetRefs::ConvRef conv1, conv2;
  int lin_w = -1, lin_b = -1;

  template <class Fn>
  void for_each(Fn&& fn) const {
    fn(std::string("conv1.w"), conv1.w);
    fn(std::string("conv1.b"), conv1.b);
    fn(std::string("conv2.w"), conv2.w);
    fn(std::string("conv2.b"), conv2.b);
    fn(std::string("lin.w"), lin_w);
    fn(std::string("lin.b"), lin_b);
  }
};

inline LmaHeadRefs make_lma_leaves(ad::Tape& tp, const LmaHeadParams& p) {
  LmaHeadRefs r;
  r.conv1 = {tp.leaf(p.conv1.w), tp.leaf(p.conv1.b)};
  r.conv2 = {tp.leaf(p.conv2.w), tp.leaf(p.conv2.b)};
  r.lin_w = tp.leaf(p.lin_w);
  r.lin_b = tp.leaf(p.lin_b);
  return r;
}

// strain_matrix: [N, T] node.  Returns the [N] activation-time node (ms).
inline int lma_forward_on_tape(ad::Tape& tp, const LmaHeadRefs& r, int strain_matrix) {
  const Tensor& s = tp.val(strain_matrix);
  check_rank(s, 2, "lma input");
  int x = tp.reshape(strain_matrix, {1, s.dim(0), s.dim(1)});
  x = tp.tanh_op(tp.conv2d(x, r.conv1.w, r.conv1.b, ad::Pad::kCircularRows));
  x = tp.tanh_op(tp.conv2d(x, r.conv2.w, r.conv2.b, ad::Pad::kCircularRows));
  return tp.scale(tp.row_linear(x, r.lin_w, r.lin_b), kTosOutScaleMs);
}

inline TOSCurve lma_forward(const LmaHeadParams& p, const StrainMatrix& s) {
  if (s.n() != p.n_sectors || s.t() != p.t_frames)
    throw std::invalid_argument("lma_forward: strain matrix shape mismatch");
  ad::Tape tp;
  LmaHeadRefs r = make_lma_leaves(tp, p);
  const Tensor& y = tp.val(lma_forward_on_tape(tp, r, tp.leaf(s.values)));
  TOSCurve out;
  out.ms.assign(y.v.begin(), y.v.end());
  return out;
}

// ---- combined model --------------------------------------------------------

struct ModelParams {
  RegistrationParams r;
  StrainHeadParams s;
  LmaHeadParams l;

  template <class Self, class Fn>
  static void for_each_impl(Self& self, Fn&& fn) {
    self.r.for_each([&](const std::string& n, auto& t) { fn("r." + n, t); });
    self.s.for_each([&](const std::string& n, auto& t) { fn("s." + n, t); });
    self.l.for_each([&](const std::string& n, auto& t) { fn("l." + n, t); });
  }
  template <class Fn> void for_each(Fn&& fn) { for_each_impl(*this, fn); }
  template <class Fn> void for_each(Fn&& fn) const { for_each_impl(*this, fn); }

  int64_t count() const {
    int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

// Builds a model sized for images [h, w], n_sectors sectors and t_frames
// prediction frames.  Sub-seeds are derived so the three groups are
// independent streams of one master seed.
inline ModelParams init_model(const UNetConfig& cfg, int h, int w, int n_sectors, int t_frames,
                              uint64_t seed) {
  cfg.validate();
  const int m = cfg.min_extent();
  if (h % m != 0 || w % m != 0)
    throw std::invalid_argument("init_model: image extent not divisible by 2^levels");
  ModelParams p;
  p.r = init_registration(cfg, derive_seed(seed, 1));
  p.s = init_strain_head(cfg.widths.back(), h / m, w / m, n_sectors, t_frames,
                         derive_seed(seed, 2));
  p.l = init_lma_head(n_sectors, t_frames, derive_seed(seed, 3));
  return p;
}

struct ModelRefs {
  UNetRefs r;
  StrainHeadRefs s;
  LmaHeadRefs l;

  template <class Fn>
  void for_each(Fn&& fn) const {
    auto conv = [&](const std::string& nm, const UNetRefs::ConvRef& c) {
      fn(nm + ".w", c.w);
      fn(nm + ".b", c.b);
    };
    for (size_t i = 0; i < r.enc.size(); ++i) {
      conv("r.enc" + std::to_string(i) + "a", r.enc[i][0]);
      conv("r.enc" + std::to_string(i) + "b", r.enc[i][1]);
    }
    conv("r.bota", r.bot[0]);
    conv("r.botb", r.bot[1]);
    for (size_t i = r.dec.size(); i-- > 0;) {
      conv("r.dec" + std::to_string(i) + "a", r.dec[i][0]);
      conv("r.dec" + std::to_string(i) + "b", r.dec[i][1]);
    }
    conv("r.head", r.head);
    s.for_each([&](const std::string& n, int id) { fn("s." + n, id); });
    l.for_each([&](const std::string& n, int id) { fn("l." + n, id); });
  }
};

inline ModelRefs make_model_leaves(ad::Tape& tp, const ModelParams& p) {
  ModelRefs r;
  r.r = make_unet_leaves(tp, p.r);
  r.s = make_strain_leaves(tp, p.s);
  r.l = make_lma_leaves(tp, p.l);
  return r;
}

// ---- loss ------------------------------------------------------------------

// The seven logged components; total must equal their sum.
struct LossBreakdown {
  double data = 0, reg = 0, strain_sup = 0, tos_mse = 0;
  double l2_r = 0, l2_s = 0, l2_l = 0;
  double total = 0;

  double component_sum() const {
    return data + reg + strain_sup + tos_mse + l2_r + l2_s + l2_l;
  }
  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n = {"data",    "reg",  "strain_sup", "tos_mse",
                                               "l2_r",    "l2_s", "l2_l"};
    return n;
  }
  double by_index(int i) const {
    const double* f[] = {&data, &reg, &strain_sup, &tos_mse, &l2_r, &l2_s, &l2_l};
    return *f[i];
  }
};

struct LossNodes {
  int data = -1, reg = -1, strain_sup = -1, tos_mse = -1;
  int l2_r = -1, l2_s = -1, l2_l = -1;
  int total = -1;
  int s_pred = -1;  // [N, T]
  int y_pred = -1;  // [N]
};

inline Tensor tos_to_tensor(const TOSCurve& y) {
  Tensor t({static_cast<int>(y.ms.size())});
  std::copy(y.ms.begin(), y.ms.end(), t.v.begin());
  return t;
}

// Builds the full training graph for one case on the given tape.  Pairs are
// drawn at the prediction-sequence frame times: frame 0 is the reference and
// every frame (including frame 0 itself) is matched against the reference
// warp, so the identity pair anchors the zero column of the strain matrix.
inline LossNodes joint_loss_on_tape(ad::Tape& tp, const ModelRefs& refs, const PhantomCase& cs,
                                    const LossWeights& w, const RegOperatorConfig& op) {
  w.validate();
  const Tensor& frames = cs.dense.frames;
  const int t_n = frames.dim(0), h = frames.dim(1), wd = frames.dim(2);
  if (w.svd_rank > std::min(cs.gt_strain.n(), cs.gt_strain.t()))
    throw std::invalid_argument("joint_loss: svd_rank exceeds min(N, T)");
  if (cs.gt_strain.t() != t_n)
    throw std::invalid_argument("joint_loss: strain matrix frame count mismatch");

  const int64_t per = static_cast<int64_t>(h) * wd;
  Tensor ref({h, wd});
  std::copy(frames.v.begin(), frames.v.begin() + per, ref.v.begin());

  std::vector<int> data_terms, reg_terms, z_frames;
  for (int t = 0; t < t_n; ++t) {
    Tensor mov({h, wd});
    std::copy(frames.v.begin() + t * per, frames.v.begin() + (t + 1) * per, mov.v.begin());
    UNetOut o = unet_forward(tp, refs.r, stack_pair(ref, mov));
    data_terms.push_back(tp.sq_diff_mean(tp.warp_const(ref, o.u), mov));
    reg_terms.push_back(tp.reg_penalty(o.u, op.a, op.b));
    z_frames.push_back(o.z);
  }

  LossNodes out;
  const std::vector<double> ones_d(data_terms.size(), 1.0);
  out.data = tp.scale(tp.wsum(data_terms, ones_d), 1.0 / (2.0 * w.sigma * w.sigma));
  out.reg = tp.wsum(reg_terms, ones_d);

  out.s_pred = strain_forward_on_tape(tp, refs.s, z_frames, w.svd_rank);
  out.strain_sup = tp.scale(tp.sq_diff_mean(out.s_pred, cs.gt_strain.values), w.alpha);

  out.y_pred = lma_forward_on_tape(tp, refs.l, out.s_pred);
  out.tos_mse = tp.scale(tp.sq_diff_mean(out.y_pred, tos_to_tensor(cs.gt_tos)), w.beta);

  auto group_l2 = [&](const std::vector<int>& ids, double coeff) {
    std::vector<int> sq;
    for (int id : ids) sq.push_back(tp.sumsq(id));
    return tp.scale(tp.wsum(sq, std::vector<double>(sq.size(), 1.0)), coeff);
  };
  std::vector<int> r_ids, s_ids, l_ids;
  {
    auto conv = [&](const UNetRefs::ConvRef& c) { r_ids.push_back(c.w); r_ids.push_back(c.b); };
    for (auto& e : refs.r.enc) { conv(e[0]); conv(e[1]); }
    conv(refs.r.bot[0]); conv(refs.r.bot[1]);
    for (auto& d : refs.r.dec) { conv(d[0]); conv(d[1]); }
    conv(refs.r.head);
  }
  refs.s.for_each([&](const std::string&, int id) { s_ids.push_back(id); });
  refs.l.for_each([&](const std::string&, int id) { l_ids.push_back(id); });
  out.l2_r = group_l2(r_ids, w.lambda_r);
  out.l2_s = group_l2(s_ids, w.mu);
  out.l2_l = group_l2(l_ids, w.gamma);

  out.total = tp.wsum({out.data, out.reg, out.strain_sup, out.tos_mse, out.l2_r, out.l2_s,
                       out.l2_l},
                      std::vector<double>(7, 1.0));
  return out;
}

inline LossBreakdown read_breakdown(const ad::Tape& tp, const LossNodes& n) {
  LossBreakdown b;
  b.data = tp.val(n.data)[0];
  b.reg = tp.val(n.reg)[0];
  b.strain_sup = tp.val(n.strain_sup)[0];
  b.tos_mse = tp.val(n.tos_mse)[0];
  b.l2_r = tp.val(n.l2_r)[0];
  b.l2_s = tp.val(n.l2_s)[0];
  b.l2_l = tp.val(n.l2_l)[0];
  b.total = tp.val(n.total)[0];
  return b;
}

// Scalar losses (forward only).  joint == strain_loss + tos_loss by
// construction of the components; the split versions exist for reporting
// and contract tests.
inline LossBreakdown joint_loss(const ModelParams& p, const PhantomCase& cs, const LossWeights& w,
                                const RegOperatorConfig& op = {}) {
  ad::Tape tp;
  LossNodes n = joint_loss_on_tape(tp, make_model_leaves(tp, p), cs, w, op);
  return read_breakdown(tp, n);
}

inline double strain_loss(const ModelParams& p, const PhantomCase& cs, const LossWeights& w,
                          const RegOperatorConfig& op = {}) {
  LossBreakdown b = joint_loss(p, cs, w, op);
  return b.data + b.reg + b.strain_sup + b.l2_r + b.l2_s;
}

inline double tos_loss(const ModelParams& p, const PhantomCase& cs, const LossWeights& w,
                       const RegOperatorConfig& op = {}) {
  LossBreakdown b = joint_loss(p, cs, w, op);
  return b.tos_mse + b.l2_l;
}

// ---- inference -------------------------------------------------------------

struct CasePrediction {
  StrainMatrix strain;  // smoothed N x T prediction
  TOSCurve tos;         // per-sector activation times, ms
};

inline CasePrediction predict_case(const ModelParams& p, const PhantomCase& cs,
                                   const LossWeights& w) {
  ad::Tape tp;
  ModelRefs refs = make_model_leaves(tp, p);
  const Tensor& frames = cs.dense.frames;
  const int t_n = frames.dim(0), h = frames.dim(1), wd = frames.dim(2);
  const int64_t per = static_cast<int64_t>(h) * wd;
  Tensor ref({h, wd});
  std::copy(frames.v.begin(), frames.v.begin() + per, ref.v.begin());
  std::vector<int> z_frames;
  for (int t = 0; t < t_n; ++t) {
    Tensor mov({h, wd});
    std::copy(frames.v.begin() + t * per, frames.v.begin() + (t + 1) * per, mov.v.begin());
    z_frames.push_back(unet_forward(tp, refs.r, stack_pair(ref, mov)).z);
  }
  const int s_pred = strain_forward_on_tape(tp, refs.s, z_frames, w.svd_rank);
  const int y_pred = lma_forward_on_tape(tp, refs.l, s_pred);
  CasePrediction out;
  out.strain.values = tp.val(s_pred);
  out.strain.dt_ms = cs.dense.dt_ms;
  out.tos.ms.assign(tp.val(y_pred).v.begin(), tp.val(y_pred).v.end());
  return out;
}

// ---- optimizer -------------------------------------------------------------

class Adam {
 public:
  explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
    if (lr <= 0) throw std::invalid_argument("Adam: learning rate must be positive");
  }

  void step(const std::string& key, Tensor& param, const Tensor& grad) {
    State& s = state_[key];
    if (s.m.v.empty()) {
      s.m = Tensor(param.shape);
      s.v = Tensor(param.shape);
    }
    check_shape(grad, param.shape, "Adam grad");
    ++s.t;
    const double c1 = 1.0 - std::pow(b1_, s.t);
    const double c2 = 1.0 - std::pow(b2_, s.t);
    for (int64_t i = 0; i < param.size(); ++i) {
      s.m[i] = b1_ * s.m[i] + (1 - b1_) * grad[i];
      s.v[i] = b2_ * s.v[i] + (1 - b2_) * grad[i] * grad[i];
      param[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
    }
  }

 private:
  struct State {
    Tensor m, v;
    int64_t t = 0;
  };
  double lr_, b1_, b2_, eps_;
  std::map<std::string, State> state_;
};

// ---- training --------------------------------------------------------------

struct TrainConfig {
  int epochs = 20;
  int batch_size = 1;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  std::string checkpoint_dir;  // empty = keep everything in memory
  RegOperatorConfig reg_op;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: positive counts");
    if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate > 0");
  }
};

struct EpochStats {
  int epoch = 0;
  LossBreakdown train;  // means over training cases
  double val_tos_mse = 0.0;
};

struct TrainResult {
  ModelParams best;            // checkpoint with the lowest validation TOS MSE
  ModelParams last;            // parameters after the final epoch
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_tos_mse = 0.0;
  // Largest |total - sum(components)| seen on any single case during training.
  double max_component_gap = 0.0;
};

// Unweighted mean squared error between predicted and labeled activation
// times, averaged over sectors then cases; the validation model-selection
// metric.
inline double eval_tos_mse(const ModelParams& p, const std::vector<PhantomCase>& cases,
                           const LossWeights& w) {
  if (cases.empty()) throw std::invalid_argument("eval_tos_mse: empty case list");
  double acc = 0.0;
  for (const PhantomCase& cs : cases) {
    CasePrediction pred = predict_case(p, cs, w);
    double mse = 0.0;
    for (size_t i = 0; i < pred.tos.ms.size(); ++i) {
      const double d = pred.tos.ms[i] - cs.gt_tos.ms[i];
      mse += d * d;
    }
    acc += mse / static_cast<double>(pred.tos.ms.size());
  }
  return acc / static_cast<double>(cases.size());
}

// Optional progress callback: (epoch, stats) after each epoch.
using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainResult train_joint(const std::vector<PhantomCase>& train_set,
                               const std::vector<PhantomCase>& val_set, const LossWeights& w,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  w.validate();
  if (train_set.empty()) throw std::invalid_argument("train_joint: empty training set");
  const PhantomCase& c0 = train_set.front();
  const int h = c0.dense.frames.dim(1), wd = c0.dense.frames.dim(2);
  const int n = c0.gt_strain.n(), t_n = c0.gt_strain.t();

  TrainResult res;
  ModelParams params = init_model(UNetConfig{}, h, wd, n, t_n, cfg.seed);
  Adam opt(cfg.learning_rate);

  // names/pointers in for_each order, reused every step
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  params.for_each([&](const std::string& nm, Tensor& t) {
    names.push_back(nm);
    tensors.push_back(&t);
  });

  std::unique_ptr<io::CsvWriter> log;
  if (!cfg.checkpoint_dir.empty()) {
    io::ensure_dir(cfg.checkpoint_dir);
    log = std::make_unique<io::CsvWriter>(
        cfg.checkpoint_dir + "/training_log.csv",
        std::vector<std::string>{"epoch", "data", "reg", "strain_sup", "tos_mse", "l2_r", "l2_s",
                                 "l2_l", "total"});
  }

  std::vector<Tensor> grad_acc(tensors.size());
  res.best_val_tos_mse = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    LossBreakdown epoch_sum;
    size_t done = 0;
    while (done < order.size()) {
      const size_t b_end = std::min(done + static_cast<size_t>(cfg.batch_size), order.size());
      const double inv_b = 1.0 / static_cast<double>(b_end - done);
      for (Tensor& g : grad_acc) g = Tensor{};
      for (size_t bi = done; bi < b_end; ++bi) {
        const PhantomCase& cs = train_set[order[bi]];
        ad::Tape tp;
        ModelRefs refs = make_model_leaves(tp, params);
        LossNodes nodes = joint_loss_on_tape(tp, refs, cs, w, cfg.reg_op);
        LossBreakdown b = read_breakdown(tp, nodes);
        for (int ci = 0; ci < 7; ++ci)
          if (!std::isfinite(b.by_index(ci)))
            throw std::runtime_error("train_joint: non-finite component '" +
                                     LossBreakdown::names()[static_cast<size_t>(ci)] +
                                     "' at epoch " + std::to_string(epoch) + ", case " +
                                     std::to_string(order[bi]));
        res.max_component_gap =
            std::max(res.max_component_gap, std::abs(b.total - b.component_sum()));
        tp.backward(nodes.total);
        std::vector<int> ids;
        refs.for_each([&](const std::string&, int id) { ids.push_back(id); });
        for (size_t k = 0; k < ids.size(); ++k) {
          if (!tp.has_grad(ids[k])) continue;
          const Tensor& g = tp.grad(ids[k]);
          if (grad_acc[k].v.empty()) grad_acc[k] = Tensor(g.shape);
          for (int64_t i = 0; i < g.size(); ++i) grad_acc[k][i] += inv_b * g[i];
        }
        epoch_sum.data += b.data;
        epoch_sum.reg += b.reg;
        epoch_sum.strain_sup += b.strain_sup;
        epoch_sum.tos_mse += b.tos_mse;
        epoch_sum.l2_r += b.l2_r;
        epoch_sum.l2_s += b.l2_s;
        epoch_sum.l2_l += b.l2_l;
        epoch_sum.total += b.total;
      }
      done = b_end;
      for (size_t k = 0; k < tensors.size(); ++k)
        if (!grad_acc[k].v.empty()) opt.step(names[k], *tensors[k], grad_acc[k]);
    }

    EpochStats st;
    st.epoch = epoch;
    const double inv_n = 1.0 / static_cast<double>(train_set.size());
    st.train.data = epoch_sum.data * inv_n;
    st.train.reg = epoch_sum.reg * inv_n;
    st.train.strain_sup = epoch_sum.strain_sup * inv_n;
    st.train.tos_mse = epoch_sum.tos_mse * inv_n;
    st.train.l2_r = epoch_sum.l2_r * inv_n;
    st.train.l2_s = epoch_sum.l2_s * inv_n;
    st.train.l2_l = epoch_sum.l2_l * inv_n;
    st.train.total = epoch_sum.total * inv_n;
    // Validation metric under the post-update parameters; with no validation
    // split the unweighted training TOS MSE stands in.
    st.val_tos_mse = val_set.empty() ? st.train.tos_mse / w.beta : eval_tos_mse(params, val_set, w);
    res.history.push_back(st);

    if (st.val_tos_mse < res.best_val_tos_mse) {
      res.best_val_tos_mse = st.val_tos_mse;
      res.best_epoch = epoch;
      res.best = params;
    }
    if (log)
      log->row({static_cast<double>(epoch), st.train.data, st.train.reg, st.train.strain_sup,
                st.train.tos_mse, st.train.l2_r, st.train.l2_s, st.train.l2_l, st.train.total});
    if (on_epoch) on_epoch(st);
  }
  res.last = params;
  if (res.best_epoch < 0) res.best = params;
  return res;
}

// ---- checkpoints -----------------------------------------------------------
// One raw f64 file per named parameter tensor plus a meta.json carrying the
// model dimensions, so a checkpoint reloads without outside context.

inline void save_checkpoint(const std::string& dir, const ModelParams& p) {
  io::ensure_dir(dir);
  nlohmann::json meta;
  meta["kind"] = "densecine_checkpoint";
  meta["model"] = {{"widths", p.r.cfg.widths},
                   {"c_in", p.r.cfg.c_in},
                   {"c_out", p.r.cfg.c_out},
                   {"c_z", p.s.c_z},
                   {"zh", p.s.zh},
                   {"zw", p.s.zw},
                   {"n_sectors", p.s.n_sectors},
                   {"t_frames", p.s.t_frames},
                   {"strain_c_feat", p.s.c_feat},
                   {"lma_c_feat", p.l.c_feat}};
  p.for_each([&](const std::string& name, const Tensor& t) {
    io::save_tensor_entry(meta, dir, name, t, /*f64=*/true);
  });
  io::save_json(dir + "/meta.json", meta);
}

inline ModelParams load_checkpoint(const std::string& dir) {
  nlohmann::json meta = io::load_json(dir + "/meta.json");
  if (meta.value("kind", "") != "densecine_checkpoint")
    throw std::runtime_error("load_checkpoint: " + dir + " is not a checkpoint directory");
  const auto& m = meta.at("model");
  UNetConfig cfg;
  cfg.widths = m.at("widths").get<std::vector<int>>();
  cfg.c_in = m.at("c_in").get<int>();
  cfg.c_out = m.at("c_out").get<int>();
  ModelParams p;
  p.r = init_registration(cfg, 0);
  p.s = init_strain_head(m.at("c_z").get<int>(), m.at("zh").get<int>(), m.at("zw").get<int>(),
                         m.at("n_sectors").get<int>(), m.at("t_frames").get<int>(), 0,
                         m.at("strain_c_feat").get<int>());
  p.l = init_lma_head(m.at("n_sectors").get<int>(), m.at("t_frames").get<int>(), 0,
                      m.at("lma_c_feat").get<int>());
  p.for_each([&](const std::string& name, Tensor& t) {
    Tensor loaded = io::load_tensor_entry(meta, dir, name);
    check_shape(loaded, t.shape, ("checkpoint " + name).c_str());
    t = std::move(loaded);
  });
  return p;
}

}  // namespace densecine
