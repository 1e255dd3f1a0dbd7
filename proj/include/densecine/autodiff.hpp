#pragma once

// Tape-based reverse-mode differentiation over Tensor, double precision
// throughout.  Operations append nodes in execution order, so iterating the
// tape backwards is a valid topological order; each node's backward closure
// pulls the node's gradient and accumulates into its parents.  The op set is
// exactly what the registration network, the regression heads and the loss
// terms need -- nothing speculative.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "densecine/tensor.hpp"

namespace densecine::ad {

enum class Pad { kZero, kCircularRows };

// (-a lap + b) v per channel with zero-Neumann borders (missing neighbours
// contribute nothing).  Shared by the tape penalty and the plain evaluators.
inline void apply_smoothness_operator(const Tensor& v, Tensor& out, double a, double b) {
  const int ch_n = v.dim(0), hh = v.dim(1), ww = v.dim(2);
  for (int ch = 0; ch < ch_n; ++ch)
    for (int r = 0; r < hh; ++r)
      for (int c = 0; c < ww; ++c) {
        const double center = v.at(ch, r, c);
        double lap = 0.0;
        if (r > 0) lap += v.at(ch, r - 1, c) - center;
        if (r < hh - 1) lap += v.at(ch, r + 1, c) - center;
        if (c > 0) lap += v.at(ch, r, c - 1) - center;
        if (c < ww - 1) lap += v.at(ch, r, c + 1) - center;
        out.at(ch, r, c) = -a * lap + b * center;
      }
}

class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated on demand during backward
    std::function<void(Tape&, int)> back;
  };

  std::vector<Node> nodes;

  int leaf(const Tensor& t) {
    nodes.push_back({t, Tensor{}, nullptr});
    return static_cast<int>(nodes.size()) - 1;
  }

  Tensor& val(int id) { return nodes[static_cast<size_t>(id)].val; }
  const Tensor& val(int id) const { return nodes[static_cast<size_t>(id)].val; }

  // Gradient tensor of a node, allocating zeros on first touch.
  Tensor& grad(int id) {
    Node& n = nodes[static_cast<size_t>(id)];
    if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes[static_cast<size_t>(id)].grad.v.empty(); }

  void backward(int loss) {
    if (val(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar node");
    grad(loss)[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes[static_cast<size_t>(id)];
      if (!n.grad.v.empty() && n.back) n.back(*this, id);
    }
  }

  // ---- arithmetic ----------------------------------------------------------

  int add(int a, int b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("add: shape mismatch");
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    const int id = leaf(out);
    nodes.back().back = [a, b](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& ga = t.grad(a);
      Tensor& gb = t.grad(b);
      for (int64_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    };
    return id;
  }

  int scale(int a, double c) {
    Tensor out = val(a);
    for (double& x : out.v) x *= c;
    const int id = leaf(out);
    nodes.back().back = [a, c](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& ga = t.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
    return id;
  }

  int tanh_op(int a) {
    Tensor out = val(a);
    for (double& x : out.v) x = std::tanh(x);
    const int id = leaf(out);
    nodes.back().back = [a](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.val(self);
      Tensor& ga = t.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
    return id;
  }

  // Weighted sum of scalar nodes.
  int wsum(const std::vector<int>& ids, const std::vector<double>& coeffs) {
    if (ids.size() != coeffs.size()) throw std::invalid_argument("wsum: size mismatch");
    Tensor out({1});
    for (size_t i = 0; i < ids.size(); ++i) {
      if (val(ids[i]).size() != 1) throw std::invalid_argument("wsum: inputs must be scalars");
      out[0] += coeffs[i] * val(ids[i])[0];
    }
    const int id = leaf(out);
    nodes.back().back = [ids, coeffs](Tape& t, int self) {
      const double g = t.grad(self)[0];
      for (size_t i = 0; i < ids.size(); ++i) t.grad(ids[i])[0] += coeffs[i] * g;
    };
    return id;
  }

  // ---- convolution / pooling -------------------------------------------------

  // x: [Ci,H,W], w: [Co,Ci,k,k], b: [Co] -> [Co,H,W].  k must be 1 or 3.
  // Pad::kZero pads both dims with zeros; Pad::kCircularRows wraps dim 0
  // (rows) periodically and zero-pads dim 1.
  int conv2d(int x, int w, int b, Pad pad = Pad::kZero) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    check_rank(vx, 3, "conv2d.x");
    check_rank(vw, 4, "conv2d.w");
    const int ci = vx.dim(0), hh = vx.dim(1), ww = vx.dim(2);
    const int co = vw.dim(0), k = vw.dim(2);
    if (vw.dim(1) != ci || vw.dim(3) != k || (k != 1 && k != 3))
      throw std::invalid_argument("conv2d: weight shape " + vw.shape_str() +
                                  " incompatible with input " + vx.shape_str());
    if (vb.size() != co) throw std::invalid_argument("conv2d: bias size mismatch");
    Tensor out({co, hh, ww});
    for (int o = 0; o < co; ++o) {
      double* op = out.data() + static_cast<int64_t>(o) * hh * ww;
      for (int64_t i = 0; i < static_cast<int64_t>(hh) * ww; ++i) op[i] = vb[o];
    }
    conv_accum(vx, vw, out, pad);
    const int id = leaf(out);
    nodes.back().back = [x, w, b, pad](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const Tensor& vx2 = t.val(x);
      const Tensor& vw2 = t.val(w);
      // bias gradient
      {
        Tensor& gb = t.grad(b);
        const int co2 = g.dim(0);
        const int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
        for (int o = 0; o < co2; ++o) {
          double s = 0.0;
          const double* gp = g.data() + o * plane;
          for (int64_t i = 0; i < plane; ++i) s += gp[i];
          gb[o] += s;
        }
      }
      conv_input_grad(g, vw2, t.grad(x), pad);
      conv_weight_grad(g, vx2, t.grad(w), pad);
    };
    return id;
  }

  // 2x2 average pooling; spatial dims must be even.
  int avgpool2(int x) {
    const Tensor& vx = val(x);
    check_rank(vx, 3, "avgpool2.x");
    const int cc = vx.dim(0), hh = vx.dim(1), ww = vx.dim(2);
    if (hh % 2 || ww % 2) throw std::invalid_argument("avgpool2: odd spatial size");
    Tensor out({cc, hh / 2, ww / 2});
    for (int c = 0; c < cc; ++c)
      for (int y = 0; y < hh / 2; ++y)
        for (int xx = 0; xx < ww / 2; ++xx)
          out.at(c, y, xx) = 0.25 * (vx.at(c, 2 * y, 2 * xx) + vx.at(c, 2 * y, 2 * xx + 1) +
                                     vx.at(c, 2 * y + 1, 2 * xx) + vx.at(c, 2 * y + 1, 2 * xx + 1));
    const int id = leaf(out);
    nodes.back().back = [x](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& gx = t.grad(x);
      const int cc2 = g.dim(0), h2 = g.dim(1), w2 = g.dim(2);
      for (int c = 0; c < cc2; ++c)
        for (int y = 0; y < h2; ++y)
          for (int xx = 0; xx < w2; ++xx) {
            const double v = 0.25 * g.at(c, y, xx);
            gx.at(c, 2 * y, 2 * xx) += v;
            gx.at(c, 2 * y, 2 * xx + 1) += v;
            gx.at(c, 2 * y + 1, 2 * xx) += v;
            gx.at(c, 2 * y + 1, 2 * xx + 1) += v;
          }
    };
    return id;
  }

  // Nearest-neighbour 2x upsampling.
  int upsample2(int x) {
    const Tensor& vx = val(x);
    check_rank(vx, 3, "upsample2.x");
    const int cc = vx.dim(0), hh = vx.dim(1), ww = vx.dim(2);
    Tensor out({cc, 2 * hh, 2 * ww});
    for (int c = 0; c < cc; ++c)
      for (int y = 0; y < 2 * hh; ++y)
        for (int xx = 0; xx < 2 * ww; ++xx) out.at(c, y, xx) = vx.at(c, y / 2, xx / 2);
    const int id = leaf(out);
    nodes.back().back = [x](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& gx = t.grad(x);
      const int cc2 = gx.dim(0), hh2 = gx.dim(1), ww2 = gx.dim(2);
      for (int c = 0; c < cc2; ++c)
        for (int y = 0; y < 2 * hh2; ++y)
          for (int xx = 0; xx < 2 * ww2; ++xx) gx.at(c, y / 2, xx / 2) += g.at(c, y, xx);
    };
    return id;
  }

  int concat_c(int a, int b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    check_rank(va, 3, "concat_c.a");
    check_rank(vb, 3, "concat_c.b");
    if (va.dim(1) != vb.dim(1) || va.dim(2) != vb.dim(2))
      throw std::invalid_argument("concat_c: spatial mismatch");
    Tensor out({va.dim(0) + vb.dim(0), va.dim(1), va.dim(2)});
    std::copy(va.v.begin(), va.v.end(), out.v.begin());
    std::copy(vb.v.begin(), vb.v.end(), out.v.begin() + va.size());
    const int64_t na = va.size();  // before leaf(): push_back invalidates va/vb
    const int id = leaf(out);
    nodes.back().back = [a, b, na](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& ga = t.grad(a);
      Tensor& gb = t.grad(b);
      for (int64_t i = 0; i < na; ++i) ga[i] += g[i];
      for (int64_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
    };
    return id;
  }

  int flatten(int x) {
    Tensor out({static_cast<int>(val(x).size())});
    out.v = val(x).v;
    const int id = leaf(out);
    nodes.back().back = [x](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& gx = t.grad(x);
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    return id;
  }

  // x: [n], w: [m,n], b: [m] -> [m]
  int linear(int x, int w, int b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    check_rank(vx, 1, "linear.x");
    check_rank(vw, 2, "linear.w");
    const int m = vw.dim(0), n = vw.dim(1);
    if (vx.size() != n || vb.size() != m)
      throw std::invalid_argument("linear: shape mismatch");
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
      double s = vb[i];
      const double* wp = vw.data() + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) s += wp[j] * vx[j];
      out[i] = s;
    }
    const int id = leaf(out);
    nodes.back().back = [x, w, b](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const Tensor& vx2 = t.val(x);
      const Tensor& vw2 = t.val(w);
      Tensor& gx = t.grad(x);
      Tensor& gw = t.grad(w);
      Tensor& gb = t.grad(b);
      const int m2 = vw2.dim(0), n2 = vw2.dim(1);
      for (int i = 0; i < m2; ++i) {
        const double gi = g[i];
        gb[i] += gi;
        const double* wp = vw2.data() + static_cast<int64_t>(i) * n2;
        double* gwp = gw.data() + static_cast<int64_t>(i) * n2;
        for (int j = 0; j < n2; ++j) {
          gx[j] += wp[j] * gi;
          gwp[j] += vx2[j] * gi;
        }
      }
    };
    return id;
  }

  // Columns [N] -> matrix [N, T].
  int stack_cols(const std::vector<int>& cols) {
    if (cols.empty()) throw std::invalid_argument("stack_cols: empty");
    const int n = static_cast<int>(val(cols[0]).size());
    const int tt = static_cast<int>(cols.size());
    Tensor out({n, tt});
    for (int t = 0; t < tt; ++t) {
      const Tensor& c = val(cols[static_cast<size_t>(t)]);
      if (c.size() != n) throw std::invalid_argument("stack_cols: column size mismatch");
      for (int i = 0; i < n; ++i) out.at(i, t) = c[i];
    }
    const int id = leaf(out);
    nodes.back().back = [cols](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const int n2 = g.dim(0), tt2 = g.dim(1);
      for (int j = 0; j < tt2; ++j) {
        Tensor& gc = t.grad(cols[static_cast<size_t>(j)]);
        for (int i = 0; i < n2; ++i) gc[i] += g.at(i, j);
      }
    };
    return id;
  }

  // Same data, new shape (element count must match); gradient passes through.
  int reshape(int x, const std::vector<int>& shape) {
    Tensor out(shape);
    const Tensor& vx = val(x);
    if (out.size() != vx.size()) throw std::invalid_argument("reshape: element count mismatch");
    out.v = vx.v;
    const int id = leaf(out);
    nodes.back().back = [x](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      Tensor& gx = t.grad(x);
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    return id;
  }

  // Shared per-row linear map: x [C, N, T], w [C*T], b [1] -> out [N] with
  // out[n] = sum_{c,t} x(c,n,t) * w[c*T + t] + b.  The same weights act on
  // every row, so the map is equivariant to row (sector) relabeling.
  int row_linear(int x, int w, int b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    check_rank(vx, 3, "row_linear.x");
    const int c = vx.dim(0), n = vx.dim(1), tt = vx.dim(2);
    if (vw.size() != static_cast<int64_t>(c) * tt || vb.size() != 1)
      throw std::invalid_argument("row_linear: weight/bias shape mismatch");
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
      double s = vb[0];
      for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < tt; ++t) s += vx.at(ch, i, t) * vw[static_cast<int64_t>(ch) * tt + t];
      out[i] = s;
    }
    const int id = leaf(out);
    nodes.back().back = [x, w, b, c, n, tt](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      const Tensor& vx2 = tp.val(x);
      const Tensor& vw2 = tp.val(w);
      Tensor& gx = tp.grad(x);
      Tensor& gw = tp.grad(w);
      Tensor& gb = tp.grad(b);
      for (int i = 0; i < n; ++i) {
        const double gi = g[i];
        gb[0] += gi;
        for (int ch = 0; ch < c; ++ch)
          for (int t = 0; t < tt; ++t) {
            gx.at(ch, i, t) += gi * vw2[static_cast<int64_t>(ch) * tt + t];
            gw[static_cast<int64_t>(ch) * tt + t] += gi * vx2.at(ch, i, t);
          }
      }
    };
    return id;
  }

  // ---- image / field operations ------------------------------------------------

  // Warp a constant image by the displacement node u [2,H,W]: out(x) = img(x + u(x)).
  int warp_const(const Tensor& img, int u) {
    const Tensor& vu = val(u);
    check_rank(img, 2, "warp_const.img");
    check_rank(vu, 3, "warp_const.u");
    const int hh = img.dim(0), ww = img.dim(1);
    if (vu.dim(0) != 2 || vu.dim(1) != hh || vu.dim(2) != ww)
      throw std::invalid_argument("warp_const: displacement shape mismatch");
    Tensor out({hh, ww});
    for (int r = 0; r < hh; ++r)
      for (int c = 0; c < ww; ++c) {
        double dr, dc;
        out.at(r, c) =
            sample_with_grad(img, r + vu.at(0, r, c), c + vu.at(1, r, c), dr, dc);
      }
    const int id = leaf(out);
    Tensor img_copy = img;  // the closure must own the constant
    nodes.back().back = [u, img_copy](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const Tensor& vu2 = t.val(u);
      Tensor& gu = t.grad(u);
      const int hh2 = img_copy.dim(0), ww2 = img_copy.dim(1);
      for (int r = 0; r < hh2; ++r)
        for (int c = 0; c < ww2; ++c) {
          double dr, dc;
          sample_with_grad(img_copy, r + vu2.at(0, r, c), c + vu2.at(1, r, c), dr, dc);
          gu.at(0, r, c) += g.at(r, c) * dr;
          gu.at(1, r, c) += g.at(r, c) * dc;
        }
    };
    return id;
  }

  // Mean squared difference against a constant target: mean((x - y)^2).
  int sq_diff_mean(int x, const Tensor& target) {
    const Tensor& vx = val(x);
    if (!vx.same_shape(target)) throw std::invalid_argument("sq_diff_mean: shape mismatch");
    Tensor out({1});
    const double inv = 1.0 / static_cast<double>(vx.size());
    for (int64_t i = 0; i < vx.size(); ++i) {
      const double d = vx[i] - target[i];
      out[0] += d * d;
    }
    out[0] *= inv;
    const int id = leaf(out);
    Tensor tgt = target;
    nodes.back().back = [x, tgt, inv](Tape& t, int self) {
      const double g = t.grad(self)[0];
      const Tensor& vx2 = t.val(x);
      Tensor& gx = t.grad(x);
      for (int64_t i = 0; i < vx2.size(); ++i) gx[i] += g * 2.0 * inv * (vx2[i] - tgt[i]);
    };
    return id;
  }

  // Sum of squares (used for the weight-decay terms).
  int sumsq(int x) {
    const Tensor& vx = val(x);
    Tensor out({1});
    for (double v : vx.v) out[0] += v * v;
    const int id = leaf(out);
    nodes.back().back = [x](Tape& t, int self) {
      const double g = t.grad(self)[0];
      const Tensor& vx2 = t.val(x);
      Tensor& gx = t.grad(x);
      for (int64_t i = 0; i < vx2.size(); ++i) gx[i] += 2.0 * g * vx2[i];
    };
    return id;
  }

  // Smoothness penalty mean_px sum_ch ((-a lap + b) u_ch)^2 with zero-Neumann
  // borders (missing neighbours contribute nothing to the Laplacian).
  int reg_penalty(int u, double a, double b) {
    const Tensor& vu = val(u);
    check_rank(vu, 3, "reg_penalty.u");
    if (vu.dim(0) != 2) throw std::invalid_argument("reg_penalty: expected [2,H,W]");
    const int hh = vu.dim(1), ww = vu.dim(2);
    const double inv = 1.0 / (static_cast<double>(hh) * ww);
    Tensor out({1});
    Tensor lu({2, hh, ww});
    apply_smoothness_operator(vu, lu, a, b);
    for (double v : lu.v) out[0] += v * v;
    out[0] *= inv;
    const int id = leaf(out);
    nodes.back().back = [u, a, b, inv](Tape& t, int self) {
      const double g = t.grad(self)[0];
      const Tensor& vu2 = t.val(u);
      Tensor lu2({2, vu2.dim(1), vu2.dim(2)});
      apply_smoothness_operator(vu2, lu2, a, b);
      Tensor llu({2, vu2.dim(1), vu2.dim(2)});
      apply_smoothness_operator(lu2, llu, a, b);  // operator is self-adjoint
      Tensor& gu = t.grad(u);
      for (int64_t i = 0; i < gu.size(); ++i) gu[i] += g * 2.0 * inv * llu[i];
    };
    return id;
  }

  // Best rank-k projection of a matrix node [N,T].  The backward pass uses the
  // fixed left/right subspaces of the forward decomposition (projector form
  // U_k U_k^T G V_k V_k^T); subspace rotation is deliberately not tracked.
  int svd_project(int s, int k) {
    const Tensor& vs = val(s);
    check_rank(vs, 2, "svd_project.s");
    if (k < 1) throw std::invalid_argument("svd_project: rank must be >= 1");
    const int nn = vs.dim(0), tt = vs.dim(1);
    if (k >= std::min(nn, tt)) {
      // full rank: identity with pass-through gradient
      Tensor out = vs;
      const int id = leaf(out);
      nodes.back().back = [s](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gs = t.grad(s);
        for (int64_t i = 0; i < g.size(); ++i) gs[i] += g[i];
      };
      return id;
    }
    Eigen::MatrixXd m(nn, tt);
    for (int i = 0; i < nn; ++i)
      for (int j = 0; j < tt; ++j) m(i, j) = vs.at(i, j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::MatrixXd uk = svd.matrixU().leftCols(k);
    const Eigen::MatrixXd vk = svd.matrixV().leftCols(k);
    Eigen::MatrixXd rec = uk * svd.singularValues().head(k).asDiagonal() * vk.transpose();
    Tensor out({nn, tt});
    for (int i = 0; i < nn; ++i)
      for (int j = 0; j < tt; ++j) out.at(i, j) = rec(i, j);
    const int id = leaf(out);
    nodes.back().back = [s, uk, vk](Tape& t, int self) {
      const Tensor& g = t.grad(self);
      const int n2 = g.dim(0), t2 = g.dim(1);
      Eigen::MatrixXd gm(n2, t2);
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < t2; ++j) gm(i, j) = g.at(i, j);
      Eigen::MatrixXd proj = uk * (uk.transpose() * gm * vk) * vk.transpose();
      Tensor& gs = t.grad(s);
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < t2; ++j) gs.at(i, j) += proj(i, j);
    };
    return id;
  }

 private:
  // out(r,c) sampled bilinearly with border clamp; dr/dc receive the partial
  // derivatives w.r.t. the (unclamped) sample position.
  static double sample_with_grad(const Tensor& img, double r, double c, double& dr,
                                 double& dc) {
    const int hh = img.dim(0), ww = img.dim(1);
    const bool rin = r > 0.0 && r < hh - 1;
    const bool cin = c > 0.0 && c < ww - 1;
    r = std::clamp(r, 0.0, static_cast<double>(hh - 1));
    c = std::clamp(c, 0.0, static_cast<double>(ww - 1));
    int r0 = static_cast<int>(r);
    int c0 = static_cast<int>(c);
    if (r0 >= hh - 1) r0 = hh - 2 >= 0 ? hh - 2 : 0;
    if (c0 >= ww - 1) c0 = ww - 2 >= 0 ? ww - 2 : 0;
    const int r1 = std::min(r0 + 1, hh - 1);
    const int c1 = std::min(c0 + 1, ww - 1);
    const double fr = r - r0, fc = c - c0;
    const double i00 = img.at(r0, c0), i01 = img.at(r0, c1);
    const double i10 = img.at(r1, c0), i11 = img.at(r1, c1);
    dr = rin ? (1 - fc) * (i10 - i00) + fc * (i11 - i01) : 0.0;
    dc = cin ? (1 - fr) * (i01 - i00) + fr * (i11 - i10) : 0.0;
    return (1 - fr) * (1 - fc) * i00 + (1 - fr) * fc * i01 + fr * (1 - fc) * i10 +
           fr * fc * i11;
  }

  // One output row of a 3-tap horizontal correlation: acc[x] += w0*row[x-1] +
  // w1*row[x] + w2*row[x+1], zero beyond the row ends.  The fused interior
  // loop keeps the whole update in registers/L1 and vectorizes.
  static void row_tap3(double* acc, const double* row, int ww, double w0, double w1,
                       double w2) {
    if (ww == 1) {
      acc[0] += w1 * row[0];
      return;
    }
    acc[0] += w1 * row[0] + w2 * row[1];
    for (int x = 1; x < ww - 1; ++x) acc[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
    acc[ww - 1] += w0 * row[ww - 2] + w1 * row[ww - 1];
  }

  // Three row dot products sharing one pass: accK += g[x] * row[x + K - 1].
  static void row_dot3(const double* g, const double* row, int ww, double& a0, double& a1,
                       double& a2) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    if (ww == 1) {
      a1 += g[0] * row[0];
      return;
    }
    s1 += g[0] * row[0];
    s2 += g[0] * row[1];
    for (int x = 1; x < ww - 1; ++x) {
      const double gx = g[x];
      s0 += gx * row[x - 1];
      s1 += gx * row[x];
      s2 += gx * row[x + 1];
    }
    s0 += g[ww - 1] * row[ww - 2];
    s1 += g[ww - 1] * row[ww - 1];
    a0 += s0;
    a1 += s1;
    a2 += s2;
  }

  // out[co] += sum_{ci,ky,kx} w * in (shifted).
  static void conv_accum(const Tensor& in, const Tensor& w, Tensor& out, Pad pad) {
    const int ci = in.dim(0), hh = in.dim(1), ww = in.dim(2);
    const int co = w.dim(0), k = w.dim(2), p = k / 2;
    const int64_t plane = static_cast<int64_t>(hh) * ww;
    if (pad == Pad::kZero && k == 3) {
      for (int o = 0; o < co; ++o)
        for (int y = 0; y < hh; ++y) {
          double* op = out.data() + o * plane + static_cast<int64_t>(y) * ww;
          for (int i = 0; i < ci; ++i) {
            const double* wp = w.data() + (static_cast<int64_t>(o) * ci + i) * 9;
            const double* iplane = in.data() + i * plane;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = y + ky - 1;
              if (iy < 0 || iy >= hh) continue;
              row_tap3(op, iplane + static_cast<int64_t>(iy) * ww, ww, wp[3 * ky],
                       wp[3 * ky + 1], wp[3 * ky + 2]);
            }
          }
        }
      return;
    }
    if (pad == Pad::kZero && k == 1) {
      for (int o = 0; o < co; ++o) {
        double* op = out.data() + o * plane;
        for (int i = 0; i < ci; ++i) {
          const double wv = w.at(o, i, 0, 0);
          const double* ip = in.data() + i * plane;
          for (int64_t x = 0; x < plane; ++x) op[x] += wv * ip[x];
        }
      }
      return;
    }
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const double wv = w.at(o, i, ky, kx);
            if (wv == 0.0) continue;
            const int xlo = std::max(0, p - kx), xhi = std::min(ww, ww + p - kx);
            for (int y = 0; y < hh; ++y) {
              int iy = y + ky - p;
              if (pad == Pad::kCircularRows)
                iy = (iy % hh + hh) % hh;
              else if (iy < 0 || iy >= hh)
                continue;
              double* op = out.data() + (static_cast<int64_t>(o) * hh + y) * ww;
              const double* ip =
                  in.data() + (static_cast<int64_t>(i) * hh + iy) * ww + (kx - p);
              for (int x = xlo; x < xhi; ++x) op[x] += wv * ip[x];
            }
          }
  }

  static void conv_input_grad(const Tensor& gout, const Tensor& w, Tensor& gin, Pad pad) {
    const int ci = gin.dim(0), hh = gin.dim(1), ww = gin.dim(2);
    const int co = w.dim(0), k = w.dim(2), p = k / 2;
    const int64_t plane = static_cast<int64_t>(hh) * ww;
    if (pad == Pad::kZero && k == 3) {
      // gin(i, y, x) += sum_{o,ky,kx} w(o,i,ky,kx) * gout(o, y-ky+1, x-kx+1):
      // the same 3-tap row kernel with the weight order flipped.
      for (int i = 0; i < ci; ++i)
        for (int y = 0; y < hh; ++y) {
          double* ip = gin.data() + i * plane + static_cast<int64_t>(y) * ww;
          for (int o = 0; o < co; ++o) {
            const double* wp = w.data() + (static_cast<int64_t>(o) * ci + i) * 9;
            const double* gplane = gout.data() + o * plane;
            for (int ky = 0; ky < 3; ++ky) {
              const int gy = y - ky + 1;
              if (gy < 0 || gy >= hh) continue;
              row_tap3(ip, gplane + static_cast<int64_t>(gy) * ww, ww, wp[3 * ky + 2],
                       wp[3 * ky + 1], wp[3 * ky]);
            }
          }
        }
      return;
    }
    if (pad == Pad::kZero && k == 1) {
      for (int i = 0; i < ci; ++i) {
        double* ip = gin.data() + i * plane;
        for (int o = 0; o < co; ++o) {
          const double wv = w.at(o, i, 0, 0);
          const double* gp = gout.data() + o * plane;
          for (int64_t x = 0; x < plane; ++x) ip[x] += wv * gp[x];
        }
      }
      return;
    }
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const double wv = w.at(o, i, ky, kx);
            if (wv == 0.0) continue;
            const int xlo = std::max(0, p - kx), xhi = std::min(ww, ww + p - kx);
            for (int y = 0; y < hh; ++y) {
              int iy = y + ky - p;
              if (pad == Pad::kCircularRows)
                iy = (iy % hh + hh) % hh;
              else if (iy < 0 || iy >= hh)
                continue;
              const double* gp = gout.data() + (static_cast<int64_t>(o) * hh + y) * ww;
              double* ip = gin.data() + (static_cast<int64_t>(i) * hh + iy) * ww + (kx - p);
              for (int x = xlo; x < xhi; ++x) ip[x] += wv * gp[x];
            }
          }
  }

  static void conv_weight_grad(const Tensor& gout, const Tensor& in, Tensor& gw, Pad pad) {
    const int ci = in.dim(0), hh = in.dim(1), ww = in.dim(2);
    const int co = gw.dim(0), k = gw.dim(2), p = k / 2;
    const int64_t plane = static_cast<int64_t>(hh) * ww;
    if (pad == Pad::kZero && k == 3) {
      for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) {
          double* wp = gw.data() + (static_cast<int64_t>(o) * ci + i) * 9;
          for (int ky = 0; ky < 3; ++ky) {
            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
            for (int y = 0; y < hh; ++y) {
              const int iy = y + ky - 1;
              if (iy < 0 || iy >= hh) continue;
              row_dot3(gout.data() + o * plane + static_cast<int64_t>(y) * ww,
                       in.data() + i * plane + static_cast<int64_t>(iy) * ww, ww, a0, a1, a2);
            }
            wp[3 * ky] += a0;
            wp[3 * ky + 1] += a1;
            wp[3 * ky + 2] += a2;
          }
        }
      return;
    }
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            double acc = 0.0;
            const int xlo = std::max(0, p - kx), xhi = std::min(ww, ww + p - kx);
            for (int y = 0; y < hh; ++y) {
              int iy = y + ky - p;
              if (pad == Pad::kCircularRows)
                iy = (iy % hh + hh) % hh;
              else if (iy < 0 || iy >= hh)
                continue;
              const double* gp = gout.data() + (static_cast<int64_t>(o) * hh + y) * ww;
              const double* ip =
                  in.data() + (static_cast<int64_t>(i) * hh + iy) * ww + (kx - p);
              for (int x = xlo; x < xhi; ++x) acc += gp[x] * ip[x];
            }
            gw.at(o, i, ky, kx) += acc;
          }
  }
};

}  // namespace densecine::ad
