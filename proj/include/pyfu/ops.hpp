#pragma once
// Differentiable NCHW kernels: convolution, bilinear resize, normalization +
// activation, weighted cross-entropy, and the small glue ops (add, concat,
// crop, scale, reductions). Every op builds its own backward closure.

#include <cmath>
#include <cstring>
#include <limits>
#include <type_traits>

#include "pyfu/tensor.hpp"

namespace pyfu {

// ---- activation -------------------------------------------------------------

struct Activation {
  enum class Kind { identity, leaky_relu };
  Kind kind = Kind::identity;
  double slope = 0.01;

  static Activation identity() { return {}; }
  static Activation leaky(double slope = 0.01) { return {Kind::leaky_relu, slope}; }

  template <typename T>
  T apply(T v) const {
    if (kind == Kind::identity) return v;
    return v > T(0) ? v : T(slope) * v;
  }
  // evaluated at the pre-activation value
  template <typename T>
  T deriv(T pre) const {
    if (kind == Kind::identity) return T(1);
    return pre > T(0) ? T(1) : T(slope);
  }
};

// ---- conv2d -----------------------------------------------------------------

struct ConvGeom {
  int stride_y = 1, stride_x = 1;
  int pad_y = 0, pad_x = 0;
  int dil_y = 1, dil_x = 1;
  int groups = 1;
};

namespace detail {

// Output index range [lo, hi] for one kernel tap so that the corresponding
// input index o*stride - pad + k*dil stays inside [0, in).
struct TapRange {
  int lo, hi;
  bool empty() const { return lo > hi; }
};

inline TapRange tap_range(int k, int stride, int pad, int dil, int in, int out) {
  const int shift = pad - k * dil;  // input index = o*stride - shift
  int lo = shift > 0 ? (shift + stride - 1) / stride : 0;
  int hi = std::min(out - 1, (in - 1 + shift) / stride);
  return {lo, hi};
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w,
                  std::type_identity_t<const TensorT<T>*> bias, const ConvGeom& g) {
  const Shape4 xs = x.shape();
  const Shape4 ws = w.shape();
  check(g.stride_y >= 1 && g.stride_x >= 1 && g.dil_y >= 1 && g.dil_x >= 1 && g.groups >= 1,
        "conv2d: stride/dilation/groups must be >= 1");
  check(xs.c % g.groups == 0,
        "conv2d: input channels not divisible by groups, input " + xs.str() + " groups " + std::to_string(g.groups));
  check(ws.n % g.groups == 0,
        "conv2d: output channels not divisible by groups, weight " + ws.str() + " groups " + std::to_string(g.groups));
  check(ws.c == xs.c / g.groups,
        "conv2d: weight shape " + ws.str() + " does not match input " + xs.str() + " with groups " + std::to_string(g.groups));
  if (bias) {
    check(bias->shape() == Shape4{1, ws.n, 1, 1},
          "conv2d: bias shape " + bias->shape().str() + " must be (1," + std::to_string(ws.n) + ",1,1)");
  }
  const int oh = (xs.h + 2 * g.pad_y - g.dil_y * (ws.h - 1) - 1) / g.stride_y + 1;
  const int ow = (xs.w + 2 * g.pad_x - g.dil_x * (ws.w - 1) - 1) / g.stride_x + 1;
  check(xs.h + 2 * g.pad_y >= g.dil_y * (ws.h - 1) + 1 && xs.w + 2 * g.pad_x >= g.dil_x * (ws.w - 1) + 1,
        "conv2d: kernel " + ws.str() + " does not fit input " + xs.str());

  std::vector<std::shared_ptr<NodeT<T>>> parents{x.node(), w.node()};
  if (bias) parents.push_back(bias->node());
  TensorT<T> out = make_op_node<T>("conv2d", Shape4{xs.n, ws.n, oh, ow}, std::move(parents));

  const int cg = xs.c / g.groups;   // input channels per group
  const int ocg = ws.n / g.groups;  // output channels per group
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = bias ? bias->data() : nullptr;
  T* op = out.data();

  // plane-sweep: accumulate one kernel tap over its whole valid output range
  const int64_t kernel_work = int64_t(cg) * ws.h * ws.w * oh * ow;
  parallel_for(0, int64_t(xs.n) * ws.n, [&](int64_t b, int64_t e) {
    for (int64_t t = b; t < e; ++t) {
      const int n = int(t / ws.n);
      const int oc = int(t % ws.n);
      const int grp = oc / ocg;
      const T* wk = wp + int64_t(oc) * cg * ws.h * ws.w;
      T* oplane = op + (int64_t(n) * ws.n + oc) * oh * ow;
      std::fill(oplane, oplane + int64_t(oh) * ow, bp ? bp[oc] : T(0));
      for (int ic = 0; ic < cg; ++ic) {
        const T* xplane = xp + (int64_t(n) * xs.c + grp * cg + ic) * xs.h * xs.w;
        const T* wrow = wk + int64_t(ic) * ws.h * ws.w;
        for (int ky = 0; ky < ws.h; ++ky) {
          const auto ry = detail::tap_range(ky, g.stride_y, g.pad_y, g.dil_y, xs.h, oh);
          if (ry.empty()) continue;
          for (int kx = 0; kx < ws.w; ++kx) {
            const auto rx = detail::tap_range(kx, g.stride_x, g.pad_x, g.dil_x, xs.w, ow);
            if (rx.empty()) continue;
            const T wv = wrow[ky * ws.w + kx];
            for (int oy = ry.lo; oy <= ry.hi; ++oy) {
              const int iy = oy * g.stride_y - g.pad_y + ky * g.dil_y;
              const T* __restrict xrow = xplane + int64_t(iy) * xs.w - g.pad_x + kx * g.dil_x;
              T* __restrict orow = oplane + int64_t(oy) * ow;
              if (g.stride_x == 1) {
                for (int ox = rx.lo; ox <= rx.hi; ++ox) orow[ox] += xrow[ox] * wv;
              } else {
                for (int ox = rx.lo; ox <= rx.hi; ++ox)
                  orow[ox] += xrow[int64_t(ox) * g.stride_x] * wv;
              }
            }
          }
        }
      }
    }
  }, std::max<int64_t>(1, 16384 / std::max<int64_t>(1, kernel_work)));

  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias ? bias->node() : nullptr;
    out.node()->backward_fn = [xn, wn, bn, g, xs, ws, oh, ow](NodeT<T>& self) {
      const int cg = xs.c / g.groups;
      const int ocg = ws.n / g.groups;
      const T* gy = self.grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* wv = wn->value.data();
        // scatter per input channel: workers own disjoint gx planes
        parallel_for(0, int64_t(xs.n) * xs.c, [&](int64_t b, int64_t e) {
          for (int64_t t = b; t < e; ++t) {
            const int n = int(t / xs.c);
            const int c = int(t % xs.c);
            const int grp = c / cg;
            const int icg = c % cg;
            T* gxplane = gx + t * xs.h * xs.w;
            for (int ol = 0; ol < ocg; ++ol) {
              const int oc = grp * ocg + ol;
              const T* gyplane = gy + (int64_t(n) * ws.n + oc) * oh * ow;
              const T* wrow = wv + (int64_t(oc) * cg + icg) * ws.h * ws.w;
              for (int ky = 0; ky < ws.h; ++ky) {
                const auto ry = detail::tap_range(ky, g.stride_y, g.pad_y, g.dil_y, xs.h, oh);
                if (ry.empty()) continue;
                for (int kx = 0; kx < ws.w; ++kx) {
                  const auto rx = detail::tap_range(kx, g.stride_x, g.pad_x, g.dil_x, xs.w, ow);
                  if (rx.empty()) continue;
                  const T wvk = wrow[ky * ws.w + kx];
                  for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                    const int iy = oy * g.stride_y - g.pad_y + ky * g.dil_y;
                    T* __restrict gxrow = gxplane + int64_t(iy) * xs.w - g.pad_x + kx * g.dil_x;
                    const T* __restrict gyrow = gyplane + int64_t(oy) * ow;
                    if (g.stride_x == 1) {
                      for (int ox = rx.lo; ox <= rx.hi; ++ox) gxrow[ox] += gyrow[ox] * wvk;
                    } else {
                      for (int ox = rx.lo; ox <= rx.hi; ++ox)
                        gxrow[int64_t(ox) * g.stride_x] += gyrow[ox] * wvk;
                    }
                  }
                }
              }
            }
          }
        }, 1);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* gw = wn->grad.data();
        const T* xv = xn->value.data();
        parallel_for(0, int64_t(ws.n), [&](int64_t b, int64_t e) {
          for (int64_t oc = b; oc < e; ++oc) {
            const int grp = int(oc) / ocg;
            T* gwk = gw + oc * cg * ws.h * ws.w;
            for (int n = 0; n < xs.n; ++n) {
              const T* gyplane = gy + (int64_t(n) * ws.n + oc) * oh * ow;
              for (int ic = 0; ic < cg; ++ic) {
                const T* xplane = xv + (int64_t(n) * xs.c + grp * cg + ic) * xs.h * xs.w;
                T* gwrow = gwk + int64_t(ic) * ws.h * ws.w;
                for (int ky = 0; ky < ws.h; ++ky) {
                  const auto ry = detail::tap_range(ky, g.stride_y, g.pad_y, g.dil_y, xs.h, oh);
                  if (ry.empty()) continue;
                  for (int kx = 0; kx < ws.w; ++kx) {
                    const auto rx = detail::tap_range(kx, g.stride_x, g.pad_x, g.dil_x, xs.w, ow);
                    if (rx.empty()) continue;
                    T acc = T(0);
                    for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                      const int iy = oy * g.stride_y - g.pad_y + ky * g.dil_y;
                      const T* __restrict xrow = xplane + int64_t(iy) * xs.w - g.pad_x + kx * g.dil_x;
                      const T* __restrict gyrow = gyplane + int64_t(oy) * ow;
                      if (g.stride_x == 1) {
                        for (int ox = rx.lo; ox <= rx.hi; ++ox) acc += gyrow[ox] * xrow[ox];
                      } else {
                        for (int ox = rx.lo; ox <= rx.hi; ++ox)
                          acc += gyrow[ox] * xrow[int64_t(ox) * g.stride_x];
                      }
                    }
                    gwrow[ky * ws.w + kx] += acc;
                  }
                }
              }
            }
          }
        }, 1);
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        for (int n = 0; n < xs.n; ++n) {
          for (int oc = 0; oc < ws.n; ++oc) {
            const T* gyplane = gy + (int64_t(n) * ws.n + oc) * oh * ow;
            T acc = T(0);
            for (int64_t i = 0; i < int64_t(oh) * ow; ++i) acc += gyplane[i];
            gb[oc] += acc;
          }
        }
      }
    };
  }
  return out;
}

// ---- bilinear resize ----------------------------------------------------------

namespace detail {

template <typename T>
struct ResizeTaps {
  std::vector<int> i0, i1;
  std::vector<T> frac;
};

template <typename T>
ResizeTaps<T> resize_taps(int out, int in, bool align_corners) {
  ResizeTaps<T> taps;
  taps.i0.resize(size_t(out));
  taps.i1.resize(size_t(out));
  taps.frac.resize(size_t(out));
  for (int o = 0; o < out; ++o) {
    double src;
    if (align_corners) {
      src = out == 1 ? 0.0 : double(o) * double(in - 1) / double(out - 1);
    } else {
      src = (double(o) + 0.5) * double(in) / double(out) - 0.5;
    }
    src = std::min(std::max(src, 0.0), double(in - 1));
    int i0 = int(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps.i0[size_t(o)] = i0;
    taps.i1[size_t(o)] = i1;
    taps.frac[size_t(o)] = T(src - double(i0));
  }
  return taps;
}

}  // namespace detail

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w, bool align_corners) {
  const Shape4 xs = x.shape();
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: target size must be positive, got " +
                                      std::to_string(out_h) + "x" + std::to_string(out_w));
  TensorT<T> out = make_op_node<T>("bilinear_resize", Shape4{xs.n, xs.c, out_h, out_w}, {x.node()});

  if (out_h == xs.h && out_w == xs.w) {
    // same-size resize is the identity
    std::memcpy(out.data(), x.data(), sizeof(T) * size_t(xs.numel()));
    if (out.requires_grad()) {
      auto xn = x.node();
      out.node()->backward_fn = [xn](NodeT<T>& self) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* gy = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += gy[i];
      };
    }
    return out;
  }

  const auto ty = detail::resize_taps<T>(out_h, xs.h, align_corners);
  const auto tx = detail::resize_taps<T>(out_w, xs.w, align_corners);

  const T* xp = x.data();
  T* op = out.data();
  parallel_for(0, int64_t(xs.n) * xs.c, [&](int64_t b, int64_t e) {
    for (int64_t t = b; t < e; ++t) {
      const T* plane = xp + t * xs.h * xs.w;
      T* oplane = op + t * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const int y0 = ty.i0[size_t(oy)], y1 = ty.i1[size_t(oy)];
        const T fy = ty.frac[size_t(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = tx.i0[size_t(ox)], x1 = tx.i1[size_t(ox)];
          const T fx = tx.frac[size_t(ox)];
          const T v00 = plane[int64_t(y0) * xs.w + x0];
          const T v01 = plane[int64_t(y0) * xs.w + x1];
          const T v10 = plane[int64_t(y1) * xs.w + x0];
          const T v11 = plane[int64_t(y1) * xs.w + x1];
          oplane[int64_t(oy) * out_w + ox] =
              (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
        }
      }
    }
  }, 4);

  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, ty, tx, xs, out_h, out_w](NodeT<T>& self) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const T* gy = self.grad.data();
      parallel_for(0, int64_t(xs.n) * xs.c, [&](int64_t b, int64_t e) {
        for (int64_t t = b; t < e; ++t) {
          T* gplane = gx + t * xs.h * xs.w;
          const T* gyplane = gy + t * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = ty.i0[size_t(oy)], y1 = ty.i1[size_t(oy)];
            const T fy = ty.frac[size_t(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
              const int x0 = tx.i0[size_t(ox)], x1 = tx.i1[size_t(ox)];
              const T fx = tx.frac[size_t(ox)];
              const T g = gyplane[int64_t(oy) * out_w + ox];
              gplane[int64_t(y0) * xs.w + x0] += g * (T(1) - fy) * (T(1) - fx);
              gplane[int64_t(y0) * xs.w + x1] += g * (T(1) - fy) * fx;
              gplane[int64_t(y1) * xs.w + x0] += g * fy * (T(1) - fx);
              gplane[int64_t(y1) * xs.w + x1] += g * fy * fx;
            }
          }
        }
      }, 4);
    };
  }
  return out;
}

// ---- normalization + activation -------------------------------------------------
// Per-channel statistics, affine, activation. batch variant computes the
// statistics over (N,H,W) and can report them for running-average updates;
// fixed variant uses supplied statistics (inference).

namespace detail {

template <typename T>
void check_norm_shapes(const Shape4& xs, const TensorT<T>& scale, const TensorT<T>& shift) {
  const Shape4 want{1, xs.c, 1, 1};
  check(scale.shape() == want, "norm_act: scale shape " + scale.shape().str() + " must be " + want.str());
  check(shift.shape() == want, "norm_act: shift shape " + shift.shape().str() + " must be " + want.str());
}

// shared forward/backward once per-channel mean/inv_std are known
template <typename T>
TensorT<T> norm_act_core(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                         std::vector<T> mean, std::vector<T> inv_std, bool batch_stats,
                         Activation act) {
  const Shape4 xs = x.shape();
  TensorT<T> out = make_op_node<T>("norm_act", xs, {x.node(), scale.node(), shift.node()});
  const int64_t plane = int64_t(xs.h) * xs.w;
  const T* xp = x.data();
  const T* sc = scale.data();
  const T* sh = shift.data();
  T* op = out.data();
  parallel_for(0, int64_t(xs.n) * xs.c, [&](int64_t b, int64_t e) {
    for (int64_t t = b; t < e; ++t) {
      const int c = int(t % xs.c);
      const T mu = mean[size_t(c)], is = inv_std[size_t(c)];
      const T a = sc[c], s = sh[c];
      const T* xr = xp + t * plane;
      T* orow = op + t * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const T pre = (xr[i] - mu) * is * a + s;
        orow[i] = act.apply(pre);
      }
    }
  }, 64);

  if (out.requires_grad()) {
    auto xn = x.node();
    auto scn = scale.node();
    auto shn = shift.node();
    out.node()->backward_fn = [xn, scn, shn, mean = std::move(mean), inv_std = std::move(inv_std),
                               batch_stats, act, xs, plane](NodeT<T>& self) {
      const T* gy = self.grad.data();
      const T* xv = xn->value.data();
      const T* sc = scn->value.data();
      const T* sh = shn->value.data();
      const int64_t m = int64_t(xs.n) * plane;  // elements per channel
      if (xn->requires_grad) xn->ensure_grad();
      if (scn->requires_grad) scn->ensure_grad();
      if (shn->requires_grad) shn->ensure_grad();
      for (int c = 0; c < xs.c; ++c) {
        const T mu = mean[size_t(c)], is = inv_std[size_t(c)];
        const T a = sc[c], s = sh[c];
        // first pass: dpre sums (needed for batch statistics backward)
        T sum_dpre = T(0), sum_dpre_xhat = T(0);
        for (int n = 0; n < xs.n; ++n) {
          const int64_t base = (int64_t(n) * xs.c + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            const T xhat = (xv[base + i] - mu) * is;
            const T pre = xhat * a + s;
            const T dpre = gy[base + i] * act.deriv(pre);
            sum_dpre += dpre;
            sum_dpre_xhat += dpre * xhat;
          }
        }
        if (scn->requires_grad) scn->grad[size_t(c)] += sum_dpre_xhat;
        if (shn->requires_grad) shn->grad[size_t(c)] += sum_dpre;
        if (xn->requires_grad) {
          const T k1 = sum_dpre / T(m);
          const T k2 = sum_dpre_xhat / T(m);
          for (int n = 0; n < xs.n; ++n) {
            const int64_t base = (int64_t(n) * xs.c + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              const T xhat = (xv[base + i] - mu) * is;
              const T pre = xhat * a + s;
              const T dpre = gy[base + i] * act.deriv(pre);
              if (batch_stats) {
                xn->grad[size_t(base + i)] += a * is * (dpre - k1 - xhat * k2);
              } else {
                xn->grad[size_t(base + i)] += a * is * dpre;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> norm_act_batch(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                          Activation act, T eps, std::vector<T>* batch_mean = nullptr,
                          std::vector<T>* batch_var = nullptr) {
  const Shape4 xs = x.shape();
  detail::check_norm_shapes(xs, scale, shift);
  const int64_t plane = int64_t(xs.h) * xs.w;
  const int64_t m = int64_t(xs.n) * plane;
  std::vector<T> mean(size_t(xs.c), T(0)), var(size_t(xs.c), T(0)), inv_std(size_t(xs.c));
  const T* xp = x.data();
  for (int c = 0; c < xs.c; ++c) {
    T acc = T(0);
    for (int n = 0; n < xs.n; ++n) {
      const T* xr = xp + (int64_t(n) * xs.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) acc += xr[i];
    }
    const T mu = acc / T(m);
    T vacc = T(0);
    for (int n = 0; n < xs.n; ++n) {
      const T* xr = xp + (int64_t(n) * xs.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const T d = xr[i] - mu;
        vacc += d * d;
      }
    }
    mean[size_t(c)] = mu;
    var[size_t(c)] = vacc / T(m);
    inv_std[size_t(c)] = T(1) / std::sqrt(var[size_t(c)] + eps);
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return detail::norm_act_core(x, scale, shift, std::move(mean), std::move(inv_std),
                               /*batch_stats=*/true, act);
}

template <typename T>
TensorT<T> norm_act_fixed(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift,
                          const std::vector<T>& mean, const std::vector<T>& var, Activation act,
                          T eps) {
  const Shape4 xs = x.shape();
  detail::check_norm_shapes(xs, scale, shift);
  check(int(mean.size()) == xs.c && int(var.size()) == xs.c,
        "norm_act: running statistics must have one entry per channel");
  std::vector<T> inv_std(size_t(xs.c));
  for (int c = 0; c < xs.c; ++c) inv_std[size_t(c)] = T(1) / std::sqrt(var[size_t(c)] + eps);
  return detail::norm_act_core(x, scale, shift, mean, std::move(inv_std),
                               /*batch_stats=*/false, act);
}

// ---- weighted cross-entropy over softmax ------------------------------------------

template <typename T>
TensorT<T> weighted_ce_softmax(const TensorT<T>& logits, const std::vector<int32_t>& targets,
                               const std::vector<T>& weights, int32_t ignore_label = kIgnoreLabel) {
  const Shape4 ls = logits.shape();
  const int K = ls.c;
  check(int(weights.size()) == K, "weighted_ce_softmax: weights size " + std::to_string(weights.size()) +
                                      " does not match class count " + std::to_string(K));
  for (const T w : weights) check(w > T(0), "weighted_ce_softmax: class weights must be strictly positive");
  const int64_t pixels = int64_t(ls.n) * ls.h * ls.w;
  check(int64_t(targets.size()) == pixels,
        "weighted_ce_softmax: target count " + std::to_string(targets.size()) + " does not match logits " + ls.str());

  const int64_t plane = int64_t(ls.h) * ls.w;
  const T* zp = logits.data();
  double loss_sum = 0.0;
  double weight_sum = 0.0;
  for (int64_t p = 0; p < pixels; ++p) {
    const int32_t y = targets[size_t(p)];
    if (y == ignore_label) continue;
    check(y >= 0 && y < K, "weighted_ce_softmax: target label " + std::to_string(y) +
                               " outside [0," + std::to_string(K) + ")");
    const int n = int(p / plane);
    const int64_t rest = p % plane;
    const int64_t base = int64_t(n) * K * plane + rest;
    T zmax = zp[base];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, zp[base + int64_t(k) * plane]);
    double lse = 0.0;
    for (int k = 0; k < K; ++k) lse += std::exp(double(zp[base + int64_t(k) * plane] - zmax));
    lse = std::log(lse);
    const double nll = lse - double(zp[base + int64_t(y) * plane] - zmax);
    loss_sum += double(weights[size_t(y)]) * nll;
    weight_sum += double(weights[size_t(y)]);
  }
  check(weight_sum > 0.0, "weighted_ce_softmax: every pixel is ignore-labeled, loss undefined");

  TensorT<T> out = make_op_node<T>("weighted_ce", Shape4{1, 1, 1, 1}, {logits.node()});
  out.data()[0] = T(loss_sum / weight_sum);

  if (out.requires_grad()) {
    auto zn = logits.node();
    out.node()->backward_fn = [zn, targets, weights, ignore_label, ls, plane, K,
                               weight_sum](NodeT<T>& self) {
      if (!zn->requires_grad) return;
      zn->ensure_grad();
      const T gout = self.grad[0];
      const T* zp = zn->value.data();
      T* gz = zn->grad.data();
      const int64_t pixels = int64_t(ls.n) * plane;
      for (int64_t p = 0; p < pixels; ++p) {
        const int32_t y = targets[size_t(p)];
        if (y == ignore_label) continue;
        const int n = int(p / plane);
        const int64_t rest = p % plane;
        const int64_t base = int64_t(n) * K * plane + rest;
        T zmax = zp[base];
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, zp[base + int64_t(k) * plane]);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(double(zp[base + int64_t(k) * plane] - zmax));
        const T wy = weights[size_t(y)];
        for (int k = 0; k < K; ++k) {
          const double soft = std::exp(double(zp[base + int64_t(k) * plane] - zmax)) / denom;
          const double delta = k == y ? 1.0 : 0.0;
          gz[size_t(base + int64_t(k) * plane)] += gout * T(double(wy) * (soft - delta) / weight_sum);
        }
      }
    };
  }
  return out;
}

// ---- inference-only helpers ---------------------------------------------------

// Channel softmax, detached from the tape (used for reported probabilities).
template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& x) {
  const Shape4 xs = x.shape();
  TensorT<T> out = TensorT<T>::zeros(xs);
  const int64_t plane = int64_t(xs.h) * xs.w;
  const T* xp = x.data();
  T* op = out.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      const int64_t base = int64_t(n) * xs.c * plane + i;
      T zmax = xp[base];
      for (int k = 1; k < xs.c; ++k) zmax = std::max(zmax, xp[base + int64_t(k) * plane]);
      T denom = T(0);
      for (int k = 0; k < xs.c; ++k) denom += std::exp(xp[base + int64_t(k) * plane] - zmax);
      for (int k = 0; k < xs.c; ++k)
        op[base + int64_t(k) * plane] = std::exp(xp[base + int64_t(k) * plane] - zmax) / denom;
    }
  }
  return out;
}

// Per-pixel argmax over channels; ties go to the smallest class index.
template <typename T>
std::vector<int32_t> argmax_channels(const TensorT<T>& x) {
  const Shape4 xs = x.shape();
  const int64_t plane = int64_t(xs.h) * xs.w;
  std::vector<int32_t> out(size_t(xs.n) * size_t(plane));
  const T* xp = x.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      const int64_t base = int64_t(n) * xs.c * plane + i;
      int best = 0;
      T bestv = xp[base];
      for (int k = 1; k < xs.c; ++k) {
        const T v = xp[base + int64_t(k) * plane];
        if (v > bestv) {
          bestv = v;
          best = k;
        }
      }
      out[size_t(int64_t(n) * plane + i)] = best;
    }
  }
  return out;
}

// ---- glue ops -------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.shape() == b.shape(), "add: shapes differ, " + a.shape().str() + " vs " + b.shape().str());
  TensorT<T> out = make_op_node<T>("add", a.shape(), {a.node(), b.node()});
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      const T* gy = self.grad.data();
      for (auto* p : {an.get(), bn.get()}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        T* g = p->grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += gy[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> scale_by(const TensorT<T>& x, T s) {
  TensorT<T> out = make_op_node<T>("scale", x.shape(), {x.node()});
  const T* xp = x.data();
  T* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * s;
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, s](NodeT<T>& self) {
      xn->ensure_grad();
      T* g = xn->grad.data();
      const T* gy = self.grad.data();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += gy[i] * s;
    };
  }
  return out;
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
  check(!xs.empty(), "concat_channels: empty input list");
  const Shape4 s0 = xs.front().shape();
  int ctotal = 0;
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  for (const auto& x : xs) {
    const Shape4 s = x.shape();
    check(s.n == s0.n && s.h == s0.h && s.w == s0.w,
          "concat_channels: incompatible shapes " + s0.str() + " vs " + s.str());
    ctotal += s.c;
    parents.push_back(x.node());
  }
  TensorT<T> out = make_op_node<T>("concat", Shape4{s0.n, ctotal, s0.h, s0.w}, std::move(parents));
  const int64_t plane = int64_t(s0.h) * s0.w;
  T* op = out.data();
  for (int n = 0; n < s0.n; ++n) {
    int coff = 0;
    for (const auto& x : xs) {
      const int xc = x.shape().c;
      std::memcpy(op + (int64_t(n) * ctotal + coff) * plane,
                  x.data() + int64_t(n) * xc * plane, sizeof(T) * size_t(xc) * size_t(plane));
      coff += xc;
    }
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<NodeT<T>>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node());
    out.node()->backward_fn = [nodes, s0, ctotal, plane](NodeT<T>& self) {
      const T* gy = self.grad.data();
      for (int n = 0; n < s0.n; ++n) {
        int coff = 0;
        for (const auto& p : nodes) {
          const int xc = p->shape.c;
          if (p->requires_grad) {
            p->ensure_grad();
            T* g = p->grad.data() + int64_t(n) * xc * plane;
            const T* gsrc = gy + (int64_t(n) * ctotal + coff) * plane;
            for (int64_t i = 0; i < int64_t(xc) * plane; ++i) g[i] += gsrc[i];
          }
          coff += xc;
        }
      }
    };
  }
  return out;
}

// Spatial crop: rows [y0, y0+out_h), columns [x0, x0+out_w).
template <typename T>
TensorT<T> crop2d(const TensorT<T>& x, int y0, int out_h, int x0, int out_w) {
  const Shape4 xs = x.shape();
  check(out_h >= 1 && out_w >= 1, "crop2d: empty crop");
  check(y0 >= 0 && x0 >= 0 && y0 + out_h <= xs.h && x0 + out_w <= xs.w,
        "crop2d: window [" + std::to_string(y0) + "," + std::to_string(y0 + out_h) + ")x[" +
            std::to_string(x0) + "," + std::to_string(x0 + out_w) + ") outside input " + xs.str());
  TensorT<T> out = make_op_node<T>("crop2d", Shape4{xs.n, xs.c, out_h, out_w}, {x.node()});
  const T* xp = x.data();
  T* op = out.data();
  for (int64_t t = 0; t < int64_t(xs.n) * xs.c; ++t) {
    const T* plane = xp + t * xs.h * xs.w;
    T* oplane = op + t * out_h * out_w;
    for (int y = 0; y < out_h; ++y)
      std::memcpy(oplane + int64_t(y) * out_w, plane + int64_t(y0 + y) * xs.w + x0,
                  sizeof(T) * size_t(out_w));
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, xs, y0, out_h, x0, out_w](NodeT<T>& self) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const T* gy = self.grad.data();
      for (int64_t t = 0; t < int64_t(xs.n) * xs.c; ++t) {
        T* gplane = gx + t * xs.h * xs.w;
        const T* gyplane = gy + t * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          T* grow = gplane + int64_t(y0 + y) * xs.w + x0;
          const T* gyrow = gyplane + int64_t(y) * out_w;
          for (int x = 0; x < out_w; ++x) grow[x] += gyrow[x];
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  TensorT<T> out = make_op_node<T>("sum", Shape4{1, 1, 1, 1}, {x.node()});
  const T* xp = x.data();
  T acc = T(0);
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xp[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      xn->ensure_grad();
      const T g = self.grad[0];
      for (auto& v : xn->grad) v += g;
    };
  }
  return out;
}

// Scalar projection sum_i coeffs[i] * x[i]; handy for making test losses.
template <typename T>
TensorT<T> weighted_sum(const TensorT<T>& x, const std::vector<T>& coeffs) {
  check(int64_t(coeffs.size()) == x.numel(), "weighted_sum: coefficient count mismatch");
  TensorT<T> out = make_op_node<T>("weighted_sum", Shape4{1, 1, 1, 1}, {x.node()});
  const T* xp = x.data();
  T acc = T(0);
  for (size_t i = 0; i < coeffs.size(); ++i) acc += xp[i] * coeffs[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, coeffs](NodeT<T>& self) {
      xn->ensure_grad();
      const T g = self.grad[0];
      T* gx = xn->grad.data();
      for (size_t i = 0; i < coeffs.size(); ++i) gx[i] += g * coeffs[i];
    };
  }
  return out;
}

}  // namespace pyfu
