#pragma once
// Network building blocks: conv+norm stages, depthwise-separable convs, the
// residual blocks (IRB, BRB, BB), the semantic-head modules (LSFE, DPC, MC)
// and the two-way feature pyramid. Blocks own their parameters through a
// ParamStoreT and are wired together by pyfu/network.hpp.
//
// Residual blocks keep a clean skip path: the residual branch ends in a
// linearly-activated norm and there is no activation after the add, so a
// zero-initialized branch is exactly the identity.

#include <optional>

#include "pyfu/ops.hpp"

namespace pyfu {

template <typename T>
std::vector<T> he_uniform(int64_t count, int fan_in, std::mt19937& rng) {
  const float limit = std::sqrt(6.0f / float(std::max(fan_in, 1)));
  std::vector<T> v(static_cast<size_t>(count));
  for (auto& x : v) x = T(uniform(rng, -limit, limit));
  return v;
}

template <typename T>
struct Conv2dLayer {
  TensorT<T> weight;
  TensorT<T> bias;  // undefined unless requested
  ConvGeom geom;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c, int kh, int kw,
              ConvGeom g, bool with_bias, std::mt19937& rng)
      : geom(g) {
    const int fan_in = (in_c / g.groups) * kh * kw;
    weight = store.create(name + ".weight", {out_c, in_c / g.groups, kh, kw},
                          he_uniform<T>(int64_t(out_c) * (in_c / g.groups) * kh * kw, fan_in, rng));
    if (with_bias)
      bias = store.create(name + ".bias", {1, out_c, 1, 1}, std::vector<T>(size_t(out_c), T(0)));
  }

  TensorT<T> forward(const TensorT<T>& x) const { return forward_geom(x, geom); }
  TensorT<T> forward_geom(const TensorT<T>& x, const ConvGeom& g) const {
    return conv2d(x, weight, bias.defined() ? &bias : nullptr, g);
  }
  int out_channels() const { return weight.shape().n; }
};

template <typename T>
struct NormActLayer {
  TensorT<T> scale, shift;
  TensorT<T> run_mean, run_var;  // buffers, updated by training forwards
  std::shared_ptr<bool> stats_frozen;
  Activation act;
  T eps = T(1e-5);
  T momentum = T(0.1);

  NormActLayer() = default;
  NormActLayer(ParamStoreT<T>& store, const std::string& name, int channels, Activation a) : act(a) {
    scale = store.create(name + ".scale", {1, channels, 1, 1}, std::vector<T>(size_t(channels), T(1)));
    shift = store.create(name + ".shift", {1, channels, 1, 1}, std::vector<T>(size_t(channels), T(0)));
    run_mean = store.create_buffer(name + ".running_mean", {1, channels, 1, 1},
                                   std::vector<T>(size_t(channels), T(0)));
    run_var = store.create_buffer(name + ".running_var", {1, channels, 1, 1},
                                  std::vector<T>(size_t(channels), T(1)));
    stats_frozen = store.norm_stats_frozen_flag();
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    if (training && !(stats_frozen && *stats_frozen)) {
      std::vector<T> mean, var;
      auto y = norm_act_batch(x, scale, shift, act, eps, &mean, &var);
      T* rm = run_mean.data();
      T* rv = run_var.data();
      for (int c = 0; c < x.shape().c; ++c) {
        rm[c] = (T(1) - momentum) * rm[c] + momentum * mean[size_t(c)];
        rv[c] = (T(1) - momentum) * rv[c] + momentum * var[size_t(c)];
      }
      return y;
    }
    std::vector<T> mean(run_mean.data(), run_mean.data() + x.shape().c);
    std::vector<T> var(run_var.data(), run_var.data() + x.shape().c);
    return norm_act_fixed(x, scale, shift, mean, var, act, eps);
  }
};

// conv (no bias) followed by norm_act
template <typename T>
struct ConvNorm {
  Conv2dLayer<T> conv;
  NormActLayer<T> norm;

  ConvNorm() = default;
  ConvNorm(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c, int k, ConvGeom g,
           Activation a, std::mt19937& rng)
      : conv(store, name + ".conv", in_c, out_c, k, k, g, false, rng),
        norm(store, name + ".norm", out_c, a) {}

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    return norm.forward(conv.forward(x), training);
  }
};

// depthwise 3x3 + norm_act + pointwise 1x1 + norm_act
template <typename T>
struct SepConv {
  Conv2dLayer<T> dw;
  NormActLayer<T> dw_norm;
  Conv2dLayer<T> pw;
  NormActLayer<T> pw_norm;

  SepConv() = default;
  SepConv(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c, int stride_y,
          int stride_x, Activation a, std::mt19937& rng) {
    ConvGeom g;
    g.stride_y = stride_y;
    g.stride_x = stride_x;
    g.pad_y = g.pad_x = 1;
    g.groups = in_c;
    dw = Conv2dLayer<T>(store, name + ".dw", in_c, in_c, 3, 3, g, false, rng);
    dw_norm = NormActLayer<T>(store, name + ".dw_norm", in_c, a);
    pw = Conv2dLayer<T>(store, name + ".pw", in_c, out_c, 1, 1, ConvGeom{}, false, rng);
    pw_norm = NormActLayer<T>(store, name + ".pw_norm", out_c, a);
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    auto y = dw_norm.forward(dw.forward(x), training);
    return pw_norm.forward(pw.forward(y), training);
  }

  // same weights, overridden depthwise dilation (padding keeps spatial size)
  TensorT<T> forward_dilated(const TensorT<T>& x, int dil_y, int dil_x, bool training) {
    ConvGeom g = dw.geom;
    g.dil_y = dil_y;
    g.dil_x = dil_x;
    g.pad_y = dil_y;
    g.pad_x = dil_x;
    auto y = dw_norm.forward(dw.forward_geom(x, g), training);
    return pw_norm.forward(pw.forward(y), training);
  }
};

// Inverted residual block: expand 1x1 -> depthwise 3x3 -> linear project 1x1,
// skip when the shapes match.
template <typename T>
struct Irb {
  ConvNorm<T> expand;
  Conv2dLayer<T> dw;
  NormActLayer<T> dw_norm;
  Conv2dLayer<T> project;
  NormActLayer<T> project_norm;
  bool skip = false;

  Irb() = default;
  Irb(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c, int stride_y,
      int stride_x, int expansion, Activation a, std::mt19937& rng) {
    const int hidden = in_c * expansion;
    expand = ConvNorm<T>(store, name + ".expand", in_c, hidden, 1, ConvGeom{}, a, rng);
    ConvGeom g;
    g.stride_y = stride_y;
    g.stride_x = stride_x;
    g.pad_y = g.pad_x = 1;
    g.groups = hidden;
    dw = Conv2dLayer<T>(store, name + ".dw", hidden, hidden, 3, 3, g, false, rng);
    dw_norm = NormActLayer<T>(store, name + ".dw_norm", hidden, a);
    project = Conv2dLayer<T>(store, name + ".project", hidden, out_c, 1, 1, ConvGeom{}, false, rng);
    project_norm = NormActLayer<T>(store, name + ".project_norm", out_c, Activation::identity());
    skip = in_c == out_c && stride_y == 1 && stride_x == 1;
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    auto y = expand.forward(x, training);
    y = dw_norm.forward(dw.forward(y), training);
    y = project_norm.forward(project.forward(y), training);
    return skip ? add(y, x) : y;
  }
};

enum class ResidualVariant { bottleneck, basic };  // BRB, BB

template <typename T>
struct ResidualBlock {
  ResidualVariant variant = ResidualVariant::basic;
  int mid_channels = 0;
  ConvNorm<T> a;                 // bottleneck: 1x1 reduce; basic: first 3x3
  std::optional<ConvNorm<T>> b;  // bottleneck only: 3x3 at mid width
  Conv2dLayer<T> tail;           // linear-activated closing conv
  NormActLayer<T> tail_norm;
  std::optional<Conv2dLayer<T>> proj;  // shortcut projection when shapes differ
  std::optional<NormActLayer<T>> proj_norm;

  ResidualBlock() = default;
  ResidualBlock(ParamStoreT<T>& store, const std::string& name, ResidualVariant v, int in_c,
                int out_c, int stride_y, int stride_x, int bottleneck_ratio, Activation act,
                std::mt19937& rng)
      : variant(v) {
    ConvGeom s3;
    s3.pad_y = s3.pad_x = 1;
    if (v == ResidualVariant::bottleneck) {
      mid_channels = std::max(out_c / bottleneck_ratio, 1);
      ConvGeom g1;
      g1.stride_y = stride_y;
      g1.stride_x = stride_x;
      a = ConvNorm<T>(store, name + ".reduce", in_c, mid_channels, 1, g1, act, rng);
      b = ConvNorm<T>(store, name + ".mid", mid_channels, mid_channels, 3, s3, act, rng);
      tail = Conv2dLayer<T>(store, name + ".expand", mid_channels, out_c, 1, 1, ConvGeom{}, false, rng);
    } else {
      mid_channels = out_c;
      ConvGeom g1 = s3;
      g1.stride_y = stride_y;
      g1.stride_x = stride_x;
      a = ConvNorm<T>(store, name + ".conv1", in_c, out_c, 3, g1, act, rng);
      tail = Conv2dLayer<T>(store, name + ".conv2", out_c, out_c, 3, 3, s3, false, rng);
    }
    tail_norm = NormActLayer<T>(store, name + ".tail_norm", out_c, Activation::identity());
    if (in_c != out_c || stride_y != 1 || stride_x != 1) {
      ConvGeom gp;
      gp.stride_y = stride_y;
      gp.stride_x = stride_x;
      proj = Conv2dLayer<T>(store, name + ".proj", in_c, out_c, 1, 1, gp, false, rng);
      proj_norm = NormActLayer<T>(store, name + ".proj_norm", out_c, Activation::identity());
    }
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    auto y = a.forward(x, training);
    if (b) y = b->forward(y, training);
    y = tail_norm.forward(tail.forward(y), training);
    auto s = proj ? proj_norm->forward(proj->forward(x), training) : x;
    return add(y, s);
  }
};

// Large-scale feature extractor: two separable convs at the head width.
template <typename T>
struct Lsfe {
  SepConv<T> a, b;

  Lsfe() = default;
  Lsfe(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c, Activation act,
       std::mt19937& rng)
      : a(store, name + ".sep1", in_c, out_c, 1, 1, act, rng),
        b(store, name + ".sep2", out_c, out_c, 1, 1, act, rng) {}

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    return b.forward(a.forward(x, training), training);
  }
};

// Dilation clamp so a 3x3 dilated kernel still fits the feature map.
inline int dpc_clamped_dilation(int dilation, int dim) {
  return std::max(1, std::min(dilation, (dim - 1) / 2));
}

inline const std::vector<std::pair<int, int>>& dpc_default_dilations() {
  static const std::vector<std::pair<int, int>> d{{1, 6}, {1, 1}, {6, 21}, {18, 15}, {6, 3}};
  return d;
}

// Dense prediction cell: parallel dilated separable branches, concat, 1x1.
template <typename T>
struct Dpc {
  std::vector<std::pair<int, int>> dilations;
  std::vector<SepConv<T>> branches;
  ConvNorm<T> merge;

  Dpc() = default;
  Dpc(ParamStoreT<T>& store, const std::string& name, int in_c, int out_c,
      std::vector<std::pair<int, int>> dils, Activation act, std::mt19937& rng)
      : dilations(std::move(dils)) {
    check(!dilations.empty(), "dpc needs at least one branch");
    for (size_t i = 0; i < dilations.size(); ++i)
      branches.emplace_back(store, name + ".branch" + std::to_string(i), in_c, out_c, 1, 1, act, rng);
    merge = ConvNorm<T>(store, name + ".merge", out_c * int(dilations.size()), out_c, 1, ConvGeom{},
                        act, rng);
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    const int h = x.shape().h, w = x.shape().w;
    std::vector<TensorT<T>> outs;
    for (size_t i = 0; i < branches.size(); ++i) {
      const int dy = dpc_clamped_dilation(dilations[i].first, h);
      const int dx = dpc_clamped_dilation(dilations[i].second, w);
      outs.push_back(branches[i].forward_dilated(x, dy, dx, training));
    }
    return merge.forward(concat_channels(outs), training);
  }
};

// Mismatch correction: two separable convs on the coarse map, bilinear x2
// until the fine size is reached, then add.
template <typename T>
struct Mc {
  SepConv<T> a, b;

  Mc() = default;
  Mc(ParamStoreT<T>& store, const std::string& name, int channels, Activation act, std::mt19937& rng)
      : a(store, name + ".sep1", channels, channels, 1, 1, act, rng),
        b(store, name + ".sep2", channels, channels, 1, 1, act, rng) {}

  TensorT<T> forward(const TensorT<T>& fine, const TensorT<T>& coarse, bool training) {
    auto y = b.forward(a.forward(coarse, training), training);
    const Shape4 fs = fine.shape();
    while (y.shape().h < fs.h || y.shape().w < fs.w) {
      const int nh = y.shape().h * 2, nw = y.shape().w * 2;
      check(nh <= fs.h && nw <= fs.w, "mc: cannot reach " + fs.str() + " from " +
                                          coarse.shape().str() + " by doubling");
      y = bilinear_resize(y, nh, nw, false);
    }
    check(y.shape().h == fs.h && y.shape().w == fs.w,
          "mc: incompatible aspect, coarse " + coarse.shape().str() + " vs fine " + fs.str());
    return add(fine, y);
  }
};

// Two parallel aggregation paths over a 3-level pyramid of equal-width maps:
// top-down (bilinear x2 + add) and bottom-up (stride-2 separable conv + add),
// combined per scale and closed with a separable conv. Inputs fine -> coarse
// with exact octave steps.
template <typename T>
struct TwoWayPyramid {
  bool top_down = true;
  bool bottom_up = true;
  bool concat_combine = false;
  std::vector<SepConv<T>> down;
  std::vector<SepConv<T>> out_conv;

  TwoWayPyramid() = default;
  TwoWayPyramid(ParamStoreT<T>& store, const std::string& name, int channels, bool use_top_down,
                bool use_bottom_up, bool use_concat, Activation act, std::mt19937& rng)
      : top_down(use_top_down), bottom_up(use_bottom_up), concat_combine(use_concat) {
    check(top_down || bottom_up, "pyramid needs at least one aggregation path");
    if (bottom_up)
      for (int i = 0; i < 2; ++i)
        down.emplace_back(store, name + ".down" + std::to_string(i), channels, channels, 2, 2, act, rng);
    const int combine_in = (top_down && bottom_up && concat_combine) ? 2 * channels : channels;
    for (int i = 0; i < 3; ++i)
      out_conv.emplace_back(store, name + ".out" + std::to_string(i), combine_in, channels, 1, 1,
                            act, rng);
  }

  std::array<TensorT<T>, 3> forward(const TensorT<T>& f1, const TensorT<T>& f2,
                                    const TensorT<T>& f3, bool training) {
    const Shape4 s1 = f1.shape(), s2 = f2.shape(), s3 = f3.shape();
    check(s1.h == 2 * s2.h && s1.w == 2 * s2.w && s2.h == 2 * s3.h && s2.w == 2 * s3.w,
          "pyramid inputs must halve per level: " + s1.str() + ", " + s2.str() + ", " + s3.str());

    std::array<TensorT<T>, 3> t, bu;
    if (top_down) {
      t[2] = f3;
      t[1] = add(f2, bilinear_resize(t[2], s2.h, s2.w, false));
      t[0] = add(f1, bilinear_resize(t[1], s1.h, s1.w, false));
    }
    if (bottom_up) {
      bu[0] = f1;
      bu[1] = add(f2, down[0].forward(bu[0], training));
      bu[2] = add(f3, down[1].forward(bu[1], training));
    }
    std::array<TensorT<T>, 3> out;
    for (int i = 0; i < 3; ++i) {
      TensorT<T> combined;
      if (top_down && bottom_up) {
        combined = concat_combine ? concat_channels<T>({t[size_t(i)], bu[size_t(i)]})
                                  : add(t[size_t(i)], bu[size_t(i)]);
      } else {
        combined = top_down ? t[size_t(i)] : bu[size_t(i)];
      }
      out[size_t(i)] = out_conv[size_t(i)].forward(combined, training);
    }
    return out;
  }
};

// Lateral 1x1 projections to a common width, then the two-way pyramid.
template <typename T>
struct TwoWayFpn {
  std::vector<ConvNorm<T>> lateral;
  TwoWayPyramid<T> pyramid;

  TwoWayFpn() = default;
  TwoWayFpn(ParamStoreT<T>& store, const std::string& name, std::array<int, 3> in_channels,
            int channels, Activation act, std::mt19937& rng) {
    for (int i = 0; i < 3; ++i)
      lateral.emplace_back(store, name + ".lateral" + std::to_string(i), in_channels[size_t(i)],
                           channels, 1, ConvGeom{}, act, rng);
    pyramid = TwoWayPyramid<T>(store, name + ".pyramid", channels, true, true, false, act, rng);
  }

  std::array<TensorT<T>, 3> forward(const TensorT<T>& c1, const TensorT<T>& c2,
                                    const TensorT<T>& c3, bool training) {
    auto l1 = lateral[0].forward(c1, training);
    auto l2 = lateral[1].forward(c2, training);
    auto l3 = lateral[2].forward(c3, training);
    return pyramid.forward(l1, l2, l3, training);
  }
};

// Semantic-head aggregation: DPC on the coarsest map, LSFE on the two finer
// ones, MC merges coarse into fine, everything upsampled to the finest scale,
// concatenated and fused by a 1x1 conv.
template <typename T>
struct SemanticHead {
  Dpc<T> dpc;
  Lsfe<T> lsfe1, lsfe2;
  Mc<T> mc2, mc1;
  ConvNorm<T> fuse;

  SemanticHead() = default;
  SemanticHead(ParamStoreT<T>& store, const std::string& name, int channels, Activation act,
               std::mt19937& rng)
      : dpc(store, name + ".dpc", channels, channels, dpc_default_dilations(), act, rng),
        lsfe1(store, name + ".lsfe1", channels, channels, act, rng),
        lsfe2(store, name + ".lsfe2", channels, channels, act, rng),
        mc2(store, name + ".mc2", channels, act, rng),
        mc1(store, name + ".mc1", channels, act, rng),
        fuse(store, name + ".fuse", 3 * channels, channels, 1, ConvGeom{}, act, rng) {}

  TensorT<T> forward(const TensorT<T>& p1, const TensorT<T>& p2, const TensorT<T>& p3,
                     bool training) {
    auto h3 = dpc.forward(p3, training);
    auto h2 = lsfe2.forward(p2, training);
    auto h1 = lsfe1.forward(p1, training);
    auto m2 = mc2.forward(h2, h3, training);
    auto m1 = mc1.forward(h1, m2, training);
    const Shape4 s1 = p1.shape();
    auto u2 = bilinear_resize(m2, s1.h, s1.w, false);
    auto u3 = bilinear_resize(h3, s1.h, s1.w, false);
    return fuse.forward(concat_channels<T>({m1, u2, u3}), training);
  }
};

}  // namespace pyfu
