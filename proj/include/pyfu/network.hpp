#pragma once
// The full fusion network: lidar and camera backbones, fusion modules, the
// pyramid fusion backbone (multi-scale fusion + two-way aggregation) and the
// pyramid fusion head (semantic-head aggregation + late fusion + classifier).
//
// Geometry convention: all fusion happens inside the sensors' overlap window.
// The tight window comes from the mapping; internally it is widened to the
// coarsest fusion stride so that pyramid levels halve exactly, and the final
// logits are sliced back to the tight window after upsampling. Fusion module
// targets sit one octave finer than their lidar taps (configurable).

#include "pyfu/augment.hpp"
#include "pyfu/blocks.hpp"
#include "pyfu/camproj.hpp"
#include "pyfu/dataio.hpp"

namespace pyfu {

enum class FusionStrategy { brb_bb, irb1, irb2 };

inline std::string strategy_name(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::brb_bb: return "brb_bb";
    case FusionStrategy::irb1: return "irb1";
    case FusionStrategy::irb2: return "irb2";
  }
  return "?";
}

inline FusionStrategy strategy_from_name(const std::string& name) {
  if (name == "brb_bb") return FusionStrategy::brb_bb;
  if (name == "irb1") return FusionStrategy::irb1;
  if (name == "irb2") return FusionStrategy::irb2;
  throw ConfigError("unknown fusion strategy: " + name + " (expected brb_bb, irb1 or irb2)");
}

struct PyFuConfig {
  SensorConfig sensor{64, 2048, 3.0f, -25.0f};
  int cam_height = 96, cam_width = 192;

  std::array<int, 6> lidar_widths{16, 24, 32, 48, 64, 96};
  std::array<int, 6> cam_widths{16, 24, 32, 48, 64, 96};
  int fusion_channels = 128;
  int classes = 6;

  FusionStrategy strategy = FusionStrategy::brb_bb;
  bool late_fusion = false;  // single decoder-level fusion (fusion baseline)
  bool pfb = true;
  bool pfh = true;

  bool pyramid_top_down = true;
  bool pyramid_bottom_up = true;
  bool pyramid_concat_combine = false;
  bool fusion_target_finer = true;     // fusion target one octave finer than the lidar tap
  bool camera_first_late_fusion = true;
  bool camera_classifier = false;

  bool freeze_lidar = false;
  bool freeze_camera = false;

  int irb_expansion = 6;
  int brb_ratio = 4;
  double leaky_slope = 0.01;

  bool fused() const { return late_fusion || pfb; }

  Activation act() const { return Activation::leaky(leaky_slope); }

  static PyFuConfig desk() {
    PyFuConfig cfg;
    cfg.sensor = {32, 256, 3.0f, -25.0f};
    cfg.cam_height = 96;
    cfg.cam_width = 192;
    cfg.lidar_widths = {8, 12, 16, 24, 32, 32};
    cfg.cam_widths = {8, 12, 16, 24, 32, 32};
    cfg.fusion_channels = 32;
    cfg.classes = 6;
    return cfg;
  }
};

// Table-style ablation presets.
enum class Preset { baseline, lf, pfb, pfb_pfh };

inline Preset preset_from_name(const std::string& name) {
  if (name == "baseline") return Preset::baseline;
  if (name == "lf") return Preset::lf;
  if (name == "pfb") return Preset::pfb;
  if (name == "pfb-pfh" || name == "pfb_pfh") return Preset::pfb_pfh;
  throw ConfigError("unknown preset: " + name + " (expected baseline, lf, pfb or pfb-pfh)");
}

inline void apply_preset(PyFuConfig& cfg, Preset p) {
  cfg.late_fusion = p == Preset::lf;
  cfg.pfb = p == Preset::pfb || p == Preset::pfb_pfh;
  cfg.pfh = p == Preset::pfb_pfh;
}

// ---- prepared frames -----------------------------------------------------------

template <typename T>
TensorT<T> convert_tensor(const TensorT<float>& x) {
  std::vector<T> v(size_t(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) v[size_t(i)] = T(x.data()[i]);
  return TensorT<T>::from_vector(x.shape(), std::move(v));
}

template <typename T>
struct FramePrep {
  RangeImage ri;
  CamRVMapping map;  // full resolution
  TensorT<T> rv;     // (1,5,H,W)
  TensorT<T> image;  // (1,3,Hc,Wc)
  PointCloud cloud;
  ProjectionIndex index;
};

template <typename T>
FramePrep<T> prepare_frame(const FrameBundle& bundle, const SensorConfig& sensor) {
  validate_cloud(bundle.cloud);
  FramePrep<T> f;
  f.cloud = bundle.cloud;
  f.index = spherical_project(f.cloud, sensor);
  f.ri = build_range_image(f.cloud, f.index, sensor);
  f.map = build_mapping(f.cloud, f.index, bundle.cam);
  f.rv = range_image_tensor<T>(f.ri);
  f.image = convert_tensor<T>(bundle.image);
  return f;
}

// Rebuilds tensors after augmentation; the cloud/index stay with the
// un-augmented frame and are only meaningful for evaluation.
template <typename T>
FramePrep<T> prep_from_sample(TrainSample s) {
  FramePrep<T> f;
  f.rv = range_image_tensor<T>(s.ri);
  f.image = convert_tensor<T>(s.image);
  f.ri = std::move(s.ri);
  f.map = std::move(s.map);
  return f;
}

// ---- fusion module ---------------------------------------------------------------

template <typename T>
struct RvFeat {
  TensorT<T> feat;
  int stride_y = 1, stride_x = 1;
  bool cropped = false;  // already restricted to the aligned overlap window
};

// Crop to the overlap at both scales, transform camera features into range
// view space (scalable projection + one alignment IRB), bilinearly upsample
// the lidar branch to the target, concatenate, fuse with the configured
// residual strategy.
template <typename T>
class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(ParamStoreT<T>& store, const std::string& name, int lidar_in, int source_in,
               bool source_is_rv, const PyFuConfig& cfg, std::mt19937& rng)
      : source_is_rv_(source_is_rv) {
    const int F = cfg.fusion_channels;
    const Activation act = cfg.act();
    if (lidar_in != F)
      lidar_lateral_ = ConvNorm<T>(store, name + ".lidar_lateral", lidar_in, F, 1, ConvGeom{}, act, rng);
    const int align_in = source_in + (source_is_rv ? 0 : 1);  // +1 validity mask
    align_ = Irb<T>(store, name + ".align", align_in, F, 1, 1, cfg.irb_expansion, act, rng);
    switch (cfg.strategy) {
      case FusionStrategy::brb_bb:
        rb1_ = ResidualBlock<T>(store, name + ".brb", ResidualVariant::bottleneck, 2 * F, F, 1, 1,
                                cfg.brb_ratio, act, rng);
        rb2_ = ResidualBlock<T>(store, name + ".bb", ResidualVariant::basic, F, F, 1, 1,
                                cfg.brb_ratio, act, rng);
        break;
      case FusionStrategy::irb2:
        irb2_ = Irb<T>(store, name + ".irb2", F, F, 1, 1, cfg.irb_expansion, act, rng);
        [[fallthrough]];
      case FusionStrategy::irb1:
        irb1_ = Irb<T>(store, name + ".irb1", 2 * F, F, 1, 1, cfg.irb_expansion, act, rng);
        break;
    }
  }

  // source living in camera image space, transformed through the mapping
  TensorT<T> forward(const RvFeat<T>& lidar, const TensorT<T>& cam_feat,
                     const CamRVMapping& full_map, const OverlapWindow& aligned, int ty, int tx,
                     bool training) {
    check(!source_is_rv_, "fusion module was built for a range-view source");
    auto scaled = scale_mapping(full_map, ty, tx, cam_feat.shape().h, cam_feat.shape().w);
    const OverlapWindow win{aligned.v0 / ty, aligned.v1 / ty, aligned.u0 / tx, aligned.u1 / tx};
    auto cropped = crop_mapping(scaled, win);
    auto gathered = gather_camera_features(cam_feat, cropped);
    auto aligned_src = align_.forward(gathered, training);
    return fuse(lidar_branch(lidar, aligned, ty, tx, training), aligned_src, training);
  }

  // source already in range-view space (late fusion with the lidar decoder)
  TensorT<T> forward_rv(const RvFeat<T>& lidar, const RvFeat<T>& source,
                        const OverlapWindow& aligned, int ty, int tx, bool training) {
    check(source_is_rv_, "fusion module was built for a camera-space source");
    auto src = resize_to_target(source, aligned, ty, tx);
    auto aligned_src = align_.forward(src, training);
    return fuse(lidar_branch(lidar, aligned, ty, tx, training), aligned_src, training);
  }

 private:
  TensorT<T> resize_to_target(const RvFeat<T>& f, const OverlapWindow& aligned, int ty, int tx) {
    TensorT<T> x = f.feat;
    if (!f.cropped) x = crop_to_overlap(x, aligned, f.stride_y, f.stride_x);
    return bilinear_resize(x, aligned.rows() / ty, aligned.cols() / tx, false);
  }

  TensorT<T> lidar_branch(const RvFeat<T>& lidar, const OverlapWindow& aligned, int ty, int tx,
                          bool training) {
    auto x = resize_to_target(lidar, aligned, ty, tx);
    if (lidar_lateral_) x = lidar_lateral_->forward(x, training);
    return x;
  }

  TensorT<T> fuse(TensorT<T> lidar_feat, TensorT<T> source_feat, bool training) {
    auto x = concat_channels<T>({lidar_feat, source_feat});
    if (rb1_) {
      x = rb1_->forward(x, training);
      x = rb2_->forward(x, training);
    } else {
      x = irb1_->forward(x, training);
      if (irb2_) x = irb2_->forward(x, training);
    }
    return x;
  }

  bool source_is_rv_ = false;
  std::optional<ConvNorm<T>> lidar_lateral_;
  Irb<T> align_;
  std::optional<ResidualBlock<T>> rb1_, rb2_;
  std::optional<Irb<T>> irb1_, irb2_;
};

// ---- backbones --------------------------------------------------------------------

// Range-view encoder with horizontal-only downsampling in the first two
// stages, taps after stages 3, 4 and 6, an optional two-way FPN + semantic
// head (decoder features) and an optional classifier.
template <typename T>
class LidarBackbone {
 public:
  struct Out {
    std::array<TensorT<T>, 3> taps;
    TensorT<T> decoder;  // (1,F,H/2,W/8) when the head is built
    TensorT<T> logits;   // (1,K,H,W) when the classifier is built
  };

  LidarBackbone() = default;
  LidarBackbone(ParamStoreT<T>& store, const std::string& name, const PyFuConfig& cfg,
                bool with_head, bool with_classifier, std::mt19937& rng)
      : with_head_(with_head), with_classifier_(with_classifier) {
    const auto& w = cfg.lidar_widths;
    const Activation act = cfg.act();
    ConvGeom stem_geom;
    stem_geom.stride_x = 2;
    stem_geom.pad_y = stem_geom.pad_x = 1;
    stem_ = ConvNorm<T>(store, name + ".stem", 5, w[0], 3, stem_geom, act, rng);
    s2_ = Irb<T>(store, name + ".stage2", w[0], w[1], 1, 2, cfg.irb_expansion, act, rng);
    s3_ = Irb<T>(store, name + ".stage3", w[1], w[2], 2, 2, cfg.irb_expansion, act, rng);
    s4_ = Irb<T>(store, name + ".stage4", w[2], w[3], 2, 2, cfg.irb_expansion, act, rng);
    s5_ = Irb<T>(store, name + ".stage5", w[3], w[4], 2, 2, cfg.irb_expansion, act, rng);
    s6_ = Irb<T>(store, name + ".stage6", w[4], w[5], 1, 1, cfg.irb_expansion, act, rng);
    if (with_head) {
      fpn_ = TwoWayFpn<T>(store, name + ".fpn", {w[2], w[3], w[5]}, cfg.fusion_channels, act, rng);
      head_ = SemanticHead<T>(store, name + ".head", cfg.fusion_channels, act, rng);
    }
    if (with_classifier)
      classifier_ = Conv2dLayer<T>(store, name + ".classifier", cfg.fusion_channels, cfg.classes,
                                   1, 1, ConvGeom{}, true, rng);
  }

  Out forward(const TensorT<T>& rv, bool training) {
    const Shape4 s = rv.shape();
    check(s.c == 5, "lidar backbone expects 5 input channels, got " + s.str());
    check(s.h % 8 == 0 && s.w % 32 == 0,
          "range view size must be divisible by 8x32, got " + s.str());
    Out out;
    auto x = stem_.forward(rv, training);           // (H, W/2)
    x = s2_.forward(x, training);                   // (H, W/4)
    auto t1 = s3_.forward(x, training);             // (H/2, W/8)
    auto t2 = s4_.forward(t1, training);            // (H/4, W/16)
    auto t3 = s6_.forward(s5_.forward(t2, training), training);  // (H/8, W/32)
    out.taps = {t1, t2, t3};
    if (with_head_) {
      auto p = fpn_.forward(t1, t2, t3, training);
      out.decoder = head_.forward(p[0], p[1], p[2], training);
      if (with_classifier_) {
        auto logits = classifier_.forward(out.decoder);
        out.logits = bilinear_resize(logits, s.h, s.w, false);
      }
    }
    return out;
  }

  bool has_head() const { return with_head_; }

 private:
  bool with_head_ = false, with_classifier_ = false;
  ConvNorm<T> stem_;
  Irb<T> s2_, s3_, s4_, s5_, s6_;
  TwoWayFpn<T> fpn_;
  SemanticHead<T> head_;
  Conv2dLayer<T> classifier_;
};

// Small strided-conv image encoder standing in for a heavyweight pretrained
// backbone: taps at 1/8, 1/16 and 1/32, decoder features at 1/4, optional
// classifier for standalone image-segmentation training. Swapping in a bigger
// encoder only has to reproduce this interface.
template <typename T>
class CameraBackbone {
 public:
  struct Out {
    std::array<TensorT<T>, 3> taps;
    TensorT<T> decoder;  // (1,F,Hc/4,Wc/4) when the decoder is built
    TensorT<T> logits;   // (1,K,Hc,Wc) when the classifier is built
  };

  CameraBackbone() = default;
  CameraBackbone(ParamStoreT<T>& store, const std::string& name, const PyFuConfig& cfg,
                 bool with_decoder, bool with_classifier, std::mt19937& rng)
      : with_decoder_(with_decoder), with_classifier_(with_classifier) {
    const auto& w = cfg.cam_widths;
    const Activation act = cfg.act();
    auto strided = [] {
      ConvGeom g;
      g.stride_y = g.stride_x = 2;
      g.pad_y = g.pad_x = 1;
      return g;
    }();
    ConvGeom plain;
    plain.pad_y = plain.pad_x = 1;
    s1_ = ConvNorm<T>(store, name + ".stage1", 3, w[0], 3, strided, act, rng);
    s2_ = ConvNorm<T>(store, name + ".stage2", w[0], w[1], 3, strided, act, rng);
    s3_ = ConvNorm<T>(store, name + ".stage3", w[1], w[2], 3, strided, act, rng);
    s4_ = ConvNorm<T>(store, name + ".stage4", w[2], w[3], 3, strided, act, rng);
    s5_ = ConvNorm<T>(store, name + ".stage5", w[3], w[4], 3, strided, act, rng);
    s6_ = ConvNorm<T>(store, name + ".stage6", w[4], w[5], 3, plain, act, rng);
    if (with_decoder) {
      const int F = cfg.fusion_channels;
      lat1_ = ConvNorm<T>(store, name + ".lateral1", w[2], F, 1, ConvGeom{}, act, rng);
      lat2_ = ConvNorm<T>(store, name + ".lateral2", w[3], F, 1, ConvGeom{}, act, rng);
      lat3_ = ConvNorm<T>(store, name + ".lateral3", w[5], F, 1, ConvGeom{}, act, rng);
      fuse_ = ConvNorm<T>(store, name + ".fuse", F, F, 3, plain, act, rng);
      if (with_classifier)
        classifier_ = Conv2dLayer<T>(store, name + ".classifier", F, cfg.classes, 1, 1, ConvGeom{},
                                     true, rng);
    }
  }

  Out forward(const TensorT<T>& image, bool training) {
    const Shape4 s = image.shape();
    check(s.c == 3, "camera backbone expects 3 input channels, got " + s.str());
    check(s.h % 32 == 0 && s.w % 32 == 0,
          "camera image size must be divisible by 32, got " + s.str());
    Out out;
    auto x = s2_.forward(s1_.forward(image, training), training);  // 1/4
    auto t1 = s3_.forward(x, training);                            // 1/8
    auto t2 = s4_.forward(t1, training);                           // 1/16
    auto t3 = s6_.forward(s5_.forward(t2, training), training);    // 1/32
    out.taps = {t1, t2, t3};
    if (with_decoder_) {
      auto d = lat3_.forward(t3, training);
      d = add(bilinear_resize(d, t2.shape().h, t2.shape().w, false), lat2_.forward(t2, training));
      d = add(bilinear_resize(d, t1.shape().h, t1.shape().w, false), lat1_.forward(t1, training));
      d = bilinear_resize(d, s.h / 4, s.w / 4, false);
      out.decoder = fuse_.forward(d, training);
      if (with_classifier_) {
        auto logits = classifier_.forward(out.decoder);
        out.logits = bilinear_resize(logits, s.h, s.w, false);
      }
    }
    return out;
  }

 private:
  bool with_decoder_ = false, with_classifier_ = false;
  ConvNorm<T> s1_, s2_, s3_, s4_, s5_, s6_;
  ConvNorm<T> lat1_, lat2_, lat3_, fuse_;
  Conv2dLayer<T> classifier_;
};

// ---- the assembled network ------------------------------------------------------------

template <typename T>
class PyFuNetworkT {
 public:
  explicit PyFuNetworkT(const PyFuConfig& cfg, uint32_t param_seed = 1) : cfg_(cfg) {
    std::mt19937 rng(param_seed);
    const bool lidar_head = needs_lidar_decoder();
    lidar_ = LidarBackbone<T>(store_, "lidar", cfg_, lidar_head, is_baseline(), rng);
    if (cfg_.fused()) {
      camera_.emplace(store_, "camera", cfg_, needs_camera_decoder(), cfg_.camera_classifier, rng);
      if (cfg_.pfb) {
        for (int i = 0; i < 3; ++i) {
          const int lw = cfg_.lidar_widths[size_t(i == 0 ? 2 : i == 1 ? 3 : 5)];
          const int cw = cfg_.cam_widths[size_t(i == 0 ? 2 : i == 1 ? 3 : 5)];
          pfb_fms_.emplace_back(store_, "pfb.fuse" + std::to_string(i + 1), lw, cw,
                                /*source_is_rv=*/false, cfg_, rng);
        }
        pyramid_ = TwoWayPyramid<T>(store_, "pfb.pyramid", cfg_.fusion_channels,
                                    cfg_.pyramid_top_down, cfg_.pyramid_bottom_up,
                                    cfg_.pyramid_concat_combine, cfg_.act(), rng);
        pyr_head_ = SemanticHead<T>(store_, "pfh.head", cfg_.fusion_channels, cfg_.act(), rng);
      }
      const int F = cfg_.fusion_channels;
      if (cfg_.pfh || (cfg_.late_fusion && cfg_.pfb))
        lf_cam_.emplace(store_, "pfh.fuse_camera", F, F, /*source_is_rv=*/false, cfg_, rng);
      if (cfg_.pfh)
        lf_lidar_.emplace(store_, "pfh.fuse_lidar", F, F, /*source_is_rv=*/true, cfg_, rng);
      if (cfg_.late_fusion && !cfg_.pfb)
        lf_only_.emplace(store_, "lf.fuse", F, F, /*source_is_rv=*/false, cfg_, rng);
      classifier_ = Conv2dLayer<T>(store_, "fused.classifier", F, cfg_.classes, 1, 1, ConvGeom{},
                                   true, rng);
    }
    store_.set_frozen("lidar.", cfg_.freeze_lidar);
    store_.set_frozen("camera.", cfg_.freeze_camera);
  }

  struct Forward {
    TensorT<T> overlap_logits;  // (1,K,h_ov,w_ov) over the tight overlap
    OverlapWindow tight;
    std::vector<Shape4> fused_shapes;  // pyramid fusion outputs, introspection
  };

  Forward forward(const FramePrep<T>& f, bool training) {
    const int H = f.ri.h, W = f.ri.w;
    check(f.rv.shape() == Shape4{1, 5, H, W}, "range tensor does not match the range image");
    check(f.map.h == H && f.map.w == W, "mapping does not match the range image");
    const OverlapWindow tight = f.map.overlap;
    check(!tight.empty(), "sensors do not overlap in this frame");

    Forward out;
    out.tight = tight;

    const bool lidar_training = training && !cfg_.freeze_lidar;
    auto lidar = lidar_->forward(f.rv, lidar_training);

    if (is_baseline()) {
      out.overlap_logits = crop2d(lidar.logits, tight.v0, tight.rows(), tight.u0, tight.cols());
      return out;
    }

    check(f.image.shape().h == f.map.cam_h && f.image.shape().w == f.map.cam_w,
          "camera image does not match the mapping");
    const bool cam_training = training && !cfg_.freeze_camera;
    auto cam = camera_->forward(f.image, cam_training);

    // fusion target strides; alignment to the coarsest keeps levels halving
    const int t1y = cfg_.fusion_target_finer ? 1 : 2;
    const int t1x = 4 * t1y;
    const OverlapWindow aligned = align_window(tight, 4 * t1y, 4 * t1x, H, W);

    TensorT<T> fusedA;
    if (cfg_.pfb) {
      std::array<TensorT<T>, 3> fused;
      for (int i = 0; i < 3; ++i) {
        const int sy = 2 << i, sx = 8 << i;  // tap strides (2,8),(4,16),(8,32)
        const int ty = t1y << i, tx = t1x << i;
        RvFeat<T> lf{lidar.taps[size_t(i)], sy, sx, false};
        fused[size_t(i)] =
            pfb_fms_[size_t(i)].forward(lf, cam.taps[size_t(i)], f.map, aligned, ty, tx, training);
        out.fused_shapes.push_back(fused[size_t(i)].shape());
      }
      auto o = pyramid_.forward(fused[0], fused[1], fused[2], training);
      fusedA = pyr_head_.forward(o[0], o[1], o[2], training);
    }

    if (cfg_.pfb && cfg_.pfh) {
      RvFeat<T> a{fusedA, t1y, t1x, true};
      if (cfg_.camera_first_late_fusion) {
        auto a1 = lf_cam_->forward(a, cam.decoder, f.map, aligned, t1y, t1x, training);
        fusedA = lf_lidar_->forward_rv({a1, t1y, t1x, true}, {lidar.decoder, 2, 8, false}, aligned,
                                       t1y, t1x, training);
      } else {
        auto a1 = lf_lidar_->forward_rv(a, {lidar.decoder, 2, 8, false}, aligned, t1y, t1x, training);
        fusedA = lf_cam_->forward({a1, t1y, t1x, true}, cam.decoder, f.map, aligned, t1y, t1x,
                                  training);
      }
    } else if (cfg_.pfb && cfg_.late_fusion) {
      // representable but unbenchmarked: pyramid head + one camera late fusion
      fusedA = lf_cam_->forward({fusedA, t1y, t1x, true}, cam.decoder, f.map, aligned, t1y, t1x,
                                training);
    } else if (!cfg_.pfb) {
      // late-fusion baseline: fuse the two decoder outputs once
      fusedA = lf_only_->forward({lidar.decoder, 2, 8, false}, cam.decoder, f.map, aligned, t1y,
                                 t1x, training);
    }

    auto logits = classifier_.forward(fusedA);
    logits = bilinear_resize(logits, aligned.rows(), aligned.cols(), false);
    out.overlap_logits =
        crop2d(logits, tight.v0 - aligned.v0, tight.rows(), tight.u0 - aligned.u0, tight.cols());
    return out;
  }

  ParamStoreT<T>& params() { return store_; }
  const PyFuConfig& config() const { return cfg_; }

  int fusion_module_count() const {
    return int(pfb_fms_.size()) + (lf_cam_ ? 1 : 0) + (lf_lidar_ ? 1 : 0) + (lf_only_ ? 1 : 0);
  }

 private:
  bool is_baseline() const { return !cfg_.fused(); }
  bool needs_lidar_decoder() const {
    return is_baseline() || (cfg_.late_fusion && !cfg_.pfb) || cfg_.pfh;
  }
  bool needs_camera_decoder() const { return cfg_.late_fusion || cfg_.pfh; }

  static OverlapWindow align_window(const OverlapWindow& tight, int ay, int ax, int H, int W) {
    OverlapWindow w;
    w.v0 = (tight.v0 / ay) * ay;
    w.v1 = std::min(((tight.v1 + ay - 1) / ay) * ay, H);
    w.u0 = (tight.u0 / ax) * ax;
    w.u1 = std::min(((tight.u1 + ax - 1) / ax) * ax, W);
    check(w.v1 % ay == 0 && w.u1 % ax == 0,
          "overlap window " + tight.str() + " cannot be aligned to " + std::to_string(ay) + "x" +
              std::to_string(ax) + " inside " + std::to_string(H) + "x" + std::to_string(W));
    return w;
  }

  PyFuConfig cfg_;
  ParamStoreT<T> store_;
  std::optional<LidarBackbone<T>> lidar_;
  std::optional<CameraBackbone<T>> camera_;
  std::vector<FusionModule<T>> pfb_fms_;
  TwoWayPyramid<T> pyramid_;
  SemanticHead<T> pyr_head_;
  std::optional<FusionModule<T>> lf_cam_, lf_lidar_, lf_only_;
  Conv2dLayer<T> classifier_;
};

using PyFuNetwork = PyFuNetworkT<float>;

// ---- unprojection -------------------------------------------------------------------

// Per-point class scores inside the tight overlap; points projecting outside
// keep zero rows and a cleared flag.
template <typename T>
struct PointPrediction {
  int classes = 0;
  std::vector<T> probs;           // N x classes, row-major
  std::vector<uint8_t> in_overlap;
};

template <typename T>
PointPrediction<T> unproject_probabilities(const TensorT<T>& overlap_probs,
                                           const OverlapWindow& tight,
                                           const ProjectionIndex& idx) {
  const Shape4 s = overlap_probs.shape();
  check(s.h == tight.rows() && s.w == tight.cols(), "probability raster does not match the window");
  const int n = int(idx.pu.size());
  PointPrediction<T> out;
  out.classes = s.c;
  out.probs.assign(size_t(n) * size_t(s.c), T(0));
  out.in_overlap.assign(size_t(n), 0);
  for (int p = 0; p < n; ++p) {
    const int u = idx.pu[size_t(p)], v = idx.pv[size_t(p)];
    if (v < tight.v0 || v >= tight.v1 || u < tight.u0 || u >= tight.u1) continue;
    out.in_overlap[size_t(p)] = 1;
    for (int k = 0; k < s.c; ++k)
      out.probs[size_t(p) * size_t(s.c) + size_t(k)] =
          overlap_probs.at(0, k, v - tight.v0, u - tight.u0);
  }
  return out;
}

// Full pipeline for one frame: forward, softmax, unproject.
template <typename T>
PointPrediction<T> pyfu_forward(PyFuNetworkT<T>& net, const FramePrep<T>& frame,
                                bool training = false) {
  auto out = net.forward(frame, training);
  auto probs = softmax_channels(out.overlap_logits);
  return unproject_probabilities(probs, out.tight, frame.index);
}

}  // namespace pyfu
