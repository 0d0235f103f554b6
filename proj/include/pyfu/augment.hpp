#pragma once
// Range-view training augmentation. Horizontal flip mirrors every range-view
// raster and the mapping grid together (the stored camera coordinates stay
// attached to their points, so camera features keep lining up); random crops
// slice all aligned rasters identically and rebase the overlap window.

#include <random>

#include "pyfu/camproj.hpp"

namespace pyfu {

struct TrainSample {
  RangeImage ri;
  CamRVMapping map;      // full-resolution mapping
  TensorT<float> image;  // camera image, untouched by range-view augmentation
};

namespace detail {

template <typename V>
void mirror_rows(std::vector<V>& v, int h, int w) {
  for (int y = 0; y < h; ++y)
    std::reverse(v.begin() + int64_t(y) * w, v.begin() + int64_t(y + 1) * w);
}

}  // namespace detail

inline TrainSample hflip(const TrainSample& s) {
  TrainSample out = s;
  const int h = s.ri.h, w = s.ri.w;
  detail::mirror_rows(out.ri.range, h, w);
  detail::mirror_rows(out.ri.x, h, w);
  detail::mirror_rows(out.ri.y, h, w);
  detail::mirror_rows(out.ri.z, h, w);
  detail::mirror_rows(out.ri.remission, h, w);
  detail::mirror_rows(out.ri.mask, h, w);
  detail::mirror_rows(out.ri.labels, h, w);
  detail::mirror_rows(out.map.cam_x, s.map.h, s.map.w);
  detail::mirror_rows(out.map.cam_y, s.map.h, s.map.w);
  detail::mirror_rows(out.map.valid, s.map.h, s.map.w);
  out.map.overlap.u0 = s.map.w - s.map.overlap.u1;
  out.map.overlap.u1 = s.map.w - s.map.overlap.u0;
  return out;
}

// Deterministic crop core: window rows [y0,y0+ch) x cols [x0,x0+cw).
inline TrainSample crop_sample(const TrainSample& s, int y0, int x0, int ch, int cw) {
  check(ch >= 1 && cw >= 1, "crop size must be positive");
  check(ch <= s.ri.h && cw <= s.ri.w,
        "crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " +
            std::to_string(s.ri.h) + "x" + std::to_string(s.ri.w));
  check(y0 >= 0 && x0 >= 0 && y0 + ch <= s.ri.h && x0 + cw <= s.ri.w, "crop window out of bounds");

  TrainSample out;
  out.image = s.image;
  out.ri.h = ch;
  out.ri.w = cw;
  auto copy_f = [&](const std::vector<float>& src, std::vector<float>& dst) {
    dst.resize(size_t(ch) * cw);
    for (int y = 0; y < ch; ++y)
      std::copy_n(src.begin() + int64_t(y0 + y) * s.ri.w + x0, cw, dst.begin() + int64_t(y) * cw);
  };
  copy_f(s.ri.range, out.ri.range);
  copy_f(s.ri.x, out.ri.x);
  copy_f(s.ri.y, out.ri.y);
  copy_f(s.ri.z, out.ri.z);
  copy_f(s.ri.remission, out.ri.remission);
  out.ri.mask.resize(size_t(ch) * cw);
  out.ri.labels.resize(size_t(ch) * cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) {
      out.ri.mask[size_t(y) * cw + x] = s.ri.mask[size_t(y0 + y) * s.ri.w + x0 + x];
      out.ri.labels[size_t(y) * cw + x] = s.ri.labels[size_t(y0 + y) * s.ri.w + x0 + x];
    }

  OverlapWindow win{y0, y0 + ch, x0, x0 + cw};
  out.map = crop_mapping(s.map, win);
  return out;
}

struct AugmentOps {
  bool hflip_enabled = true;
  double hflip_p = 0.5;
  bool crop_enabled = false;
  int crop_h = 0, crop_w = 0;
};

inline TrainSample augment(const TrainSample& s, const AugmentOps& ops, std::mt19937& rng) {
  TrainSample out = s;
  if (ops.hflip_enabled && uniform01(rng) < float(ops.hflip_p)) out = hflip(out);
  if (ops.crop_enabled) {
    check(ops.crop_h >= 1 && ops.crop_w >= 1, "crop size must be positive");
    const int y0 = uniform_int(rng, 0, out.ri.h - ops.crop_h + 1);
    const int x0 = uniform_int(rng, 0, out.ri.w - ops.crop_w + 1);
    out = crop_sample(out, y0, x0, ops.crop_h, ops.crop_w);
  }
  return out;
}

}  // namespace pyfu
