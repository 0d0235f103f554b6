#pragma once
// Spherical range-view projection: point clouds to H x W rasters with
// bidirectional point/pixel correspondence, plus overlap-window cropping.
//
// Projection convention: yaw centered on +x, row 0 at fov_up,
//   u = floor(0.5 * (1 - atan2(y,x)/pi) * W)
//   v = floor((1 - (asin(z/r) - fov_down) / (fov_up - fov_down)) * H)
// both clamped into the raster. Pixel conflicts keep the nearest point;
// equal ranges keep the lower point index.

#include <cmath>

#include "pyfu/tensor.hpp"

namespace pyfu {

struct PointCloud {
  std::vector<float> data;      // N*4 packed x,y,z,remission
  std::vector<int32_t> labels;  // empty, or one class index per point

  int size() const { return int(data.size() / 4); }
  float x(int i) const { return data[size_t(i) * 4 + 0]; }
  float y(int i) const { return data[size_t(i) * 4 + 1]; }
  float z(int i) const { return data[size_t(i) * 4 + 2]; }
  float remission(int i) const { return data[size_t(i) * 4 + 3]; }
  float range(int i) const {
    return std::sqrt(x(i) * x(i) + y(i) * y(i) + z(i) * z(i));
  }
  bool labeled() const { return !labels.empty(); }
};

// Ingestion-time validation; projection assumes these hold.
inline void validate_cloud(const PointCloud& cloud) {
  check(cloud.data.size() % 4 == 0, "point cloud data length must be a multiple of 4");
  check(cloud.size() >= 1, "point cloud must contain at least one point");
  check(cloud.labels.empty() || int(cloud.labels.size()) == cloud.size(),
        "label count does not match point count");
  for (int i = 0; i < cloud.size(); ++i)
    check(cloud.range(i) > 0.0f, "point " + std::to_string(i) + " has zero range");
}

struct SensorConfig {
  int height = 64;
  int width = 2048;
  float fov_up_deg = 3.0f;
  float fov_down_deg = -25.0f;
};

inline void validate_sensor(const SensorConfig& s) {
  check(s.height >= 1 && s.width >= 1, "sensor raster must be at least 1x1");
  check(s.fov_up_deg > s.fov_down_deg, "sensor vertical field of view must be positive");
}

// Half-open pixel window [u0,u1) x [v0,v1).
struct OverlapWindow {
  int v0 = 0, v1 = 0, u0 = 0, u1 = 0;
  int rows() const { return v1 - v0; }
  int cols() const { return u1 - u0; }
  bool empty() const { return rows() <= 0 || cols() <= 0; }
  bool operator==(const OverlapWindow&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << v0 << "," << v1 << ")x[" << u0 << "," << u1 << ")";
    return os.str();
  }
};

// Window arithmetic for a feature map at stride (sy,sx): row/column intervals
// become [floor(/s), ceil(/s)).
inline OverlapWindow strided_window(const OverlapWindow& full, int sy, int sx) {
  check(sy >= 1 && sx >= 1, "stride must be >= 1");
  OverlapWindow w;
  w.v0 = full.v0 / sy;
  w.v1 = (full.v1 + sy - 1) / sy;
  w.u0 = full.u0 / sx;
  w.u1 = (full.u1 + sx - 1) / sx;
  return w;
}

struct ProjectionIndex {
  int h = 0, w = 0;
  std::vector<int32_t> pu, pv;         // per point, clamped pixel coordinates
  std::vector<uint8_t> in_fov;         // per point, inside the vertical FoV
  std::vector<int32_t> pixel_to_point; // h*w, kept (nearest) point or -1
};

struct RangeImage {
  int h = 0, w = 0;
  std::vector<float> range, x, y, z, remission;  // h*w each
  std::vector<uint8_t> mask;                     // 1 where a point was kept
  std::vector<int32_t> labels;                   // kept point's class or 255
};

inline ProjectionIndex spherical_project(const PointCloud& cloud, const SensorConfig& cfg) {
  validate_sensor(cfg);
  const int n = cloud.size();
  ProjectionIndex idx;
  idx.h = cfg.height;
  idx.w = cfg.width;
  idx.pu.resize(size_t(n));
  idx.pv.resize(size_t(n));
  idx.in_fov.resize(size_t(n));
  idx.pixel_to_point.assign(size_t(cfg.height) * cfg.width, -1);

  const double fov_up = deg2rad(cfg.fov_up_deg);
  const double fov_down = deg2rad(cfg.fov_down_deg);
  const double fov = fov_up - fov_down;

  for (int i = 0; i < n; ++i) {
    const double yaw = std::atan2(double(cloud.y(i)), double(cloud.x(i)));
    const double r = double(cloud.range(i));
    const double pitch = std::asin(double(cloud.z(i)) / r);
    int u = int(std::floor(0.5 * (1.0 - yaw / 3.14159265358979323846) * cfg.width));
    int v = int(std::floor((1.0 - (pitch - fov_down) / fov) * cfg.height));
    u = std::min(std::max(u, 0), cfg.width - 1);
    v = std::min(std::max(v, 0), cfg.height - 1);
    idx.pu[size_t(i)] = u;
    idx.pv[size_t(i)] = v;
    idx.in_fov[size_t(i)] = pitch >= fov_down && pitch <= fov_up ? 1 : 0;

    const int64_t pix = int64_t(v) * cfg.width + u;
    const int32_t kept = idx.pixel_to_point[size_t(pix)];
    if (kept < 0 || cloud.range(i) < cloud.range(kept)) idx.pixel_to_point[size_t(pix)] = i;
  }
  return idx;
}

inline RangeImage build_range_image(const PointCloud& cloud, const ProjectionIndex& idx,
                                    const SensorConfig& cfg) {
  check(idx.h == cfg.height && idx.w == cfg.width, "projection index does not match sensor config");
  check(int(idx.pu.size()) == cloud.size(), "projection index does not match cloud size");
  RangeImage ri;
  ri.h = idx.h;
  ri.w = idx.w;
  const size_t pixels = size_t(idx.h) * idx.w;
  ri.range.assign(pixels, 0.0f);
  ri.x.assign(pixels, 0.0f);
  ri.y.assign(pixels, 0.0f);
  ri.z.assign(pixels, 0.0f);
  ri.remission.assign(pixels, 0.0f);
  ri.mask.assign(pixels, 0);
  ri.labels.assign(pixels, kIgnoreLabel);

  for (size_t pix = 0; pix < pixels; ++pix) {
    const int32_t p = idx.pixel_to_point[pix];
    if (p < 0) continue;
    ri.range[pix] = cloud.range(p);
    ri.x[pix] = cloud.x(p);
    ri.y[pix] = cloud.y(p);
    ri.z[pix] = cloud.z(p);
    ri.remission[pix] = cloud.remission(p);
    ri.mask[pix] = 1;
    if (cloud.labeled()) ri.labels[pix] = cloud.labels[size_t(p)];
  }
  return ri;
}

// 5-channel network input: (range, x, y, z, remission).
template <typename T>
TensorT<T> range_image_tensor(const RangeImage& ri) {
  const int64_t plane = int64_t(ri.h) * ri.w;
  std::vector<T> data(size_t(5 * plane));
  const std::vector<float>* chans[5] = {&ri.range, &ri.x, &ri.y, &ri.z, &ri.remission};
  for (int c = 0; c < 5; ++c)
    for (int64_t i = 0; i < plane; ++i) data[size_t(c * plane + i)] = T((*chans[c])[size_t(i)]);
  return TensorT<T>::from_vector({1, 5, ri.h, ri.w}, std::move(data));
}

// Crops a feature map at stride (sy,sx) to the overlap window given at full
// resolution.
template <typename T>
TensorT<T> crop_to_overlap(const TensorT<T>& x, const OverlapWindow& full_res, int sy, int sx) {
  check(!full_res.empty(), "crop_to_overlap: empty window " + full_res.str());
  const OverlapWindow w = strided_window(full_res, sy, sx);
  check(!w.empty(), "crop_to_overlap: window " + full_res.str() + " empty at stride " +
                        std::to_string(sy) + "x" + std::to_string(sx));
  return crop2d(x, w.v0, w.rows(), w.u0, w.cols());
}

}  // namespace pyfu
