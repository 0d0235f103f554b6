#pragma once
// Pinhole camera model and the scalable camera-image -> range-view mapping.
// The mapping stores, per range-view cell, sub-pixel camera coordinates
// derived through the shared 3D points. It can be rescaled to any pair of
// range-view stride and camera feature resolution, which is what lets fusion
// happen at every pyramid level.

#include <array>

#include "pyfu/rangeview.hpp"

namespace pyfu {

struct CameraModel {
  float fx = 0, fy = 0, cx = 0, cy = 0;   // pixels
  std::array<float, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, lidar -> camera
  std::array<float, 3> translation{0, 0, 0};                 // meters
  int height = 0, width = 0;                                 // image size
};

inline void validate_camera(const CameraModel& cam) {
  check(cam.fx > 0 && cam.fy > 0, "camera focal lengths must be positive");
  check(cam.height >= 1 && cam.width >= 1, "camera image size must be set");
  // R * R^T == I within 1e-6
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k)
        acc += double(cam.rotation[size_t(i * 3 + k)]) * double(cam.rotation[size_t(j * 3 + k)]);
      check(std::abs(acc - (i == j ? 1.0 : 0.0)) < 1e-5,
            "camera rotation is not orthonormal");
    }
}

inline std::array<float, 3> lidar_to_camera(const CameraModel& cam, float x, float y, float z) {
  const auto& r = cam.rotation;
  return {r[0] * x + r[1] * y + r[2] * z + cam.translation[0],
          r[3] * x + r[4] * y + r[5] * z + cam.translation[1],
          r[6] * x + r[7] * y + r[8] * z + cam.translation[2]};
}

struct CamRVMapping {
  int h = 0, w = 0;            // range-view grid at the mapping's scale
  int cam_h = 0, cam_w = 0;    // camera raster the coordinates index into
  std::vector<float> cam_x, cam_y;  // h*w sub-pixel coordinates
  std::vector<uint8_t> valid;       // h*w
  OverlapWindow overlap;            // tight bounds of valid cells, grid units
};

// Builds the full-resolution mapping: every range-view pixel holding a point
// gets that point's camera coordinates; valid means in front of the camera
// and inside the image.
inline CamRVMapping build_mapping(const PointCloud& cloud, const ProjectionIndex& idx,
                                  const CameraModel& cam) {
  check(int(idx.pu.size()) == cloud.size(), "projection index does not match cloud size");
  validate_camera(cam);
  CamRVMapping map;
  map.h = idx.h;
  map.w = idx.w;
  map.cam_h = cam.height;
  map.cam_w = cam.width;
  const size_t cells = size_t(idx.h) * idx.w;
  map.cam_x.assign(cells, 0.0f);
  map.cam_y.assign(cells, 0.0f);
  map.valid.assign(cells, 0);

  int vmin = idx.h, vmax = -1, umin = idx.w, umax = -1;
  for (size_t pix = 0; pix < cells; ++pix) {
    const int32_t p = idx.pixel_to_point[pix];
    if (p < 0) continue;
    const auto q = lidar_to_camera(cam, cloud.x(p), cloud.y(p), cloud.z(p));
    if (q[2] <= 0.0f) continue;  // behind the camera
    const float xc = cam.fx * q[0] / q[2] + cam.cx;
    const float yc = cam.fy * q[1] / q[2] + cam.cy;
    if (xc < 0.0f || xc >= float(cam.width) || yc < 0.0f || yc >= float(cam.height)) continue;
    map.cam_x[pix] = xc;
    map.cam_y[pix] = yc;
    map.valid[pix] = 1;
    const int v = int(pix) / idx.w, u = int(pix) % idx.w;
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
    umin = std::min(umin, u);
    umax = std::max(umax, u);
  }
  check(vmax >= 0, "sensors do not overlap: no range-view pixel projects into the camera");
  map.overlap = {vmin, vmax + 1, umin, umax + 1};
  return map;
}

// Reduces the range-view grid by (sy,sx) and retargets the camera coordinates
// to a feature raster of size (cam_feat_h, cam_feat_w). Each coarse cell takes
// the mapping of its top-left-most valid member (row-major scan); cells with
// no valid member become invalid.
inline CamRVMapping scale_mapping(const CamRVMapping& map, int sy, int sx, int cam_feat_h,
                                  int cam_feat_w) {
  check(sy >= 1 && sx >= 1, "scale_mapping: scales must be >= 1");
  check(cam_feat_h >= 1 && cam_feat_w >= 1, "scale_mapping: camera feature size must be positive");
  CamRVMapping out;
  out.h = (map.h + sy - 1) / sy;
  out.w = (map.w + sx - 1) / sx;
  out.cam_h = cam_feat_h;
  out.cam_w = cam_feat_w;
  const size_t cells = size_t(out.h) * out.w;
  out.cam_x.assign(cells, 0.0f);
  out.cam_y.assign(cells, 0.0f);
  out.valid.assign(cells, 0);
  const float ry = float(cam_feat_h) / float(map.cam_h);
  const float rx = float(cam_feat_w) / float(map.cam_w);

  for (int cv = 0; cv < out.h; ++cv) {
    for (int cu = 0; cu < out.w; ++cu) {
      const int v_end = std::min((cv + 1) * sy, map.h);
      const int u_end = std::min((cu + 1) * sx, map.w);
      for (int v = cv * sy; v < v_end; ++v) {
        for (int u = cu * sx; u < u_end; ++u) {
          const size_t pix = size_t(v) * map.w + u;
          if (!map.valid[pix]) continue;
          const size_t cell = size_t(cv) * out.w + cu;
          out.cam_x[cell] = map.cam_x[pix] * rx;
          out.cam_y[cell] = map.cam_y[pix] * ry;
          out.valid[cell] = 1;
          v = v_end;  // representative found; leave both loops
          break;
        }
      }
    }
  }
  out.overlap = strided_window(map.overlap, sy, sx);
  return out;
}

// Restricts the mapping to a window (grid units); the overlap becomes
// window-relative.
inline CamRVMapping crop_mapping(const CamRVMapping& map, const OverlapWindow& win) {
  check(!win.empty() && win.v0 >= 0 && win.u0 >= 0 && win.v1 <= map.h && win.u1 <= map.w,
        "crop_mapping: window " + win.str() + " outside grid");
  CamRVMapping out;
  out.h = win.rows();
  out.w = win.cols();
  out.cam_h = map.cam_h;
  out.cam_w = map.cam_w;
  const size_t cells = size_t(out.h) * out.w;
  out.cam_x.resize(cells);
  out.cam_y.resize(cells);
  out.valid.resize(cells);
  for (int v = 0; v < out.h; ++v) {
    for (int u = 0; u < out.w; ++u) {
      const size_t src = size_t(v + win.v0) * map.w + (u + win.u0);
      const size_t dst = size_t(v) * out.w + u;
      out.cam_x[dst] = map.cam_x[src];
      out.cam_y[dst] = map.cam_y[src];
      out.valid[dst] = map.valid[src];
    }
  }
  out.overlap.v0 = std::max(map.overlap.v0 - win.v0, 0);
  out.overlap.v1 = std::min(map.overlap.v1 - win.v0, out.h);
  out.overlap.u0 = std::max(map.overlap.u0 - win.u0, 0);
  out.overlap.u1 = std::min(map.overlap.u1 - win.u0, out.w);
  return out;
}

// Samples camera features into range-view space. Valid cells receive a
// bilinear sample at their camera coordinates, invalid cells zeros; one extra
// channel carries the validity mask. Differentiable w.r.t. the features.
template <typename T>
TensorT<T> gather_camera_features(const TensorT<T>& cam, const CamRVMapping& map) {
  const Shape4 cs = cam.shape();
  check(cs.n == 1, "gather_camera_features: expected batch 1, got " + cs.str());
  check(cs.h == map.cam_h && cs.w == map.cam_w,
        "gather_camera_features: mapping targets " + std::to_string(map.cam_h) + "x" +
            std::to_string(map.cam_w) + " but features are " + cs.str());
  TensorT<T> out = make_op_node<T>("gather_camera", Shape4{1, cs.c + 1, map.h, map.w}, {cam.node()});

  const int64_t cells = int64_t(map.h) * map.w;
  const int64_t cam_plane = int64_t(cs.h) * cs.w;
  const T* cp = cam.data();
  T* op = out.data();
  for (int64_t i = 0; i < cells; ++i) {
    if (!map.valid[size_t(i)]) continue;
    const float xc = map.cam_x[size_t(i)];
    const float yc = map.cam_y[size_t(i)];
    const int x0 = std::min(int(xc), cs.w - 1);
    const int y0 = std::min(int(yc), cs.h - 1);
    const int x1 = std::min(x0 + 1, cs.w - 1);
    const int y1 = std::min(y0 + 1, cs.h - 1);
    const T fx = T(xc) - T(x0);
    const T fy = T(yc) - T(y0);
    for (int c = 0; c < cs.c; ++c) {
      const T* plane = cp + int64_t(c) * cam_plane;
      const T v00 = plane[int64_t(y0) * cs.w + x0];
      const T v01 = plane[int64_t(y0) * cs.w + x1];
      const T v10 = plane[int64_t(y1) * cs.w + x0];
      const T v11 = plane[int64_t(y1) * cs.w + x1];
      op[int64_t(c) * cells + i] =
          (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
    }
    op[int64_t(cs.c) * cells + i] = T(1);  // validity channel
  }

  if (out.requires_grad()) {
    auto cn = cam.node();
    out.node()->backward_fn = [cn, map, cs, cells, cam_plane](NodeT<T>& self) {
      cn->ensure_grad();
      const T* gy = self.grad.data();
      parallel_for(0, int64_t(cs.c), [&](int64_t b, int64_t e) {
        for (int64_t c = b; c < e; ++c) {
          T* gplane = cn->grad.data() + c * cam_plane;
          for (int64_t i = 0; i < cells; ++i) {
            if (!map.valid[size_t(i)]) continue;
            const float xc = map.cam_x[size_t(i)];
            const float yc = map.cam_y[size_t(i)];
            const int x0 = std::min(int(xc), cs.w - 1);
            const int y0 = std::min(int(yc), cs.h - 1);
            const int x1 = std::min(x0 + 1, cs.w - 1);
            const int y1 = std::min(y0 + 1, cs.h - 1);
            const T fx = T(xc) - T(x0);
            const T fy = T(yc) - T(y0);
            const T g = gy[c * cells + i];
            gplane[int64_t(y0) * cs.w + x0] += g * (T(1) - fy) * (T(1) - fx);
            gplane[int64_t(y0) * cs.w + x1] += g * (T(1) - fy) * fx;
            gplane[int64_t(y1) * cs.w + x0] += g * fy * (T(1) - fx);
            gplane[int64_t(y1) * cs.w + x1] += g * fy * fx;
          }
        }
      }, 1);
    };
  }
  return out;
}

}  // namespace pyfu
