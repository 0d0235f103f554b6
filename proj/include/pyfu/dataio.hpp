#pragma once
// Dataset ingestion and export. On-disk layout, KITTI-odometry style:
//   <root>/velodyne/<id>.bin   packed little-endian f32 x,y,z,remission
//   <root>/labels/<id>.label   little-endian u32, low 16 bits = class
//   <root>/image_2/<id>.ppm    binary P6
//   <root>/calib.txt           "P2:" projection and "Tr:" lidar-to-camera rows
// plus a deterministic ray-cast scene generator for desk-scale experiments.

#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "pyfu/camproj.hpp"

namespace pyfu {

// ---- little-endian primitives ------------------------------------------------

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t((v >> 8) & 0xff));
  out.push_back(uint8_t((v >> 16) & 0xff));
  out.push_back(uint8_t((v >> 24) & 0xff));
}

inline uint32_t get_u32(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

inline float get_f32(const uint8_t* p) {
  const uint32_t u = get_u32(p);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(bool(in), "cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  check(bool(out), "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  check(bool(out), "write failed: " + path);
}

// ---- point clouds and labels ----------------------------------------------------

inline PointCloud load_scan(const std::string& path) {
  const auto bytes = read_file(path);
  check(bytes.size() % 16 == 0,
        "truncated scan file " + path + ": " + std::to_string(bytes.size()) +
            " bytes is not a multiple of 16");
  PointCloud cloud;
  cloud.data.resize(bytes.size() / 4);
  for (size_t i = 0; i < cloud.data.size(); ++i)
    cloud.data[i] = detail::get_f32(bytes.data() + i * 4);
  validate_cloud(cloud);
  return cloud;
}

inline void write_scan(const std::string& path, const PointCloud& cloud) {
  std::vector<uint8_t> bytes;
  bytes.reserve(cloud.data.size() * 4);
  for (float v : cloud.data) detail::put_f32(bytes, v);
  write_file(path, bytes);
}

// Low 16 bits carry the semantic class; the upper half is ignored on read and
// written as zero.
inline std::vector<int32_t> load_labels(const std::string& path) {
  const auto bytes = read_file(path);
  check(bytes.size() % 4 == 0, "truncated label file " + path);
  std::vector<int32_t> labels(bytes.size() / 4);
  for (size_t i = 0; i < labels.size(); ++i)
    labels[i] = int32_t(detail::get_u32(bytes.data() + i * 4) & 0xffffu);
  return labels;
}

inline void write_predictions(const std::vector<int32_t>& labels, const std::string& path) {
  std::vector<uint8_t> bytes;
  bytes.reserve(labels.size() * 4);
  for (int32_t l : labels) {
    check(l >= 0 && l < (1 << 16), "label " + std::to_string(l) + " does not fit 16 bits");
    detail::put_u32(bytes, uint32_t(l));
  }
  write_file(path, bytes);
}

// ---- PPM images (binary P6) ------------------------------------------------------

inline void save_ppm(const std::string& path, const TensorT<float>& image) {
  const Shape4 s = image.shape();
  check(s.n == 1 && s.c == 3, "save_ppm expects a (1,3,H,W) image, got " + s.str());
  std::string header = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  std::vector<uint8_t> bytes(header.begin(), header.end());
  const int64_t plane = int64_t(s.h) * s.w;
  for (int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::min(std::max(image.data()[c * plane + i], 0.0f), 1.0f);
      bytes.push_back(uint8_t(std::lround(v * 255.0f)));
    }
  write_file(path, bytes);
}

inline TensorT<float> load_ppm(const std::string& path) {
  const auto bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size() && (std::isspace(bytes[pos]) || bytes[pos] == '#')) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else
        ++pos;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(char(bytes[pos++]));
    return t;
  };
  check(token() == "P6", path + " is not a binary P6 ppm");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const int maxval = std::stoi(token());
  check(w >= 1 && h >= 1 && maxval == 255, path + ": unsupported ppm geometry");
  ++pos;  // single whitespace after maxval
  check(bytes.size() - pos >= size_t(w) * h * 3, path + ": ppm payload truncated");
  TensorT<float> image = TensorT<float>::zeros({1, 3, h, w});
  const int64_t plane = int64_t(h) * w;
  for (int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      image.data()[c * plane + i] = float(bytes[pos + size_t(i) * 3 + size_t(c)]) / 255.0f;
  return image;
}

// ---- calibration ------------------------------------------------------------------

inline void write_calib(const std::string& path, const CameraModel& cam) {
  std::ostringstream os;
  os.precision(9);  // floats round-trip exactly through text
  os << "P2: " << cam.fx << " 0 " << cam.cx << " 0 0 " << cam.fy << " " << cam.cy
     << " 0 0 0 1 0\n";
  os << "Tr:";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << " " << cam.rotation[size_t(r * 3 + c)];
    os << " " << cam.translation[size_t(r)];
  }
  os << "\n";
  const std::string text = os.str();
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

// Parses "key: v0 v1 ..." lines; needs P2 (projection) and Tr (lidar-to-camera).
// Image dimensions come from the frame's image.
inline CameraModel load_calib(const std::string& path) {
  std::ifstream in(path);
  check(bool(in), "cannot open " + path);
  std::map<std::string, std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream vals(line.substr(colon + 1));
    std::vector<double>& row = rows[key];
    double v;
    while (vals >> v) row.push_back(v);
  }
  check(rows.count("P2") == 1, path + ": missing calib key P2");
  check(rows.count("Tr") == 1, path + ": missing calib key Tr");
  const auto& p2 = rows["P2"];
  const auto& tr = rows["Tr"];
  check(p2.size() == 12, path + ": P2 must have 12 entries");
  check(tr.size() == 12, path + ": Tr must have 12 entries");
  CameraModel cam;
  cam.fx = float(p2[0]);
  cam.cx = float(p2[2]);
  cam.fy = float(p2[5]);
  cam.cy = float(p2[6]);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation[size_t(r * 3 + c)] = float(tr[size_t(r * 4 + c)]);
    cam.translation[size_t(r)] = float(tr[size_t(r * 4 + 3)]);
  }
  return cam;
}

// ---- frames ------------------------------------------------------------------------

struct FrameBundle {
  PointCloud cloud;
  TensorT<float> image;
  CameraModel cam;
  std::string id;
};

inline std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

inline FrameBundle load_frame(const std::string& root, const std::string& id) {
  namespace fs = std::filesystem;
  FrameBundle f;
  f.id = id;
  f.cloud = load_scan(root + "/velodyne/" + id + ".bin");
  const std::string label_path = root + "/labels/" + id + ".label";
  if (fs::exists(label_path)) {
    f.cloud.labels = load_labels(label_path);
    check(int(f.cloud.labels.size()) == f.cloud.size(),
          label_path + ": label count does not match the scan");
  }
  f.image = load_ppm(root + "/image_2/" + id + ".ppm");
  f.cam = load_calib(root + "/calib.txt");
  f.cam.height = f.image.shape().h;
  f.cam.width = f.image.shape().w;
  validate_camera(f.cam);
  return f;
}

inline void write_frame(const std::string& root, const FrameBundle& f) {
  namespace fs = std::filesystem;
  fs::create_directories(root + "/velodyne");
  fs::create_directories(root + "/labels");
  fs::create_directories(root + "/image_2");
  write_scan(root + "/velodyne/" + f.id + ".bin", f.cloud);
  if (f.cloud.labeled()) write_predictions(f.cloud.labels, root + "/labels/" + f.id + ".label");
  save_ppm(root + "/image_2/" + f.id + ".ppm", f.image);
  write_calib(root + "/calib.txt", f.cam);
}

// ---- synthetic scenes ----------------------------------------------------------------
// Ray-cast rooms with a ground plane, enclosure walls, poles, slabs and an
// ambiguous crate/bin pair: identical geometry and remission statistics,
// distinguishable only by the camera color. Class ids:
//   0 ground, 1 wall, 2 pole, 3 crate, 4 bin, 5 slab

struct SyntheticSceneSpec {
  uint32_t seed = 1;
  int frames = 4;
  SensorConfig sensor{32, 256, 3.0f, -25.0f};
  int cam_width = 192, cam_height = 96;
  double cam_hfov_deg = 70.0;
  int poles = 3;
  int crates = 2;
  int bins = 2;
  int slabs = 2;
  int count_spread = 2;  // per-frame counts drawn from [count, count+spread]
  bool walls = true;
  float ground_z = -1.8f;
  float max_range = 80.0f;
  std::array<std::array<float, 3>, 6> palette{{{0.25f, 0.25f, 0.25f},
                                               {0.55f, 0.35f, 0.20f},
                                               {0.95f, 0.85f, 0.10f},
                                               {0.90f, 0.15f, 0.15f},
                                               {0.15f, 0.35f, 0.90f},
                                               {0.15f, 0.80f, 0.30f}}};
  std::pair<int, int> ambiguous_pair{3, 4};
};

inline CameraModel synthetic_camera(const SyntheticSceneSpec& spec) {
  CameraModel cam;
  cam.width = spec.cam_width;
  cam.height = spec.cam_height;
  cam.fx = cam.fy = float(spec.cam_width / (2.0 * std::tan(deg2rad(spec.cam_hfov_deg) / 2.0)));
  cam.cx = float(spec.cam_width) / 2.0f;
  cam.cy = float(spec.cam_height) / 2.0f;
  cam.rotation = {0, -1, 0, 0, 0, -1, 1, 0, 0};  // camera z along lidar +x
  // camera centered 0.1 m forward, 0.2 m below the lidar: t = -R*C
  cam.translation = {0.0f, 0.2f, -0.1f};
  return cam;
}

namespace detail {

struct Box {
  float x0, x1, y0, y1, z0, z1;
  int cls;
  float remission;
};

struct Cylinder {
  float cx, cy, radius, z0, z1;
  int cls;
  float remission;
};

struct Scene {
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
  float ground_z;
  float ground_remission;
  float max_range;
};

struct Hit {
  float t = -1.0f;
  int cls = -1;
  float remission = 0.0f;
  bool valid() const { return t > 0.0f; }
};

inline Hit cast_ray(const Scene& scene, float ox, float oy, float oz, float dx, float dy,
                    float dz) {
  Hit best;
  best.t = scene.max_range;
  bool found = false;
  // ground plane
  if (dz < 0.0f) {
    const float t = (scene.ground_z - oz) / dz;
    if (t > 0.05f && t < best.t) {
      best = {t, 0, scene.ground_remission};
      found = true;
    }
  }
  for (const auto& b : scene.boxes) {
    float t0 = 0.05f, t1 = best.t;
    bool ok = true;
    const float o[3] = {ox, oy, oz};
    const float d[3] = {dx, dy, dz};
    const float lo[3] = {b.x0, b.y0, b.z0};
    const float hi[3] = {b.x1, b.y1, b.z1};
    for (int a = 0; a < 3 && ok; ++a) {
      if (std::abs(d[a]) < 1e-9f) {
        ok = o[a] >= lo[a] && o[a] <= hi[a];
        continue;
      }
      float ta = (lo[a] - o[a]) / d[a];
      float tb = (hi[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      ok = t0 <= t1;
    }
    if (ok && t0 < best.t && t0 > 0.05f) {
      best = {t0, b.cls, b.remission};
      found = true;
    }
  }
  for (const auto& c : scene.cylinders) {
    const float fx = ox - c.cx, fy = oy - c.cy;
    const float a = dx * dx + dy * dy;
    if (a < 1e-12f) continue;
    const float bq = 2.0f * (fx * dx + fy * dy);
    const float cq = fx * fx + fy * fy - c.radius * c.radius;
    const float disc = bq * bq - 4.0f * a * cq;
    if (disc < 0.0f) continue;
    const float t = (-bq - std::sqrt(disc)) / (2.0f * a);
    if (t <= 0.05f || t >= best.t) continue;
    const float z = oz + t * dz;
    if (z < c.z0 || z > c.z1) continue;
    best = {t, c.cls, c.remission};
    found = true;
  }
  if (!found) best.t = -1.0f;
  return best;
}

inline Scene build_scene(const SyntheticSceneSpec& spec, std::mt19937& rng) {
  Scene scene;
  scene.ground_z = spec.ground_z;
  scene.ground_remission = 0.2f;
  scene.max_range = spec.max_range;
  if (spec.walls) {
    const float e = 42.0f, h = 4.0f, th = 2.0f;
    scene.boxes.push_back({e, e + th, -e - th, e + th, spec.ground_z, h, 1, 0.35f});
    scene.boxes.push_back({-e - th, -e, -e - th, e + th, spec.ground_z, h, 1, 0.35f});
    scene.boxes.push_back({-e - th, e + th, e, e + th, spec.ground_z, h, 1, 0.35f});
    scene.boxes.push_back({-e - th, e + th, -e - th, -e, spec.ground_z, h, 1, 0.35f});
  }
  auto draw_count = [&](int base) {
    return base + (spec.count_spread > 0 ? uniform_int(rng, 0, spec.count_spread + 1) : 0);
  };
  auto place = [&](bool in_camera) {
    // polar placement; the camera looks along +x with ~35 deg half-fov
    const float bearing = in_camera ? uniform(rng, -0.5f, 0.5f) : uniform(rng, -3.1f, 3.1f);
    const float dist = uniform(rng, 5.0f, 26.0f);
    return std::pair<float, float>{dist * std::cos(bearing), dist * std::sin(bearing)};
  };
  // the ambiguous pair shares one geometry sampler; only the class differs
  auto place_pair_box = [&](int cls) {
    const auto [px, py] = place(true);
    const float hx = uniform(rng, 0.5f, 1.2f);
    const float hy = uniform(rng, 0.5f, 1.2f);
    const float hz = uniform(rng, 1.0f, 2.2f);
    scene.boxes.push_back({px - hx, px + hx, py - hy, py + hy, spec.ground_z,
                           spec.ground_z + 2 * hz, cls, 0.5f});
  };
  const int n_crates = draw_count(spec.crates);
  const int n_bins = draw_count(spec.bins);
  // interleave draws so both classes consume the identical sampler stream
  for (int i = 0; i < std::max(n_crates, n_bins); ++i) {
    if (i < n_crates) place_pair_box(spec.ambiguous_pair.first);
    if (i < n_bins) place_pair_box(spec.ambiguous_pair.second);
  }
  const int n_poles = draw_count(spec.poles);
  for (int i = 0; i < n_poles; ++i) {
    const auto [px, py] = place(i % 2 == 0);
    scene.cylinders.push_back({px, py, uniform(rng, 0.15f, 0.35f), spec.ground_z,
                               spec.ground_z + uniform(rng, 3.0f, 5.0f), 2, 0.8f});
  }
  const int n_slabs = draw_count(spec.slabs);
  for (int i = 0; i < n_slabs; ++i) {
    const auto [px, py] = place(i % 2 == 0);
    const float hx = uniform(rng, 1.5f, 3.0f);
    const float hy = uniform(rng, 1.5f, 3.0f);
    scene.boxes.push_back({px - hx, px + hx, py - hy, py + hy, spec.ground_z,
                           spec.ground_z + uniform(rng, 0.3f, 0.7f), 5, 0.6f});
  }
  return scene;
}

}  // namespace detail

inline std::vector<FrameBundle> gen_synthetic(const SyntheticSceneSpec& spec) {
  validate_sensor(spec.sensor);
  const CameraModel cam = synthetic_camera(spec);
  std::vector<FrameBundle> frames;
  for (int fi = 0; fi < spec.frames; ++fi) {
    std::mt19937 rng(spec.seed * 1000003u + uint32_t(fi));
    const auto scene = detail::build_scene(spec, rng);

    FrameBundle f;
    f.id = frame_name(fi);
    f.cam = cam;

    // lidar sweep under the sensor beam pattern
    const double fov_up = deg2rad(spec.sensor.fov_up_deg);
    const double fov = fov_up - deg2rad(spec.sensor.fov_down_deg);
    for (int v = 0; v < spec.sensor.height; ++v) {
      const double pitch = fov_up - (double(v) + 0.5) * fov / spec.sensor.height;
      for (int u = 0; u < spec.sensor.width; ++u) {
        const double yaw =
            3.14159265358979323846 * (1.0 - 2.0 * (double(u) + 0.5) / spec.sensor.width);
        const float dx = float(std::cos(pitch) * std::cos(yaw));
        const float dy = float(std::cos(pitch) * std::sin(yaw));
        const float dz = float(std::sin(pitch));
        const auto hit = detail::cast_ray(scene, 0, 0, 0, dx, dy, dz);
        if (!hit.valid()) continue;
        f.cloud.data.push_back(hit.t * dx);
        f.cloud.data.push_back(hit.t * dy);
        f.cloud.data.push_back(hit.t * dz);
        f.cloud.data.push_back(hit.remission);
        f.cloud.labels.push_back(hit.cls);
      }
    }
    check(f.cloud.size() > 0, "synthetic frame rendered no points");

    // camera render: flat palette colors per class
    f.image = TensorT<float>::zeros({1, 3, cam.height, cam.width});
    const auto& r = cam.rotation;
    // camera center and axes back in lidar coordinates (R^T columns)
    const float ox = -(r[0] * cam.translation[0] + r[3] * cam.translation[1] + r[6] * cam.translation[2]);
    const float oy = -(r[1] * cam.translation[0] + r[4] * cam.translation[1] + r[7] * cam.translation[2]);
    const float oz = -(r[2] * cam.translation[0] + r[5] * cam.translation[1] + r[8] * cam.translation[2]);
    const int64_t plane = int64_t(cam.height) * cam.width;
    for (int y = 0; y < cam.height; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        const float cx = (float(x) + 0.5f - cam.cx) / cam.fx;
        const float cy = (float(y) + 0.5f - cam.cy) / cam.fy;
        const float dx = r[0] * cx + r[3] * cy + r[6];
        const float dy = r[1] * cx + r[4] * cy + r[7];
        const float dz = r[2] * cx + r[5] * cy + r[8];
        const auto hit = detail::cast_ray(scene, ox, oy, oz, dx, dy, dz);
        std::array<float, 3> color{0.05f, 0.05f, 0.08f};  // sky
        if (hit.valid()) color = spec.palette[size_t(hit.cls)];
        for (int c = 0; c < 3; ++c)
          f.image.data()[c * plane + int64_t(y) * cam.width + x] = color[size_t(c)];
      }
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

inline void write_dataset(const std::vector<FrameBundle>& frames, const std::string& root) {
  for (const auto& f : frames) write_frame(root, f);
}

}  // namespace pyfu
