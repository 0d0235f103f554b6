#pragma once
// Self-verification suites: finite-difference gradient checks over every
// block, projection round-trip / frustum / gather oracles and kNN oracle
// equivalence. Used by the CLI selftest subcommand and the acceptance runner.

#include "pyfu/gradcheck.hpp"
#include "pyfu/network.hpp"
#include "pyfu/postprocess.hpp"

namespace pyfu {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace selftest {

template <typename T>
TensorT<T> rand_tensor(Shape4 s, std::mt19937& rng, T lo = T(-1), T hi = T(1), bool rg = false) {
  std::vector<T> v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = lo + (hi - lo) * T(uniform01(rng));
  return TensorT<T>::from_vector(s, std::move(v), rg);
}

template <typename MakeOut>
CheckResult fd_check(const std::string& name, MakeOut&& make_out,
                     std::vector<TensorT<double>> inputs, std::mt19937& rng, double tol = 1e-4,
                     int max_per_tensor = 0) {
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    TensorT<double> y = make_out();
    if (coeffs.empty()) {
      coeffs.resize(static_cast<size_t>(y.numel()));
      for (auto& c : coeffs) c = double(uniform01(rng)) * 2.0 - 1.0;
    }
    return weighted_sum(y, coeffs);
  };
  auto res = gradcheck<double>(make_loss, inputs, 1e-4, tol, max_per_tensor, rng());
  return {name, res.pass, res.summary()};
}

inline PointCloud frontal_cloud(int n, std::mt19937& rng) {
  PointCloud cloud;
  for (int i = 0; i < n; ++i) {
    const float yaw = uniform(rng, -3.1f, 3.1f);
    const float pitch = uniform(rng, float(deg2rad(-24.0)), float(deg2rad(2.0)));
    const float r = uniform(rng, 2.0f, 40.0f);
    cloud.data.push_back(r * std::cos(pitch) * std::cos(yaw));
    cloud.data.push_back(r * std::cos(pitch) * std::sin(yaw));
    cloud.data.push_back(r * std::sin(pitch));
    cloud.data.push_back(uniform01(rng));
  }
  return cloud;
}

inline CameraModel forward_camera() {
  CameraModel cam;
  cam.fx = cam.fy = 100.0f;
  cam.cx = 64.0f;
  cam.cy = 32.0f;
  cam.rotation = {0, -1, 0, 0, 0, -1, 1, 0, 0};
  cam.width = 128;
  cam.height = 64;
  return cam;
}

}  // namespace selftest

// Central finite-difference checks for every differentiable kernel and block;
// the end-to-end micro network runs at the looser 1e-3 tolerance.
inline std::vector<CheckResult> gradient_suite(uint32_t seed = 101) {
  using namespace selftest;
  std::mt19937 rng(seed);
  std::vector<CheckResult> out;
  const Activation act = Activation::leaky(0.01);

  {
    ConvGeom g;
    g.stride_y = 2;
    g.pad_y = g.pad_x = 1;
    g.dil_x = 2;
    auto x = rand_tensor<double>({1, 2, 5, 6}, rng, -1.0, 1.0, true);
    auto w = rand_tensor<double>({4, 2, 3, 3}, rng, -1.0, 1.0, true);
    auto b = rand_tensor<double>({1, 4, 1, 1}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("conv2d strided+dilated", [&] { return conv2d(x, w, &b, g); },
                           {x, w, b}, rng));
  }
  {
    ConvGeom g;
    g.groups = 3;
    g.pad_y = g.pad_x = 1;
    auto x = rand_tensor<double>({1, 3, 4, 5}, rng, -1.0, 1.0, true);
    auto w = rand_tensor<double>({6, 1, 3, 3}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("conv2d grouped", [&] { return conv2d(x, w, nullptr, g); }, {x, w}, rng));
  }
  {
    auto x = rand_tensor<double>({1, 2, 3, 4}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("bilinear_resize", [&] { return bilinear_resize(x, 5, 7, false); }, {x}, rng));
  }
  {
    auto x = rand_tensor<double>({2, 3, 3, 4}, rng, -1.0, 1.0, true);
    auto sc = rand_tensor<double>({1, 3, 1, 1}, rng, 0.5, 1.5, true);
    auto sh = rand_tensor<double>({1, 3, 1, 1}, rng, -0.5, 0.5, true);
    out.push_back(fd_check("norm_act batch", [&] { return norm_act_batch(x, sc, sh, act, 1e-5); },
                           {x, sc, sh}, rng));
  }
  {
    auto z = rand_tensor<double>({1, 3, 3, 4}, rng, -1.0, 1.0, true);
    std::vector<int32_t> targets(12);
    for (auto& t : targets) t = int32_t(rng() % 3);
    std::vector<double> weights{0.3, 1.0, 2.5};
    auto make_loss = [&] { return weighted_ce_softmax(z, targets, weights); };
    auto res = gradcheck<double>(make_loss, {z}, 1e-4, 1e-4, 0, rng());
    out.push_back({"weighted cross-entropy", res.pass, res.summary()});
  }
  {
    CamRVMapping map;
    map.h = 5;
    map.w = 6;
    map.cam_h = 6;
    map.cam_w = 7;
    map.cam_x.assign(30, 0.0f);
    map.cam_y.assign(30, 0.0f);
    map.valid.assign(30, 0);
    for (int i = 0; i < 30; ++i) {
      if (rng() % 4 == 0) continue;
      map.valid[size_t(i)] = 1;
      map.cam_x[size_t(i)] = uniform(rng, 0.0f, 5.99f);
      map.cam_y[size_t(i)] = uniform(rng, 0.0f, 4.99f);
    }
    map.overlap = {0, 5, 0, 6};
    auto cam = rand_tensor<double>({1, 3, 6, 7}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("gather_camera_features",
                           [&] { return gather_camera_features(cam, map); }, {cam}, rng));
  }

  ParamStoreT<double> store;
  {
    Irb<double> irb(store, "irb", 4, 4, 1, 1, 6, act, rng);
    auto x = rand_tensor<double>({1, 4, 4, 6}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("irb", [&] { return irb.forward(x, true); },
                           {x, irb.expand.conv.weight, irb.dw.weight, irb.project.weight}, rng));
  }
  {
    ResidualBlock<double> brb(store, "brb", ResidualVariant::bottleneck, 6, 4, 1, 1, 4, act, rng);
    auto x = rand_tensor<double>({1, 6, 4, 6}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("brb", [&] { return brb.forward(x, true); },
                           {x, brb.a.conv.weight, brb.tail.weight, brb.proj->weight}, rng));
  }
  {
    ResidualBlock<double> bb(store, "bb", ResidualVariant::basic, 4, 4, 1, 1, 4, act, rng);
    auto x = rand_tensor<double>({1, 4, 4, 6}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("bb", [&] { return bb.forward(x, true); },
                           {x, bb.a.conv.weight, bb.tail.weight}, rng));
  }
  {
    Lsfe<double> lsfe(store, "lsfe", 4, 6, act, rng);
    auto x = rand_tensor<double>({1, 4, 4, 6}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("lsfe", [&] { return lsfe.forward(x, true); },
                           {x, lsfe.a.dw.weight, lsfe.b.pw.weight}, rng));
  }
  {
    Dpc<double> dpc(store, "dpc", 3, 4, dpc_default_dilations(), act, rng);
    auto x = rand_tensor<double>({1, 3, 4, 6}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("dpc", [&] { return dpc.forward(x, true); },
                           {x, dpc.branches[0].dw.weight, dpc.merge.conv.weight}, rng));
  }
  {
    Mc<double> mc(store, "mc", 3, act, rng);
    auto fine = rand_tensor<double>({1, 3, 4, 6}, rng, -1.0, 1.0, true);
    auto coarse = rand_tensor<double>({1, 3, 2, 3}, rng, -1.0, 1.0, true);
    out.push_back(fd_check("mc", [&] { return mc.forward(fine, coarse, true); },
                           {fine, coarse, mc.a.dw.weight}, rng));
  }
  {
    TwoWayFpn<double> fpn(store, "fpn", {3, 4, 5}, 4, act, rng);
    auto c1 = rand_tensor<double>({1, 3, 8, 8}, rng, -1.0, 1.0, true);
    auto c2 = rand_tensor<double>({1, 4, 4, 4}, rng, -1.0, 1.0, true);
    auto c3 = rand_tensor<double>({1, 5, 2, 2}, rng, -1.0, 1.0, true);
    out.push_back(fd_check(
        "two-way fpn",
        [&] {
          auto o = fpn.forward(c1, c2, c3, true);
          return concat_channels<double>(
              {o[0], bilinear_resize(o[1], 8, 8, false), bilinear_resize(o[2], 8, 8, false)});
        },
        {c1, c2, c3, fpn.lateral[0].conv.weight, fpn.pyramid.down[0].dw.weight}, rng, 1e-4, 60));
  }
  {
    PyFuConfig cfg;
    cfg.fusion_channels = 6;
    FusionModule<double> fm(store, "fm", 5, 4, false, cfg, rng);
    auto lidar = rand_tensor<double>({1, 5, 4, 4}, rng, -1.0, 1.0, true);
    auto cam = rand_tensor<double>({1, 4, 6, 8}, rng, -1.0, 1.0, true);
    CamRVMapping map;
    map.h = 8;
    map.w = 32;
    map.cam_h = 6;
    map.cam_w = 8;
    map.cam_x.assign(size_t(8) * 32, 0.0f);
    map.cam_y.assign(size_t(8) * 32, 0.0f);
    map.valid.assign(size_t(8) * 32, 0);
    for (size_t i = 0; i < map.valid.size(); ++i) {
      if (rng() % 3 == 0) continue;
      map.valid[i] = 1;
      map.cam_x[i] = uniform(rng, 0.0f, 6.99f);
      map.cam_y[i] = uniform(rng, 0.0f, 4.99f);
    }
    map.overlap = {0, 8, 0, 32};
    out.push_back(fd_check(
        "fusion module",
        [&] { return fm.forward({lidar, 2, 8, false}, cam, map, {0, 8, 0, 32}, 1, 4, true); },
        {lidar, cam, store.find("fm.align.expand.conv.weight")->tensor,
         store.find("fm.brb.reduce.conv.weight")->tensor,
         store.find("fm.lidar_lateral.conv.weight")->tensor},
        rng, 1e-4, 40));
  }
  {
    // end-to-end micro network at the looser tolerance
    PyFuConfig cfg = PyFuConfig::desk();
    cfg.sensor = {8, 32, 3.0f, -25.0f};
    cfg.cam_height = 32;
    cfg.cam_width = 64;
    cfg.lidar_widths = {8, 8, 8, 8, 8, 8};
    cfg.cam_widths = {8, 8, 8, 8, 8, 8};
    cfg.fusion_channels = 8;
    cfg.classes = 3;
    PyFuNetworkT<double> net(cfg, rng());
    SyntheticSceneSpec spec;
    spec.frames = 1;
    spec.seed = rng();
    spec.sensor = cfg.sensor;
    spec.cam_width = cfg.cam_width;
    spec.cam_height = cfg.cam_height;
    auto bundle = gen_synthetic(spec).front();
    auto frame = prepare_frame<double>(bundle, cfg.sensor);
    std::vector<int32_t> targets;
    auto make_loss = [&] {
      auto res = net.forward(frame, true);
      if (targets.empty()) {
        targets.resize(size_t(res.tight.rows()) * size_t(res.tight.cols()));
        for (auto& t : targets) t = int32_t(rng() % 3);
      }
      return weighted_ce_softmax(res.overlap_logits, targets, std::vector<double>{0.7, 1.0, 1.9});
    };
    std::vector<TensorT<double>> inputs;
    for (const char* name :
         {"lidar.stem.conv.weight", "lidar.stage4.dw.weight", "camera.stage3.conv.weight",
          "pfb.fuse2.align.expand.conv.weight", "pfb.fuse1.brb.reduce.conv.weight",
          "pfh.head.dpc.branch0.dw.weight", "pfh.fuse_camera.bb.conv1.conv.weight",
          "pfh.fuse_lidar.align.project.weight", "fused.classifier.weight",
          "fused.classifier.bias"}) {
      auto* p = net.params().find(name);
      check(p != nullptr, std::string("missing parameter ") + name);
      inputs.push_back(p->tensor);
    }
    auto res = gradcheck<double>(make_loss, inputs, 1e-4, 1e-3, 6, rng());
    out.push_back({"end-to-end micro network (1e-3)", res.pass, res.summary()});
  }
  return out;
}

// Round-trip, frustum-oracle, scale-consistency and gather-oracle checks over
// randomized geometry.
inline std::vector<CheckResult> projection_suite(int points = 10000, uint32_t seed = 202) {
  using namespace selftest;
  std::mt19937 rng(seed);
  std::vector<CheckResult> out;
  auto cloud = frontal_cloud(points, rng);
  SensorConfig sensor{32, 256, 3.0f, -25.0f};
  const CameraModel cam = forward_camera();
  auto idx = spherical_project(cloud, sensor);
  auto map = build_mapping(cloud, idx, cam);

  {
    int bad = 0;
    for (int v = 0; v < sensor.height; ++v)
      for (int u = 0; u < sensor.width; ++u) {
        const int32_t p = idx.pixel_to_point[size_t(v) * sensor.width + u];
        if (p >= 0 && (idx.pu[size_t(p)] != u || idx.pv[size_t(p)] != v)) ++bad;
      }
    out.push_back({"point/pixel round trip", bad == 0,
                   bad == 0 ? "all kept points round-trip" : std::to_string(bad) + " mismatches"});
  }
  {
    int bad = 0;
    for (int v = 0; v < sensor.height; ++v)
      for (int u = 0; u < sensor.width; ++u) {
        const size_t pix = size_t(v) * sensor.width + u;
        const int32_t p = idx.pixel_to_point[pix];
        bool want = false;
        if (p >= 0) {
          const auto q = lidar_to_camera(cam, cloud.x(p), cloud.y(p), cloud.z(p));
          if (q[2] > 0.0f) {
            const double xc = double(cam.fx) * q[0] / q[2] + cam.cx;
            const double yc = double(cam.fy) * q[1] / q[2] + cam.cy;
            want = xc >= 0 && xc < cam.width && yc >= 0 && yc < cam.height;
          }
        }
        if (bool(map.valid[pix]) != want) ++bad;
      }
    out.push_back({"mapping validity vs frustum oracle", bad == 0,
                   bad == 0 ? "exact match" : std::to_string(bad) + " mismatches"});
  }
  {
    int bad = 0;
    for (auto [sy, sx, hf, wf] : {std::tuple{2, 4, 32, 64}, std::tuple{4, 8, 16, 32}}) {
      auto scaled = scale_mapping(map, sy, sx, hf, wf);
      if (!(scaled.overlap == strided_window(map.overlap, sy, sx))) ++bad;
      for (int cv = 0; cv < scaled.h && bad < 100; ++cv)
        for (int cu = 0; cu < scaled.w; ++cu) {
          const size_t cell = size_t(cv) * scaled.w + cu;
          bool any = false;
          float wx = 0, wy = 0;
          for (int v = cv * sy; v < std::min((cv + 1) * sy, map.h) && !any; ++v)
            for (int u = cu * sx; u < std::min((cu + 1) * sx, map.w); ++u)
              if (map.valid[size_t(v) * map.w + u]) {
                any = true;
                wx = map.cam_x[size_t(v) * map.w + u] * float(wf) / cam.width;
                wy = map.cam_y[size_t(v) * map.w + u] * float(hf) / cam.height;
                break;
              }
          if (bool(scaled.valid[cell]) != any) ++bad;
          if (any && (std::abs(scaled.cam_x[cell] - wx) > 1e-5f ||
                      std::abs(scaled.cam_y[cell] - wy) > 1e-5f))
            ++bad;
        }
    }
    out.push_back({"scaled mapping consistency", bad == 0,
                   bad == 0 ? "within one cell and 1e-5 in coordinates"
                            : std::to_string(bad) + " mismatches"});
  }
  {
    auto scaled = scale_mapping(map, 2, 8, 16, 32);
    auto cam_feat = rand_tensor<float>({1, 4, 16, 32}, rng);
    auto got = gather_camera_features(cam_feat, scaled);
    double worst = 0.0;
    const int64_t cells = int64_t(scaled.h) * scaled.w;
    for (int c = 0; c < 4; ++c)
      for (int64_t i = 0; i < cells; ++i) {
        double want = 0.0;
        if (scaled.valid[size_t(i)]) {
          const double xc = scaled.cam_x[size_t(i)], yc = scaled.cam_y[size_t(i)];
          const int x0 = int(xc), y0 = int(yc);
          const int x1 = std::min(x0 + 1, 31), y1 = std::min(y0 + 1, 15);
          const double fx = xc - x0, fy = yc - y0;
          want = (1 - fy) * ((1 - fx) * cam_feat.at(0, c, y0, x0) + fx * cam_feat.at(0, c, y0, x1)) +
                 fy * ((1 - fx) * cam_feat.at(0, c, y1, x0) + fx * cam_feat.at(0, c, y1, x1));
        }
        worst = std::max(worst, std::abs(double(got.data()[c * cells + i]) - want));
      }
    out.push_back({"gather vs naive bilinear oracle", worst < 1e-6,
                   "max deviation " + std::to_string(worst)});
  }
  return out;
}

// Exact equivalence of the production kNN and its brute-force oracle.
inline std::vector<CheckResult> knn_suite(int instances = 100, int max_points = 10000,
                                          uint32_t seed = 303) {
  using namespace selftest;
  std::mt19937 rng(seed);
  int failures = 0;
  int64_t points_total = 0;
  for (int i = 0; i < instances; ++i) {
    const int n = 200 + int(rng() % uint32_t(max_points - 200));
    auto cloud = frontal_cloud(n, rng);
    SensorConfig sensor{32, 256, 3.0f, -25.0f};
    auto idx = spherical_project(cloud, sensor);
    auto ri = build_range_image(cloud, idx, sensor);
    std::vector<int32_t> labels(size_t(32) * 256, kIgnoreLabel);
    for (size_t pix = 0; pix < labels.size(); ++pix) {
      if (!ri.mask[pix]) continue;
      labels[pix] = uniform01(rng) < 0.1f ? kIgnoreLabel : int32_t(rng() % 6);
    }
    KnnConfig cfg;
    cfg.window = 3 + 2 * int(rng() % 3);
    cfg.k = 1 + int(rng() % uint32_t(cfg.window * cfg.window));
    cfg.cutoff = uniform(rng, 0.3f, 2.5f);
    cfg.sigma = uniform(rng, 0.6f, 1.6f);
    auto got = knn_postprocess(cloud, idx, ri, labels, cfg);
    auto want = brute_force_knn_oracle(cloud, idx, ri, labels, cfg);
    if (got != want) ++failures;
    points_total += n;
  }
  std::ostringstream detail;
  detail << instances << " instances, " << points_total << " points, " << failures << " mismatched";
  return {{"knn vs brute-force oracle", failures == 0, detail.str()}};
}

}  // namespace pyfu
