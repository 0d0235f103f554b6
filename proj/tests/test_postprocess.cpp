#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <random>

#include "pyfu/postprocess.hpp"

using namespace pyfu;

namespace {

struct Instance {
  PointCloud cloud;
  ProjectionIndex idx;
  RangeImage ri;
  std::vector<int32_t> labels;
};

Instance random_instance(int n, int h, int w, std::mt19937& rng, int classes = 6,
                         double ignore_frac = 0.1) {
  Instance inst;
  for (int i = 0; i < n; ++i) {
    const float yaw = uniform(rng, -3.14f, 3.14f);
    const float pitch = uniform(rng, float(deg2rad(-24.0)), float(deg2rad(2.0)));
    const float r = uniform(rng, 2.0f, 40.0f);
    inst.cloud.data.push_back(r * std::cos(pitch) * std::cos(yaw));
    inst.cloud.data.push_back(r * std::cos(pitch) * std::sin(yaw));
    inst.cloud.data.push_back(r * std::sin(pitch));
    inst.cloud.data.push_back(uniform01(rng));
  }
  SensorConfig cfg{h, w, 3.0f, -25.0f};
  inst.idx = spherical_project(inst.cloud, cfg);
  inst.ri = build_range_image(inst.cloud, inst.idx, cfg);
  inst.labels.assign(size_t(h) * w, kIgnoreLabel);
  for (size_t pix = 0; pix < inst.labels.size(); ++pix) {
    if (!inst.ri.mask[pix]) continue;
    inst.labels[pix] =
        uniform01(rng) < ignore_frac ? kIgnoreLabel : int32_t(rng() % uint32_t(classes));
  }
  return inst;
}

}  // namespace

TEST_CASE("a single-point cloud keeps its own pixel label") {
  PointCloud cloud;
  cloud.data = {5, 0, -0.5f, 0.3f};
  SensorConfig cfg{16, 64, 3.0f, -25.0f};
  auto idx = spherical_project(cloud, cfg);
  auto ri = build_range_image(cloud, idx, cfg);
  std::vector<int32_t> labels(size_t(16) * 64, kIgnoreLabel);
  labels[size_t(idx.pv[0]) * 64 + idx.pu[0]] = 4;
  auto out = knn_postprocess(cloud, idx, ri, labels, {});
  REQUIRE(out.size() == 1);
  REQUIRE(out[0] == 4);
}

TEST_CASE("a point ringed by same-label equal-range neighbors takes that label") {
  // central point plus 8 neighbors at the same range, all labeled 2, the
  // center labeled 5; with k=5 the neighbors dominate the vote
  PointCloud cloud;
  cloud.data = {10, 0, 0, 0.5f};
  SensorConfig cfg{32, 128, 10.0f, -10.0f};
  auto idx = spherical_project(cloud, cfg);
  auto ri = build_range_image(cloud, idx, cfg);
  const int pv = idx.pv[0], pu = idx.pu[0];
  std::vector<int32_t> labels(size_t(32) * 128, kIgnoreLabel);
  for (int dv = -1; dv <= 1; ++dv)
    for (int du = -1; du <= 1; ++du) {
      const size_t pix = size_t(pv + dv) * 128 + (pu + du);
      ri.mask[pix] = 1;
      ri.range[pix] = 10.0f;
      labels[pix] = (dv == 0 && du == 0) ? 5 : 2;
    }
  auto out = knn_postprocess(cloud, idx, ri, labels, {});
  REQUIRE(out[0] == 2);
}

TEST_CASE("unanimous windows never relabel the point") {
  std::mt19937 rng(501);
  auto inst = random_instance(2000, 32, 128, rng, 6, 0.0);
  // make every labeled pixel the same class
  for (auto& l : inst.labels)
    if (l != kIgnoreLabel) l = 3;
  auto out = knn_postprocess(inst.cloud, inst.idx, inst.ri, inst.labels, {});
  for (auto l : out) REQUIRE(l == 3);
}

TEST_CASE("knn matches the brute-force oracle on randomized instances") {
  std::mt19937 rng(503);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 200 + int(rng() % 2000);
    auto inst = random_instance(n, 32, 256, rng);
    KnnConfig cfg;
    cfg.window = 3 + 2 * int(rng() % 3);  // 3, 5, 7
    cfg.k = 1 + int(rng() % uint32_t(cfg.window * cfg.window));
    cfg.cutoff = uniform(rng, 0.3f, 2.5f);
    cfg.sigma = uniform(rng, 0.6f, 1.6f);
    auto got = knn_postprocess(inst.cloud, inst.idx, inst.ri, inst.labels, cfg);
    auto want = brute_force_knn_oracle(inst.cloud, inst.idx, inst.ri, inst.labels, cfg);
    REQUIRE(got == want);
  }
}

TEST_CASE("output length always equals the cloud size") {
  std::mt19937 rng(509);
  for (int n : {1, 17, 4000}) {
    auto inst = random_instance(n, 16, 64, rng);
    auto out = knn_postprocess(inst.cloud, inst.idx, inst.ri, inst.labels, {});
    REQUIRE(int(out.size()) == n);
  }
}

TEST_CASE("knn is equivariant under point permutation") {
  std::mt19937 rng(521);
  auto inst = random_instance(1500, 32, 128, rng);
  auto base = knn_postprocess(inst.cloud, inst.idx, inst.ri, inst.labels, {});

  std::vector<int> perm(size_t(inst.cloud.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled;
  for (int i : perm)
    for (int j = 0; j < 4; ++j) shuffled.data.push_back(inst.cloud.data[size_t(i) * 4 + j]);
  SensorConfig cfg{32, 128, 3.0f, -25.0f};
  auto idx2 = spherical_project(shuffled, cfg);
  auto out = knn_postprocess(shuffled, idx2, inst.ri, inst.labels, {});
  for (size_t i = 0; i < perm.size(); ++i) REQUIRE(out[i] == base[size_t(perm[i])]);
}

TEST_CASE("an empty window falls back to the own pixel label") {
  PointCloud cloud;
  cloud.data = {8, 0, 0, 0.1f};
  SensorConfig cfg{16, 64, 3.0f, -25.0f};
  auto idx = spherical_project(cloud, cfg);
  auto ri = build_range_image(cloud, idx, cfg);
  std::vector<int32_t> labels(size_t(16) * 64, kIgnoreLabel);  // nothing labeled anywhere
  auto out = knn_postprocess(cloud, idx, ri, labels, {});
  REQUIRE(out[0] == kIgnoreLabel);
  auto oracle = brute_force_knn_oracle(cloud, idx, ri, labels, {});
  REQUIRE(out == oracle);
}

TEST_CASE("knn config validation enforces the window/k contract") {
  KnnConfig bad;
  bad.window = 4;
  REQUIRE_THROWS_AS(validate_knn(bad), std::runtime_error);
  bad.window = 3;
  bad.k = 10;
  REQUIRE_THROWS_AS(validate_knn(bad), std::runtime_error);
}
