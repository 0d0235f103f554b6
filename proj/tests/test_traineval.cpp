#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pyfu/traineval.hpp"
#include "test_support.hpp"

using namespace pyfu;

TEST_CASE("class weights of two equally frequent classes are both ln 2") {
  auto w = class_weights({50, 50});
  REQUIRE(w[0] == Catch::Approx(std::log(2.0)));
  REQUIRE(w[1] == Catch::Approx(std::log(2.0)));
}

TEST_CASE("class weights follow the inverse-frequency formula") {
  auto w = class_weights({90, 10});
  REQUIRE(w[0] == Catch::Approx(std::log(100.0 / 90.0)).epsilon(1e-9));
  REQUIRE(w[1] == Catch::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("permuting the histogram permutes the weights identically") {
  auto w1 = class_weights({5, 25, 70});
  auto w2 = class_weights({70, 5, 25});
  REQUIRE(w1[0] == w2[1]);
  REQUIRE(w1[1] == w2[2]);
  REQUIRE(w1[2] == w2[0]);
}

TEST_CASE("rarer classes always get larger weights") {
  std::mt19937 rng(701);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int64_t> hist(6);
    for (auto& h : hist) h = 1 + int64_t(rng() % 1000);
    auto w = class_weights(hist);
    for (size_t a = 0; a < hist.size(); ++a)
      for (size_t b = 0; b < hist.size(); ++b)
        if (hist[a] < hist[b]) REQUIRE(w[a] > w[b]);
  }
}

TEST_CASE("absent classes inherit the rarest class's weight") {
  auto w = class_weights({80, 0, 20});
  REQUIRE(w[1] == Catch::Approx(w[2]));
  REQUIRE_THROWS_AS(class_weights({0, 0}), std::runtime_error);
}

TEST_CASE("poly schedule hits its anchor points") {
  REQUIRE(poly_lr(0, 1000, 0.07) == Catch::Approx(0.07).epsilon(1e-12));
  REQUIRE(poly_lr(1000, 1000, 0.07) == 0.0);
  const double want = 0.07 * (1.0 - std::pow(0.5, 0.9));
  REQUIRE(std::abs(poly_lr(500, 1000, 0.07) - want) < 1e-9);
  REQUIRE(poly_lr(500, 1000, 0.07) == Catch::Approx(0.032488).margin(1e-6));
}

TEST_CASE("poly schedule decreases strictly after step zero") {
  double prev = poly_lr(0, 200, 0.1);
  for (int i = 1; i <= 200; ++i) {
    const double lr = poly_lr(i, 200, 0.1);
    REQUIRE(lr < prev);
    prev = lr;
  }
  REQUIRE_THROWS_AS(poly_lr(-1, 10, 0.1), std::runtime_error);
  REQUIRE_THROWS_AS(poly_lr(11, 10, 0.1), std::runtime_error);
}

TEST_CASE("training defaults carry the reference hyperparameters") {
  TrainConfig tc;
  REQUIRE(tc.weight_decay == 0.0001);
  REQUIRE(tc.base_lr == 0.07);
  REQUIRE(tc.lr_power == 0.9);
  REQUIRE(tc.hflip_p == 0.5);
  REQUIRE(tc.momentum == 0.9);
}

TEST_CASE("a perfect prediction yields a diagonal matrix and mIoU one") {
  ConfusionMatrix cm(3);
  std::vector<int32_t> t{0, 1, 2, 2, 1, 0};
  confusion_update(cm, t, t, std::vector<uint8_t>(6, 1));
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) REQUIRE(cm.at(a, b) == (a == b ? 2u : 0u));
  auto rep = iou_miou(cm);
  REQUIRE(rep.miou == 1.0);
}

TEST_CASE("confusion updates are permutation invariant and additive") {
  std::mt19937 rng(703);
  std::vector<int32_t> preds(500), targets(500);
  for (auto& p : preds) p = int32_t(rng() % 4);
  for (auto& t : targets) t = int32_t(rng() % 4);

  ConfusionMatrix whole(4);
  confusion_update(whole, preds, targets, std::vector<uint8_t>(500, 1));

  // reversed order
  ConfusionMatrix rev(4);
  std::vector<int32_t> rp(preds.rbegin(), preds.rend()), rt(targets.rbegin(), targets.rend());
  confusion_update(rev, rp, rt, std::vector<uint8_t>(500, 1));
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) REQUIRE(whole.at(a, b) == rev.at(a, b));

  // two batches merged
  ConfusionMatrix part1(4), part2(4);
  std::vector<int32_t> p1(preds.begin(), preds.begin() + 200), t1(targets.begin(), targets.begin() + 200);
  std::vector<int32_t> p2(preds.begin() + 200, preds.end()), t2(targets.begin() + 200, targets.end());
  confusion_update(part1, p1, t1, std::vector<uint8_t>(200, 1));
  confusion_update(part2, p2, t2, std::vector<uint8_t>(300, 1));
  part1.merge(part2);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) REQUIRE(whole.at(a, b) == part1.at(a, b));
  REQUIRE(whole.total() == 500);
}

TEST_CASE("the hand-computed confusion case gives the documented IoU values") {
  ConfusionMatrix cm(2);
  // rows truth, columns prediction: [[3,1],[2,4]]
  std::vector<int32_t> targets, preds;
  auto push = [&](int t, int p, int count) {
    for (int i = 0; i < count; ++i) {
      targets.push_back(t);
      preds.push_back(p);
    }
  };
  push(0, 0, 3);
  push(0, 1, 1);
  push(1, 0, 2);
  push(1, 1, 4);
  confusion_update(cm, preds, targets, std::vector<uint8_t>(10, 1));
  REQUIRE(cm.at(0, 0) == 3);
  REQUIRE(cm.at(0, 1) == 1);
  REQUIRE(cm.at(1, 0) == 2);
  REQUIRE(cm.at(1, 1) == 4);
  auto rep = iou_miou(cm);
  REQUIRE(rep.iou[0] == Catch::Approx(0.5).epsilon(1e-9));
  REQUIRE(rep.iou[1] == Catch::Approx(4.0 / 7.0).epsilon(1e-9));
  REQUIRE(std::abs(rep.miou - 0.5357142857) < 1e-4);
}

TEST_CASE("masked-out and ignore-labeled elements never alter the matrix") {
  std::mt19937 rng(709);
  std::vector<int32_t> preds(300), targets(300);
  std::vector<uint8_t> mask(300);
  for (size_t i = 0; i < 300; ++i) {
    preds[i] = int32_t(rng() % 3);
    targets[i] = (i % 7 == 0) ? kIgnoreLabel : int32_t(rng() % 3);
    mask[i] = i % 3 != 0;
  }
  ConfusionMatrix base(3);
  confusion_update(base, preds, targets, mask);

  // mutate everything outside the mask: the matrix must not move
  auto mpreds = preds;
  auto mtargets = targets;
  for (size_t i = 0; i < 300; ++i) {
    if (!mask[i]) {
      mpreds[i] = int32_t(rng() % 3);
      mtargets[i] = int32_t(rng() % 3);
    }
    if (targets[i] == kIgnoreLabel) mpreds[i] = int32_t(rng() % 3);
  }
  ConfusionMatrix mutated(3);
  confusion_update(mutated, mpreds, mtargets, mask);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) REQUIRE(base.at(a, b) == mutated.at(a, b));

  uint64_t expected = 0;
  for (size_t i = 0; i < 300; ++i)
    if (mask[i] && targets[i] != kIgnoreLabel) ++expected;
  REQUIRE(base.total() == expected);
}

TEST_CASE("labels outside the class range are rejected") {
  ConfusionMatrix cm(3);
  REQUIRE_THROWS_AS(cm.add(3, 0), std::runtime_error);
  REQUIRE_THROWS_AS(cm.add(0, 7), std::runtime_error);
}

TEST_CASE("absent classes are excluded from the mean unless requested") {
  ConfusionMatrix cm(3);
  cm.add(0, 0);
  cm.add(1, 1);
  cm.add(1, 0);
  auto rep = iou_miou(cm);
  REQUIRE(rep.present[2] == 0);
  REQUIRE(rep.miou == Catch::Approx((1.0 / 2.0 + 0.5) / 2.0));
  auto with_absent = iou_miou(cm, true);
  REQUIRE(with_absent.miou == Catch::Approx((1.0 / 2.0 + 0.5) / 3.0));
}

namespace {

std::vector<FramePrep<float>> tiny_frames(const PyFuConfig& cfg, int n, uint32_t seed) {
  SyntheticSceneSpec spec;
  spec.frames = n;
  spec.seed = seed;
  spec.sensor = cfg.sensor;
  spec.cam_width = cfg.cam_width;
  spec.cam_height = cfg.cam_height;
  std::vector<FramePrep<float>> out;
  for (const auto& b : gen_synthetic(spec)) out.push_back(prepare_frame<float>(b, cfg.sensor));
  return out;
}

PyFuConfig tiny_config() {
  PyFuConfig cfg = PyFuConfig::desk();
  cfg.sensor = {16, 64, 3.0f, -25.0f};
  cfg.cam_height = 32;
  cfg.cam_width = 64;
  cfg.lidar_widths = {6, 6, 6, 6, 6, 6};
  cfg.cam_widths = {6, 6, 6, 6, 6, 6};
  cfg.fusion_channels = 6;
  return cfg;
}

}  // namespace

TEST_CASE("one zero-lr step leaves every parameter unchanged") {
  PyFuConfig cfg = tiny_config();
  PyFuNetworkT<float> net(cfg, 41);
  auto frames = tiny_frames(cfg, 1, 43);
  auto& store = net.params();
  std::vector<std::vector<float>> before;
  for (size_t i = 0; i < store.size(); ++i) before.push_back(store.at(i).tensor.values());

  TrainConfig tc;
  tc.base_lr = 0.0;
  tc.max_steps = 1;
  tc.hflip = false;
  train_loop(net, frames, nullptr, tc, {});
  for (size_t i = 0; i < store.size(); ++i) {
    if (store.at(i).buffer) continue;  // running statistics move with any forward
    REQUIRE(store.at(i).tensor.values() == before[i]);
  }
}

TEST_CASE("identical seeds reproduce the metrics log bit for bit") {
  PyFuConfig cfg = tiny_config();
  auto frames = tiny_frames(cfg, 2, 47);
  TrainConfig tc;
  tc.base_lr = 0.01;
  tc.max_steps = 6;
  tc.seed = 9;
  tc.eval_every = 3;

  PyFuNetworkT<float> net1(cfg, 5), net2(cfg, 5);
  auto r1 = train_loop(net1, frames, nullptr, tc, {});
  auto r2 = train_loop(net2, frames, nullptr, tc, {});
  REQUIRE(r1.log == r2.log);
  REQUIRE(!r1.log.empty());

  // a different seed takes a different path
  tc.seed = 10;
  PyFuNetworkT<float> net3(cfg, 5);
  auto r3 = train_loop(net3, frames, nullptr, tc, {});
  REQUIRE(r1.log != r3.log);
}

TEST_CASE("the metrics log is parseable line-delimited json with eval records") {
  PyFuConfig cfg = tiny_config();
  auto frames = tiny_frames(cfg, 1, 53);
  PyFuNetworkT<float> net(cfg, 11);
  TrainConfig tc;
  tc.base_lr = 0.02;
  tc.max_steps = 4;
  auto res = train_loop(net, frames, nullptr, tc, {});

  std::istringstream lines(res.log);
  std::string line;
  int records = 0, evals = 0;
  while (std::getline(lines, line)) {
    auto rec = nlohmann::json::parse(line);
    REQUIRE(rec.contains("step"));
    REQUIRE(rec.contains("lr"));
    REQUIRE(rec.contains("loss"));
    REQUIRE(std::isfinite(rec["loss"].get<double>()));
    if (rec.contains("miou")) {
      ++evals;
      REQUIRE(rec.contains("iou"));
      REQUIRE(rec["iou"].size() == size_t(cfg.classes));
    }
    ++records;
  }
  REQUIRE(records == 4);
  REQUIRE(evals == 1);  // final step evaluates
}

TEST_CASE("evaluation confusion stays inside the overlap window") {
  PyFuConfig cfg = tiny_config();
  auto frames = tiny_frames(cfg, 1, 59);
  PyFuNetworkT<float> net(cfg, 13);
  auto eval = evaluate(net, frames, {});

  uint64_t in_overlap = 0;
  const auto& f = frames[0];
  const OverlapWindow tight = f.map.overlap;
  for (int p = 0; p < f.cloud.size(); ++p) {
    const int u = f.index.pu[size_t(p)], v = f.index.pv[size_t(p)];
    if (v >= tight.v0 && v < tight.v1 && u >= tight.u0 && u < tight.u1 &&
        f.cloud.labels[size_t(p)] != kIgnoreLabel)
      ++in_overlap;
  }
  REQUIRE(eval.cm.total() <= in_overlap);
  REQUIRE(eval.cm.total() > 0);
}

TEST_CASE("training aborts with diagnostics when the loss turns NaN") {
  PyFuConfig cfg = tiny_config();
  auto frames = tiny_frames(cfg, 1, 61);
  PyFuNetworkT<float> net(cfg, 15);
  auto* p = net.params().find("fused.classifier.weight");
  REQUIRE(p != nullptr);
  p->tensor.data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.max_steps = 1;
  REQUIRE_THROWS_WITH(train_loop(net, frames, nullptr, tc, {}),
                      Catch::Matchers::ContainsSubstring("NaN loss"));
}
