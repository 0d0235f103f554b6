// Acceptance suite: one criterion per function, one PASS/FAIL line each.
//   1 gradient checks over every block          5 four-frame overfit experiment
//   2 projection oracles                        6 fusion-benefit experiment
//   3 kNN oracle equivalence                    7 schedule / class-weight anchors
//   4 confusion/IoU metrics + overlap masking   8 format round-trips + determinism
// Run with no arguments for all criteria or with a single criterion index.

#include <chrono>
#include <functional>
#include <iomanip>
#include <iostream>

#include "pyfu/checkpoint.hpp"
#include "pyfu/selftest.hpp"
#include "pyfu/traineval.hpp"

using namespace pyfu;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

PyFuConfig desk_config() {
  PyFuConfig cfg = PyFuConfig::desk();  // RV 32x256, camera 96x192, K 6, widths <= 32
  return cfg;
}

std::vector<FramePrep<float>> desk_frames(const PyFuConfig& cfg, int count, uint32_t seed) {
  SyntheticSceneSpec spec;
  spec.frames = count;
  spec.seed = seed;
  spec.sensor = cfg.sensor;
  spec.cam_width = cfg.cam_width;
  spec.cam_height = cfg.cam_height;
  std::vector<FramePrep<float>> frames;
  for (const auto& b : gen_synthetic(spec)) frames.push_back(prepare_frame<float>(b, cfg.sensor));
  return frames;
}

double inference_pixel_accuracy(PyFuNetwork& net, std::vector<FramePrep<float>>& frames) {
  uint64_t ok = 0, all = 0;
  for (auto& f : frames) {
    auto out = net.forward(f, false);
    auto pred = argmax_channels(out.overlap_logits);
    for (int v = 0; v < out.tight.rows(); ++v)
      for (int u = 0; u < out.tight.cols(); ++u) {
        const int32_t gt = f.ri.labels[size_t(v + out.tight.v0) * f.ri.w + (u + out.tight.u0)];
        if (gt == kIgnoreLabel) continue;
        ++all;
        if (pred[size_t(v) * size_t(out.tight.cols()) + size_t(u)] == gt) ++ok;
      }
  }
  return all ? double(ok) / double(all) : 0.0;
}

Outcome from_checks(const std::vector<CheckResult>& results) {
  Outcome o;
  o.pass = true;
  int failed = 0;
  for (const auto& r : results)
    if (!r.pass) {
      ++failed;
      if (o.detail.empty()) o.detail = r.name + ": " + r.detail;
      o.pass = false;
    }
  if (o.pass)
    o.detail = std::to_string(results.size()) + " checks passed";
  else
    o.detail = std::to_string(failed) + "/" + std::to_string(results.size()) + " failed; first: " + o.detail;
  return o;
}

// 1. every block passes central finite differences (micro net at 1e-3)
Outcome criterion_gradients() {
  return from_checks(gradient_suite());
}

// 2. projection oracles on 10^4 random points
Outcome criterion_projection() {
  return from_checks(projection_suite(10000));
}

// 3. knn equals the brute-force oracle on 100 randomized instances
Outcome criterion_knn() {
  return from_checks(knn_suite(100, 10000));
}

// 4. documented confusion/IoU values plus the overlap-mask mutation test
Outcome criterion_metrics() {
  ConfusionMatrix cm(2);
  std::vector<int32_t> targets, preds;
  auto push = [&](int t, int p, int n) {
    for (int i = 0; i < n; ++i) {
      targets.push_back(t);
      preds.push_back(p);
    }
  };
  push(0, 0, 3);
  push(0, 1, 1);
  push(1, 0, 2);
  push(1, 1, 4);
  confusion_update(cm, preds, targets, std::vector<uint8_t>(10, 1));
  auto rep = iou_miou(cm);
  if (std::abs(rep.iou[0] - 0.5) > 1e-9 || std::abs(rep.iou[1] - 4.0 / 7.0) > 1e-9)
    return {false, "per-class IoU mismatch"};
  if (std::abs(rep.miou - 0.5357142857) > 1e-4) return {false, "mIoU outside 0.5357 +- 1e-4"};

  // mutation test: out-of-mask and ignore-labeled entries must never count
  std::mt19937 rng(4242);
  std::vector<int32_t> p2(400), t2(400);
  std::vector<uint8_t> mask(400);
  for (size_t i = 0; i < 400; ++i) {
    p2[i] = int32_t(rng() % 4);
    t2[i] = (i % 11 == 0) ? kIgnoreLabel : int32_t(rng() % 4);
    mask[i] = i % 3 != 0;
  }
  ConfusionMatrix base(4);
  confusion_update(base, p2, t2, mask);
  auto mp = p2;
  auto mt = t2;
  for (size_t i = 0; i < 400; ++i)
    if (!mask[i] || t2[i] == kIgnoreLabel) {
      mp[i] = int32_t(rng() % 4);
      mt[i] = mt[i] == kIgnoreLabel ? kIgnoreLabel : int32_t(rng() % 4);
    }
  ConfusionMatrix mutated(4);
  confusion_update(mutated, mp, mt, mask);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      if (base.at(a, b) != mutated.at(a, b))
        return {false, "out-of-mask mutations altered the confusion matrix"};
  return {true, "hand case (0.5, 4/7, 0.535714) and mask mutation test"};
}

// 5. full network overfits four desk frames to >= 99% overlap pixel accuracy
Outcome criterion_overfit() {
  PyFuConfig cfg = desk_config();  // pfb + pfh, brb_bb strategy by default
  auto frames = desk_frames(cfg, 4, 11);
  PyFuNetwork net(cfg, 11);
  TrainConfig tc;
  tc.base_lr = 0.07;
  tc.max_steps = 2000;
  tc.seed = 11;
  tc.freeze_stats_after = 300;
  tc.grad_clip = 10.0;
  tc.log_every = 1000000;
  train_loop(net, frames, nullptr, tc, {});
  const double acc = inference_pixel_accuracy(net, frames);

  // determinism of the training path for a fixed seed: identical short runs
  TrainConfig short_tc = tc;
  short_tc.max_steps = 40;
  PyFuNetwork a(cfg, 11), b(cfg, 11);
  auto ra = train_loop(a, frames, nullptr, short_tc, {});
  auto rb = train_loop(b, frames, nullptr, short_tc, {});
  if (ra.log != rb.log) return {false, "training is not deterministic for a fixed seed"};

  std::ostringstream os;
  os << "pixel accuracy " << std::fixed << std::setprecision(4) << acc << " after "
     << tc.max_steps << " steps";
  return {acc >= 0.99, os.str()};
}

// 6. every fused preset beats the lidar-only baseline on the ambiguous-pair
//    benchmark; pfb-pfh beats it by >= 30 IoU points on the pair
Outcome criterion_fusion_benefit() {
  PyFuConfig base_cfg = desk_config();
  SyntheticSceneSpec spec;
  spec.frames = 48;
  spec.seed = 500;
  spec.sensor = base_cfg.sensor;
  spec.cam_width = base_cfg.cam_width;
  spec.cam_height = base_cfg.cam_height;
  auto bundles = gen_synthetic(spec);
  std::vector<FramePrep<float>> train_frames, val_frames;
  for (int i = 0; i < 32; ++i)
    train_frames.push_back(prepare_frame<float>(bundles[size_t(i)], base_cfg.sensor));
  for (int i = 32; i < 48; ++i)
    val_frames.push_back(prepare_frame<float>(bundles[size_t(i)], base_cfg.sensor));

  const std::array<Preset, 4> presets{Preset::baseline, Preset::lf, Preset::pfb, Preset::pfb_pfh};
  const std::array<const char*, 4> names{"baseline", "lf", "pfb", "pfb-pfh"};
  std::array<double, 4> mean_miou{};
  std::array<double, 4> mean_pair{};
  const int n_seeds = 3;
  std::ostringstream detail;
  for (size_t pi = 0; pi < presets.size(); ++pi) {
    for (int s = 0; s < n_seeds; ++s) {
      PyFuConfig cfg = base_cfg;
      apply_preset(cfg, presets[pi]);
      PyFuNetwork net(cfg, 100 + uint32_t(s));
      TrainConfig tc;
      tc.base_lr = 0.07;
      tc.max_steps = 400;
      tc.seed = 100 + uint32_t(s);
      tc.freeze_stats_after = 150;
      tc.grad_clip = 10.0;
      tc.log_every = 1000000;
      train_loop(net, train_frames, &val_frames, tc, {});
      auto eval = evaluate(net, val_frames, {});
      mean_miou[pi] += eval.report.miou / n_seeds;
      mean_pair[pi] += 0.5 * (eval.report.iou[3] + eval.report.iou[4]) / n_seeds;
    }
    detail << names[pi] << " mIoU " << std::fixed << std::setprecision(3) << mean_miou[pi]
           << " pair " << mean_pair[pi] << (pi + 1 < presets.size() ? "; " : "");
  }
  const bool fused_beat_baseline = mean_miou[1] > mean_miou[0] && mean_miou[2] > mean_miou[0] &&
                                   mean_miou[3] > mean_miou[0];
  const bool pair_gap = mean_pair[3] - mean_pair[0] >= 0.30;
  return {fused_beat_baseline && pair_gap, detail.str()};
}

// 7. schedule and weight anchors
Outcome criterion_schedule_weights() {
  if (std::abs(poly_lr(0, 1000, 0.07) - 0.07) > 1e-12) return {false, "poly_lr(0) != base"};
  if (poly_lr(1000, 1000, 0.07) != 0.0) return {false, "poly_lr(i_max) != 0"};
  const double want = 0.07 * (1.0 - std::pow(0.5, 0.9));
  if (std::abs(poly_lr(500, 1000, 0.07) - want) > 1e-9)
    return {false, "poly_lr(i_max/2) outside 1e-9 of base*(1-0.5^0.9)"};

  std::mt19937 rng(7777);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int64_t> hist(6);
    for (auto& h : hist) h = 1 + int64_t(rng() % 5000);
    auto w = class_weights(hist);
    for (size_t a = 0; a < hist.size(); ++a)
      for (size_t b = 0; b < hist.size(); ++b) {
        if (hist[a] < hist[b] && !(w[a] > w[b]))
          return {false, "class weights not strictly inverse-ordered"};
        if (hist[a] == hist[b] && w[a] != w[b]) return {false, "equal counts, unequal weights"};
      }
  }
  return {true, "poly anchors within 1e-9, weights strictly inverse-ordered on 50 histograms"};
}

// 8. byte-exact checkpoint and label round-trips; bitwise-identical logs for
//    identical seeds
Outcome criterion_formats() {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "pyfu_acceptance";
  fs::create_directories(dir);

  PyFuConfig cfg = desk_config();
  cfg.lidar_widths = {6, 6, 6, 6, 6, 6};
  cfg.cam_widths = {6, 6, 6, 6, 6, 6};
  cfg.fusion_channels = 6;
  PyFuNetwork net(cfg, 77);
  const std::string ck1 = (dir / "1.ckpt").string();
  const std::string ck2 = (dir / "2.ckpt").string();
  save_checkpoint(net.params(), ck1);
  PyFuNetwork other(cfg, 78);
  load_checkpoint(other.params(), ck1);
  save_checkpoint(other.params(), ck2);
  if (read_file(ck1) != read_file(ck2)) return {false, "checkpoint round-trip not byte-exact"};

  std::mt19937 rng(99);
  std::vector<int32_t> labels(5000);
  for (auto& l : labels) l = int32_t(rng() % 65536);
  const std::string lp = (dir / "labels.label").string();
  write_predictions(labels, lp);
  if (load_labels(lp) != labels) return {false, "label file round-trip failed"};

  auto frames = desk_frames(cfg, 2, 31);
  TrainConfig tc;
  tc.base_lr = 0.02;
  tc.max_steps = 25;
  tc.seed = 5;
  tc.eval_every = 10;
  tc.log_every = 1;
  PyFuNetwork n1(cfg, 5), n2(cfg, 5);
  auto r1 = train_loop(n1, frames, nullptr, tc, {});
  auto r2 = train_loop(n2, frames, nullptr, tc, {});
  if (r1.log != r2.log || r1.log.empty())
    return {false, "identical seeds produced different training logs"};
  return {true, "checkpoint + labels byte-exact, identical-seed logs identical"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient suite", criterion_gradients},
      {2, "projection suite", criterion_projection},
      {3, "knn oracle suite", criterion_knn},
      {4, "metrics suite", criterion_metrics},
      {5, "overfit experiment", criterion_overfit},
      {6, "fusion-benefit experiment", criterion_fusion_benefit},
      {7, "schedule and class weights", criterion_schedule_weights},
      {8, "format round-trips and determinism", criterion_formats},
  };

  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);

  bool all_pass = true;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::cout << "criterion " << c.id << " [" << (o.pass ? "PASS" : "FAIL") << "] " << c.name
              << " — " << o.detail << " (" << std::fixed << std::setprecision(1) << secs
              << " s)\n";
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
