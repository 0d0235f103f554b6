// Command-line front end: synthetic dataset generation, training, overlap
// evaluation, inference with kNN refinement, and self verification.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

#include "pyfu/checkpoint.hpp"
#include "pyfu/config.hpp"
#include "pyfu/selftest.hpp"
#include "pyfu/traineval.hpp"

namespace fs = std::filesystem;
using namespace pyfu;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string data_root;
  std::string preset;
  int threads = 0;
  int64_t seed = -1;  // -1: keep the config's seed
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args.config_path);
  if (!args.data_root.empty()) cfg.data.root = args.data_root;
  if (!args.preset.empty()) apply_preset(cfg.model, preset_from_name(args.preset));
  if (args.seed >= 0) {
    cfg.train.seed = uint32_t(args.seed);
    cfg.synth.seed = uint32_t(args.seed);
  }
  if (args.threads > 0) set_max_threads(args.threads);
  return cfg;
}

std::vector<FramePrep<float>> load_split(const RunConfig& cfg, int begin, int end) {
  check(!cfg.data.root.empty(), "no dataset root configured (data.root or --data)");
  check(end > begin, "empty frame range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  std::vector<FramePrep<float>> frames;
  for (int i = begin; i < end; ++i) {
    auto bundle = load_frame(cfg.data.root, frame_name(i));
    frames.push_back(prepare_frame<float>(bundle, cfg.model.sensor));
  }
  return frames;
}

std::array<float, 3> class_color(int c, int classes) {
  static const SyntheticSceneSpec palette_source;
  if (classes <= int(palette_source.palette.size())) return palette_source.palette[size_t(c)];
  // golden-angle hue wheel for larger class counts
  const double h = std::fmod(0.61803398875 * c, 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (int(h)) {
    case 0: r = 1; g = x; break;
    case 1: r = x; g = 1; break;
    case 2: g = 1; b = x; break;
    case 3: g = x; b = 1; break;
    case 4: r = x; b = 1; break;
    default: r = 1; b = x; break;
  }
  return {float(0.2 + 0.8 * r), float(0.2 + 0.8 * g), float(0.2 + 0.8 * b)};
}

void render_labels(const std::string& path, const RangeImage& ri,
                   const std::vector<int32_t>& labels, int classes) {
  auto img = TensorT<float>::zeros({1, 3, ri.h, ri.w});
  const int64_t plane = int64_t(ri.h) * ri.w;
  for (int64_t i = 0; i < plane; ++i) {
    const int32_t l = labels[size_t(i)];
    if (l == kIgnoreLabel || l >= classes) continue;
    const auto color = class_color(l, classes);
    for (int c = 0; c < 3; ++c) img.data()[c * plane + i] = color[size_t(c)];
  }
  save_ppm(path, img);
}

nlohmann::json report_json(const EvalResult& eval) {
  nlohmann::json j;
  j["miou"] = eval.report.miou;
  j["pixel_accuracy"] = eval.pixel_accuracy;
  j["iou"] = eval.report.iou;
  j["present"] = std::vector<int>(eval.report.present.begin(), eval.report.present.end());
  j["points"] = eval.cm.total();
  return j;
}

void print_report(const EvalResult& eval) {
  std::cout << "class  iou      present\n";
  for (size_t c = 0; c < eval.report.iou.size(); ++c)
    std::cout << std::left << std::setw(7) << c << std::fixed << std::setprecision(4)
              << eval.report.iou[c] << "   " << (eval.report.present[c] ? "yes" : "no") << "\n";
  std::cout << "mIoU " << std::fixed << std::setprecision(4) << eval.report.miou
            << "  pixel accuracy " << eval.pixel_accuracy << "  points " << eval.cm.total() << "\n";
}

// scatter window predictions back into a full-resolution raster
std::vector<int32_t> prediction_raster(const RangeImage& ri, const OverlapWindow& tight,
                                       const std::vector<int32_t>& pred_win) {
  std::vector<int32_t> raster(size_t(ri.h) * ri.w, kIgnoreLabel);
  for (int v = 0; v < tight.rows(); ++v)
    for (int u = 0; u < tight.cols(); ++u)
      raster[size_t(v + tight.v0) * ri.w + (u + tight.u0)] =
          pred_win[size_t(v) * size_t(tight.cols()) + size_t(u)];
  return raster;
}

int cmd_synth(const CommonArgs& common, const std::string& out_dir, int frames_override) {
  RunConfig cfg = load_config(common);
  if (frames_override > 0) cfg.synth.frames = frames_override;
  auto frames = gen_synthetic(cfg.synth);
  write_dataset(frames, out_dir);
  std::cout << "wrote " << frames.size() << " frames to " << out_dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& out_dir, int steps_override) {
  RunConfig cfg = load_config(common);
  if (steps_override > 0) cfg.train.max_steps = steps_override;
  auto train_frames = load_split(cfg, cfg.data.train_begin, cfg.data.train_end);
  std::vector<FramePrep<float>> val_frames;
  if (cfg.data.val_end > cfg.data.val_begin)
    val_frames = load_split(cfg, cfg.data.val_begin, cfg.data.val_end);

  PyFuNetwork net(cfg.model, cfg.train.seed);
  fs::create_directories(out_dir);
  std::ofstream log(out_dir + "/metrics.jsonl");
  check(bool(log), "cannot write " + out_dir + "/metrics.jsonl");
  auto result = train_loop(net, train_frames, val_frames.empty() ? nullptr : &val_frames,
                           cfg.train, cfg.knn, &log);
  save_checkpoint(net.params(), out_dir + "/pyfu.ckpt");
  std::cout << "trained " << cfg.train.max_steps << " steps, final loss " << result.final_loss
            << ", mIoU " << result.final_miou << ", checkpoint " << out_dir << "/pyfu.ckpt\n";
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint, const std::string& split,
             const std::string& out_path, const std::string& render_dir) {
  RunConfig cfg = load_config(common);
  const bool train_split = split == "train";
  auto frames = train_split ? load_split(cfg, cfg.data.train_begin, cfg.data.train_end)
                            : load_split(cfg, cfg.data.val_begin, cfg.data.val_end);
  PyFuNetwork net(cfg.model, cfg.train.seed);
  load_checkpoint(net.params(), checkpoint);
  auto eval = evaluate(net, frames, cfg.knn);
  print_report(eval);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    check(bool(out), "cannot write " + out_path);
    out << report_json(eval).dump(2) << "\n";
  }
  if (!render_dir.empty()) {
    fs::create_directories(render_dir);
    for (size_t i = 0; i < frames.size(); ++i) {
      const auto& f = frames[i];
      auto out = net.forward(f, false);
      auto raster = prediction_raster(f.ri, out.tight, argmax_channels(out.overlap_logits));
      render_labels(render_dir + "/" + frame_name(int(i)) + "_pred.ppm", f.ri, raster,
                    cfg.model.classes);
      render_labels(render_dir + "/" + frame_name(int(i)) + "_gt.ppm", f.ri, f.ri.labels,
                    cfg.model.classes);
    }
  }
  return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& checkpoint, const std::string& split,
              const std::string& out_dir) {
  RunConfig cfg = load_config(common);
  const bool train_split = split == "train";
  const int begin = train_split ? cfg.data.train_begin : cfg.data.val_begin;
  const int end = train_split ? cfg.data.train_end : cfg.data.val_end;
  check(end > begin, "empty frame range for split " + split);
  check(!cfg.data.root.empty(), "no dataset root configured (data.root or --data)");
  PyFuNetwork net(cfg.model, cfg.train.seed);
  load_checkpoint(net.params(), checkpoint);
  fs::create_directories(out_dir);
  for (int i = begin; i < end; ++i) {
    auto bundle = load_frame(cfg.data.root, frame_name(i));
    auto f = prepare_frame<float>(bundle, cfg.model.sensor);
    auto out = net.forward(f, false);
    auto raster = prediction_raster(f.ri, out.tight, argmax_channels(out.overlap_logits));
    auto labels = knn_postprocess(f.cloud, f.index, f.ri, raster, cfg.knn);
    write_predictions(labels, out_dir + "/" + frame_name(i) + ".label");
  }
  std::cout << "wrote predictions for frames [" << begin << "," << end << ") to " << out_dir
            << "\n";
  return 0;
}

int cmd_selftest(int threads) {
  if (threads > 0) set_max_threads(threads);
  int failures = 0;
  auto report = [&](const std::vector<CheckResult>& results) {
    for (const auto& r : results) {
      std::cout << (r.pass ? "  ok   " : "  FAIL ") << r.name << " - " << r.detail << "\n";
      if (!r.pass) ++failures;
    }
  };
  std::cout << "gradient suite\n";
  report(gradient_suite());
  std::cout << "projection suite\n";
  report(projection_suite());
  std::cout << "knn suite\n";
  report(knn_suite(25));
  std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pyfu: multi-scale lidar-camera fusion for 3D semantic segmentation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string out_dir, checkpoint, split = "val", report_path, render_dir;
  int frames_override = 0, steps_override = 0;

  auto add_common = [&](CLI::App* cmd, bool with_data = true) {
    cmd->add_option("--config", common.config_path, "TOML run configuration")->required();
    if (with_data) cmd->add_option("--data", common.data_root, "dataset root (overrides data.root)");
    cmd->add_option("--preset", common.preset, "baseline | lf | pfb | pfb-pfh");
    cmd->add_option("--seed", common.seed, "seed for every random draw");
    cmd->add_option("--threads", common.threads, "worker cap for parallel kernels");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, false);
  synth->add_option("--out", out_dir, "output dataset root")->required();
  synth->add_option("--frames", frames_override, "number of frames (overrides synth.frames)");

  auto* train = app.add_subcommand("train", "train a network");
  add_common(train);
  train->add_option("--out", out_dir, "output directory (checkpoint + metrics log)")->required();
  train->add_option("--steps", steps_override, "step count (overrides train.max_steps)");

  auto* eval = app.add_subcommand("eval", "evaluate on the overlap field of view");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--split", split, "train | val")->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--out", report_path, "write the machine-readable report here");
  eval->add_option("--render", render_dir, "write range-view label renderings here");

  auto* infer = app.add_subcommand("infer", "write per-point predictions");
  add_common(infer);
  infer->add_option("--checkpoint", checkpoint, "checkpoint to run")->required();
  infer->add_option("--split", split, "train | val")->check(CLI::IsMember({"train", "val"}));
  infer->add_option("--out", out_dir, "output directory for .label files")->required();

  auto* selftest = app.add_subcommand("selftest", "run gradient/projection/kNN oracle suites");
  int selftest_threads = 0;
  selftest->add_option("--threads", selftest_threads, "worker cap for parallel kernels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, out_dir, frames_override);
    if (train->parsed()) return cmd_train(common, out_dir, steps_override);
    if (eval->parsed()) return cmd_eval(common, checkpoint, split, report_path, render_dir);
    if (infer->parsed()) return cmd_infer(common, checkpoint, split, out_dir);
    if (selftest->parsed()) return cmd_selftest(selftest_threads);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
