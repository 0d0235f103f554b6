#pragma once
// Training and evaluation: inverse-frequency class weights, the poly schedule,
// overlap-restricted confusion/IoU metrics, the SGD training loop with a
// line-delimited metrics log, and point-level evaluation through the kNN
// post-processing.

#include <iostream>

#include <json.hpp>

#include "pyfu/network.hpp"
#include "pyfu/optim.hpp"
#include "pyfu/postprocess.hpp"

namespace pyfu {

// w_c = log(n / n_c): strictly decreasing in class frequency and positive for
// every class that does not own the whole histogram. Classes without
// observations inherit the rarest class's weight.
inline std::vector<double> class_weights(const std::vector<int64_t>& histogram) {
  int64_t n = 0;
  for (int64_t c : histogram) {
    check(c >= 0, "class histogram must be non-negative");
    n += c;
  }
  check(n > 0, "class histogram is empty");
  int64_t rarest = n;
  for (int64_t c : histogram)
    if (c > 0) rarest = std::min(rarest, c);
  std::vector<double> w(histogram.size());
  for (size_t c = 0; c < histogram.size(); ++c) {
    const int64_t count = histogram[c] > 0 ? histogram[c] : rarest;
    w[c] = std::log(double(n) / double(count));
  }
  return w;
}

inline double poly_lr(int64_t i, int64_t i_max, double base, double power = 0.9) {
  check(i_max >= 1, "poly_lr: i_max must be >= 1");
  check(i >= 0 && i <= i_max, "poly_lr: iteration outside [0, i_max]");
  return base * (1.0 - std::pow(double(i) / double(i_max), power));
}

// ---- confusion / IoU ------------------------------------------------------------

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : classes_(classes) {
    check(classes >= 1, "confusion matrix needs at least one class");
    counts_.assign(size_t(classes) * size_t(classes), 0);
  }

  void add(int32_t truth, int32_t pred) {
    check(truth >= 0 && truth < classes_, "truth label " + std::to_string(truth) +
                                              " outside [0," + std::to_string(classes_) + ")");
    check(pred >= 0 && pred < classes_, "predicted label " + std::to_string(pred) +
                                            " outside [0," + std::to_string(classes_) + ")");
    ++counts_[size_t(truth) * size_t(classes_) + size_t(pred)];
  }

  void merge(const ConfusionMatrix& other) {
    check(other.classes_ == classes_, "cannot merge confusion matrices of different sizes");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  uint64_t at(int truth, int pred) const {
    return counts_[size_t(truth) * size_t(classes_) + size_t(pred)];
  }
  int classes() const { return classes_; }
  uint64_t total() const {
    uint64_t t = 0;
    for (uint64_t c : counts_) t += c;
    return t;
  }

 private:
  int classes_;
  std::vector<uint64_t> counts_;
};

// Counts only elements whose mask flag is set and whose target is not the
// ignore label; predictions land on rows of their true class.
inline void confusion_update(ConfusionMatrix& cm, const std::vector<int32_t>& predictions,
                             const std::vector<int32_t>& targets,
                             const std::vector<uint8_t>& mask) {
  check(predictions.size() == targets.size() && targets.size() == mask.size(),
        "confusion_update: array lengths differ");
  for (size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i] || targets[i] == kIgnoreLabel) continue;
    cm.add(targets[i], predictions[i]);
  }
}

struct IouReport {
  std::vector<double> iou;
  std::vector<uint8_t> present;  // TP+FP+FN > 0
  double miou = 0.0;
};

// IoU_c = TP / (TP + FP + FN); absent classes are excluded from the mean
// unless include_absent counts them as zero.
inline IouReport iou_miou(const ConfusionMatrix& cm, bool include_absent = false) {
  check(cm.total() > 0, "iou_miou: empty confusion matrix");
  const int k = cm.classes();
  IouReport rep;
  rep.iou.assign(size_t(k), 0.0);
  rep.present.assign(size_t(k), 0);
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const uint64_t denom = tp + fp + fn;
    if (denom > 0) {
      rep.present[size_t(c)] = 1;
      rep.iou[size_t(c)] = double(tp) / double(denom);
    }
    if (denom > 0 || include_absent) {
      sum += rep.iou[size_t(c)];
      ++counted;
    }
  }
  check(counted > 0, "iou_miou: no class was ever seen or predicted");
  rep.miou = sum / counted;
  return rep;
}

// ---- evaluation -----------------------------------------------------------------

struct EvalResult {
  ConfusionMatrix cm;           // point-level, kNN-refined, overlap-only
  double pixel_accuracy = 0.0;  // labeled overlap pixels
  IouReport report;
};

// Full per-frame protocol: forward in inference mode, argmax over the tight
// overlap, kNN refinement back to the points, confusion over labeled points
// inside the overlap.
inline EvalResult evaluate(PyFuNetwork& net, const std::vector<FramePrep<float>>& frames,
                           const KnnConfig& knn) {
  check(!frames.empty(), "evaluate: no frames");
  const int k = net.config().classes;
  EvalResult res{ConfusionMatrix(k)};
  uint64_t pix_ok = 0, pix_all = 0;
  for (const auto& f : frames) {
    check(f.cloud.labeled(), "evaluate: frame without point labels");
    auto out = net.forward(f, false);
    const OverlapWindow tight = out.tight;
    auto pred_win = argmax_channels(out.overlap_logits);

    // pixel accuracy over labeled overlap pixels
    for (int v = 0; v < tight.rows(); ++v)
      for (int u = 0; u < tight.cols(); ++u) {
        const int32_t gt = f.ri.labels[size_t(v + tight.v0) * f.ri.w + (u + tight.u0)];
        if (gt == kIgnoreLabel) continue;
        ++pix_all;
        if (pred_win[size_t(v) * size_t(tight.cols()) + size_t(u)] == gt) ++pix_ok;
      }

    // scatter window predictions into a full raster, refine, unproject
    std::vector<int32_t> raster(size_t(f.ri.h) * f.ri.w, kIgnoreLabel);
    for (int v = 0; v < tight.rows(); ++v)
      for (int u = 0; u < tight.cols(); ++u)
        raster[size_t(v + tight.v0) * f.ri.w + (u + tight.u0)] =
            pred_win[size_t(v) * size_t(tight.cols()) + size_t(u)];
    auto point_labels = knn_postprocess(f.cloud, f.index, f.ri, raster, knn);

    std::vector<uint8_t> in_overlap(size_t(f.cloud.size()), 0);
    for (int p = 0; p < f.cloud.size(); ++p) {
      const int u = f.index.pu[size_t(p)], v = f.index.pv[size_t(p)];
      const bool inside = v >= tight.v0 && v < tight.v1 && u >= tight.u0 && u < tight.u1;
      in_overlap[size_t(p)] = inside && point_labels[size_t(p)] != kIgnoreLabel ? 1 : 0;
    }
    confusion_update(res.cm, point_labels, f.cloud.labels, in_overlap);
  }
  res.pixel_accuracy = pix_all > 0 ? double(pix_ok) / double(pix_all) : 0.0;
  res.report = iou_miou(res.cm);
  return res;
}

// ---- training -------------------------------------------------------------------

struct TrainConfig {
  double base_lr = 0.07;
  int max_steps = 2000;
  double lr_power = 0.9;
  double weight_decay = 0.0001;
  double momentum = 0.9;
  int batch_size = 1;
  bool hflip = true;
  double hflip_p = 0.5;
  bool random_crop = false;
  int crop_h = 64, crop_w = 1024;
  uint32_t seed = 1;
  int eval_every = 0;  // 0: evaluate only after the last step
  int log_every = 1;
  // From this step on, normalization layers keep their running statistics
  // fixed and training optimizes the exact inference function. Closes the
  // per-frame-statistics gap of batch-size-1 training. -1 disables.
  int freeze_stats_after = -1;
  double grad_clip = 0.0;  // global L2 gradient-norm clip, 0 disables
};

// Scales every trainable gradient so the global L2 norm is at most max_norm.
inline double clip_gradients(ParamStoreT<float>& store, double max_norm) {
  double sq = 0.0;
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    if (p.frozen || p.buffer || !p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = float(max_norm / norm);
    for (size_t i = 0; i < store.size(); ++i) {
      auto& p = store.at(i);
      if (p.frozen || p.buffer || !p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g *= s;
    }
  }
  return norm;
}

struct TrainResult {
  double final_loss = 0.0;
  double final_miou = 0.0;
  double final_pixel_accuracy = 0.0;
  std::string log;  // line-delimited json records
};

inline std::vector<int32_t> window_labels(const std::vector<int32_t>& labels, int w,
                                          const OverlapWindow& win) {
  std::vector<int32_t> out(size_t(win.rows()) * size_t(win.cols()));
  for (int v = 0; v < win.rows(); ++v)
    for (int u = 0; u < win.cols(); ++u)
      out[size_t(v) * size_t(win.cols()) + size_t(u)] =
          labels[size_t(v + win.v0) * size_t(w) + size_t(u + win.u0)];
  return out;
}

// Histogram of point labels inside each frame's tight overlap.
inline std::vector<int64_t> overlap_label_histogram(const std::vector<FramePrep<float>>& frames,
                                                    int classes) {
  std::vector<int64_t> hist(size_t(classes), 0);
  for (const auto& f : frames) {
    check(f.cloud.labeled(), "training frame without point labels");
    const OverlapWindow tight = f.map.overlap;
    for (int p = 0; p < f.cloud.size(); ++p) {
      const int u = f.index.pu[size_t(p)], v = f.index.pv[size_t(p)];
      if (v < tight.v0 || v >= tight.v1 || u < tight.u0 || u >= tight.u1) continue;
      const int32_t l = f.cloud.labels[size_t(p)];
      if (l == kIgnoreLabel) continue;
      check(l >= 0 && l < classes, "point label " + std::to_string(l) + " outside [0," +
                                       std::to_string(classes) + ")");
      ++hist[size_t(l)];
    }
  }
  return hist;
}

// Deterministic given the seed: every random draw (frame choice, flip, crop)
// comes from one generator in a fixed order, kernels are order-stable, and
// the log carries no timestamps.
inline TrainResult train_loop(PyFuNetwork& net, const std::vector<FramePrep<float>>& train_frames,
                              const std::vector<FramePrep<float>>* val_frames,
                              const TrainConfig& tc, const KnnConfig& knn,
                              std::ostream* log_stream = nullptr) {
  check(!train_frames.empty(), "train_loop: empty training set");
  check(tc.max_steps >= 1 && tc.batch_size >= 1, "train_loop: bad step/batch configuration");
  const int K = net.config().classes;

  const auto hist = overlap_label_histogram(train_frames, K);
  const auto weights_d = class_weights(hist);
  std::vector<float> weights(weights_d.begin(), weights_d.end());
  for (float& w : weights) w = std::max(w, 1e-4f);  // single-class degenerate histograms

  AugmentOps aug;
  aug.hflip_enabled = tc.hflip;
  aug.hflip_p = tc.hflip_p;
  aug.crop_enabled = tc.random_crop;
  aug.crop_h = tc.crop_h;
  aug.crop_w = tc.crop_w;

  std::mt19937 rng(tc.seed);
  SgdT<float> opt(net.params(), float(tc.weight_decay), float(tc.momentum));
  TrainResult result;
  std::ostringstream log;

  for (int step = 0; step < tc.max_steps; ++step) {
    const double lr = poly_lr(step, tc.max_steps, tc.base_lr, tc.lr_power);
    if (tc.freeze_stats_after >= 0 && step == tc.freeze_stats_after)
      net.params().freeze_norm_stats(true);
    net.params().zero_grad();

    TensorT<float> loss;
    for (int b = 0; b < tc.batch_size; ++b) {
      const auto& frame = train_frames[size_t(uniform_int(rng, 0, int(train_frames.size())))];
      TrainSample sample{frame.ri, frame.map, frame.image};
      auto prep = prep_from_sample<float>(augment(sample, aug, rng));
      auto out = net.forward(prep, true);
      auto targets = window_labels(prep.ri.labels, prep.ri.w, out.tight);
      auto ce = weighted_ce_softmax(out.overlap_logits, targets, weights);
      loss = loss.defined() ? add(loss, ce) : ce;
    }
    if (tc.batch_size > 1) loss = scale_by(loss, 1.0f / float(tc.batch_size));

    const double loss_value = double(loss.data()[0]);
    if (std::isnan(loss_value))
      fail("training diverged: NaN loss at step " + std::to_string(step) + " (lr " +
           std::to_string(lr) + ")");
    backward(loss);
    if (tc.grad_clip > 0.0) clip_gradients(net.params(), tc.grad_clip);
    opt.step(float(lr));
    result.final_loss = loss_value;

    const bool last = step + 1 == tc.max_steps;
    const bool eval_now = last || (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0);
    if (eval_now || tc.log_every <= 1 || (step + 1) % tc.log_every == 0) {
      nlohmann::json rec{{"step", step}, {"lr", lr}, {"loss", loss_value}};
      if (eval_now) {
        auto eval = evaluate(net, val_frames ? *val_frames : train_frames, knn);
        rec["miou"] = eval.report.miou;
        rec["pixel_accuracy"] = eval.pixel_accuracy;
        rec["iou"] = eval.report.iou;
        result.final_miou = eval.report.miou;
        result.final_pixel_accuracy = eval.pixel_accuracy;
      }
      const std::string line = rec.dump();
      log << line << "\n";
      if (log_stream) (*log_stream) << line << "\n";
    }
  }
  result.log = log.str();
  return result;
}

}  // namespace pyfu
