#pragma once
// kNN label refinement: each 3D point is relabeled from the range-nearest
// labeled pixels inside an S x S range-view window around its projection,
// which removes the smearing artifacts of nearest-wins rasterization.
//
// Scoring, pinned for both the production path and the oracle:
//   penalty(du,dv)  = exp((du^2 + dv^2) / (2 sigma^2))   (inverse gaussian)
//   distance        = |range_pixel - range_point| * penalty
//   selection       = k smallest by (distance, row, col)
//   survivors       = selected with distance <= cutoff
//   vote weight     = exp(-(du^2 + dv^2) / (2 sigma^2))
//   label           = argmax of summed vote weights, ties to the smaller
//                     class; no survivors falls back to the point's own pixel.

#include <algorithm>

#include "pyfu/rangeview.hpp"

namespace pyfu {

struct KnnConfig {
  int window = 5;       // S, odd
  int k = 5;
  float cutoff = 1.0f;  // meters, on the penalized distance
  float sigma = 1.0f;
};

inline void validate_knn(const KnnConfig& cfg) {
  check(cfg.window >= 1 && cfg.window % 2 == 1, "knn window must be odd and >= 1");
  check(cfg.k >= 1 && cfg.k <= cfg.window * cfg.window, "knn k must be in [1, window^2]");
  check(cfg.cutoff > 0.0f && cfg.sigma > 0.0f, "knn cutoff and sigma must be positive");
}

namespace detail {

struct KnnCandidate {
  float dist;
  int v, u;
  int32_t label;
  float vote;

  bool operator<(const KnnCandidate& o) const {
    if (dist != o.dist) return dist < o.dist;
    if (v != o.v) return v < o.v;
    return u < o.u;
  }
};

inline int32_t vote_winner(const KnnCandidate* survivors, int count, int32_t fallback) {
  if (count == 0) return fallback;
  // classes are small ints; accumulate on a sparse list to avoid assumptions
  std::vector<std::pair<int32_t, float>> tally;
  for (int i = 0; i < count; ++i) {
    bool found = false;
    for (auto& [label, sum] : tally)
      if (label == survivors[i].label) {
        sum += survivors[i].vote;
        found = true;
        break;
      }
    if (!found) tally.emplace_back(survivors[i].label, survivors[i].vote);
  }
  int32_t best = tally[0].first;
  float best_sum = tally[0].second;
  for (const auto& [label, sum] : tally)
    if (sum > best_sum || (sum == best_sum && label < best)) {
      best = label;
      best_sum = sum;
    }
  return best;
}

}  // namespace detail

inline std::vector<int32_t> knn_postprocess(const PointCloud& cloud, const ProjectionIndex& idx,
                                            const RangeImage& ri,
                                            const std::vector<int32_t>& pixel_labels,
                                            const KnnConfig& cfg) {
  validate_knn(cfg);
  check(int(pixel_labels.size()) == ri.h * ri.w, "pixel labels must match the range image");
  check(int(idx.pu.size()) == cloud.size(), "projection index does not match cloud");
  const int half = cfg.window / 2;
  const float inv_two_sigma2 = 1.0f / (2.0f * cfg.sigma * cfg.sigma);
  std::vector<int32_t> out(size_t(cloud.size()));

  parallel_for(0, cloud.size(), [&](int64_t b, int64_t e) {
    std::vector<detail::KnnCandidate> best(size_t(cfg.k));
    for (int64_t p = b; p < e; ++p) {
      const int pu = idx.pu[size_t(p)];
      const int pv = idx.pv[size_t(p)];
      const float pr = cloud.range(int(p));
      int count = 0;
      for (int dv = -half; dv <= half; ++dv) {
        const int v = pv + dv;
        if (v < 0 || v >= ri.h) continue;
        for (int du = -half; du <= half; ++du) {
          const int u = pu + du;
          if (u < 0 || u >= ri.w) continue;
          const size_t pix = size_t(v) * ri.w + u;
          if (!ri.mask[pix] || pixel_labels[pix] == kIgnoreLabel) continue;
          const float off2 = float(du * du + dv * dv);
          detail::KnnCandidate c;
          c.dist = std::abs(ri.range[pix] - pr) * std::exp(off2 * inv_two_sigma2);
          c.v = v;
          c.u = u;
          c.label = pixel_labels[pix];
          c.vote = std::exp(-off2 * inv_two_sigma2);
          // bounded insertion keeps the k smallest in sorted order
          if (count < cfg.k) {
            int i = count++;
            while (i > 0 && c < best[size_t(i - 1)]) {
              best[size_t(i)] = best[size_t(i - 1)];
              --i;
            }
            best[size_t(i)] = c;
          } else if (c < best[size_t(cfg.k - 1)]) {
            int i = cfg.k - 1;
            while (i > 0 && c < best[size_t(i - 1)]) {
              best[size_t(i)] = best[size_t(i - 1)];
              --i;
            }
            best[size_t(i)] = c;
          }
        }
      }
      int survivors = 0;
      for (int i = 0; i < count; ++i)
        if (best[size_t(i)].dist <= cfg.cutoff) best[size_t(survivors++)] = best[size_t(i)];
      const int32_t own = pixel_labels[size_t(pv) * ri.w + pu];
      out[size_t(p)] = detail::vote_winner(best.data(), survivors, own);
    }
  }, 512);
  return out;
}

// Verification oracle: identical semantics through an exhaustive scan with a
// full sort. Exists for testing only.
inline std::vector<int32_t> brute_force_knn_oracle(const PointCloud& cloud,
                                                   const ProjectionIndex& idx, const RangeImage& ri,
                                                   const std::vector<int32_t>& pixel_labels,
                                                   const KnnConfig& cfg) {
  validate_knn(cfg);
  check(int(pixel_labels.size()) == ri.h * ri.w, "pixel labels must match the range image");
  const int half = cfg.window / 2;
  std::vector<int32_t> out(size_t(cloud.size()));
  for (int p = 0; p < cloud.size(); ++p) {
    const int pu = idx.pu[size_t(p)];
    const int pv = idx.pv[size_t(p)];
    const float pr = cloud.range(p);
    std::vector<detail::KnnCandidate> all;
    for (int v = pv - half; v <= pv + half; ++v) {
      for (int u = pu - half; u <= pu + half; ++u) {
        if (v < 0 || v >= ri.h || u < 0 || u >= ri.w) continue;
        const size_t pix = size_t(v) * ri.w + u;
        if (!ri.mask[pix] || pixel_labels[pix] == kIgnoreLabel) continue;
        const float off2 = float((u - pu) * (u - pu) + (v - pv) * (v - pv));
        detail::KnnCandidate c;
        c.dist = std::abs(ri.range[pix] - pr) *
                 std::exp(off2 / (2.0f * cfg.sigma * cfg.sigma));
        c.v = v;
        c.u = u;
        c.label = pixel_labels[pix];
        c.vote = std::exp(-off2 / (2.0f * cfg.sigma * cfg.sigma));
        all.push_back(c);
      }
    }
    std::sort(all.begin(), all.end());
    if (int(all.size()) > cfg.k) all.resize(size_t(cfg.k));
    std::vector<detail::KnnCandidate> kept;
    for (const auto& c : all)
      if (c.dist <= cfg.cutoff) kept.push_back(c);
    const int32_t own = pixel_labels[size_t(pv) * ri.w + pu];
    out[size_t(p)] = detail::vote_winner(kept.data(), int(kept.size()), own);
  }
  return out;
}

}  // namespace pyfu
