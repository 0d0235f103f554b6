#pragma once
// Shared plumbing: shape type, error helpers, deterministic RNG draws and a
// small fork/join parallel_for honoring the global worker cap.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pyfu {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Configuration-file problems are reported separately so the CLI can map them
// to the usage-error exit code.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return int64_t(n) * c * h * w; }
  int64_t index(int in, int ic, int iy, int ix) const {
    return ((int64_t(in) * c + ic) * h + iy) * w + ix;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// ---- worker cap (--threads) ---------------------------------------------

inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{0};  // 0 = use hardware concurrency
  return cap;
}

inline void set_max_threads(int n) { thread_cap().store(n > 0 ? n : 0); }

inline int max_threads() {
  int cap = thread_cap().load();
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  return cap > 0 ? std::min(cap, hw) : hw;
}

// Splits [begin,end) into contiguous chunks, one worker each. Chunks are
// disjoint, so bodies writing disjoint output ranges stay deterministic.
template <typename F>
inline void parallel_for(int64_t begin, int64_t end, F&& body, int64_t min_items_per_worker = 256) {
  const int64_t total = end - begin;
  if (total <= 0) return;
  int workers = int(std::min<int64_t>(max_threads(), std::max<int64_t>(1, total / std::max<int64_t>(1, min_items_per_worker))));
  if (workers <= 1) {
    body(begin, end);
    return;
  }
  const int64_t chunk = (total + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers - 1));
  for (int t = 1; t < workers; ++t) {
    const int64_t b = begin + chunk * t;
    const int64_t e = std::min(end, b + chunk);
    if (b < e) pool.emplace_back([&body, b, e] { body(b, e); });
  }
  body(begin, std::min(end, begin + chunk));
  for (auto& th : pool) th.join();
}

// ---- deterministic RNG draws ----------------------------------------------
// mt19937 raw draws only; distributions are hand-rolled so that identical
// seeds give identical streams on every platform.

inline float uniform01(std::mt19937& rng) {
  return float(rng() >> 8) * (1.0f / 16777216.0f);  // 24-bit mantissa in [0,1)
}

inline float uniform(std::mt19937& rng, float lo, float hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline int uniform_int(std::mt19937& rng, int lo, int hi_exclusive) {
  if (hi_exclusive <= lo) return lo;
  return lo + int(rng() % uint32_t(hi_exclusive - lo));
}

inline double deg2rad(double deg) { return deg * 3.14159265358979323846 / 180.0; }

// Label value meaning "no class here"; class 0 is a valid class.
constexpr int32_t kIgnoreLabel = 255;

}  // namespace pyfu
