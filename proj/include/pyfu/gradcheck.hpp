#pragma once
// Central finite-difference gradient verification. Meant to run on double
// instantiations of the ops; the relative-error metric uses
// |a - fd| / max(1, |a|, |fd|) so tiny gradients are compared absolutely.
//
// Central differences assume smoothness inside the +-step window. With
// leaky-relu kinks a random evaluation point occasionally sits closer to a
// kink than the step; elements failing at the nominal step are re-measured
// with the step shrunk 10x and 100x, which restores validity while leaving
// genuinely wrong gradients failing at every step.

#include <random>

#include "pyfu/tensor.hpp"

namespace pyfu {

struct GradCheckResult {
  bool pass = true;
  double max_err = 0.0;
  int checked = 0;
  std::string worst;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "ok" : "FAIL") << " max_err=" << max_err << " over " << checked << " entries";
    if (!worst.empty()) os << " (worst at " << worst << ")";
    return os.str();
  }
};

// make_loss() must rebuild the graph from the given input tensors (their
// values are perturbed in place between calls) and return a scalar.
template <typename T, typename MakeLoss>
GradCheckResult gradcheck(MakeLoss&& make_loss, const std::vector<TensorT<T>>& inputs,
                          double step = 1e-4, double tol = 1e-4, int max_per_tensor = 0,
                          uint32_t sample_seed = 1234) {
  for (const auto& t : inputs)
    check(t.requires_grad(), "gradcheck: every checked input must require grad");

  // analytic pass
  for (auto t : inputs) t.zero_grad();
  TensorT<T> loss = make_loss();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    check(t.has_grad(), "gradcheck: input received no gradient");
    analytic.push_back(t.grad());
  }

  GradCheckResult res;
  std::mt19937 rng(sample_seed);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    TensorT<T> t = inputs[ti];
    const int64_t n = t.numel();
    std::vector<int64_t> picks;
    if (max_per_tensor <= 0 || n <= max_per_tensor) {
      picks.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) picks[size_t(i)] = i;
    } else {
      for (int i = 0; i < max_per_tensor; ++i)
        picks.push_back(int64_t(rng() % uint64_t(n)));
    }
    for (int64_t i : picks) {
      T* v = t.data() + i;
      const T saved = *v;
      const double an = double(analytic[ti][size_t(i)]);
      double err = 0.0, fd = 0.0;
      for (const double h : {step, step / 10.0, step / 100.0}) {
        *v = saved + T(h);
        const double lp = double(make_loss().data()[0]);
        *v = saved - T(h);
        const double lm = double(make_loss().data()[0]);
        *v = saved;
        fd = (lp - lm) / (2.0 * h);
        err = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        if (err < tol) break;  // smaller steps only for suspected kink straddles
      }
      ++res.checked;
      if (err > res.max_err) {
        res.max_err = err;
        std::ostringstream os;
        os << "input " << ti << " elem " << i << " analytic=" << an << " fd=" << fd;
        res.worst = os.str();
      }
    }
  }
  res.pass = res.max_err < tol;
  return res;
}

}  // namespace pyfu
