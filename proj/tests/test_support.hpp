#pragma once
// Shared test helpers: random tensor builders and independent brute-force
// oracles. Oracles deliberately take a different computational route than the
// library kernels they check.

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "pyfu/ops.hpp"
#include "pyfu/tensor.hpp"

namespace pyfu_test {

template <typename T>
pyfu::TensorT<T> random_tensor(pyfu::Shape4 s, std::mt19937& rng, T lo = T(-1), T hi = T(1),
                               bool requires_grad = false) {
  std::vector<T> v(size_t(s.numel()));
  for (auto& x : v) x = lo + (hi - lo) * T(pyfu::uniform01(rng));
  return pyfu::TensorT<T>::from_vector(s, std::move(v), requires_grad);
}

template <typename T>
std::vector<T> random_coeffs(int64_t n, std::mt19937& rng) {
  std::vector<T> c(static_cast<size_t>(n));
  for (auto& x : c) x = T(pyfu::uniform01(rng)) * T(2) - T(1);
  return c;
}

// Brute-force grouped correlation: materializes the zero-padded input, then
// runs the definition directly. Independent of pyfu::conv2d's loop structure.
template <typename T>
pyfu::TensorT<T> naive_conv2d(const pyfu::TensorT<T>& x, const pyfu::TensorT<T>& w,
                              std::type_identity_t<const pyfu::TensorT<T>*> bias,
                              const pyfu::ConvGeom& g) {
  const pyfu::Shape4 xs = x.shape();
  const pyfu::Shape4 ws = w.shape();
  const int ph = xs.h + 2 * g.pad_y;
  const int pw = xs.w + 2 * g.pad_x;
  std::vector<T> padded(size_t(xs.n) * xs.c * ph * pw, T(0));
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx)
          padded[size_t((((int64_t(n) * xs.c + c) * ph) + y + g.pad_y) * pw + xx + g.pad_x)] =
              x.at(n, c, y, xx);

  const int oh = (ph - g.dil_y * (ws.h - 1) - 1) / g.stride_y + 1;
  const int ow = (pw - g.dil_x * (ws.w - 1) - 1) / g.stride_x + 1;
  const int cg = xs.c / g.groups;
  const int ocg = ws.n / g.groups;
  pyfu::TensorT<T> out = pyfu::TensorT<T>::zeros({xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = bias ? bias->at(0, oc, 0, 0) : T(0);
          for (int ic = 0; ic < cg; ++ic)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = oy * g.stride_y + ky * g.dil_y;
                const int ix = ox * g.stride_x + kx * g.dil_x;
                acc += padded[size_t(((int64_t(n) * xs.c + (oc / ocg) * cg + ic) * ph + iy) * pw + ix)] *
                       w.at(oc, ic, ky, kx);
              }
          out.at(n, oc, oy, ox) = acc;
        }
  return out;
}

template <typename T>
double max_abs_diff(const pyfu::TensorT<T>& a, const pyfu::TensorT<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

}  // namespace pyfu_test
