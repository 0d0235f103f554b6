#pragma once
// SGD with weight decay and momentum: v <- m*v + g + wd*p, p <- p - lr*v.
// Frozen params and buffers are never touched.

#include "pyfu/tensor.hpp"

namespace pyfu {

template <typename T>
class SgdT {
 public:
  SgdT(ParamStoreT<T>& store, T weight_decay, T momentum)
      : store_(&store), weight_decay_(weight_decay), momentum_(momentum) {}

  void step(T lr) {
    check(lr >= T(0), "sgd: learning rate must be >= 0");
    if (velocity_.size() != store_->size()) velocity_.resize(store_->size());
    for (size_t i = 0; i < store_->size(); ++i) {
      ParamT<T>& p = store_->at(i);
      if (p.frozen || p.buffer) continue;
      if (!p.tensor.has_grad()) continue;  // not part of this step's graph
      std::vector<T>& g = p.tensor.grad();
      std::vector<T>& v = p.tensor.values();
      auto& vel = velocity_[i];
      if (vel.empty()) vel.assign(v.size(), T(0));
      for (size_t j = 0; j < v.size(); ++j) {
        if (std::isnan(double(g[j]))) fail("sgd: NaN gradient in parameter " + p.name);
        const T upd = g[j] + weight_decay_ * v[j];
        vel[j] = momentum_ * vel[j] + upd;
        v[j] -= lr * vel[j];
      }
    }
  }

  T weight_decay() const { return weight_decay_; }
  T momentum() const { return momentum_; }

 private:
  ParamStoreT<T>* store_;
  T weight_decay_;
  T momentum_;
  std::vector<std::vector<T>> velocity_;
};

using Sgd = SgdT<float>;

}  // namespace pyfu
