#pragma once
// Dense NCHW tensors over a reverse-mode tape.
//
// A TensorT<T> is a shared handle to a NodeT<T>: value buffer, lazily
// allocated gradient buffer, and (for op outputs) the parent handles plus a
// closure that pushes the node's gradient into its parents. T is float in
// production; double instantiations exist for gradient verification.

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "pyfu/common.hpp"

namespace pyfu {

template <typename T>
struct NodeT {
  Shape4 shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  std::function<void(NodeT<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

  static TensorT zeros(Shape4 s, bool requires_grad = false) {
    return filled(s, T(0), requires_grad);
  }

  static TensorT filled(Shape4 s, T v, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = s;
    n->value.assign(size_t(s.numel()), v);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_vector(Shape4 s, std::vector<T> data, bool requires_grad = false) {
    check(int64_t(data.size()) == s.numel(),
          "tensor data length " + std::to_string(data.size()) + " does not match shape " + s.str());
    auto n = std::make_shared<NodeT<T>>();
    n->shape = s;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape4& shape() const { return node_->shape; }
  int64_t numel() const { return node_->shape.numel(); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T& at(int n, int c, int y, int x) { return node_->value[size_t(node_->shape.index(n, c, y, x))]; }
  T at(int n, int c, int y, int x) const { return node_->value[size_t(node_->shape.index(n, c, y, x))]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  TensorT detached_copy() const {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return TensorT(std::move(n));
  }

  std::shared_ptr<NodeT<T>>& node() { return node_; }
  const std::shared_ptr<NodeT<T>>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT<T>> node_;
};

// Creates an op output. requires_grad is inherited from the parents; the
// caller installs backward_fn only when it is set.
template <typename T>
TensorT<T> make_op_node(const char* op, Shape4 shape,
                        std::vector<std::shared_ptr<NodeT<T>>> parents) {
  auto n = std::make_shared<NodeT<T>>();
  n->shape = shape;
  n->value.assign(size_t(shape.numel()), T(0));
  n->op = op;
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  return TensorT<T>(std::move(n));
}

// ---- graph -----------------------------------------------------------------
// Topological order over every node reachable from a root, parents first.
// Backward walks the order once in reverse, so each op contributes exactly
// one gradient accumulation pass.

template <typename T>
class GraphT {
 public:
  explicit GraphT(TensorT<T> root) : root_(std::move(root)) {
    check(root_.defined(), "graph root is undefined");
    std::unordered_set<const NodeT<T>*> seen;
    struct Frame {
      NodeT<T>* node;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root_.node().get(), 0});
    seen.insert(root_.node().get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        NodeT<T>* p = f.node->parents[f.next_parent++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order_.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  size_t size() const { return order_.size(); }
  const std::vector<NodeT<T>*>& nodes() const { return order_; }

  void backward() {
    NodeT<T>* root = root_.node().get();
    check(root->value.size() == 1, "backward requires a scalar loss, got shape " + root->shape.str());
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      NodeT<T>* n = *it;
      if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
  }

 private:
  TensorT<T> root_;
  std::vector<NodeT<T>*> order_;
};

template <typename T>
void backward(const TensorT<T>& loss) {
  GraphT<T>(loss).backward();
}

// ---- parameters -------------------------------------------------------------

template <typename T>
struct ParamT {
  TensorT<T> tensor;
  std::string name;
  bool frozen = false;  // frozen params receive no grad and are never stepped
  bool buffer = false;  // running statistics etc.; always frozen
};

template <typename T>
class ParamStoreT {
 public:
  TensorT<T> create(const std::string& name, Shape4 shape, std::vector<T> init, bool frozen = false) {
    return insert(name, shape, std::move(init), frozen, /*buffer=*/false);
  }

  TensorT<T> create_buffer(const std::string& name, Shape4 shape, std::vector<T> init) {
    return insert(name, shape, std::move(init), /*frozen=*/true, /*buffer=*/true);
  }

  size_t size() const { return items_.size(); }
  ParamT<T>& at(size_t i) { return items_[i]; }
  const ParamT<T>& at(size_t i) const { return items_[i]; }

  ParamT<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second];
  }

  // Freezes/unfreezes every trainable param whose name starts with prefix.
  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : items_) {
      if (p.buffer) continue;
      if (p.name.rfind(prefix, 0) == 0) {
        p.frozen = frozen;
        p.tensor.set_requires_grad(!frozen);
      }
    }
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& p : items_)
      if (!p.frozen && !p.buffer) n += p.tensor.numel();
    return n;
  }

  // Shared switch for every normalization layer built from this store: when
  // set, training forwards use the stored running statistics (and stop
  // updating them), so optimization targets the exact inference function.
  std::shared_ptr<bool> norm_stats_frozen_flag() {
    if (!norm_stats_frozen_) norm_stats_frozen_ = std::make_shared<bool>(false);
    return norm_stats_frozen_;
  }
  void freeze_norm_stats(bool frozen) { *norm_stats_frozen_flag() = frozen; }

 private:
  TensorT<T> insert(const std::string& name, Shape4 shape, std::vector<T> init, bool frozen, bool buffer) {
    check(!name.empty(), "parameter name must not be empty");
    check(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    TensorT<T> t = TensorT<T>::from_vector(shape, std::move(init), !frozen);
    index_[name] = items_.size();
    items_.push_back(ParamT<T>{t, name, frozen, buffer});
    return t;
  }

  std::vector<ParamT<T>> items_;  // insertion order; checkpoints rely on it
  std::unordered_map<std::string, size_t> index_;
  std::shared_ptr<bool> norm_stats_frozen_;
};

}  // namespace pyfu
