#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace evnas {

/// Dense float tensor. Shape is a plain dimension list; data is row-major.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return data.size(); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
  }
};

/// Learnable parameter: value plus an accumulating gradient buffer. The
/// gradient is live between a backward pass and the optimizer step that
/// consumes it.
struct Param {
  Tensor value;
  Tensor grad;
  bool grad_live = false;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)), grad(value.shape) {}

  void accumulate_grad(size_t i, float g) {
    grad.data[i] += g;
    grad_live = true;
  }

  void mark_grad_live() { grad_live = true; }

  void zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), 0.0f);
    grad_live = false;
  }
};

/// Reverse-mode tape. Forward operations push value nodes in topological
/// order; backward walks them in reverse. When constructed non-recording,
/// closures are dropped and the same forward code runs inference-only.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily on first contribution
    std::function<void(Tape&)> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  int push(Tensor value, std::function<void(Tape&)> backward = {}) {
    Node n;
    n.value = std::move(value);
    if (recording_) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  /// Gradient buffer of a node, allocated zero on first use.
  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty() && !n.value.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  bool grad_allocated(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

  int size() const { return static_cast<int>(nodes_.size()); }

  /// Reverse pass from a scalar root. Tape-node gradients are scratch and
  /// reset on every call; parameter gradients accumulate across calls.
  void backward(int root) {
    if (!recording_ || nodes_.empty()) throw std::logic_error("backward without a recorded forward pass");
    if (value(root).numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    grad(root).data[0] = 1.0f;
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.backward && grad_allocated(id)) n.backward(*this);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  bool recording_;
  std::vector<Node> nodes_;
};

}  // namespace evnas
