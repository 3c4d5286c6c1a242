#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape owns every intermediate value. Ops append nodes whose inputs always
// have smaller ids, so walking ids in reverse is a topological order.
// Leaves created with Tape::leaf alias the caller's storage; the tensor must
// outlive the tape and stay unmodified while it is alive.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marrow/error.hpp"
#include "marrow/tensor.hpp"

namespace marrow {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const { return tape->node(id).shape; }
  std::size_t size() const { return tape->node(id).n; }
  std::span<const T> value() const { return {tape->node(id).data(), tape->node(id).n}; }
  bool requires_grad() const { return tape->node(id).requires_grad; }
  Tensor<T> tensor() const {
    auto v = value();
    return Tensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
  }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> owned;
    const T* external = nullptr;
    std::size_t n = 0;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&, std::size_t)> backward;

    const T* data() const { return external ? external : owned.data(); }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Copies `t` onto the tape; never receives a gradient.
  Var<T> constant(Tensor<T> t) {
    Node node;
    node.shape = t.shape();
    node.n = t.size();
    node.owned = std::move(t.storage());
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Aliases `t` without copying.
  Var<T> leaf(const Tensor<T>& t, bool requires_grad) {
    Node node;
    node.shape = t.shape();
    node.n = t.size();
    node.external = t.data();
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Appends the result of an op. The backward rule receives the tape and the
  /// output's id; it is kept only when some input requires a gradient.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
                std::function<void(Tape&, std::size_t)> backward) {
    return record_span(std::move(shape), std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                       std::move(backward));
  }

  Var<T> record_span(Shape shape, std::vector<T> value, std::span<const Var<T>> inputs,
                     std::function<void(Tape&, std::size_t)> backward) {
    Node node;
    node.shape = std::move(shape);
    node.n = value.size();
    node.owned = std::move(value);
    for (const auto& in : inputs) {
      if (in.tape != this) throw ContractError("op inputs must live on the same tape");
      node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Populates gradients of every node reachable from `loss`. Clears any
  /// gradients left by a previous call.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    Node& root = nodes_[loss.id];
    if (root.n != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.shape));
    for (auto& node : nodes_) node.grad.clear();
    if (!root.requires_grad) return;
    root.grad.assign(1, T(1));
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.backward && !node.grad.empty()) node.backward(*this, id);
    }
  }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  std::span<const T> grad(Var<T> v) {
    Node& node = nodes_[v.id];
    if (node.grad.empty()) node.grad.assign(node.n, T(0));
    return node.grad;
  }

  Tensor<T> grad_tensor(Var<T> v) {
    auto g = grad(v);
    return Tensor<T>(nodes_[v.id].shape, std::vector<T>(g.begin(), g.end()));
  }

  /// Writable gradient buffer for an op's input, or nullptr when the input
  /// does not need one.
  T* grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad.assign(node.n, T(0));
    return node.grad.data();
  }

  const T* value(std::size_t id) const { return nodes_[id].data(); }
  const T* grad_of(std::size_t id) const { return nodes_[id].grad.data(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void require_matrix(const Var<T>& v, const char* op) {
  if (v.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

// C[m×n] = A[m×k] · B[k×n]; i-k-j order, accumulation over k ascending.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = a[i * k + t];
      const T* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

}  // namespace detail


}  // namespace marrow
