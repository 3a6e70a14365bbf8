// mert/grad.hpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef MERT_GRAD_HPP_
#define MERT_GRAD_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/// Reverse-mode automatic differentiation over dense row-major matrices.
///
/// Every tensor is two-dimensional (a scalar is 1 x 1, a vector is 1 x n).
/// Each op computes its forward value eagerly and, when any input requires a
/// gradient, records a node holding its inputs and a backward rule. Calling
/// backward() on a scalar walks the recorded graph in reverse topological
/// order exactly once and accumulates gradients into every node that requires
/// one. Leaf gradients accumulate across calls until zero_grad().
///
/// Two element types are instantiated: double (verification) and float
/// (training).
namespace mert::grad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Incompatible operand shapes; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf appeared in an op output, or a domain error (log of <= 0).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  /// Grad buffer, allocated (zeroed) on first use.
  std::vector<T>& grad_buffer();
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(T value);
  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }

  std::span<const T> values() const { return node_->value; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const;

  /// Gradient accumulated by backward(); empty span when none reached this node.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Writable storage of a leaf. Throws for non-leaf tensors.
  std::span<T> mutable_values();

  /// A detached copy: same values, no graph, no grad requirement.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op node from a forward value and a backward rule. The rule reads
/// node.grad and accumulates into node.parents[i]->grad_buffer() for parents
/// that require a gradient. Used by the built-in ops and by custom ops.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backward);

// Elementwise binary ops. `b` may match `a`, be a 1 x n row, an m x 1 column
// or a 1 x 1 scalar; it is broadcast over `a`.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// a (m x k) * b (k x n).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a (m x k) * b^T where b is (n x k).
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;
};

/// Time-major 1D convolution with zero padding.
/// input: frames x in_channels; weight: out_channels x (in_channels/groups * kernel)
/// laid out as [channel-in-group][tap]; bias: 1 x out_channels or undefined.
/// Output frames = (frames + pad_left + pad_right - kernel) / stride + 1.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t kernel, const Conv1dOptions& options);

/// Row-wise normalisation; gamma and beta are 1 x cols.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Row-wise softmax; the row maximum is subtracted before exponentiation.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);

/// Rows of `a` at `indices` (repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> indices);
/// m x 1 column holding a[i, columns[i]].
template <typename T>
Tensor<T> select_per_row(const Tensor<T>& a, std::span<const std::size_t> columns);

/// Each row divided by max(||row||, eps); a zero row maps to zero.
template <typename T> Tensor<T> normalize_rows(const Tensor<T>& a, T eps = T(1e-8));
/// m x 1 cosine similarity between corresponding rows of a and b.
template <typename T> Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b);
/// m x n matrix of cosine similarities between rows of a (m x d) and b (n x d).
template <typename T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// m x 1 column of row sums.
template <typename T> Tensor<T> sum_rows(const Tensor<T>& a);
/// Mean squared difference, 1 x 1.
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count);
template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> concat_cols(std::span<const Tensor<T>> parts);

/// Reverse pass from a 1 x 1 tensor.
template <typename T> void backward(const Tensor<T>& loss);

struct FiniteDiffResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
};

struct FiniteDiffOptions {
  /// Step is step_scale * max(1, |x_i|).
  double step_scale = 1e-6;
  /// Tensors larger than this are checked on a random coordinate sample of
  /// this size.
  std::size_t max_coordinates = 64;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences.
///
/// `loss` must rebuild its graph on every call from the current values of
/// `params` (leaves). The relative error at coordinate i is
/// |g_i - n_i| / max(|g_i|, |n_i|, 1e-2 * G) where G is the largest analytic
/// or numeric gradient magnitude over the checked coordinates; a check where
/// every gradient is exactly zero reports 0.
FiniteDiffResult finite_diff_check(const std::function<Tensor<double>()>& loss,
                                   std::span<const Tensor<double>> params,
                                   const FiniteDiffOptions& options = {});

/// Single-input form: f(point) must be scalar.
FiniteDiffResult finite_diff_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f,
    const Tensor<double>& point, double step_scale = 1e-6);

}  // namespace mert::grad

#endif  // MERT_GRAD_HPP_
